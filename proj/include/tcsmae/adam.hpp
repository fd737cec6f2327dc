#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "tcsmae/error.hpp"
#include "tcsmae/params.hpp"

namespace tcsmae {

struct AdamOptions {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam with bias correction. Holds first/second moments per parameter.
class Adam {
 public:
  Adam(ParameterSet params, AdamOptions opts = {}) : params_(std::move(params)), opts_(opts) {
    for (const auto& p : params_) {
      m_.emplace_back(p.tensor.numel(), 0.0);
      v_.emplace_back(p.tensor.numel(), 0.0);
    }
  }

  void set_lr(double lr) { opts_.lr = lr; }
  double lr() const noexcept { return opts_.lr; }
  std::uint64_t step_count() const noexcept { return t_; }
  const AdamOptions& options() const noexcept { return opts_; }
  const ParameterSet& parameters() const noexcept { return params_; }

  void zero_grad() { params_.zero_grad(); }

  void step() {
    // Validate everything first so a bad gradient leaves all parameters untouched.
    for (const auto& p : params_)
      for (double g : p.tensor.grad())
        if (!std::isfinite(g)) throw NonFiniteError("adam: non-finite gradient in parameter '" + p.name + "'");
    ++t_;
    const double bc1 = 1.0 - std::pow(opts_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(opts_.beta2, static_cast<double>(t_));
    std::size_t k = 0;
    for (auto& p : params_) {
      auto w = p.tensor.mutable_values();
      const auto g = p.tensor.grad();
      auto& m = m_[k];
      auto& v = v_[k];
      ++k;
      if (g.empty()) continue;
      for (std::size_t i = 0; i < w.size(); ++i) {
        m[i] = opts_.beta1 * m[i] + (1.0 - opts_.beta1) * g[i];
        v[i] = opts_.beta2 * v[i] + (1.0 - opts_.beta2) * g[i] * g[i];
        const double mhat = m[i] / bc1;
        const double vhat = v[i] / bc2;
        w[i] -= opts_.lr * mhat / (std::sqrt(vhat) + opts_.eps);
      }
    }
  }

 private:
  ParameterSet params_;
  AdamOptions opts_;
  std::vector<std::vector<double>> m_, v_;
  std::uint64_t t_ = 0;
};

}  // namespace tcsmae
