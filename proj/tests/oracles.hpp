#pragma once

// Independent reference implementations shared by the unit and acceptance
// suites. None of these touch the autodiff engine.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <vector>

#include "tcsmae/grid.hpp"
#include "tcsmae/rng.hpp"
#include "tcsmae/tensor.hpp"

namespace oracle {

using tcsmae::Grid;
using tcsmae::ad::Tensor;

// ---------------------------------------------------------------------------
// Finite differences.

struct GradcheckResult {
  /// Per input tensor: max_i |a_i - n_i| / max_i max(|a_i|, |n_i|) (infinity-norm
  /// relative error), then the max over inputs.
  double max_rel_error = 0.0;
  /// max_i |a_i - n_i| / max(|a_i|, |n_i|, floor), elementwise.
  double max_elementwise_rel_error = 0.0;
  std::size_t checked = 0;
  // Element with the largest absolute disagreement in the worst input.
  std::size_t worst_input = 0, worst_index = 0;
  double worst_analytic = 0.0, worst_numeric = 0.0;
};

/// Relative error with a floor so that near-zero values compare absolutely.
inline double rel_error(double a, double n, double floor = 1e-6) {
  return std::abs(a - n) / std::max({std::abs(a), std::abs(n), floor});
}

/// Compares d f / d inputs (reverse mode) with central differences for every
/// element of every input. `f` must build a scalar from the inputs.
inline GradcheckResult gradcheck(const std::function<Tensor(const std::vector<Tensor>&)>& f, std::vector<Tensor> inputs,
                                 double h = 1e-3, double floor = 1e-6) {
  for (auto& t : inputs) t.zero_grad();
  const Tensor loss = f(inputs);
  tcsmae::ad::backward(loss);
  GradcheckResult r;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    auto& t = inputs[k];
    const std::vector<double> analytic(t.grad().begin(), t.grad().end());
    auto v = t.mutable_values();
    double scale = floor, max_diff = 0.0;
    std::size_t arg = 0;
    std::vector<double> numeric(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) {
      const double x0 = v[i];
      v[i] = x0 + h;
      const double fp = f(inputs).item();
      v[i] = x0 - h;
      const double fm = f(inputs).item();
      v[i] = x0;
      numeric[i] = (fp - fm) / (2.0 * h);
      scale = std::max({scale, std::abs(analytic[i]), std::abs(numeric[i])});
      const double d = std::abs(analytic[i] - numeric[i]);
      if (d > max_diff) {
        max_diff = d;
        arg = i;
      }
      r.max_elementwise_rel_error = std::max(r.max_elementwise_rel_error, rel_error(analytic[i], numeric[i], floor));
      ++r.checked;
    }
    const double e = max_diff / scale;
    if (!v.empty() && e >= r.max_rel_error) {
      r.max_rel_error = e;
      r.worst_input = k;
      r.worst_index = arg;
      r.worst_analytic = analytic[arg];
      r.worst_numeric = numeric[arg];
    }
  }
  return r;
}

inline std::vector<double> uniform_values(tcsmae::Rng& rng, std::size_t n, double lo, double hi) {
  std::vector<double> v(n);
  for (double& x : v) x = rng.uniform(lo, hi);
  return v;
}

/// Values in [lo, hi] that stay at least `gap` away from 0 (for kinks).
inline std::vector<double> away_from_zero(tcsmae::Rng& rng, std::size_t n, double lo, double hi, double gap) {
  std::vector<double> v(n);
  for (double& x : v) {
    do x = rng.uniform(lo, hi);
    while (std::abs(x) < gap);
  }
  return v;
}

// ---------------------------------------------------------------------------
// SSIM from scalar statistics, long double accumulation.

inline double ssim_scalar(const std::vector<double>& a, const std::vector<double>& b, double tau1 = 1e-4,
                          double tau2 = 9e-4) {
  const long double n = static_cast<long double>(a.size());
  long double sa = 0, sb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sa += a[i];
    sb += b[i];
  }
  const long double ma = sa / n, mb = sb / n;
  long double vaa = 0, vbb = 0, vab = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    vaa += (a[i] - ma) * (a[i] - ma);
    vbb += (b[i] - mb) * (b[i] - mb);
    vab += (a[i] - ma) * (b[i] - mb);
  }
  vaa /= n;
  vbb /= n;
  vab /= n;
  const long double num = (2 * ma * mb + tau1) * (2 * vab + tau2);
  const long double den = (ma * ma + mb * mb + tau1) * (vaa + vbb + tau2);
  return static_cast<double>(num / den);
}

// ---------------------------------------------------------------------------
// InfoNCE by explicit softmax over the candidate list.

using Embeddings = std::vector<std::vector<double>>;  // [N][D]

inline double cosine(const std::vector<double>& u, const std::vector<double>& v) {
  long double uv = 0, uu = 0, vv = 0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    uv += static_cast<long double>(u[i]) * v[i];
    uu += static_cast<long double>(u[i]) * u[i];
    vv += static_cast<long double>(v[i]) * v[i];
  }
  return static_cast<double>(uv / (std::sqrt(uu) * std::sqrt(vv)));
}

/// One level: anchors from `masked`, positive = original[n], candidates =
/// every embedding of both branches except the anchor.
inline double info_nce_level(const Embeddings& masked, const Embeddings& original, double gamma) {
  const std::size_t n = masked.size();
  long double total = 0;
  for (std::size_t a = 0; a < n; ++a) {
    std::vector<long double> logits;
    long double pos = 0;
    for (std::size_t j = 0; j < n; ++j)
      if (j != a) logits.push_back(cosine(masked[a], masked[j]) / static_cast<long double>(gamma));
    for (std::size_t j = 0; j < n; ++j) {
      const long double l = cosine(masked[a], original[j]) / static_cast<long double>(gamma);
      logits.push_back(l);
      if (j == a) pos = l;
    }
    long double den = 0;
    for (long double l : logits) den += std::exp(l);
    total += -std::log(std::exp(pos) / den);
  }
  return static_cast<double>(total / n);
}

inline double contrastive(const std::vector<Embeddings>& masked, const std::vector<Embeddings>& original, double gamma) {
  double s = 0;
  for (std::size_t l = 0; l < masked.size(); ++l) s += info_nce_level(masked[l], original[l], gamma);
  return s;
}

// ---------------------------------------------------------------------------
// Segmentation metrics by exhaustive search.

inline double dsc(const Grid<std::uint8_t>& p, const Grid<std::uint8_t>& g) {
  long inter = 0, sp = 0, sg = 0;
  for (std::size_t r = 0; r < p.height(); ++r)
    for (std::size_t c = 0; c < p.width(); ++c) {
      sp += p(r, c) != 0;
      sg += g(r, c) != 0;
      inter += p(r, c) != 0 && g(r, c) != 0;
    }
  if (sp == 0 && sg == 0) return 1.0;
  if (sp == 0 || sg == 0) return 0.0;
  return 2.0 * static_cast<double>(inter) / static_cast<double>(sp + sg);
}

inline bool is_foreground(const Grid<std::uint8_t>& m, long r, long c) {
  if (r < 0 || c < 0 || r >= static_cast<long>(m.height()) || c >= static_cast<long>(m.width())) return false;
  return m(static_cast<std::size_t>(r), static_cast<std::size_t>(c)) != 0;
}

inline std::vector<std::pair<long, long>> boundary(const Grid<std::uint8_t>& m) {
  std::vector<std::pair<long, long>> out;
  const long dr[4] = {-1, 1, 0, 0}, dc[4] = {0, 0, -1, 1};
  for (long r = 0; r < static_cast<long>(m.height()); ++r)
    for (long c = 0; c < static_cast<long>(m.width()); ++c) {
      if (!is_foreground(m, r, c)) continue;
      bool edge = false;
      for (int k = 0; k < 4; ++k) edge = edge || !is_foreground(m, r + dr[k], c + dc[k]);
      if (edge) out.emplace_back(r, c);
    }
  return out;
}

inline std::optional<double> hausdorff(const Grid<std::uint8_t>& p, const Grid<std::uint8_t>& g) {
  const auto a = boundary(p), b = boundary(g);
  if (a.empty() || b.empty()) return std::nullopt;
  // Full distance matrix, then max of row minima and column minima.
  std::vector<std::vector<double>> d(a.size(), std::vector<double>(b.size()));
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < b.size(); ++j) {
      const double dr = static_cast<double>(a[i].first - b[j].first), dc = static_cast<double>(a[i].second - b[j].second);
      d[i][j] = std::sqrt(dr * dr + dc * dc);
    }
  double h = 0;
  for (std::size_t i = 0; i < a.size(); ++i) h = std::max(h, *std::min_element(d[i].begin(), d[i].end()));
  for (std::size_t j = 0; j < b.size(); ++j) {
    double m = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < a.size(); ++i) m = std::min(m, d[i][j]);
    h = std::max(h, m);
  }
  return h;
}

// ---------------------------------------------------------------------------
// Interval membership: pixel is masked iff its value lies in a chosen
// interval [j/K, (j+1)/K), the last interval closed at 1.

inline bool masked_by(double v, std::size_t k, const std::vector<std::size_t>& chosen) {
  for (std::size_t j : chosen) {
    const double lo = static_cast<double>(j) / static_cast<double>(k);
    const double hi = static_cast<double>(j + 1) / static_cast<double>(k);
    if (v >= lo && (v < hi || (j + 1 == k && v <= 1.0))) return true;
  }
  return false;
}

}  // namespace oracle
