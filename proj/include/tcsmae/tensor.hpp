#pragma once

// Reverse-mode differentiable arrays in 64-bit floating point.
//
// A Tensor is a shared handle to a graph node. Ops allocate a new node that
// records its parents and a closure propagating the node's gradient back to
// them. Every forward value is checked for NaN/Inf as it is produced, and
// every gradient as it is propagated; a failure names the op.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "tcsmae/error.hpp"
#include "tcsmae/parallel.hpp"

namespace tcsmae::ad {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  bool leaf = true;
  std::string op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  }
};

namespace detail {

inline void check_finite(std::span<const double> v, const std::string& what) {
  for (std::size_t i = 0; i < v.size(); ++i)
    if (!std::isfinite(v[i]))
      throw NonFiniteError(what + ": non-finite value at flat index " + std::to_string(i));
}

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Tensor constant(Shape shape, std::vector<double> values) {
    require(values.size() == ad::numel(shape), "Tensor: " + std::to_string(values.size()) +
                                               " values for shape " + shape_str(shape));
    detail::check_finite(values, "constant");
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->value = std::move(values);
    return Tensor(std::move(n));
  }

  /// Leaf with requires_grad set and a zeroed gradient buffer.
  static Tensor parameter(Shape shape, std::vector<double> values) {
    Tensor t = constant(std::move(shape), std::move(values));
    t.node_->requires_grad = true;
    t.node_->ensure_grad();
    return t;
  }

  static Tensor zeros(Shape shape) {
    const std::size_t n = ad::numel(shape);
    return constant(std::move(shape), std::vector<double>(n, 0.0));
  }
  static Tensor full(Shape shape, double v) {
    const std::size_t n = ad::numel(shape);
    return constant(std::move(shape), std::vector<double>(n, v));
  }
  static Tensor scalar(double v) { return constant({}, {v}); }

  bool defined() const noexcept { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t numel() const { return node_->value.size(); }
  bool requires_grad() const { return node_->requires_grad; }
  bool is_leaf() const { return node_->leaf; }
  const std::string& op() const { return node_->op; }

  std::span<const double> values() const { return node_->value; }
  /// Writable values; only leaves may be modified in place.
  std::span<double> mutable_values() {
    require(node_->leaf, "Tensor: cannot modify values of a non-leaf tensor");
    return node_->value;
  }
  std::span<const double> grad() const { return node_->grad; }
  double operator[](std::size_t i) const { return node_->value[i]; }

  double item() const {
    require(numel() == 1, "Tensor::item: tensor has " + std::to_string(numel()) + " elements");
    return node_->value[0];
  }

  void zero_grad() {
    if (node_->requires_grad) node_->grad.assign(node_->value.size(), 0.0);
  }

  /// Constant copy without graph history.
  Tensor detach() const { return constant(shape(), node_->value); }

  bool same_storage(const Tensor& other) const noexcept { return node_ == other.node_; }
  Node* node() const noexcept { return node_.get(); }
  const std::shared_ptr<Node>& node_ptr() const noexcept { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

namespace detail {

using Backward = std::function<void(Node&)>;

inline Tensor make_result(std::string op, Shape shape, std::vector<double> value,
                          std::vector<Tensor> parents, Backward backward) {
  check_finite(value, op);
  auto n = std::make_shared<Node>();
  n->op = std::move(op);
  n->shape = std::move(shape);
  n->value = std::move(value);
  n->leaf = false;
  for (const Tensor& p : parents) n->requires_grad = n->requires_grad || p.requires_grad();
  if (n->requires_grad) {
    n->parents.reserve(parents.size());
    for (const Tensor& p : parents) n->parents.push_back(p.node_ptr());
    n->backward = std::move(backward);
  }
  return Tensor(std::move(n));
}

/// Gradient buffer of parent i, or nullptr when it does not need one.
inline double* parent_grad(Node& self, std::size_t i) {
  Node& p = *self.parents[i];
  if (!p.requires_grad) return nullptr;
  p.ensure_grad();
  return p.grad.data();
}

inline const std::vector<double>& parent_value(const Node& self, std::size_t i) {
  return self.parents[i]->value;
}

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

}  // namespace detail

/// Fills the gradients of every leaf reachable from `loss` with d loss / d leaf.
/// Leaf gradients accumulate across calls; intermediate gradients are reset.
inline void backward(const Tensor& loss) {
  require(loss.defined(), "backward: undefined loss");
  require(loss.numel() == 1, "backward: loss must be a scalar, got shape " + shape_str(loss.shape()));
  detail::check_finite(loss.values(), "backward: loss");
  if (!loss.requires_grad()) return;

  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{loss.node(), 0}};
  seen.insert(loss.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (Node* n : order)
    if (!n->leaf) n->grad.assign(n->value.size(), 0.0);
  Node* root = loss.node();
  root->ensure_grad();
  root->grad[0] += 1.0;

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->leaf || !n->backward) continue;
    n->backward(*n);
    for (const auto& p : n->parents)
      if (p->requires_grad) detail::check_finite(p->grad, "backward through " + n->op);
  }
}

// ---------------------------------------------------------------------------
// Elementwise arithmetic. Shapes must match, or one side must hold a single
// element, which is broadcast.

namespace detail {

enum class BinaryKind { Add, Sub, Mul, Div };

inline constexpr double kDivEpsilon = 1e-12;

inline Tensor binary(const Tensor& a, const Tensor& b, BinaryKind kind) {
  static constexpr const char* names[] = {"add", "sub", "mul", "div"};
  const std::string name = names[static_cast<int>(kind)];
  const bool a_scalar = a.numel() == 1, b_scalar = b.numel() == 1;
  require(a.shape() == b.shape() || a_scalar || b_scalar,
          name + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const Shape shape = a_scalar && !b_scalar ? b.shape() : a.shape();
  const std::size_t n = ad::numel(shape);
  const auto av = a.values();
  const auto bv = b.values();
  auto at = [&](std::size_t i) { return a_scalar ? av[0] : av[i]; };
  auto bt = [&](std::size_t i) { return b_scalar ? bv[0] : bv[i]; };

  std::vector<double> out(n);
  switch (kind) {
    case BinaryKind::Add: for (std::size_t i = 0; i < n; ++i) out[i] = at(i) + bt(i); break;
    case BinaryKind::Sub: for (std::size_t i = 0; i < n; ++i) out[i] = at(i) - bt(i); break;
    case BinaryKind::Mul: for (std::size_t i = 0; i < n; ++i) out[i] = at(i) * bt(i); break;
    case BinaryKind::Div:
      for (std::size_t i = 0; i < n; ++i) {
        if (std::abs(bt(i)) < kDivEpsilon)
          throw InvalidArgument("div: divisor magnitude below epsilon at flat index " + std::to_string(i));
        out[i] = at(i) / bt(i);
      }
      break;
  }

  return make_result(name, shape, std::move(out), {a, b}, [kind, a_scalar, b_scalar, n](Node& self) {
    const auto& g = self.grad;
    const auto& av = parent_value(self, 0);
    const auto& bv = parent_value(self, 1);
    double* ga = parent_grad(self, 0);
    double* gb = parent_grad(self, 1);
    auto aval = [&](std::size_t i) { return a_scalar ? av[0] : av[i]; };
    auto bval = [&](std::size_t i) { return b_scalar ? bv[0] : bv[i]; };
    for (std::size_t i = 0; i < n; ++i) {
      double da = 0.0, db = 0.0;
      switch (kind) {
        case BinaryKind::Add: da = g[i]; db = g[i]; break;
        case BinaryKind::Sub: da = g[i]; db = -g[i]; break;
        case BinaryKind::Mul: da = g[i] * bval(i); db = g[i] * aval(i); break;
        case BinaryKind::Div:
          da = g[i] / bval(i);
          db = -g[i] * aval(i) / (bval(i) * bval(i));
          break;
      }
      if (ga) ga[a_scalar ? 0 : i] += da;
      if (gb) gb[b_scalar ? 0 : i] += db;
    }
  });
}

/// y = f(x) elementwise; dfdx(x, y) gives the local derivative.
template <typename F, typename D>
Tensor unary(const Tensor& x, std::string name, F f, D dfdx) {
  const auto xv = x.values();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = f(xv[i]);
  return make_result(std::move(name), x.shape(), std::move(out), {x}, [dfdx](Node& self) {
    double* gx = parent_grad(self, 0);
    if (!gx) return;
    const auto& xv = parent_value(self, 0);
    for (std::size_t i = 0; i < xv.size(); ++i) gx[i] += self.grad[i] * dfdx(xv[i], self.value[i]);
  });
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) { return detail::binary(a, b, detail::BinaryKind::Add); }
inline Tensor sub(const Tensor& a, const Tensor& b) { return detail::binary(a, b, detail::BinaryKind::Sub); }
inline Tensor mul(const Tensor& a, const Tensor& b) { return detail::binary(a, b, detail::BinaryKind::Mul); }
inline Tensor div(const Tensor& a, const Tensor& b) { return detail::binary(a, b, detail::BinaryKind::Div); }

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator+(const Tensor& a, double b) { return add(a, Tensor::scalar(b)); }
inline Tensor operator+(double a, const Tensor& b) { return add(Tensor::scalar(a), b); }
inline Tensor operator-(const Tensor& a, double b) { return sub(a, Tensor::scalar(b)); }
inline Tensor operator-(double a, const Tensor& b) { return sub(Tensor::scalar(a), b); }
inline Tensor operator*(const Tensor& a, double b) { return mul(a, Tensor::scalar(b)); }
inline Tensor operator*(double a, const Tensor& b) { return mul(Tensor::scalar(a), b); }
inline Tensor operator/(const Tensor& a, double b) { return div(a, Tensor::scalar(b)); }
inline Tensor operator/(double a, const Tensor& b) { return div(Tensor::scalar(a), b); }
inline Tensor operator-(const Tensor& a) { return mul(a, Tensor::scalar(-1.0)); }

inline Tensor relu(const Tensor& x) {
  return detail::unary(
      x, "relu", [](double v) { return v > 0.0 ? v : 0.0; },
      [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

inline double sigmoid_value(double v) {
  if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
  const double e = std::exp(v);
  return e / (1.0 + e);
}

inline Tensor sigmoid(const Tensor& x) {
  return detail::unary(x, "sigmoid", sigmoid_value, [](double, double y) { return y * (1.0 - y); });
}

inline Tensor exp(const Tensor& x) {
  return detail::unary(x, "exp", [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

inline Tensor log(const Tensor& x) {
  return detail::unary(x, "log", [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

inline Tensor sqrt(const Tensor& x) {
  return detail::unary(
      x, "sqrt", [](double v) { return std::sqrt(v); }, [](double, double y) { return 0.5 / y; });
}

/// log(1 + e^x), evaluated without overflow.
inline Tensor softplus(const Tensor& x) {
  return detail::unary(
      x, "softplus", [](double v) { return std::max(v, 0.0) + std::log1p(std::exp(-std::abs(v))); },
      [](double v, double) { return sigmoid_value(v); });
}

inline Tensor sum(const Tensor& x) {
  const auto xv = x.values();
  double s = 0.0;
  for (double v : xv) s += v;
  return detail::make_result("sum", {}, {s}, {x}, [](Node& self) {
    double* gx = detail::parent_grad(self, 0);
    if (!gx) return;
    const std::size_t n = self.parents[0]->value.size();
    for (std::size_t i = 0; i < n; ++i) gx[i] += self.grad[0];
  });
}

inline Tensor mean(const Tensor& x) {
  require(x.numel() > 0, "mean: empty tensor");
  const auto xv = x.values();
  // Extended accumulator: the mean of identical values is returned exactly.
  long double s = 0.0L;
  for (double v : xv) s += v;
  const double m = static_cast<double>(s / static_cast<long double>(xv.size()));
  const double inv = 1.0 / static_cast<double>(xv.size());
  return detail::make_result("mean", {}, {m}, {x}, [inv](Node& self) {
    double* gx = detail::parent_grad(self, 0);
    if (!gx) return;
    const std::size_t n = self.parents[0]->value.size();
    for (std::size_t i = 0; i < n; ++i) gx[i] += self.grad[0] * inv;
  });
}

/// Sums over the last axis: [..., K] -> [...].
inline Tensor sum_last(const Tensor& x) {
  require(x.rank() >= 1, "sum_last: needs rank >= 1");
  const std::size_t k = x.shape().back();
  Shape shape(x.shape().begin(), x.shape().end() - 1);
  const std::size_t rows = ad::numel(shape);
  const auto xv = x.values();
  std::vector<double> out(rows, 0.0);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < k; ++j) out[r] += xv[r * k + j];
  return detail::make_result("sum_last", std::move(shape), std::move(out), {x}, [rows, k](Node& self) {
    double* gx = detail::parent_grad(self, 0);
    if (!gx) return;
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < k; ++j) gx[r * k + j] += self.grad[r];
  });
}

inline Tensor reshape(const Tensor& x, Shape shape) {
  require(ad::numel(shape) == x.numel(),
          "reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  std::vector<double> out(x.values().begin(), x.values().end());
  return detail::make_result("reshape", std::move(shape), std::move(out), {x}, [](Node& self) {
    double* gx = detail::parent_grad(self, 0);
    if (!gx) return;
    for (std::size_t i = 0; i < self.grad.size(); ++i) gx[i] += self.grad[i];
  });
}

/// [N, ...] -> [N, rest].
inline Tensor flatten(const Tensor& x) {
  require(x.rank() >= 1, "flatten: needs rank >= 1");
  return reshape(x, {x.dim(0), x.numel() / std::max<std::size_t>(1, x.dim(0))});
}

namespace detail {

struct AxisSplit {
  std::size_t outer = 1, extent = 1, inner = 1;
};

inline AxisSplit split_at(const Shape& s, std::size_t axis) {
  AxisSplit a;
  for (std::size_t i = 0; i < axis; ++i) a.outer *= s[i];
  a.extent = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) a.inner *= s[i];
  return a;
}

}  // namespace detail

/// Elements [start, start+length) along `axis`.
inline Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t length) {
  require(axis < x.rank(), "slice: axis out of range");
  require(start + length <= x.dim(axis), "slice: range exceeds axis extent");
  const auto sp = detail::split_at(x.shape(), axis);
  Shape shape = x.shape();
  shape[axis] = length;
  const auto xv = x.values();
  std::vector<double> out(sp.outer * length * sp.inner);
  for (std::size_t o = 0; o < sp.outer; ++o)
    std::copy_n(xv.begin() + static_cast<std::ptrdiff_t>((o * sp.extent + start) * sp.inner), length * sp.inner,
                out.begin() + static_cast<std::ptrdiff_t>(o * length * sp.inner));
  return detail::make_result("slice", std::move(shape), std::move(out), {x}, [sp, start, length](Node& self) {
    double* gx = detail::parent_grad(self, 0);
    if (!gx) return;
    for (std::size_t o = 0; o < sp.outer; ++o) {
      double* dst = gx + (o * sp.extent + start) * sp.inner;
      const double* src = self.grad.data() + o * length * sp.inner;
      for (std::size_t i = 0; i < length * sp.inner; ++i) dst[i] += src[i];
    }
  });
}

inline Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  require(!parts.empty(), "concat: no inputs");
  const Shape& ref = parts.front().shape();
  require(axis < ref.size(), "concat: axis out of range");
  Shape shape = ref;
  shape[axis] = 0;
  for (const Tensor& p : parts) {
    require(p.rank() == ref.size(), "concat: rank mismatch");
    for (std::size_t d = 0; d < ref.size(); ++d)
      if (d != axis)
        require(p.dim(d) == ref[d], "concat: shape mismatch " + shape_str(p.shape()) + " vs " + shape_str(ref));
    shape[axis] += p.dim(axis);
  }
  const auto total = detail::split_at(shape, axis);
  std::vector<double> out(ad::numel(shape));
  std::vector<std::size_t> offsets;
  std::size_t offset = 0;
  for (const Tensor& p : parts) {
    offsets.push_back(offset);
    const auto sp = detail::split_at(p.shape(), axis);
    const auto pv = p.values();
    for (std::size_t o = 0; o < sp.outer; ++o)
      std::copy_n(pv.begin() + static_cast<std::ptrdiff_t>(o * sp.extent * sp.inner), sp.extent * sp.inner,
                  out.begin() + static_cast<std::ptrdiff_t>((o * total.extent + offset) * total.inner));
    offset += sp.extent;
  }
  return detail::make_result("concat", shape, std::move(out), parts, [total, offsets](Node& self) {
    for (std::size_t k = 0; k < self.parents.size(); ++k) {
      double* gp = detail::parent_grad(self, k);
      if (!gp) continue;
      const std::size_t extent = self.parents[k]->value.size() / (total.outer * total.inner);
      for (std::size_t o = 0; o < total.outer; ++o) {
        const double* src = self.grad.data() + (o * total.extent + offsets[k]) * total.inner;
        double* dst = gp + o * extent * total.inner;
        for (std::size_t i = 0; i < extent * total.inner; ++i) dst[i] += src[i];
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Convolution, resampling and dense layers.

namespace detail {

struct ConvGeometry {
  std::size_t channels, height, width, kernel, stride, pad, out_h, out_w;
  std::size_t col_rows() const { return channels * kernel * kernel; }
  std::size_t col_cols() const { return out_h * out_w; }
};

inline void im2col(const double* x, const ConvGeometry& g, double* cols) {
  const auto h = static_cast<std::ptrdiff_t>(g.height), w = static_cast<std::ptrdiff_t>(g.width);
  std::size_t row = 0;
  for (std::size_t c = 0; c < g.channels; ++c)
    for (std::size_t ky = 0; ky < g.kernel; ++ky)
      for (std::size_t kx = 0; kx < g.kernel; ++kx, ++row) {
        double* dst = cols + row * g.col_cols();
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad);
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) - static_cast<std::ptrdiff_t>(g.pad);
            dst[oy * g.out_w + ox] =
                (iy >= 0 && iy < h && ix >= 0 && ix < w) ? x[(c * g.height + static_cast<std::size_t>(iy)) * g.width + static_cast<std::size_t>(ix)] : 0.0;
          }
        }
      }
}

inline void col2im_add(const double* cols, const ConvGeometry& g, double* x) {
  const auto h = static_cast<std::ptrdiff_t>(g.height), w = static_cast<std::ptrdiff_t>(g.width);
  std::size_t row = 0;
  for (std::size_t c = 0; c < g.channels; ++c)
    for (std::size_t ky = 0; ky < g.kernel; ++ky)
      for (std::size_t kx = 0; kx < g.kernel; ++kx, ++row) {
        const double* src = cols + row * g.col_cols();
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad);
          if (iy < 0 || iy >= h) continue;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) - static_cast<std::ptrdiff_t>(g.pad);
            if (ix < 0 || ix >= w) continue;
            x[(c * g.height + static_cast<std::size_t>(iy)) * g.width + static_cast<std::size_t>(ix)] += src[oy * g.out_w + ox];
          }
        }
      }
}

}  // namespace detail

/// 2D cross-correlation with zero padding. x: [N,C,H,W], weight: [O,C,k,k],
/// bias: [O] or undefined.
inline Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, std::size_t stride,
                     std::size_t pad) {
  require(x.rank() == 4, "conv2d: input must be [N,C,H,W], got " + shape_str(x.shape()));
  require(weight.rank() == 4 && weight.dim(2) == weight.dim(3), "conv2d: weight must be [O,C,k,k]");
  require(weight.dim(1) == x.dim(1), "conv2d: input has " + std::to_string(x.dim(1)) +
                                         " channels, weight expects " + std::to_string(weight.dim(1)));
  require(stride >= 1, "conv2d: stride must be >= 1");
  const std::size_t k = weight.dim(2);
  require(x.dim(2) + 2 * pad >= k && x.dim(3) + 2 * pad >= k, "conv2d: kernel larger than padded input");
  const bool has_bias = bias.defined();
  if (has_bias) require(bias.rank() == 1 && bias.dim(0) == weight.dim(0), "conv2d: bias must be [O]");

  const std::size_t n = x.dim(0), out_c = weight.dim(0);
  const detail::ConvGeometry g{x.dim(1), x.dim(2), x.dim(3), k, stride, pad,
                               (x.dim(2) + 2 * pad - k) / stride + 1, (x.dim(3) + 2 * pad - k) / stride + 1};
  const std::size_t in_size = g.channels * g.height * g.width;
  const std::size_t out_size = out_c * g.col_cols();

  std::vector<double> out(n * out_size);
  {
    const detail::ConstMapMat w(weight.values().data(), static_cast<Eigen::Index>(out_c),
                                static_cast<Eigen::Index>(g.col_rows()));
    const double* xv = x.values().data();
    const double* bv = has_bias ? bias.values().data() : nullptr;
    parallel_for(n, [&](std::size_t s) {
      detail::RowMat cols(g.col_rows(), g.col_cols());
      detail::im2col(xv + s * in_size, g, cols.data());
      detail::MapMat o(out.data() + s * out_size, static_cast<Eigen::Index>(out_c),
                       static_cast<Eigen::Index>(g.col_cols()));
      o.noalias() = w * cols;
      if (bv)
        for (std::size_t c = 0; c < out_c; ++c) o.row(static_cast<Eigen::Index>(c)).array() += bv[c];
    });
  }

  std::vector<Tensor> parents{x, weight};
  if (has_bias) parents.push_back(bias);
  return detail::make_result(
      "conv2d", {n, out_c, g.out_h, g.out_w}, std::move(out), parents,
      [g, n, out_c, in_size, out_size, has_bias](Node& self) {
        const auto& xv = detail::parent_value(self, 0);
        const auto& wv = detail::parent_value(self, 1);
        double* gx = detail::parent_grad(self, 0);
        double* gw = detail::parent_grad(self, 1);
        double* gb = has_bias ? detail::parent_grad(self, 2) : nullptr;
        const auto rows = static_cast<Eigen::Index>(g.col_rows());
        const auto cols_n = static_cast<Eigen::Index>(g.col_cols());
        const detail::ConstMapMat w(wv.data(), static_cast<Eigen::Index>(out_c), rows);

        // Per-sample weight gradients are reduced in sample order afterwards.
        std::vector<detail::RowMat> dw(gw ? n : 0);
        parallel_for(n, [&](std::size_t s) {
          const detail::ConstMapMat go(self.grad.data() + s * out_size, static_cast<Eigen::Index>(out_c), cols_n);
          if (gw) {
            detail::RowMat cols(rows, cols_n);
            detail::im2col(xv.data() + s * in_size, g, cols.data());
            dw[s].noalias() = go * cols.transpose();
          }
          if (gx) {
            detail::RowMat dcols = w.transpose() * go;
            detail::col2im_add(dcols.data(), g, gx + s * in_size);
          }
        });
        if (gw) {
          detail::MapMat gwm(gw, static_cast<Eigen::Index>(out_c), rows);
          for (std::size_t s = 0; s < n; ++s) gwm += dw[s];
        }
        if (gb)
          for (std::size_t s = 0; s < n; ++s)
            for (std::size_t c = 0; c < out_c; ++c) {
              const double* go = self.grad.data() + s * out_size + c * g.col_cols();
              double acc = 0.0;
              for (std::size_t i = 0; i < g.col_cols(); ++i) acc += go[i];
              gb[c] += acc;
            }
      });
}

/// Nearest-neighbour x2 upsampling of [N,C,H,W].
inline Tensor upsample_nearest2x(const Tensor& x) {
  require(x.rank() == 4, "upsample_nearest2x: input must be [N,C,H,W]");
  const std::size_t planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  const auto xv = x.values();
  std::vector<double> out(planes * 4 * h * w);
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t r = 0; r < 2 * h; ++r)
      for (std::size_t c = 0; c < 2 * w; ++c) out[(p * 2 * h + r) * 2 * w + c] = xv[(p * h + r / 2) * w + c / 2];
  return detail::make_result("upsample_nearest2x", {x.dim(0), x.dim(1), 2 * h, 2 * w}, std::move(out), {x},
                             [planes, h, w](Node& self) {
                               double* gx = detail::parent_grad(self, 0);
                               if (!gx) return;
                               for (std::size_t p = 0; p < planes; ++p)
                                 for (std::size_t r = 0; r < 2 * h; ++r)
                                   for (std::size_t c = 0; c < 2 * w; ++c)
                                     gx[(p * h + r / 2) * w + c / 2] += self.grad[(p * 2 * h + r) * 2 * w + c];
                             });
}

/// y = x W^T + b. x: [N,D], weight: [O,D], bias: [O] or undefined.
inline Tensor fully_connected(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  require(x.rank() == 2 && weight.rank() == 2, "fully_connected: x must be [N,D] and weight [O,D]");
  require(x.dim(1) == weight.dim(1), "fully_connected: input width " + std::to_string(x.dim(1)) +
                                         " does not match weight " + shape_str(weight.shape()));
  const bool has_bias = bias.defined();
  if (has_bias) require(bias.rank() == 1 && bias.dim(0) == weight.dim(0), "fully_connected: bias must be [O]");
  const auto n = static_cast<Eigen::Index>(x.dim(0)), d = static_cast<Eigen::Index>(x.dim(1)),
             o = static_cast<Eigen::Index>(weight.dim(0));
  std::vector<double> out(static_cast<std::size_t>(n * o));
  detail::MapMat y(out.data(), n, o);
  y.noalias() = detail::ConstMapMat(x.values().data(), n, d) * detail::ConstMapMat(weight.values().data(), o, d).transpose();
  if (has_bias)
    for (Eigen::Index r = 0; r < n; ++r)
      for (Eigen::Index c = 0; c < o; ++c) y(r, c) += bias.values()[static_cast<std::size_t>(c)];
  std::vector<Tensor> parents{x, weight};
  if (has_bias) parents.push_back(bias);
  return detail::make_result("fully_connected", {x.dim(0), weight.dim(0)}, std::move(out), parents,
                             [n, d, o, has_bias](Node& self) {
                               const detail::ConstMapMat g(self.grad.data(), n, o);
                               if (double* gx = detail::parent_grad(self, 0))
                                 detail::MapMat(gx, n, d).noalias() +=
                                     g * detail::ConstMapMat(detail::parent_value(self, 1).data(), o, d);
                               if (double* gw = detail::parent_grad(self, 1))
                                 detail::MapMat(gw, o, d).noalias() +=
                                     g.transpose() * detail::ConstMapMat(detail::parent_value(self, 0).data(), n, d);
                               if (has_bias)
                                 if (double* gb = detail::parent_grad(self, 2))
                                   for (Eigen::Index c = 0; c < o; ++c) gb[c] += g.col(c).sum();
                             });
}

/// a: [M,K], b: [N,K] -> a b^T : [M,N].
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  require(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(1),
          "matmul_nt: expected [M,K] and [N,K], got " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  const auto m = static_cast<Eigen::Index>(a.dim(0)), k = static_cast<Eigen::Index>(a.dim(1)),
             n = static_cast<Eigen::Index>(b.dim(0));
  // One fixed-order dot product per entry, so equal rows give bit-equal
  // entries wherever they sit (a blocked GEMM rounds tail columns differently).
  const auto av = a.values(), bv = b.values();
  std::vector<double> out(static_cast<std::size_t>(m * n));
  for (Eigen::Index i = 0; i < m; ++i)
    for (Eigen::Index j = 0; j < n; ++j) {
      double s = 0.0;
      for (Eigen::Index t = 0; t < k; ++t) s += av[static_cast<std::size_t>(i * k + t)] * bv[static_cast<std::size_t>(j * k + t)];
      out[static_cast<std::size_t>(i * n + j)] = s;
    }
  return detail::make_result("matmul_nt", {a.dim(0), b.dim(0)}, std::move(out), {a, b}, [m, k, n](Node& self) {
    const detail::ConstMapMat g(self.grad.data(), m, n);
    if (double* ga = detail::parent_grad(self, 0))
      detail::MapMat(ga, m, k).noalias() += g * detail::ConstMapMat(detail::parent_value(self, 1).data(), n, k);
    if (double* gb = detail::parent_grad(self, 1))
      detail::MapMat(gb, n, k).noalias() +=
          g.transpose() * detail::ConstMapMat(detail::parent_value(self, 0).data(), m, k);
  });
}

// ---------------------------------------------------------------------------
// Normalizations.

/// log-softmax over axis 1 of [N, C, ...].
inline Tensor log_softmax_channel(const Tensor& x) {
  require(x.rank() >= 2, "log_softmax_channel: needs [N, C, ...]");
  const auto sp = detail::split_at(x.shape(), 1);
  const auto xv = x.values();
  std::vector<double> out(xv.size());
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t i = 0; i < sp.inner; ++i) {
      const std::size_t base = o * sp.extent * sp.inner + i;
      double mx = xv[base];
      for (std::size_t c = 1; c < sp.extent; ++c) mx = std::max(mx, xv[base + c * sp.inner]);
      double s = 0.0;
      for (std::size_t c = 0; c < sp.extent; ++c) s += std::exp(xv[base + c * sp.inner] - mx);
      const double lse = mx + std::log(s);
      for (std::size_t c = 0; c < sp.extent; ++c) out[base + c * sp.inner] = xv[base + c * sp.inner] - lse;
    }
  return detail::make_result("log_softmax_channel", x.shape(), std::move(out), {x}, [sp](Node& self) {
    double* gx = detail::parent_grad(self, 0);
    if (!gx) return;
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t i = 0; i < sp.inner; ++i) {
        const std::size_t base = o * sp.extent * sp.inner + i;
        double gsum = 0.0;
        for (std::size_t c = 0; c < sp.extent; ++c) gsum += self.grad[base + c * sp.inner];
        for (std::size_t c = 0; c < sp.extent; ++c) {
          const std::size_t j = base + c * sp.inner;
          gx[j] += self.grad[j] - std::exp(self.value[j]) * gsum;
        }
      }
  });
}

/// softmax over axis 1 of [N, C, ...].
inline Tensor softmax_channel(const Tensor& x) {
  require(x.rank() >= 2, "softmax_channel: needs [N, C, ...]");
  const auto sp = detail::split_at(x.shape(), 1);
  const auto xv = x.values();
  std::vector<double> out(xv.size());
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t i = 0; i < sp.inner; ++i) {
      const std::size_t base = o * sp.extent * sp.inner + i;
      double mx = xv[base];
      for (std::size_t c = 1; c < sp.extent; ++c) mx = std::max(mx, xv[base + c * sp.inner]);
      double s = 0.0;
      for (std::size_t c = 0; c < sp.extent; ++c) s += (out[base + c * sp.inner] = std::exp(xv[base + c * sp.inner] - mx));
      for (std::size_t c = 0; c < sp.extent; ++c) out[base + c * sp.inner] /= s;
    }
  return detail::make_result("softmax_channel", x.shape(), std::move(out), {x}, [sp](Node& self) {
    double* gx = detail::parent_grad(self, 0);
    if (!gx) return;
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t i = 0; i < sp.inner; ++i) {
        const std::size_t base = o * sp.extent * sp.inner + i;
        double dot = 0.0;
        for (std::size_t c = 0; c < sp.extent; ++c) dot += self.grad[base + c * sp.inner] * self.value[base + c * sp.inner];
        for (std::size_t c = 0; c < sp.extent; ++c) {
          const std::size_t j = base + c * sp.inner;
          gx[j] += self.value[j] * (self.grad[j] - dot);
        }
      }
  });
}

inline constexpr double kNormEpsilon = 1e-12;

/// Scales each row of [M,D] to unit Euclidean norm. Rows with norm below
/// kNormEpsilon are rejected.
inline Tensor l2_normalize_rows(const Tensor& x) {
  require(x.rank() == 2, "l2_normalize_rows: input must be [M,D]");
  const std::size_t m = x.dim(0), d = x.dim(1);
  const auto xv = x.values();
  std::vector<double> out(xv.size()), norms(m);
  for (std::size_t r = 0; r < m; ++r) {
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) s += xv[r * d + j] * xv[r * d + j];
    norms[r] = std::sqrt(s);
    if (norms[r] < kNormEpsilon)
      throw InvalidArgument("l2_normalize_rows: row " + std::to_string(r) + " has (near-)zero norm");
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] = xv[r * d + j] / norms[r];
  }
  return detail::make_result("l2_normalize_rows", x.shape(), std::move(out), {x}, [m, d, norms](Node& self) {
    double* gx = detail::parent_grad(self, 0);
    if (!gx) return;
    for (std::size_t r = 0; r < m; ++r) {
      double dot = 0.0;
      for (std::size_t j = 0; j < d; ++j) dot += self.grad[r * d + j] * self.value[r * d + j];
      for (std::size_t j = 0; j < d; ++j)
        gx[r * d + j] += (self.grad[r * d + j] - self.value[r * d + j] * dot) / norms[r];
    }
  });
}

}  // namespace tcsmae::ad
