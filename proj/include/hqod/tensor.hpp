/* Copyright 2026 The HQOD Lab Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/
#pragma once

// Minimal reverse-mode differentiable dense arrays.
//
// A Tensor is a cheap handle onto shared storage. Operations produce new
// tensors; when any input requires a gradient the result carries a GraphNode
// whose backward rule pushes the output gradient into the inputs. Storage is
// row-major float64 with no views or strides.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace hqod {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

class Tensor;

namespace detail {
inline bool& grad_enabled() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

// While alive, new op results carry no graph (inference only).
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_enabled()) { detail::grad_enabled() = false; }
  ~NoGradGuard() { detail::grad_enabled() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

struct GraphNode {
  const char* op = "";
  std::vector<Tensor> inputs;
  // Reads the output gradient and accumulates into the inputs. The output is
  // passed in rather than captured so the graph never owns a cycle.
  std::function<void(const Tensor& out)> backward;
};

namespace detail {
struct TensorImpl {
  Shape shape;
  std::vector<double> values;
  std::vector<double> grad;  // empty == absent
  bool requires_grad = false;
  std::shared_ptr<GraphNode> node;
};
}  // namespace detail

class Tensor {
 public:
  Tensor() : Tensor(Shape{}, std::vector<double>{0.0}) {}

  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false)
      : impl_(std::make_shared<detail::TensorImpl>()) {
    for (auto d : shape) {
      if (d == 0) throw std::invalid_argument("tensor extents must be positive");
    }
    if (numel(shape) != values.size()) {
      throw std::invalid_argument("tensor of shape " + shape_str(shape) + " given " +
                                  std::to_string(values.size()) + " values");
    }
    impl_->shape = std::move(shape);
    impl_->values = std::move(values);
    impl_->requires_grad = requires_grad;
  }

  static Tensor scalar(double v, bool requires_grad = false) {
    return Tensor(Shape{}, {v}, requires_grad);
  }
  static Tensor full(Shape shape, double v, bool requires_grad = false) {
    auto n = numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, v), requires_grad);
  }
  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return full(std::move(shape), 0.0, requires_grad);
  }
  static Tensor vector(std::vector<double> v, bool requires_grad = false) {
    Shape s{v.size()};
    return Tensor(std::move(s), std::move(v), requires_grad);
  }

  const Shape& shape() const { return impl_->shape; }
  std::size_t size() const { return impl_->values.size(); }
  std::size_t dim(std::size_t i) const { return impl_->shape.at(i); }
  std::size_t rank() const { return impl_->shape.size(); }

  const std::vector<double>& values() const { return impl_->values; }
  // Direct mutation is reserved for optimizers and initializers acting on
  // leaves between forward passes.
  std::vector<double>& mutable_values() { return impl_->values; }
  double item() const {
    if (size() != 1) throw std::logic_error("item() on tensor of shape " + shape_str(shape()));
    return impl_->values[0];
  }
  double operator[](std::size_t i) const { return impl_->values[i]; }

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool r) { impl_->requires_grad = r; }
  bool has_grad() const { return !impl_->grad.empty(); }
  const std::vector<double>& grad() const { return impl_->grad; }
  void zero_grad() { impl_->grad.clear(); }
  bool is_leaf() const { return impl_->node == nullptr; }
  const std::shared_ptr<GraphNode>& node() const { return impl_->node; }

  void accumulate_grad(std::span<const double> g) const {
    if (!impl_->requires_grad) return;
    if (g.size() != size()) throw std::logic_error("gradient size mismatch");
    auto& acc = impl_->grad;
    if (acc.empty()) acc.assign(size(), 0.0);
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += g[i];
  }

  // Deep copy of values; the copy is a fresh leaf.
  Tensor clone(bool requires_grad = false) const {
    return Tensor(shape(), values(), requires_grad);
  }

  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

  // Builds an op result. The node is attached only if some input tracks
  // gradients.
  static Tensor from_op(const char* op, Shape shape, std::vector<double> values,
                        std::vector<Tensor> inputs,
                        std::function<void(const Tensor&)> backward) {
    Tensor out(std::move(shape), std::move(values));
    bool any = detail::grad_enabled() && std::any_of(inputs.begin(), inputs.end(),
                           [](const Tensor& t) { return t.requires_grad(); });
    if (any) {
      auto node = std::make_shared<GraphNode>();
      node->op = op;
      node->inputs = std::move(inputs);
      node->backward = std::move(backward);
      out.impl_->node = std::move(node);
      out.impl_->requires_grad = true;
    }
    return out;
  }

 private:
  friend std::size_t backward(const Tensor& loss);
  std::shared_ptr<detail::TensorImpl> impl_;
};

// ---------------------------------------------------------------------------
// Broadcasting

namespace detail {

inline Shape broadcast_shape(const Shape& a, const Shape& b) {
  std::size_t r = std::max(a.size(), b.size());
  Shape out(r);
  for (std::size_t i = 0; i < r; ++i) {
    std::size_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
    std::size_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw std::invalid_argument("shapes " + shape_str(a) + " and " + shape_str(b) +
                                  " are not broadcast-compatible");
    }
    out[i] = std::max(da, db);
  }
  return out;
}

// Flat source index for every element of `out` when reading from `in`.
inline std::vector<std::size_t> broadcast_index(const Shape& in, const Shape& out) {
  std::size_t r = out.size();
  std::vector<std::size_t> strides(r, 0);
  std::size_t s = 1;
  for (std::size_t i = 0; i < in.size(); ++i) {
    std::size_t k = in.size() - 1 - i;
    std::size_t ko = r - 1 - i;
    strides[ko] = in[k] == 1 ? 0 : s;
    s *= in[k];
  }
  std::size_t n = numel(out);
  std::vector<std::size_t> idx(n);
  std::vector<std::size_t> counter(r, 0);
  std::size_t cur = 0;
  for (std::size_t e = 0; e < n; ++e) {
    idx[e] = cur;
    for (std::size_t d = r; d-- > 0;) {
      ++counter[d];
      cur += strides[d];
      if (counter[d] < out[d]) break;
      cur -= strides[d] * counter[d];
      counter[d] = 0;
    }
  }
  return idx;
}

struct Broadcast {
  Shape out;
  std::vector<std::size_t> ia, ib;  // empty when identity mapping
  bool a_scalar = false, b_scalar = false;

  Broadcast(const Shape& a, const Shape& b) : out(broadcast_shape(a, b)) {
    std::size_t n = numel(out);
    if (numel(a) == 1) a_scalar = true;
    else if (numel(a) != n) ia = broadcast_index(a, out);
    if (numel(b) == 1) b_scalar = true;
    else if (numel(b) != n) ib = broadcast_index(b, out);
  }
  std::size_t a(std::size_t e) const { return a_scalar ? 0 : (ia.empty() ? e : ia[e]); }
  std::size_t b(std::size_t e) const { return b_scalar ? 0 : (ib.empty() ? e : ib[e]); }
};

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

enum class ElementwiseOp { Add, Sub, Mul, Div, Exp, Ln, Pow, Abs, Max, Min, Clamp, Sigmoid, Relu };

namespace detail {

// Binary op with broadcasting. `f` maps (a, b) to the value; `df` maps
// (a, b, out) to the pair of partial derivatives.
template <typename F, typename DF>
Tensor binary(const char* name, const Tensor& a, const Tensor& b, F f, DF df) {
  auto plan = std::make_shared<Broadcast>(a.shape(), b.shape());
  std::size_t n = numel(plan->out);
  std::vector<double> v(n);
  const auto& av = a.values();
  const auto& bv = b.values();
  for (std::size_t e = 0; e < n; ++e) v[e] = f(av[plan->a(e)], bv[plan->b(e)]);
  return Tensor::from_op(name, plan->out, std::move(v), {a, b}, [a, b, plan, df](const Tensor& out) {
    const auto& g = out.grad();
    const auto& av = a.values();
    const auto& bv = b.values();
    const auto& ov = out.values();
    std::vector<double> ga(a.requires_grad() ? a.size() : 0, 0.0);
    std::vector<double> gb(b.requires_grad() ? b.size() : 0, 0.0);
    for (std::size_t e = 0; e < g.size(); ++e) {
      std::size_t i = plan->a(e), j = plan->b(e);
      auto [da, db] = df(av[i], bv[j], ov[e]);
      if (!ga.empty()) ga[i] += g[e] * da;
      if (!gb.empty()) gb[j] += g[e] * db;
    }
    if (!ga.empty()) a.accumulate_grad(ga);
    if (!gb.empty()) b.accumulate_grad(gb);
  });
}

template <typename F, typename DF>
Tensor unary(const char* name, const Tensor& x, F f, DF df) {
  const auto& xv = x.values();
  std::vector<double> v(xv.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = f(xv[i]);
  return Tensor::from_op(name, x.shape(), std::move(v), {x}, [x, df](const Tensor& out) {
    const auto& g = out.grad();
    const auto& xv = x.values();
    const auto& ov = out.values();
    std::vector<double> gx(g.size());
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] = g[i] * df(xv[i], ov[i]);
    x.accumulate_grad(gx);
  });
}

inline bool is_integer(double y) { return std::isfinite(y) && std::floor(y) == y; }

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
  return detail::binary(
      "add", a, b, [](double x, double y) { return x + y; },
      [](double, double, double) { return std::pair{1.0, 1.0}; });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  return detail::binary(
      "sub", a, b, [](double x, double y) { return x - y; },
      [](double, double, double) { return std::pair{1.0, -1.0}; });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  return detail::binary(
      "mul", a, b, [](double x, double y) { return x * y; },
      [](double x, double y, double) { return std::pair{y, x}; });
}

inline Tensor div(const Tensor& a, const Tensor& b) {
  return detail::binary(
      "div", a, b, [](double x, double y) { return x / y; },
      [](double x, double y, double) { return std::pair{1.0 / y, -x / (y * y)}; });
}

// pow(0, 0) == 1. A negative base requires an integer exponent.
inline Tensor pow(const Tensor& a, const Tensor& b) {
  return detail::binary(
      "pow", a, b,
      [](double x, double y) {
        if (x < 0.0 && !detail::is_integer(y)) {
          throw std::domain_error("pow: negative base with non-integer exponent");
        }
        return std::pow(x, y);
      },
      [](double x, double y, double out) {
        double dx = 0.0;
        if (y == 0.0) dx = 0.0;
        else if (x == 0.0) dx = y == 1.0 ? 1.0 : (y > 1.0 ? 0.0 : std::pow(x, y - 1.0) * y);
        else dx = y * std::pow(x, y - 1.0);
        double dy = x > 0.0 ? out * std::log(x) : 0.0;
        return std::pair{dx, dy};
      });
}

// Ties route the gradient to the first argument.
inline Tensor maximum(const Tensor& a, const Tensor& b) {
  return detail::binary(
      "max", a, b, [](double x, double y) { return x >= y ? x : y; },
      [](double x, double y, double) { return x >= y ? std::pair{1.0, 0.0} : std::pair{0.0, 1.0}; });
}

inline Tensor minimum(const Tensor& a, const Tensor& b) {
  return detail::binary(
      "min", a, b, [](double x, double y) { return x <= y ? x : y; },
      [](double x, double y, double) { return x <= y ? std::pair{1.0, 0.0} : std::pair{0.0, 1.0}; });
}

inline Tensor exp(const Tensor& x) {
  return detail::unary(
      "exp", x, [](double v) { return std::exp(v); }, [](double, double o) { return o; });
}

inline Tensor ln(const Tensor& x) {
  return detail::unary(
      "ln", x,
      [](double v) {
        if (v < 0.0) throw std::domain_error("ln of a negative value");
        return std::log(v);
      },
      [](double v, double) { return 1.0 / v; });
}

inline Tensor abs(const Tensor& x) {
  return detail::unary(
      "abs", x, [](double v) { return std::fabs(v); },
      [](double v, double) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
}

// Gradient passes on the closed interval [lo, hi].
inline Tensor clamp(const Tensor& x, double lo, double hi) {
  if (lo > hi) throw std::invalid_argument("clamp: lo > hi");
  return detail::unary(
      "clamp", x, [lo, hi](double v) { return std::clamp(v, lo, hi); },
      [lo, hi](double v, double) { return (v >= lo && v <= hi) ? 1.0 : 0.0; });
}

inline Tensor sigmoid(const Tensor& x) {
  return detail::unary(
      "sigmoid", x,
      [](double v) {
        if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
        double e = std::exp(v);
        return e / (1.0 + e);
      },
      [](double, double o) { return o * (1.0 - o); });
}

inline Tensor relu(const Tensor& x) {
  return detail::unary(
      "relu", x, [](double v) { return v > 0.0 ? v : 0.0; },
      [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

inline Tensor neg(const Tensor& x) {
  return detail::unary(
      "neg", x, [](double v) { return -v; }, [](double, double) { return -1.0; });
}

// Tag-dispatched form. Clamp reads its bounds from `lo`/`hi`.
inline Tensor elementwise(ElementwiseOp op, std::span<const Tensor> in,
                          double lo = -std::numeric_limits<double>::infinity(),
                          double hi = std::numeric_limits<double>::infinity()) {
  auto need = [&](std::size_t k) {
    if (in.size() != k) {
      throw std::invalid_argument("elementwise: expected " + std::to_string(k) + " inputs");
    }
  };
  switch (op) {
    case ElementwiseOp::Add: need(2); return add(in[0], in[1]);
    case ElementwiseOp::Sub: need(2); return sub(in[0], in[1]);
    case ElementwiseOp::Mul: need(2); return mul(in[0], in[1]);
    case ElementwiseOp::Div: need(2); return div(in[0], in[1]);
    case ElementwiseOp::Pow: need(2); return pow(in[0], in[1]);
    case ElementwiseOp::Max: need(2); return maximum(in[0], in[1]);
    case ElementwiseOp::Min: need(2); return minimum(in[0], in[1]);
    case ElementwiseOp::Exp: need(1); return exp(in[0]);
    case ElementwiseOp::Ln: need(1); return ln(in[0]);
    case ElementwiseOp::Abs: need(1); return abs(in[0]);
    case ElementwiseOp::Clamp: need(1); return clamp(in[0], lo, hi);
    case ElementwiseOp::Sigmoid: need(1); return sigmoid(in[0]);
    case ElementwiseOp::Relu: need(1); return relu(in[0]);
  }
  throw std::invalid_argument("elementwise: unknown op");
}

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator-(const Tensor& a) { return neg(a); }
inline Tensor operator+(const Tensor& a, double b) { return add(a, Tensor::scalar(b)); }
inline Tensor operator+(double a, const Tensor& b) { return add(Tensor::scalar(a), b); }
inline Tensor operator-(const Tensor& a, double b) { return sub(a, Tensor::scalar(b)); }
inline Tensor operator-(double a, const Tensor& b) { return sub(Tensor::scalar(a), b); }
inline Tensor operator*(const Tensor& a, double b) { return mul(a, Tensor::scalar(b)); }
inline Tensor operator*(double a, const Tensor& b) { return mul(Tensor::scalar(a), b); }
inline Tensor operator/(const Tensor& a, double b) { return div(a, Tensor::scalar(b)); }
inline Tensor operator/(double a, const Tensor& b) { return div(Tensor::scalar(a), b); }

// ---------------------------------------------------------------------------
// Linear algebra

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2) throw std::invalid_argument("matmul expects 2-d operands");
  std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw std::invalid_argument("matmul: inner dimensions " + shape_str(a.shape()) + " x " +
                                shape_str(b.shape()));
  }
  std::vector<double> c(m * n, 0.0);
  const auto& av = a.values();
  const auto& bv = b.values();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      double s = av[i * k + p];
      for (std::size_t j = 0; j < n; ++j) c[i * n + j] += s * bv[p * n + j];
    }
  return Tensor::from_op("matmul", {m, n}, std::move(c), {a, b}, [a, b, m, k, n](const Tensor& out) {
    const auto& g = out.grad();
    const auto& av = a.values();
    const auto& bv = b.values();
    if (a.requires_grad()) {
      std::vector<double> ga(m * k, 0.0);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          double s = 0.0;
          for (std::size_t j = 0; j < n; ++j) s += g[i * n + j] * bv[p * n + j];
          ga[i * k + p] = s;
        }
      a.accumulate_grad(ga);
    }
    if (b.requires_grad()) {
      std::vector<double> gb(k * n, 0.0);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          double s = av[i * k + p];
          for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += s * g[i * n + j];
        }
      b.accumulate_grad(gb);
    }
  });
}

namespace detail {

// C[M,N] += A[M,K] * B[K,N], all row-major. Blocked over K and N, four rows
// of A at a time. Each C element accumulates over k in increasing order, so
// results do not depend on the blocking.
inline void gemm_acc(std::size_t M, std::size_t N, std::size_t K, const double* A, const double* B, double* C) {
  constexpr std::size_t NB = 256, KB = 64;
  for (std::size_t j0 = 0; j0 < N; j0 += NB) {
    const std::size_t j1 = std::min(N, j0 + NB);
    for (std::size_t p0 = 0; p0 < K; p0 += KB) {
      const std::size_t p1 = std::min(K, p0 + KB);
      std::size_t i = 0;
      for (; i + 4 <= M; i += 4) {
        double* __restrict c0 = C + (i + 0) * N;
        double* __restrict c1 = C + (i + 1) * N;
        double* __restrict c2 = C + (i + 2) * N;
        double* __restrict c3 = C + (i + 3) * N;
        for (std::size_t p = p0; p < p1; ++p) {
          const double a0 = A[(i + 0) * K + p], a1 = A[(i + 1) * K + p];
          const double a2 = A[(i + 2) * K + p], a3 = A[(i + 3) * K + p];
          const double* __restrict b = B + p * N;
          for (std::size_t j = j0; j < j1; ++j) {
            const double bj = b[j];
            c0[j] += a0 * bj;
            c1[j] += a1 * bj;
            c2[j] += a2 * bj;
            c3[j] += a3 * bj;
          }
        }
      }
      for (; i < M; ++i) {
        double* __restrict c = C + i * N;
        for (std::size_t p = p0; p < p1; ++p) {
          const double a = A[i * K + p];
          const double* __restrict b = B + p * N;
          for (std::size_t j = j0; j < j1; ++j) c[j] += a * b[j];
        }
      }
    }
  }
}

}  // namespace detail

struct Conv2dOptions {
  std::size_t stride = 1;
  std::size_t padding = 0;
};

// Cross-correlation over [N,C,H,W] with weights [K,C,kh,kw], lowered to a
// single GEMM over an im2col buffer laid out as [C*kh*kw, N*Ho*Wo]. The
// buffer is kept for backward.
inline Tensor conv2d(const Tensor& input, const Tensor& weight, Conv2dOptions opt = {}) {
  if (input.rank() != 4 || weight.rank() != 4) {
    throw std::invalid_argument("conv2d expects [N,C,H,W] input and [K,C,kh,kw] weight");
  }
  const std::size_t N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  const std::size_t K = weight.dim(0), kh = weight.dim(2), kw = weight.dim(3);
  if (weight.dim(1) != C) {
    throw std::invalid_argument("conv2d: input has " + std::to_string(C) + " channels, weight expects " +
                                std::to_string(weight.dim(1)));
  }
  if (kh % 2 == 0 || kw % 2 == 0) throw std::invalid_argument("conv2d: kernel extents must be odd");
  if (opt.stride == 0) throw std::invalid_argument("conv2d: stride must be positive");
  if (2 * opt.padding > kh - 1 || 2 * opt.padding > kw - 1) {
    throw std::invalid_argument("conv2d: padding would enlarge the output");
  }
  if (H + 2 * opt.padding < kh || W + 2 * opt.padding < kw) {
    throw std::invalid_argument("conv2d: kernel larger than padded input");
  }
  const std::size_t Ho = (H + 2 * opt.padding - kh) / opt.stride + 1;
  const std::size_t Wo = (W + 2 * opt.padding - kw) / opt.stride + 1;
  const std::size_t rows = C * kh * kw, cols = Ho * Wo, wide = N * cols;
  const long pad = static_cast<long>(opt.padding);
  const std::size_t stride = opt.stride;

  auto colbuf = std::make_shared<std::vector<double>>(rows * wide);
  const auto& xv = input.values();
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t i = 0; i < kh; ++i)
      for (std::size_t j = 0; j < kw; ++j) {
        double* row = colbuf->data() + ((c * kh + i) * kw + j) * wide;
        for (std::size_t n = 0; n < N; ++n) {
          const double* plane = xv.data() + (n * C + c) * H * W;
          double* dst = row + n * cols;
          for (std::size_t oy = 0; oy < Ho; ++oy) {
            long y = static_cast<long>(oy * stride + i) - pad;
            for (std::size_t ox = 0; ox < Wo; ++ox) {
              long x = static_cast<long>(ox * stride + j) - pad;
              dst[oy * Wo + ox] = (y >= 0 && y < static_cast<long>(H) && x >= 0 && x < static_cast<long>(W))
                                      ? plane[y * static_cast<long>(W) + x]
                                      : 0.0;
            }
          }
        }
      }

  std::vector<double> tmp(K * wide, 0.0);
  detail::gemm_acc(K, wide, rows, weight.values().data(), colbuf->data(), tmp.data());
  std::vector<double> out(N * K * cols);
  for (std::size_t k = 0; k < K; ++k)
    for (std::size_t n = 0; n < N; ++n)
      std::copy_n(tmp.data() + k * wide + n * cols, cols, out.data() + (n * K + k) * cols);

  return Tensor::from_op(
      "conv2d", {N, K, Ho, Wo}, std::move(out), {input, weight},
      [=](const Tensor& res) {
        const auto& g = res.grad();
        // Output gradient in [K, N*cols] layout.
        std::vector<double> gt(K * wide);
        for (std::size_t k = 0; k < K; ++k)
          for (std::size_t n = 0; n < N; ++n)
            std::copy_n(g.data() + (n * K + k) * cols, cols, gt.data() + k * wide + n * cols);
        if (weight.requires_grad()) {
          // gW[k, :] = sum_q gt[k, q] * col[:, q], via the transposed buffer.
          std::vector<double> colT(wide * rows);
          for (std::size_t r = 0; r < rows; ++r) {
            const double* crow = colbuf->data() + r * wide;
            for (std::size_t q = 0; q < wide; ++q) colT[q * rows + r] = crow[q];
          }
          std::vector<double> gw(K * rows, 0.0);
          detail::gemm_acc(K, rows, wide, gt.data(), colT.data(), gw.data());
          weight.accumulate_grad(gw);
        }
        if (input.requires_grad()) {
          const auto& wv = weight.values();
          std::vector<double> wT(rows * K);
          for (std::size_t k = 0; k < K; ++k)
            for (std::size_t r = 0; r < rows; ++r) wT[r * K + k] = wv[k * rows + r];
          std::vector<double> gcol(rows * wide, 0.0);
          detail::gemm_acc(rows, wide, K, wT.data(), gt.data(), gcol.data());
          std::vector<double> gx(N * C * H * W, 0.0);
          for (std::size_t c = 0; c < C; ++c)
            for (std::size_t i = 0; i < kh; ++i)
              for (std::size_t j = 0; j < kw; ++j) {
                const double* row = gcol.data() + ((c * kh + i) * kw + j) * wide;
                for (std::size_t n = 0; n < N; ++n) {
                  const double* src = row + n * cols;
                  double* plane = gx.data() + (n * C + c) * H * W;
                  for (std::size_t oy = 0; oy < Ho; ++oy) {
                    long y = static_cast<long>(oy * stride + i) - pad;
                    if (y < 0 || y >= static_cast<long>(H)) continue;
                    for (std::size_t ox = 0; ox < Wo; ++ox) {
                      long x = static_cast<long>(ox * stride + j) - pad;
                      if (x < 0 || x >= static_cast<long>(W)) continue;
                      plane[y * static_cast<long>(W) + x] += src[oy * Wo + ox];
                    }
                  }
                }
              }
          input.accumulate_grad(gx);
        }
      });
}

// x[N, K, ...] + b[K], broadcasting b over every axis but the second.
inline Tensor bias_add(const Tensor& x, const Tensor& b) {
  if (x.rank() < 2 || b.rank() != 1 || b.size() != x.dim(1)) {
    throw std::invalid_argument("bias_add: " + shape_str(b.shape()) + " does not match channels of " +
                                shape_str(x.shape()));
  }
  const std::size_t N = x.dim(0), K = x.dim(1), inner = x.size() / (N * K);
  std::vector<double> v = x.values();
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t k = 0; k < K; ++k) {
      double* p = v.data() + (n * K + k) * inner;
      const double bk = b.values()[k];
      for (std::size_t i = 0; i < inner; ++i) p[i] += bk;
    }
  return Tensor::from_op("bias_add", x.shape(), std::move(v), {x, b}, [x, b, N, K, inner](const Tensor& out) {
    const auto& g = out.grad();
    x.accumulate_grad(g);
    if (b.requires_grad()) {
      std::vector<double> gb(K, 0.0);
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t k = 0; k < K; ++k) {
          const double* p = g.data() + (n * K + k) * inner;
          for (std::size_t i = 0; i < inner; ++i) gb[k] += p[i];
        }
      b.accumulate_grad(gb);
    }
  });
}

// ---------------------------------------------------------------------------
// Reductions and reshaping

enum class ReduceOp { Sum, Mean, Max };

// Reduces over `axes` (all axes when empty); reduced axes are dropped.
// Max routes its gradient to the first maximal element.
inline Tensor reduce(ReduceOp op, const Tensor& t, std::vector<std::size_t> axes = {}) {
  const Shape& in = t.shape();
  if (t.size() == 0) throw std::invalid_argument("reduce over an empty tensor");
  std::vector<bool> red(in.size(), axes.empty());
  for (auto a : axes) {
    if (a >= in.size()) throw std::invalid_argument("reduce: axis out of range");
    red[a] = true;
  }
  Shape out_shape, keep_shape(in.size());
  std::size_t extent = 1;
  for (std::size_t d = 0; d < in.size(); ++d) {
    keep_shape[d] = red[d] ? 1 : in[d];
    if (red[d]) extent *= in[d];
    else out_shape.push_back(in[d]);
  }
  if (extent == 0) throw std::invalid_argument("reduce: empty reduction");
  // Map every input element to its output slot.
  auto slot = std::make_shared<std::vector<std::size_t>>(t.size());
  {
    Shape s(in.size(), 0);
    std::vector<std::size_t> ostride(in.size(), 0);
    std::size_t acc = 1;
    for (std::size_t d = in.size(); d-- > 0;) {
      ostride[d] = red[d] ? 0 : acc;
      acc *= keep_shape[d];
    }
    std::size_t cur = 0;
    for (std::size_t e = 0; e < t.size(); ++e) {
      (*slot)[e] = cur;
      for (std::size_t d = in.size(); d-- > 0;) {
        ++s[d];
        cur += ostride[d];
        if (s[d] < in[d]) break;
        cur -= ostride[d] * s[d];
        s[d] = 0;
      }
    }
  }
  std::size_t n_out = numel(out_shape);
  const auto& v = t.values();
  std::vector<double> o(n_out, op == ReduceOp::Max ? -std::numeric_limits<double>::infinity() : 0.0);
  auto argmax = std::make_shared<std::vector<std::size_t>>();
  if (op == ReduceOp::Max) {
    argmax->assign(n_out, 0);
    std::vector<bool> seen(n_out, false);
    for (std::size_t e = 0; e < t.size(); ++e) {
      auto s = (*slot)[e];
      if (!seen[s] || v[e] > o[s]) {
        o[s] = v[e];
        (*argmax)[s] = e;
        seen[s] = true;
      }
    }
  } else {
    for (std::size_t e = 0; e < t.size(); ++e) o[(*slot)[e]] += v[e];
    if (op == ReduceOp::Mean)
      for (auto& x : o) x /= static_cast<double>(extent);
  }
  const char* name = op == ReduceOp::Sum ? "sum" : (op == ReduceOp::Mean ? "mean" : "max_reduce");
  return Tensor::from_op(name, out_shape, std::move(o), {t}, [t, op, slot, argmax, extent](const Tensor& out) {
    const auto& g = out.grad();
    std::vector<double> gt(t.size(), 0.0);
    if (op == ReduceOp::Max) {
      for (std::size_t s = 0; s < g.size(); ++s) gt[(*argmax)[s]] += g[s];
    } else {
      double scale = op == ReduceOp::Mean ? 1.0 / static_cast<double>(extent) : 1.0;
      for (std::size_t e = 0; e < gt.size(); ++e) gt[e] = g[(*slot)[e]] * scale;
    }
    t.accumulate_grad(gt);
  });
}

inline Tensor sum(const Tensor& t, std::vector<std::size_t> axes = {}) {
  return reduce(ReduceOp::Sum, t, std::move(axes));
}
inline Tensor mean(const Tensor& t, std::vector<std::size_t> axes = {}) {
  return reduce(ReduceOp::Mean, t, std::move(axes));
}
inline Tensor max(const Tensor& t, std::vector<std::size_t> axes = {}) {
  return reduce(ReduceOp::Max, t, std::move(axes));
}

inline Tensor reshape(const Tensor& t, Shape shape) {
  if (numel(shape) != t.size()) {
    throw std::invalid_argument("reshape " + shape_str(t.shape()) + " -> " + shape_str(shape));
  }
  return Tensor::from_op("reshape", std::move(shape), t.values(), {t},
                         [t](const Tensor& out) { t.accumulate_grad(out.grad()); });
}

// Picks flat elements; the result is 1-d. Backward scatter-adds.
inline Tensor gather(const Tensor& t, std::vector<std::size_t> flat_index) {
  if (flat_index.empty()) throw std::invalid_argument("gather: empty index");
  std::vector<double> v(flat_index.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (flat_index[i] >= t.size()) throw std::out_of_range("gather: index out of range");
    v[i] = t.values()[flat_index[i]];
  }
  auto idx = std::make_shared<std::vector<std::size_t>>(std::move(flat_index));
  Shape s{idx->size()};
  return Tensor::from_op("gather", std::move(s), std::move(v), {t}, [t, idx](const Tensor& out) {
    const auto& g = out.grad();
    std::vector<double> gt(t.size(), 0.0);
    for (std::size_t i = 0; i < idx->size(); ++i) gt[(*idx)[i]] += g[i];
    t.accumulate_grad(gt);
  });
}

// ---------------------------------------------------------------------------
// Gradient control

// Same values, no graph edge: contributes nothing upstream.
inline Tensor detach(const Tensor& t) { return Tensor(t.shape(), t.values(), false); }

// Forward runs with gradient tracking off and must only read its inputs. Backward receives the output (with its gradient) and the inputs, and
// returns one gradient per input; an empty vector means "no gradient".
using CustomForward = std::function<Tensor(std::span<const Tensor>)>;
using CustomBackward =
    std::function<std::vector<std::vector<double>>(const Tensor& out, std::span<const Tensor> inputs)>;

inline Tensor custom_grad(const CustomForward& forward, CustomBackward backward,
                          std::vector<Tensor> inputs, const char* name = "custom") {
  Tensor fwd = [&] {
    NoGradGuard guard;
    return forward(inputs);
  }();
  std::vector<Tensor> saved = inputs;
  return Tensor::from_op(name, fwd.shape(), fwd.values(), std::move(inputs),
                         [saved, backward = std::move(backward)](const Tensor& out) {
                           auto grads = backward(out, saved);
                           if (grads.size() != saved.size()) {
                             throw std::invalid_argument("custom_grad: backward returned " +
                                                         std::to_string(grads.size()) + " gradients for " +
                                                         std::to_string(saved.size()) + " inputs");
                           }
                           for (std::size_t i = 0; i < saved.size(); ++i) {
                             if (grads[i].empty()) continue;
                             if (grads[i].size() != saved[i].size()) {
                               throw std::invalid_argument("custom_grad: gradient " + std::to_string(i) +
                                                           " has the wrong size");
                             }
                             saved[i].accumulate_grad(grads[i]);
                           }
                         });
}

// ---------------------------------------------------------------------------
// Backward pass

// Accumulates d(loss)/d(leaf) into every leaf that requires grad. Interior
// gradients are reset first so repeated calls accumulate only on leaves.
// Returns the number of graph nodes visited.
inline std::size_t backward(const Tensor& loss) {
  if (loss.size() != 1) {
    throw std::invalid_argument("backward expects a scalar loss, got shape " + shape_str(loss.shape()));
  }
  if (!loss.requires_grad()) return 0;
  if (loss.is_leaf()) {
    loss.accumulate_grad(std::vector<double>{1.0});
    return 0;
  }
  // Iterative post-order DFS for a topological order.
  std::vector<Tensor> order;
  std::unordered_set<const detail::TensorImpl*> visited;
  std::vector<std::pair<Tensor, std::size_t>> stack;
  stack.emplace_back(loss, 0);
  visited.insert(loss.impl_.get());
  while (!stack.empty()) {
    auto& [t, next] = stack.back();
    const auto& node = t.node();
    if (node && next < node->inputs.size()) {
      const Tensor& child = node->inputs[next++];
      if (!child.is_leaf() && child.requires_grad() && visited.insert(child.impl_.get()).second) {
        stack.emplace_back(child, 0);
      }
      continue;
    }
    order.push_back(t);
    stack.pop_back();
  }
  for (auto& t : order) t.impl_->grad.assign(t.size(), 0.0);
  order.back().impl_->grad[0] = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) it->node()->backward(*it);
  return order.size();
}

// ---------------------------------------------------------------------------
// Finite differences

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::vector<double> analytic;
  std::vector<double> numeric;
  bool passed = false;
};

// Compares the autodiff gradient of a scalar function with central
// differences; error is |ga - gn| / max(1, |gn|).
inline GradCheckReport finite_diff_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                                         double step = 1e-5, double tol = 1e-4) {
  GradCheckReport r;
  Tensor leaf = x.clone(true);
  Tensor y = f(leaf);
  backward(y);
  r.analytic = leaf.has_grad() ? leaf.grad() : std::vector<double>(x.size(), 0.0);
  r.numeric.resize(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    Tensor plus = x.clone(), minus = x.clone();
    plus.mutable_values()[i] += step;
    minus.mutable_values()[i] -= step;
    double fp = f(plus).item();
    double fm = f(minus).item();
    r.numeric[i] = (fp - fm) / (2.0 * step);
    double err = std::fabs(r.analytic[i] - r.numeric[i]) / std::max(1.0, std::fabs(r.numeric[i]));
    r.max_rel_error = std::max(r.max_rel_error, err);
  }
  r.passed = r.max_rel_error <= tol;
  return r;
}

}  // namespace hqod
