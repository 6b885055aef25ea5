#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "shmamba/error.hpp"
#include "shmamba/tape.hpp"
#include "shmamba/tensor.hpp"

namespace shmamba {

namespace detail {

inline Tape& same_tape(const Var& a, const Var& b, const char* op) {
  if (!a.valid() || !b.valid() || a.tape() != b.tape()) {
    throw Error(std::string(op) + ": operands must live on the same tape");
  }
  return *a.tape();
}

inline double stable_sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline double stable_softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

/// Row-major strides of `shape` right-aligned into an output of rank `out_rank`,
/// with zero stride on broadcast dimensions.
inline std::vector<std::size_t> broadcast_strides(const Shape& shape, const Shape& out) {
  std::vector<std::size_t> strides(out.size(), 0);
  std::size_t stride = 1;
  const std::size_t lead = out.size() - shape.size();
  for (std::size_t i = shape.size(); i-- > 0;) {
    strides[lead + i] = shape[i] == 1 ? 0 : stride;
    stride *= shape[i];
  }
  return strides;
}

inline Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r);
  for (std::size_t i = 0; i < r; ++i) {
    const std::size_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
    const std::size_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw ShapeError(std::string(op) + ": shapes " + shape_str(a) + " and " + shape_str(b) +
                       " are not broadcast-compatible");
    }
    out[i] = std::max(da, db);
  }
  return out;
}

/// Calls f(out_index, a_index, b_index) for every element of the broadcast result.
template <class F>
void for_each_broadcast(const Shape& out, const std::vector<std::size_t>& sa,
                        const std::vector<std::size_t>& sb, F&& f) {
  const std::size_t n = shape_numel(out);
  if (n == 0) return;
  const std::size_t r = out.size();
  if (r == 0) {
    f(0, 0, 0);
    return;
  }
  std::vector<std::size_t> idx(r, 0);
  std::size_t ia = 0;
  std::size_t ib = 0;
  const std::size_t inner = out[r - 1];
  const std::size_t ta = sa[r - 1];
  const std::size_t tb = sb[r - 1];
  for (std::size_t o = 0; o < n; o += inner) {
    for (std::size_t j = 0; j < inner; ++j) f(o + j, ia + j * ta, ib + j * tb);
    for (std::size_t d = r - 1; d-- > 0;) {
      ++idx[d];
      ia += sa[d];
      ib += sb[d];
      if (idx[d] < out[d]) break;
      ia -= sa[d] * out[d];
      ib -= sb[d] * out[d];
      idx[d] = 0;
    }
  }
}

/// Splits `shape` around `axis` into (outer, length, inner) extents.
struct AxisSplit {
  std::size_t outer = 1;
  std::size_t len = 1;
  std::size_t inner = 1;
};

inline AxisSplit split_axis(const Shape& shape, std::size_t axis) {
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.len = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise binary ops with broadcasting
// ---------------------------------------------------------------------------

enum class BinaryOp { add, sub, mul, div };

inline Var binary(const Var& a, const Var& b, BinaryOp kind) {
  static constexpr const char* names[] = {"add", "sub", "mul", "div"};
  const char* name = names[static_cast<int>(kind)];
  Tape& tape = detail::same_tape(a, b, name);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  Shape out_shape = detail::broadcast_shape(av.shape(), bv.shape(), name);
  auto sa = detail::broadcast_strides(av.shape(), out_shape);
  auto sb = detail::broadcast_strides(bv.shape(), out_shape);
  Tensor out(out_shape);
  auto o = out.data();
  auto x = av.data();
  auto y = bv.data();
  switch (kind) {
    case BinaryOp::add:
      detail::for_each_broadcast(out_shape, sa, sb, [&](std::size_t i, std::size_t p, std::size_t q) { o[i] = x[p] + y[q]; });
      break;
    case BinaryOp::sub:
      detail::for_each_broadcast(out_shape, sa, sb, [&](std::size_t i, std::size_t p, std::size_t q) { o[i] = x[p] - y[q]; });
      break;
    case BinaryOp::mul:
      detail::for_each_broadcast(out_shape, sa, sb, [&](std::size_t i, std::size_t p, std::size_t q) { o[i] = x[p] * y[q]; });
      break;
    case BinaryOp::div:
      detail::for_each_broadcast(out_shape, sa, sb, [&](std::size_t i, std::size_t p, std::size_t q) {
        if (y[q] == 0.0) throw DomainError("div: division by zero");
        o[i] = x[p] / y[q];
      });
      break;
  }
  return tape.record(name, std::move(out), {a, b},
                     [a, b, kind, out_shape, sa, sb](const Tensor& g, std::span<Tensor* const> grads) {
                       auto gd = g.data();
                       auto x = a.value().data();
                       auto y = b.value().data();
                       std::span<double> ga = grads[0] ? grads[0]->data() : std::span<double>{};
                       std::span<double> gb = grads[1] ? grads[1]->data() : std::span<double>{};
                       const bool wa = grads[0] != nullptr;
                       const bool wb = grads[1] != nullptr;
                       detail::for_each_broadcast(out_shape, sa, sb, [&](std::size_t i, std::size_t p, std::size_t q) {
                         switch (kind) {
                           case BinaryOp::add:
                             if (wa) ga[p] += gd[i];
                             if (wb) gb[q] += gd[i];
                             break;
                           case BinaryOp::sub:
                             if (wa) ga[p] += gd[i];
                             if (wb) gb[q] -= gd[i];
                             break;
                           case BinaryOp::mul:
                             if (wa) ga[p] += gd[i] * y[q];
                             if (wb) gb[q] += gd[i] * x[p];
                             break;
                           case BinaryOp::div:
                             if (wa) ga[p] += gd[i] / y[q];
                             if (wb) gb[q] -= gd[i] * x[p] / (y[q] * y[q]);
                             break;
                         }
                       });
                     });
}

inline Var add(const Var& a, const Var& b) { return binary(a, b, BinaryOp::add); }
inline Var sub(const Var& a, const Var& b) { return binary(a, b, BinaryOp::sub); }
inline Var mul(const Var& a, const Var& b) { return binary(a, b, BinaryOp::mul); }
inline Var div(const Var& a, const Var& b) { return binary(a, b, BinaryOp::div); }

/// y = s * x + t for constants s and t.
inline Var affine(const Var& x, double s, double t = 0.0) {
  Tensor out = x.value();
  for (double& v : out.data()) v = s * v + t;
  return x.tape()->record("affine", std::move(out), {x}, [s](const Tensor& g, std::span<Tensor* const> grads) {
    auto gx = grads[0]->data();
    auto gd = g.data();
    for (std::size_t i = 0; i < gd.size(); ++i) gx[i] += s * gd[i];
  });
}

inline Var scale(const Var& x, double s) { return affine(x, s, 0.0); }

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }
inline Var operator/(const Var& a, const Var& b) { return div(a, b); }
inline Var operator-(const Var& a) { return affine(a, -1.0); }
inline Var operator*(const Var& a, double s) { return affine(a, s); }
inline Var operator*(double s, const Var& a) { return affine(a, s); }
inline Var operator+(const Var& a, double t) { return affine(a, 1.0, t); }
inline Var operator+(double t, const Var& a) { return affine(a, 1.0, t); }
inline Var operator-(double t, const Var& a) { return affine(a, -1.0, t); }

// ---------------------------------------------------------------------------
// Elementwise unary ops
// ---------------------------------------------------------------------------

enum class UnaryFn { silu, sigmoid, softplus, tanh, exp, log, neg, square, sqrt };

inline const char* unary_name(UnaryFn fn) {
  switch (fn) {
    case UnaryFn::silu: return "silu";
    case UnaryFn::sigmoid: return "sigmoid";
    case UnaryFn::softplus: return "softplus";
    case UnaryFn::tanh: return "tanh";
    case UnaryFn::exp: return "exp";
    case UnaryFn::log: return "log";
    case UnaryFn::neg: return "neg";
    case UnaryFn::square: return "square";
    case UnaryFn::sqrt: return "sqrt";
  }
  return "?";
}

/// Scalar forward rule of each unary function.
inline double unary_value(UnaryFn fn, double x) {
  switch (fn) {
    case UnaryFn::silu: return x * detail::stable_sigmoid(x);
    case UnaryFn::sigmoid: return detail::stable_sigmoid(x);
    case UnaryFn::softplus: return detail::stable_softplus(x);
    case UnaryFn::tanh: return std::tanh(x);
    case UnaryFn::exp: return std::exp(x);
    case UnaryFn::log:
      if (!(x > 0.0)) throw DomainError("log of non-positive value " + std::to_string(x));
      return std::log(x);
    case UnaryFn::neg: return -x;
    case UnaryFn::square: return x * x;
    case UnaryFn::sqrt:
      if (x < 0.0) throw DomainError("sqrt of negative value " + std::to_string(x));
      return std::sqrt(x);
  }
  return 0.0;
}

/// dy/dx given input x and output y.
inline double unary_derivative(UnaryFn fn, double x, double y) {
  switch (fn) {
    case UnaryFn::silu: {
      const double s = detail::stable_sigmoid(x);
      return s * (1.0 + x * (1.0 - s));
    }
    case UnaryFn::sigmoid: return y * (1.0 - y);
    case UnaryFn::softplus: return detail::stable_sigmoid(x);
    case UnaryFn::tanh: return 1.0 - y * y;
    case UnaryFn::exp: return y;
    case UnaryFn::log: return 1.0 / x;
    case UnaryFn::neg: return -1.0;
    case UnaryFn::square: return 2.0 * x;
    case UnaryFn::sqrt: return 0.5 / y;
  }
  return 0.0;
}

inline Var apply_unary(const Var& x, UnaryFn fn) {
  Tensor out = x.value();
  for (double& v : out.data()) v = unary_value(fn, v);
  return x.tape()->record(unary_name(fn), std::move(out), {x}, [x, fn](const Tensor& g, std::span<Tensor* const> grads) {
    auto gx = grads[0]->data();
    auto xv = x.value().data();
    auto gd = g.data();
    for (std::size_t i = 0; i < gd.size(); ++i) {
      gx[i] += gd[i] * unary_derivative(fn, xv[i], unary_value(fn, xv[i]));
    }
  });
}

inline Var silu(const Var& x) { return apply_unary(x, UnaryFn::silu); }
inline Var sigmoid(const Var& x) { return apply_unary(x, UnaryFn::sigmoid); }
inline Var softplus(const Var& x) { return apply_unary(x, UnaryFn::softplus); }
inline Var tanh(const Var& x) { return apply_unary(x, UnaryFn::tanh); }
inline Var exp(const Var& x) { return apply_unary(x, UnaryFn::exp); }
inline Var log(const Var& x) { return apply_unary(x, UnaryFn::log); }
inline Var square(const Var& x) { return apply_unary(x, UnaryFn::square); }
inline Var sqrt(const Var& x) { return apply_unary(x, UnaryFn::sqrt); }

/// Elementwise clamp to [lo, hi]; gradient passes only where the input is inside.
inline Var clamp(const Var& x, double lo, double hi) {
  Tensor out = x.value();
  for (double& v : out.data()) v = std::min(std::max(v, lo), hi);
  return x.tape()->record("clamp", std::move(out), {x}, [x, lo, hi](const Tensor& g, std::span<Tensor* const> grads) {
    auto gx = grads[0]->data();
    auto xv = x.value().data();
    auto gd = g.data();
    for (std::size_t i = 0; i < gd.size(); ++i) {
      if (xv[i] >= lo && xv[i] <= hi) gx[i] += gd[i];
    }
  });
}

// ---------------------------------------------------------------------------
// Shape manipulation and reductions
// ---------------------------------------------------------------------------

inline Var reshape(const Var& x, Shape shape) {
  Tensor out = x.value().reshaped(std::move(shape));
  return x.tape()->record("reshape", std::move(out), {x}, [](const Tensor& g, std::span<Tensor* const> grads) {
    auto gx = grads[0]->data();
    auto gd = g.data();
    for (std::size_t i = 0; i < gd.size(); ++i) gx[i] += gd[i];
  });
}

/// Swaps the two axes of a rank-2 value.
inline Var transpose(const Var& x) {
  const Tensor& v = x.value();
  if (v.rank() != 2) throw ShapeError("transpose expects rank 2, got " + shape_str(v.shape()));
  const std::size_t r = v.dim(0);
  const std::size_t c = v.dim(1);
  Tensor out(Shape{c, r});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = v[i * c + j];
  return x.tape()->record("transpose", std::move(out), {x}, [r, c](const Tensor& g, std::span<Tensor* const> grads) {
    auto gx = grads[0]->data();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += g[j * r + i];
  });
}

enum class ReduceMode { sum, mean };

inline Var reduce(const Var& x, int axis, ReduceMode mode, bool keepdim = false) {
  const Tensor& v = x.value();
  const std::size_t ax = v.normalize_axis(axis);
  const auto s = detail::split_axis(v.shape(), ax);
  Shape shape = v.shape();
  if (keepdim) {
    shape[ax] = 1;
  } else {
    shape.erase(shape.begin() + static_cast<std::ptrdiff_t>(ax));
  }
  const double factor = mode == ReduceMode::mean ? 1.0 / static_cast<double>(s.len) : 1.0;
  Tensor out(shape);
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t l = 0; l < s.len; ++l)
      for (std::size_t i = 0; i < s.inner; ++i) out[o * s.inner + i] += v[(o * s.len + l) * s.inner + i];
  if (factor != 1.0) {
    for (double& e : out.data()) e *= factor;
  }
  return x.tape()->record(mode == ReduceMode::sum ? "sum" : "mean", std::move(out), {x},
                          [s, factor](const Tensor& g, std::span<Tensor* const> grads) {
                            auto gx = grads[0]->data();
                            for (std::size_t o = 0; o < s.outer; ++o)
                              for (std::size_t l = 0; l < s.len; ++l)
                                for (std::size_t i = 0; i < s.inner; ++i)
                                  gx[(o * s.len + l) * s.inner + i] += factor * g[o * s.inner + i];
                          });
}

inline Var sum(const Var& x, int axis, bool keepdim = false) { return reduce(x, axis, ReduceMode::sum, keepdim); }
inline Var mean(const Var& x, int axis, bool keepdim = false) { return reduce(x, axis, ReduceMode::mean, keepdim); }

/// Reduces every element to a rank-0 value.
inline Var reduce_all(const Var& x, ReduceMode mode) {
  Var flat = reshape(x, Shape{x.value().numel()});
  return reduce(flat, 0, mode);
}

inline Var sum_all(const Var& x) { return reduce_all(x, ReduceMode::sum); }
inline Var mean_all(const Var& x) { return reduce_all(x, ReduceMode::mean); }

inline Var concat(const std::vector<Var>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat of zero tensors");
  Tape* tape = parts.front().tape();
  const Shape& first = parts.front().shape();
  const std::size_t ax = parts.front().value().normalize_axis(axis);
  Shape shape = first;
  shape[ax] = 0;
  std::vector<std::size_t> lens;
  for (const Var& p : parts) {
    if (p.tape() != tape) throw Error("concat: operands must live on the same tape");
    Shape s = p.shape();
    if (s.size() != first.size()) throw ShapeError("concat: rank mismatch " + shape_str(s) + " vs " + shape_str(first));
    for (std::size_t d = 0; d < s.size(); ++d) {
      if (d != ax && s[d] != first[d]) {
        throw ShapeError("concat: shapes " + shape_str(s) + " and " + shape_str(first) + " differ off-axis");
      }
    }
    lens.push_back(s[ax]);
    shape[ax] += s[ax];
  }
  const auto s = detail::split_axis(shape, ax);
  Tensor out(shape);
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Tensor& pv = parts[k].value();
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t l = 0; l < lens[k]; ++l)
        for (std::size_t i = 0; i < s.inner; ++i)
          out[(o * s.len + offset + l) * s.inner + i] = pv[(o * lens[k] + l) * s.inner + i];
    offset += lens[k];
  }
  return tape->record("concat", std::move(out), parts, [s, lens](const Tensor& g, std::span<Tensor* const> grads) {
    std::size_t offset = 0;
    for (std::size_t k = 0; k < lens.size(); ++k) {
      if (grads[k]) {
        auto gk = grads[k]->data();
        for (std::size_t o = 0; o < s.outer; ++o)
          for (std::size_t l = 0; l < lens[k]; ++l)
            for (std::size_t i = 0; i < s.inner; ++i)
              gk[(o * lens[k] + l) * s.inner + i] += g[(o * s.len + offset + l) * s.inner + i];
      }
      offset += lens[k];
    }
  });
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

namespace detail {

/// out(rows x n) += a(rows x k) * b(k x n)
inline void gemm_nn(std::span<const double> a, std::span<const double> b, std::span<double> out, std::size_t rows,
                    std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < rows; ++i) {
    double* orow = out.data() + i * n;
    const double* arow = a.data() + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0.0) continue;
      const double* brow = b.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
}

}  // namespace detail

/// Contracts the last axis of `a` with the first axis of the rank-2 `b`.
/// Leading axes of `a` are treated as a batch of rows.
inline Var matmul(const Var& a, const Var& b) {
  Tape& tape = detail::same_tape(a, b, "matmul");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rank() < 1 || bv.rank() != 2 || av.dim(-1) != bv.dim(0)) {
    throw ShapeError("matmul: incompatible shapes " + shape_str(av.shape()) + " and " + shape_str(bv.shape()));
  }
  const std::size_t k = bv.dim(0);
  const std::size_t n = bv.dim(1);
  const std::size_t rows = av.numel() / k;
  Shape shape = av.shape();
  shape.back() = n;
  Tensor out(shape);
  detail::gemm_nn(av.data(), bv.data(), out.data(), rows, k, n);
  return tape.record("matmul", std::move(out), {a, b}, [a, b, rows, k, n](const Tensor& g, std::span<Tensor* const> grads) {
    auto gd = g.data();
    if (grads[0]) {
      // ga = g * b^T
      auto bd = b.value().data();
      std::vector<double> bt(k * n);
      for (std::size_t p = 0; p < k; ++p)
        for (std::size_t j = 0; j < n; ++j) bt[j * k + p] = bd[p * n + j];
      detail::gemm_nn(gd, bt, grads[0]->data(), rows, n, k);
    }
    if (grads[1]) {
      // gb = a^T * g
      auto gb = grads[1]->data();
      auto ad = a.value().data();
      for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double av = ad[i * k + p];
          if (av == 0.0) continue;
          for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += av * gd[i * n + j];
        }
    }
  });
}

/// x W + b, with W stored as (in, out).
inline Var linear(const Var& x, const Var& weight, const Var& bias) { return add(matmul(x, weight), bias); }

// ---------------------------------------------------------------------------
// Normalisation, softmax, losses
// ---------------------------------------------------------------------------

namespace detail {

inline void softmax_into(const Tensor& v, const AxisSplit& s, Tensor& out) {
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t i = 0; i < s.inner; ++i) {
      auto at = [&](std::size_t l) { return (o * s.len + l) * s.inner + i; };
      double m = -std::numeric_limits<double>::infinity();
      for (std::size_t l = 0; l < s.len; ++l) m = std::max(m, v[at(l)]);
      double z = 0.0;
      for (std::size_t l = 0; l < s.len; ++l) z += (out[at(l)] = std::exp(v[at(l)] - m));
      for (std::size_t l = 0; l < s.len; ++l) out[at(l)] /= z;
    }
}

}  // namespace detail

/// Softmax along `axis`, with the per-slice maximum subtracted first.
inline Var softmax(const Var& x, int axis) {
  const Tensor& v = x.value();
  const auto s = detail::split_axis(v.shape(), v.normalize_axis(axis));
  Tensor out(v.shape());
  detail::softmax_into(v, s, out);
  return x.tape()->record("softmax", std::move(out), {x}, [x, s](const Tensor& g, std::span<Tensor* const> grads) {
    Tensor yv(x.value().shape());
    detail::softmax_into(x.value(), s, yv);
    auto gx = grads[0]->data();
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t i = 0; i < s.inner; ++i) {
        auto at = [&](std::size_t l) { return (o * s.len + l) * s.inner + i; };
        double dot = 0.0;
        for (std::size_t l = 0; l < s.len; ++l) dot += g[at(l)] * yv[at(l)];
        for (std::size_t l = 0; l < s.len; ++l) gx[at(l)] += yv[at(l)] * (g[at(l)] - dot);
      }
  });
}

/// Mean over the batch of -log softmax(logits)[label], via log-sum-exp.
inline Var cross_entropy(const Var& logits, std::span<const int> labels) {
  const Tensor& v = logits.value();
  if (v.rank() != 2) throw ShapeError("cross_entropy expects (B, C) logits, got " + shape_str(v.shape()));
  const std::size_t batch = v.dim(0);
  const std::size_t classes = v.dim(1);
  if (labels.size() != batch) {
    throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for batch of " + std::to_string(batch));
  }
  std::vector<int> lab(labels.begin(), labels.end());
  for (int l : lab) {
    if (l < 0 || static_cast<std::size_t>(l) >= classes) {
      throw DomainError("cross_entropy: label " + std::to_string(l) + " outside [0, " + std::to_string(classes) + ")");
    }
  }
  Tensor probs(v.shape());
  double total = 0.0;
  for (std::size_t b = 0; b < batch; ++b) {
    double m = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < classes; ++c) m = std::max(m, v[b * classes + c]);
    double z = 0.0;
    for (std::size_t c = 0; c < classes; ++c) z += (probs[b * classes + c] = std::exp(v[b * classes + c] - m));
    for (std::size_t c = 0; c < classes; ++c) probs[b * classes + c] /= z;
    total += m + std::log(z) - v[b * classes + static_cast<std::size_t>(lab[b])];
  }
  const double inv_b = 1.0 / static_cast<double>(batch);
  return logits.tape()->record(
      "cross_entropy", Tensor::scalar(total * inv_b), {logits},
      [probs = std::move(probs), lab = std::move(lab), batch, classes, inv_b](const Tensor& g, std::span<Tensor* const> grads) {
        auto gx = grads[0]->data();
        const double gs = g.item() * inv_b;
        for (std::size_t b = 0; b < batch; ++b)
          for (std::size_t c = 0; c < classes; ++c) {
            const double onehot = static_cast<int>(c) == lab[b] ? 1.0 : 0.0;
            gx[b * classes + c] += gs * (probs[b * classes + c] - onehot);
          }
      });
}

/// Normalises over the last axis then applies a learned scale and shift.
inline Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5) {
  const Tensor& v = x.value();
  const std::size_t c = v.dim(-1);
  if (gamma.value().numel() != c || beta.value().numel() != c) {
    throw ShapeError("layer_norm: affine params do not match channel count of " + shape_str(v.shape()));
  }
  const std::size_t rows = v.numel() / c;
  Tensor xhat(v.shape());
  std::vector<double> inv_std(rows);
  Tensor out(v.shape());
  const auto gm = gamma.value().data();
  const auto bt = beta.value().data();
  for (std::size_t r = 0; r < rows; ++r) {
    double mu = 0.0;
    for (std::size_t j = 0; j < c; ++j) mu += v[r * c + j];
    mu /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t j = 0; j < c; ++j) var += (v[r * c + j] - mu) * (v[r * c + j] - mu);
    var /= static_cast<double>(c);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < c; ++j) {
      xhat[r * c + j] = (v[r * c + j] - mu) * inv_std[r];
      out[r * c + j] = xhat[r * c + j] * gm[j] + bt[j];
    }
  }
  Tape& tape = *x.tape();
  return tape.record("layer_norm", std::move(out), {x, gamma, beta},
                     [gamma, xhat = std::move(xhat), inv_std = std::move(inv_std), rows, c](
                         const Tensor& g, std::span<Tensor* const> grads) {
                       const auto gm = gamma.value().data();
                       if (grads[1] || grads[2]) {
                         for (std::size_t r = 0; r < rows; ++r)
                           for (std::size_t j = 0; j < c; ++j) {
                             if (grads[1]) (*grads[1])[j] += g[r * c + j] * xhat[r * c + j];
                             if (grads[2]) (*grads[2])[j] += g[r * c + j];
                           }
                       }
                       if (!grads[0]) return;
                       auto gx = grads[0]->data();
                       const double inv_c = 1.0 / static_cast<double>(c);
                       for (std::size_t r = 0; r < rows; ++r) {
                         double mean_g = 0.0;
                         double mean_gx = 0.0;
                         for (std::size_t j = 0; j < c; ++j) {
                           const double gh = g[r * c + j] * gm[j];
                           mean_g += gh;
                           mean_gx += gh * xhat[r * c + j];
                         }
                         mean_g *= inv_c;
                         mean_gx *= inv_c;
                         for (std::size_t j = 0; j < c; ++j) {
                           const double gh = g[r * c + j] * gm[j];
                           gx[r * c + j] += inv_std[r] * (gh - mean_g - xhat[r * c + j] * mean_gx);
                         }
                       }
                     });
}

/// Per-channel causal convolution over the sequence axis of a (B, N, M) value.
/// Output position t sees inputs t-W+1 .. t, with zeros to the left of 0;
/// kernel tap W-1 multiplies the current position.
inline Var depthwise_causal_conv1d(const Var& x, const Var& kernels) {
  const Tensor& xv = x.value();
  const Tensor& kv = kernels.value();
  if (xv.rank() != 3) throw ShapeError("conv1d expects (B, N, M) input, got " + shape_str(xv.shape()));
  if (kv.rank() != 2 || kv.dim(0) != xv.dim(2) || kv.dim(1) < 1) {
    throw ShapeError("conv1d: kernels " + shape_str(kv.shape()) + " do not match channels of " + shape_str(xv.shape()));
  }
  const std::size_t B = xv.dim(0), N = xv.dim(1), M = xv.dim(2), W = kv.dim(1);
  Tensor out(xv.shape());
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t t = 0; t < N; ++t)
      for (std::size_t m = 0; m < M; ++m) {
        double acc = 0.0;
        for (std::size_t w = 0; w < W; ++w) {
          const std::size_t lag = W - 1 - w;
          if (lag > t) continue;
          acc += kv[m * W + w] * xv[(b * N + t - lag) * M + m];
        }
        out[(b * N + t) * M + m] = acc;
      }
  Tape& tape = detail::same_tape(x, kernels, "conv1d");
  return tape.record("conv1d", std::move(out), {x, kernels}, [x, kernels, B, N, M, W](const Tensor& g, std::span<Tensor* const> grads) {
    const Tensor& xv = x.value();
    const Tensor& kv = kernels.value();
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t t = 0; t < N; ++t)
        for (std::size_t m = 0; m < M; ++m) {
          const double gout = g[(b * N + t) * M + m];
          for (std::size_t w = 0; w < W; ++w) {
            const std::size_t lag = W - 1 - w;
            if (lag > t) continue;
            const std::size_t xi = (b * N + t - lag) * M + m;
            if (grads[0]) (*grads[0])[xi] += gout * kv[m * W + w];
            if (grads[1]) (*grads[1])[m * W + w] += gout * xv[xi];
          }
        }
  });
}

/// Random generator used for every stochastic op; passed explicitly so
/// callers control reproducibility.
using Rng = std::mt19937_64;

/// Uniform double in [0, 1) built from the top 53 bits of one draw.
inline double uniform01(Rng& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

/// Inverted dropout. Identity in eval mode or at rate 0.
inline Var dropout(const Var& x, double rate, bool train, Rng& rng) {
  if (rate < 0.0 || rate >= 1.0) throw DomainError("dropout rate must lie in [0, 1)");
  if (!train || rate == 0.0) return x;
  const double keep_scale = 1.0 / (1.0 - rate);
  std::vector<double> mask(x.value().numel());
  for (double& m : mask) m = uniform01(rng) < rate ? 0.0 : keep_scale;
  Tensor out = x.value();
  for (std::size_t i = 0; i < mask.size(); ++i) out[i] *= mask[i];
  return x.tape()->record("dropout", std::move(out), {x}, [mask = std::move(mask)](const Tensor& g, std::span<Tensor* const> grads) {
    auto gx = grads[0]->data();
    for (std::size_t i = 0; i < mask.size(); ++i) gx[i] += g[i] * mask[i];
  });
}

}  // namespace shmamba
