#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "shmamba/error.hpp"
#include "shmamba/ops.hpp"
#include "shmamba/tape.hpp"
#include "shmamba/tensor.hpp"

/// Poincare-ball geometry used by the audio-visual alignment branch.
///
/// The ball of curvature k < 0 is the open set ||x|| < 1/sqrt(|k|). Points are
/// stored row-wise: the last axis holds coordinates, leading axes index
/// independent points. Every operation here records onto the tape so the
/// curvature itself can be learned.
namespace shmamba::hyperbolic {

inline constexpr double kDefaultBallEps = 1e-5;
inline constexpr double kDefaultK0 = -0.1;

/// Largest arctanh argument tolerated for points that came out of the projection.
inline constexpr double kBoundaryClamp = 1.0 - 1e-12;

struct Curvature {
  Var k;  ///< rank-0, strictly negative
  double eps = kDefaultBallEps;
  double k0 = kDefaultK0;

  double value() const { return k.item(); }
  double abs_k() const { return -k.item(); }
  /// Radius points are clipped to: (1 - eps) / sqrt(|k|).
  double clip_radius() const { return (1.0 - eps) / std::sqrt(abs_k()); }

  static Curvature of(Var k, double eps = kDefaultBallEps, double k0 = kDefaultK0) {
    Curvature c{k, eps, k0};
    c.validate();
    return c;
  }

  /// A curvature that is a constant of the tape (no gradient).
  static Curvature fixed(Tape& tape, double k, double eps = kDefaultBallEps, double k0 = kDefaultK0) {
    return of(tape.constant(Tensor::scalar(k)), eps, k0);
  }

  void validate() const {
    if (k.value().numel() != 1) throw ShapeError("curvature must be a scalar");
    if (!(value() < 0.0)) throw DomainError("curvature must be negative, got " + std::to_string(value()));
    if (!(eps > 0.0 && eps < 1e-2)) throw DomainError("ball eps must lie in (0, 1e-2)");
    if (!(k0 < 0.0)) throw DomainError("initial curvature k0 must be negative");
  }

  bool same_as(const Curvature& other) const {
    if (k.tape() == other.k.tape() && k.id() == other.k.id()) return eps == other.eps;
    return value() == other.value() && eps == other.eps;
  }
};

struct PoincarePoint {
  Var v;
  Curvature curvature;
  /// True when produced by project_to_ball, which guarantees interiority.
  bool projected = false;

  /// Wraps raw coordinates without checking that they lie inside the ball.
  static PoincarePoint unchecked(Var v, Curvature c) { return PoincarePoint{v, c, false}; }
};

struct TangentVector {
  Var v;
  Curvature curvature;
};

struct SimilarityMatrix {
  Var w;
};

enum class SimilarityNorm { row_l2, frobenius };

inline const char* to_string(SimilarityNorm n) { return n == SimilarityNorm::row_l2 ? "row-l2" : "frobenius"; }

inline SimilarityNorm similarity_norm_from_string(const std::string& s) {
  if (s == "row-l2" || s == "row_l2") return SimilarityNorm::row_l2;
  if (s == "frobenius") return SimilarityNorm::frobenius;
  throw ConfigError("unknown similarity normalisation '" + s + "'");
}

namespace detail {

struct Rows {
  std::size_t count;
  std::size_t width;
};

inline Rows rows_of(const Tensor& t) {
  if (t.rank() < 1 || t.dim(-1) == 0) throw ShapeError("expected coordinates on the last axis, got " + shape_str(t.shape()));
  return {t.numel() / t.dim(-1), t.dim(-1)};
}

inline double row_dot(std::span<const double> a, std::span<const double> b, std::size_t row, std::size_t width) {
  double acc = 0.0;
  for (std::size_t j = 0; j < width; ++j) acc += a[row * width + j] * b[row * width + j];
  return acc;
}

/// Radial maps at the origin have the form y = f(u) x with u = sqrt(|k|) ||x||.
/// `h(u)` is f'(u) / u, which stays finite at u = 0.
struct RadialProfile {
  double (*f)(double);
  double (*h)(double);
  const char* name;
};

inline double atanh_ratio(double u) { return u == 0.0 ? 1.0 : std::atanh(u) / u; }

inline double atanh_ratio_h(double u) {
  if (u < 1e-3) {
    const double u2 = u * u;
    return 2.0 / 3.0 + u2 * (4.0 / 5.0 + u2 * 6.0 / 7.0);
  }
  return (u / (1.0 - u * u) - std::atanh(u)) / (u * u * u);
}

inline double tanh_ratio(double u) { return u == 0.0 ? 1.0 : std::tanh(u) / u; }

inline double tanh_ratio_h(double u) {
  if (u < 1e-3) {
    const double u2 = u * u;
    return -2.0 / 3.0 + u2 * (8.0 / 15.0 - u2 * 34.0 / 105.0);
  }
  const double t = std::tanh(u);
  return (u * (1.0 - t * t) - t) / (u * u * u);
}

inline constexpr RadialProfile kLogProfile{&atanh_ratio, &atanh_ratio_h, "log_map_zero"};
inline constexpr RadialProfile kExpProfile{&tanh_ratio, &tanh_ratio_h, "exp_map_zero"};

/// y = f(s r) x per row, differentiable in x and k. `max_u` bounds the radial
/// argument: arguments above it are a domain error unless `clamp` is set.
inline Var radial_map(const Var& x, const Var& k, const RadialProfile& profile, double max_u, bool clamp) {
  const Tensor& xv = x.value();
  const auto [rows, width] = rows_of(xv);
  const double s = std::sqrt(-k.item());
  std::vector<double> us(rows);
  Tensor out(xv.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    double u = s * std::sqrt(row_dot(xv.data(), xv.data(), r, width));
    if (u >= max_u) {
      if (!clamp) {
        throw DomainError(std::string(profile.name) + ": point outside the ball (sqrt|k|*||x|| = " +
                          std::to_string(u) + ")");
      }
      u = max_u;
    }
    us[r] = u;
    const double f = profile.f(u);
    for (std::size_t j = 0; j < width; ++j) out[r * width + j] = f * xv[r * width + j];
  }
  Tape& tape = shmamba::detail::same_tape(x, k, profile.name);
  return tape.record(profile.name, std::move(out), {x, k},
                     [x, s, us = std::move(us), profile, rows, width](const Tensor& g, std::span<Tensor* const> grads) {
                       const auto xv = x.value().data();
                       const auto gd = g.data();
                       double gk = 0.0;
                       for (std::size_t r = 0; r < rows; ++r) {
                         const double u = us[r];
                         const double f = profile.f(u);
                         const double h = profile.h(u);
                         const double xg = row_dot(xv, gd, r, width);
                         if (grads[0]) {
                           auto gx = grads[0]->data();
                           for (std::size_t j = 0; j < width; ++j) {
                             gx[r * width + j] += f * gd[r * width + j] + xg * h * s * s * xv[r * width + j];
                           }
                         }
                         const double r2 = (u / s) * (u / s);
                         gk += -0.5 * xg * h * r2;
                       }
                       if (grads[1]) (*grads[1])[0] += gk;
                     });
}

}  // namespace detail

/// Clips rows whose norm exceeds (1 - eps)/sqrt(|k|) back onto that sphere,
/// preserving direction; interior rows pass through untouched.
inline PoincarePoint project_to_ball(const Var& x, const Curvature& c) {
  const Tensor& xv = x.value();
  const auto [rows, width] = detail::rows_of(xv);
  const double abs_k = c.abs_k();
  const double radius = c.clip_radius();
  std::vector<double> norms(rows);
  std::vector<char> clipped(rows, 0);
  Tensor out = xv;
  for (std::size_t r = 0; r < rows; ++r) {
    norms[r] = std::sqrt(detail::row_dot(xv.data(), xv.data(), r, width));
    if (norms[r] > radius) {
      clipped[r] = 1;
      const double scale = radius / norms[r];
      for (std::size_t j = 0; j < width; ++j) out[r * width + j] = scale * xv[r * width + j];
    }
  }
  Tape& tape = shmamba::detail::same_tape(x, c.k, "project_to_ball");
  Var v = tape.record(
      "project_to_ball", std::move(out), {x, c.k},
      [x, radius, abs_k, norms = std::move(norms), clipped = std::move(clipped), rows, width](
          const Tensor& g, std::span<Tensor* const> grads) {
        const auto xv = x.value().data();
        const auto gd = g.data();
        double gk = 0.0;
        for (std::size_t r = 0; r < rows; ++r) {
          if (!clipped[r]) {
            if (grads[0]) {
              auto gx = grads[0]->data();
              for (std::size_t j = 0; j < width; ++j) gx[r * width + j] += gd[r * width + j];
            }
            continue;
          }
          const double n = norms[r];
          const double xg = detail::row_dot(xv, gd, r, width);
          if (grads[0]) {
            auto gx = grads[0]->data();
            for (std::size_t j = 0; j < width; ++j) {
              gx[r * width + j] += (radius / n) * (gd[r * width + j] - xv[r * width + j] * xg / (n * n));
            }
          }
          gk += (xg / n) * radius / (2.0 * abs_k);
        }
        if (grads[1]) (*grads[1])[0] += gk;
      });
  return PoincarePoint{v, c, true};
}

/// Curvature-aware addition z (+)_k x, re-projected to guard against roundoff.
inline PoincarePoint mobius_add(const PoincarePoint& z, const PoincarePoint& x) {
  if (!z.curvature.same_as(x.curvature)) throw CurvatureMismatchError("mobius_add: operands use different curvatures");
  if (z.v.shape() != x.v.shape()) {
    throw ShapeError("mobius_add: shapes " + shape_str(z.v.shape()) + " and " + shape_str(x.v.shape()) + " differ");
  }
  const Var abs_k = -z.curvature.k;
  const Var zx = sum(z.v * x.v, -1, true);
  const Var xx = sum(square(x.v), -1, true);
  const Var zz = sum(square(z.v), -1, true);
  const Var two_k_zx = 2.0 * (abs_k * zx);
  const Var coef_z = 1.0 + (two_k_zx + abs_k * xx);
  const Var coef_x = 1.0 - abs_k * zz;
  const Var denom = 1.0 + (two_k_zx + (abs_k * abs_k) * (zz * xx));
  const Var sum_v = (coef_z * z.v + coef_x * x.v) / denom;
  return project_to_ball(sum_v, z.curvature);
}

/// Logarithmic map at the origin: artanh(sqrt|k| ||x||) x / (sqrt|k| ||x||).
/// Points outside the ball are a domain error; projected points are clamped
/// just inside the boundary instead.
inline TangentVector log_map_zero(const PoincarePoint& p) {
  Var v = detail::radial_map(p.v, p.curvature.k, detail::kLogProfile, p.projected ? kBoundaryClamp : 1.0, p.projected);
  return TangentVector{v, p.curvature};
}

/// Exponential map at the origin, inverse of log_map_zero.
inline PoincarePoint exp_map_zero(const TangentVector& t) {
  Var v = detail::radial_map(t.v, t.curvature.k, detail::kExpProfile, std::numeric_limits<double>::infinity(), false);
  return PoincarePoint{v, t.curvature, false};
}

/// Conformal factor 2 / (1 - |k| ||z||^2) per row of z.
inline Tensor conformal_factor(const Tensor& z, double abs_k) {
  const auto [rows, width] = detail::rows_of(z);
  Shape shape = z.shape();
  shape.pop_back();
  Tensor out(shape);
  for (std::size_t r = 0; r < rows; ++r) {
    const double nn = detail::row_dot(z.data(), z.data(), r, width);
    const double denom = 1.0 - abs_k * nn;
    if (!(denom > 0.0)) throw DomainError("conformal_factor: point outside the ball");
    out[r] = 2.0 / denom;
  }
  return out;
}

/// Scales each row of a rank-2 value to unit l2 norm.
inline Var l2_normalize_rows(const Var& x) {
  const Tensor& xv = x.value();
  if (xv.rank() != 2) throw ShapeError("l2_normalize_rows expects rank 2, got " + shape_str(xv.shape()));
  const std::size_t rows = xv.dim(0);
  const std::size_t width = xv.dim(1);
  std::vector<double> norms(rows);
  Tensor out(xv.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    norms[r] = std::sqrt(detail::row_dot(xv.data(), xv.data(), r, width));
    if (norms[r] == 0.0) throw DegenerateFeatureError("row " + std::to_string(r) + " has zero norm");
    for (std::size_t j = 0; j < width; ++j) out[r * width + j] = xv[r * width + j] / norms[r];
  }
  Tensor saved = out;
  return x.tape()->record("l2_normalize_rows", std::move(out), {x},
                          [y = std::move(saved), norms = std::move(norms), rows, width](const Tensor& g, std::span<Tensor* const> grads) {
                            auto gx = grads[0]->data();
                            for (std::size_t r = 0; r < rows; ++r) {
                              const double yg = detail::row_dot(y.data(), g.data(), r, width);
                              for (std::size_t j = 0; j < width; ++j) {
                                gx[r * width + j] += (g[r * width + j] - y[r * width + j] * yg) / norms[r];
                              }
                            }
                          });
}

/// Pairwise cosine similarity of the rows of a (B, D) value.
inline SimilarityMatrix cosine_similarity_matrix(const Var& feats) {
  if (feats.rank() != 2) throw ShapeError("cosine_similarity_matrix expects (B, D), got " + shape_str(feats.shape()));
  if (feats.dim(0) < 2) throw ShapeError("cosine_similarity_matrix needs at least two rows");
  Var unit = l2_normalize_rows(feats);
  return SimilarityMatrix{matmul(unit, transpose(unit))};
}

inline Var normalize_similarity(const SimilarityMatrix& m, SimilarityNorm mode) {
  if (mode == SimilarityNorm::row_l2) return l2_normalize_rows(m.w);
  return m.w / sqrt(sum_all(square(m.w)));
}

/// Mean over all B^2 entries of the squared difference of two normalised
/// similarity matrices.
inline Var alignment_from_matrices(const Var& w_visual_norm, const Var& w_audio_norm) {
  if (w_visual_norm.shape() != w_audio_norm.shape()) {
    throw ShapeError("alignment: similarity matrices " + shape_str(w_visual_norm.shape()) + " and " +
                     shape_str(w_audio_norm.shape()) + " differ");
  }
  return mean_all(square(w_visual_norm - w_audio_norm));
}

/// Hyperbolic alignment loss between two (B, T, D) feature streams:
/// temporal mean-pool, project into the ball, map to the tangent space at the
/// origin, compare normalised intra-modal cosine similarities.
inline Var alignment_loss(const Var& v_feats, const Var& a_feats, const Curvature& c,
                          SimilarityNorm norm = SimilarityNorm::row_l2) {
  if (v_feats.shape() != a_feats.shape() || v_feats.rank() != 3) {
    throw ShapeError("alignment_loss expects matching (B, T, D) inputs, got " + shape_str(v_feats.shape()) + " and " +
                     shape_str(a_feats.shape()));
  }
  if (v_feats.dim(0) < 2) throw ShapeError("alignment_loss needs a batch of at least 2");
  auto tangent_similarity = [&](const Var& feats) {
    const PoincarePoint p = project_to_ball(mean(feats, 1), c);
    const TangentVector t = log_map_zero(p);
    return normalize_similarity(cosine_similarity_matrix(t.v), norm);
  };
  return alignment_from_matrices(tangent_similarity(v_feats), tangent_similarity(a_feats));
}

struct CurvatureHead {
  Var weight;  ///< (2D, 1)
  Var bias;    ///< (1)
};

/// Sigmoid output is kept inside [kSigmoidFloor, 1 - kSigmoidFloor] so that
/// k stays strictly between k0 and 0 in floating point.
inline constexpr double kSigmoidFloor = 1e-12;

/// k = k0 * sigmoid(w . [mean(a); mean(v)] + b), pooling over batch and time.
inline Curvature adaptive_curvature(const Var& a, const Var& v, const CurvatureHead& head, double k0,
                                    double eps = kDefaultBallEps) {
  if (a.rank() != 3 || a.shape() != v.shape()) {
    throw ShapeError("adaptive_curvature expects matching (B, T, D) inputs, got " + shape_str(a.shape()) + " and " +
                     shape_str(v.shape()));
  }
  if (!(k0 < 0.0)) throw DomainError("adaptive_curvature: k0 must be negative");
  const std::size_t d = a.dim(2);
  if (head.weight.shape() != Shape{2 * d, 1} || head.bias.value().numel() != 1) {
    throw ShapeError("adaptive_curvature: head weight " + shape_str(head.weight.shape()) + " does not match feature width " +
                     std::to_string(d));
  }
  const Var pooled_a = mean(mean(a, 0), 0);
  const Var pooled_v = mean(mean(v, 0), 0);
  const Var k_av = reshape(concat({pooled_a, pooled_v}, 0), Shape{1, 2 * d});
  const Var logit = reshape(matmul(k_av, head.weight), Shape{}) + reshape(head.bias, Shape{});
  const Var gate = clamp(sigmoid(logit), kSigmoidFloor, 1.0 - kSigmoidFloor);
  return Curvature::of(scale(gate, k0), eps, k0);
}

}  // namespace shmamba::hyperbolic
