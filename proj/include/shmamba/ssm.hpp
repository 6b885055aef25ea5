#pragma once

#include <cmath>
#include <cstddef>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "shmamba/error.hpp"
#include "shmamba/ops.hpp"
#include "shmamba/params.hpp"
#include "shmamba/tape.hpp"
#include "shmamba/tensor.hpp"

namespace shmamba::ssm {

/// Width settings of one selective-scan block.
struct SsmDims {
  std::size_t channels = 64;   ///< C: model width entering and leaving the block
  std::size_t state = 16;      ///< L: state size per channel
  std::size_t conv_width = 4;  ///< W: causal depthwise kernel length
  std::size_t expansion = 2;   ///< M = expansion * C

  std::size_t inner() const { return expansion * channels; }
};

// ---------------------------------------------------------------------------
// Zero-order-hold discretisation
// ---------------------------------------------------------------------------

/// Below this |delta * A| the (exp(u) - 1)/u factor switches to its series.
inline constexpr double kZohSeriesThreshold = 1e-4;

/// phi(u) = (exp(u) - 1) / u and its derivative.
inline double zoh_phi(double u) {
  if (std::abs(u) < kZohSeriesThreshold) return 1.0 + u * (0.5 + u / 6.0);
  return std::expm1(u) / u;
}

inline double zoh_phi_derivative(double u) {
  if (std::abs(u) < kZohSeriesThreshold) return 0.5 + u * (1.0 / 3.0 + u / 8.0);
  return (u * std::exp(u) - std::expm1(u)) / (u * u);
}

struct Discretized {
  Var a_bar;  ///< (B, N, M, L)
  Var b_bar;  ///< (B, N, M, L)
};

/// Exact zero-order hold: A_bar = exp(delta A), B_bar = phi(delta A) delta B,
/// broadcasting delta (B, N, M), A (M, L) and B (B, N, L) to (B, N, M, L).
inline Discretized zoh_discretize(const Var& delta, const Var& a, const Var& b) {
  const Tensor& dv = delta.value();
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (dv.rank() != 3 || av.rank() != 2 || bv.rank() != 3 || av.dim(0) != dv.dim(2) || bv.dim(0) != dv.dim(0) ||
      bv.dim(1) != dv.dim(1) || bv.dim(2) != av.dim(1)) {
    throw ShapeError("zoh_discretize: incompatible delta " + shape_str(dv.shape()) + ", A " + shape_str(av.shape()) +
                     ", B " + shape_str(bv.shape()));
  }
  for (double d : dv.data()) {
    if (!(d > 0.0)) throw DomainError("zoh_discretize: non-positive step size " + std::to_string(d));
  }
  const std::size_t B = dv.dim(0), N = dv.dim(1), M = dv.dim(2), L = av.dim(1);
  const Shape shape{B, N, M, L};
  // exp(u) and phi(u) are kept for the backward pass.
  auto saved = std::make_shared<std::pair<Tensor, Tensor>>(Tensor(shape), Tensor(shape));
  Tensor& expu = saved->first;
  Tensor& phis = saved->second;
  Tensor b_bar(shape);
  for (std::size_t bn = 0; bn < B * N; ++bn)
    for (std::size_t m = 0; m < M; ++m) {
      const double d = dv[bn * M + m];
      for (std::size_t l = 0; l < L; ++l) {
        const double u = d * av[m * L + l];
        const std::size_t o = (bn * M + m) * L + l;
        expu[o] = std::exp(u);
        phis[o] = std::abs(u) < kZohSeriesThreshold ? 1.0 + u * (0.5 + u / 6.0) : std::expm1(u) / u;
        b_bar[o] = phis[o] * d * bv[bn * L + l];
      }
    }
  Tape& tape = *delta.tape();
  if (a.tape() != &tape || b.tape() != &tape) throw Error("zoh_discretize: operands must live on the same tape");

  Var a_out = tape.record("zoh.a_bar", Tensor(expu), {delta, a},
                          [delta, a, saved, B, N, M, L](const Tensor& g, std::span<Tensor* const> grads) {
                            const Tensor& dv = delta.value();
                            const Tensor& av = a.value();
                            const Tensor& expu = saved->first;
                            for (std::size_t bn = 0; bn < B * N; ++bn)
                              for (std::size_t m = 0; m < M; ++m) {
                                const double d = dv[bn * M + m];
                                double gd = 0.0;
                                for (std::size_t l = 0; l < L; ++l) {
                                  const std::size_t o = (bn * M + m) * L + l;
                                  const double e = expu[o] * g[o];
                                  gd += e * av[m * L + l];
                                  if (grads[1]) (*grads[1])[m * L + l] += e * d;
                                }
                                if (grads[0]) (*grads[0])[bn * M + m] += gd;
                              }
                          });
  Var b_out = tape.record("zoh.b_bar", std::move(b_bar), {delta, a, b},
                          [delta, a, b, saved, B, N, M, L](const Tensor& g, std::span<Tensor* const> grads) {
                            const Tensor& dv = delta.value();
                            const Tensor& av = a.value();
                            const Tensor& bv = b.value();
                            const Tensor& expu = saved->first;
                            const Tensor& phis = saved->second;
                            for (std::size_t bn = 0; bn < B * N; ++bn)
                              for (std::size_t m = 0; m < M; ++m) {
                                const double d = dv[bn * M + m];
                                double gd = 0.0;
                                for (std::size_t l = 0; l < L; ++l) {
                                  const std::size_t o = (bn * M + m) * L + l;
                                  const double A = av[m * L + l];
                                  const double Bv = bv[bn * L + l];
                                  const double u = d * A;
                                  const double phi = phis[o];
                                  // phi'(u) = (exp(u) - phi(u)) / u away from 0
                                  const double dphi = std::abs(u) < kZohSeriesThreshold ? zoh_phi_derivative(u)
                                                                                         : (expu[o] - phi) / u;
                                  const double go = g[o];
                                  gd += go * (dphi * A * d * Bv + phi * Bv);
                                  if (grads[1]) (*grads[1])[m * L + l] += go * dphi * d * d * Bv;
                                  if (grads[2]) (*grads[2])[bn * L + l] += go * phi * d;
                                }
                                if (grads[0]) (*grads[0])[bn * M + m] += gd;
                              }
                          });
  return {a_out, b_out};
}

// ---------------------------------------------------------------------------
// Selective scans
// ---------------------------------------------------------------------------

/// Discretised, input-dependent system for one scan.
struct ScanInputs {
  Tensor a_bar;  ///< (B, N, M, L), entries in (0, 1) for a stable system
  Tensor b_bar;  ///< (B, N, M, L)
  Tensor c;      ///< (B, N, L)
  Tensor x;      ///< (B, N, M)

  struct Dims {
    std::size_t batch, length, channels, state;
  };

  Dims dims() const {
    if (a_bar.rank() != 4 || b_bar.shape() != a_bar.shape() || c.rank() != 3 || x.rank() != 3) {
      throw ShapeError("scan: expected A_bar/B_bar (B,N,M,L), C (B,N,L), x (B,N,M); got " + shape_str(a_bar.shape()) +
                       ", " + shape_str(b_bar.shape()) + ", " + shape_str(c.shape()) + ", " + shape_str(x.shape()));
    }
    const Dims d{a_bar.dim(0), a_bar.dim(1), a_bar.dim(2), a_bar.dim(3)};
    if (c.shape() != Shape{d.batch, d.length, d.state} || x.shape() != Shape{d.batch, d.length, d.channels}) {
      throw ShapeError("scan: C " + shape_str(c.shape()) + " or x " + shape_str(x.shape()) +
                       " inconsistent with A_bar " + shape_str(a_bar.shape()));
    }
    return d;
  }
};

/// Literal recurrence h_t = A_bar_t h_{t-1} + B_bar_t x_t, y_t = <C_t, h_t>,
/// from h_0 = 0. Optionally records every state into `states` (B, N, M, L).
inline Tensor selective_scan_naive(const ScanInputs& s, Tensor* states = nullptr) {
  const auto [B, N, M, L] = s.dims();
  Tensor y(Shape{B, N, M});
  if (states) *states = Tensor(s.a_bar.shape());
  std::vector<double> h(M * L);
  for (std::size_t b = 0; b < B; ++b) {
    std::fill(h.begin(), h.end(), 0.0);
    for (std::size_t t = 0; t < N; ++t) {
      const std::size_t bt = b * N + t;
      for (std::size_t m = 0; m < M; ++m) {
        const double xv = s.x[bt * M + m];
        double acc = 0.0;
        for (std::size_t l = 0; l < L; ++l) {
          const std::size_t o = (bt * M + m) * L + l;
          double& hv = h[m * L + l];
          hv = s.a_bar[o] * hv + s.b_bar[o] * xv;
          acc += s.c[bt * L + l] * hv;
        }
        y[bt * M + m] = acc;
      }
      if (states) std::copy(h.begin(), h.end(), states->data().begin() + static_cast<std::ptrdiff_t>(bt * M * L));
    }
  }
  return y;
}

/// Chunked form of the same recurrence. Each chunk is first scanned from a
/// zero state, keeping only its final local state and the product of its
/// A_bar terms; a short pass over chunk boundaries then propagates the true
/// carried state, and each chunk is re-scanned from its carried-in state to
/// produce outputs. The first and last passes touch each chunk independently
/// and only boundary states are stored.
inline Tensor selective_scan_chunked(const ScanInputs& s, std::size_t chunk) {
  if (chunk < 1) throw DomainError("selective_scan_chunked: chunk must be >= 1");
  const auto [B, N, M, L] = s.dims();
  const std::size_t ML = M * L;
  const std::size_t n_chunks = (N + chunk - 1) / chunk;
  Tensor y(Shape{B, N, M});
  std::vector<double> h_end(n_chunks * ML);
  std::vector<double> prod_end(n_chunks * ML);
  std::vector<double> carry((n_chunks + 1) * ML);
  std::vector<double> h(ML);

  for (std::size_t b = 0; b < B; ++b) {
    const double* a_bar = s.a_bar.data().data() + b * N * ML;
    const double* b_bar = s.b_bar.data().data() + b * N * ML;
    const double* xs = s.x.data().data() + b * N * M;
    const double* cs = s.c.data().data() + b * N * L;

    // Local scans from zero state, independent per chunk.
    for (std::size_t k = 0; k < n_chunks; ++k) {
      const std::size_t t0 = k * chunk;
      const std::size_t t1 = std::min(N, t0 + chunk);
      double* hk = h_end.data() + k * ML;
      double* pk = prod_end.data() + k * ML;
      std::fill(hk, hk + ML, 0.0);
      std::fill(pk, pk + ML, 1.0);
      for (std::size_t t = t0; t < t1; ++t) {
        for (std::size_t m = 0; m < M; ++m) {
          const double xv = xs[t * M + m];
          for (std::size_t l = 0; l < L; ++l) {
            const std::size_t j = m * L + l;
            const std::size_t i = t * ML + j;
            hk[j] = a_bar[i] * hk[j] + b_bar[i] * xv;
            pk[j] *= a_bar[i];
          }
        }
      }
    }

    // Carry the state across chunk boundaries.
    std::fill(carry.begin(), carry.begin() + static_cast<std::ptrdiff_t>(ML), 0.0);
    for (std::size_t k = 0; k < n_chunks; ++k) {
      for (std::size_t j = 0; j < ML; ++j) {
        carry[(k + 1) * ML + j] = h_end[k * ML + j] + prod_end[k * ML + j] * carry[k * ML + j];
      }
    }

    // Re-scan each chunk from its carried-in state and read out.
    for (std::size_t k = 0; k < n_chunks; ++k) {
      const std::size_t t0 = k * chunk;
      const std::size_t t1 = std::min(N, t0 + chunk);
      std::copy_n(carry.data() + k * ML, ML, h.data());
      for (std::size_t t = t0; t < t1; ++t) {
        for (std::size_t m = 0; m < M; ++m) {
          const double xv = xs[t * M + m];
          double acc = 0.0;
          for (std::size_t l = 0; l < L; ++l) {
            const std::size_t j = m * L + l;
            const std::size_t i = t * ML + j;
            h[j] = a_bar[i] * h[j] + b_bar[i] * xv;
            acc += cs[t * L + l] * h[j];
          }
          y[(b * N + t) * M + m] = acc;
        }
      }
    }
  }
  return y;
}

/// Differentiable scan. Forward uses the chunked form when `chunk` > 0 and the
/// literal recurrence otherwise; backward runs the adjoint recurrence.
inline Var selective_scan(const Var& a_bar, const Var& b_bar, const Var& c, const Var& x, std::size_t chunk = 0) {
  ScanInputs in{a_bar.value(), b_bar.value(), c.value(), x.value()};
  const auto dims = in.dims();
  Tensor y = chunk > 0 ? selective_scan_chunked(in, chunk) : selective_scan_naive(in);
  Tape& tape = *a_bar.tape();
  return tape.record("selective_scan", std::move(y), {a_bar, b_bar, c, x},
                     [a_bar, b_bar, c, x, dims](const Tensor& g, std::span<Tensor* const> grads) {
                       const auto [B, N, M, L] = dims;
                       ScanInputs in{a_bar.value(), b_bar.value(), c.value(), x.value()};
                       Tensor h;
                       selective_scan_naive(in, &h);
                       std::vector<double> carry(M * L);
                       for (std::size_t b = 0; b < B; ++b) {
                         std::fill(carry.begin(), carry.end(), 0.0);
                         for (std::size_t t = N; t-- > 0;) {
                           const std::size_t bt = b * N + t;
                           for (std::size_t m = 0; m < M; ++m) {
                             const double gy = g[bt * M + m];
                             const double xv = in.x[bt * M + m];
                             double gx = 0.0;
                             for (std::size_t l = 0; l < L; ++l) {
                               const std::size_t o = (bt * M + m) * L + l;
                               const double d = gy * in.c[bt * L + l] + carry[m * L + l];
                               const double h_prev = t > 0 ? h[o - M * L] : 0.0;
                               if (grads[0]) (*grads[0])[o] += d * h_prev;
                               if (grads[1]) (*grads[1])[o] += d * xv;
                               if (grads[2]) (*grads[2])[bt * L + l] += gy * h[o];
                               gx += d * in.b_bar[o];
                               carry[m * L + l] = d * in.a_bar[o];
                             }
                             if (grads[3]) (*grads[3])[bt * M + m] += gx;
                           }
                         }
                       }
                     });
}

// ---------------------------------------------------------------------------
// Mamba block
// ---------------------------------------------------------------------------

/// Input-dependent SSM core shared by the Mamba block and each fusion branch.
struct SsmCore {
  Var conv;          ///< (M, W)
  LinearParams b_proj;  ///< M -> L
  LinearParams c_proj;  ///< M -> L
  Var delta_weight;  ///< (M, M)
  Var delta_bias;    ///< (M)
  Var a_log;         ///< (M, L); A = -exp(a_log) stays strictly negative
};

struct SsmParams {
  LinearParams in_proj_x;  ///< C -> M
  LinearParams in_proj_z;  ///< C -> M
  SsmCore core;
  LinearParams out_proj;   ///< M -> C
};

/// Intermediates of one selective branch, kept for inspection in tests.
struct BranchTrace {
  Var conv_act;  ///< x' = SiLU(conv(x))
  Var b;
  Var c;
  Var delta;
  Var a;
  Discretized disc;
  Var y;
};

inline Var state_matrix(const SsmCore& core) { return -exp(core.a_log); }

/// conv + SiLU, B/C/delta projections, discretisation and scan of (B, N, M) input.
inline BranchTrace selective_branch(const Var& x, const SsmCore& core, std::size_t chunk = 0) {
  BranchTrace tr;
  tr.conv_act = silu(depthwise_causal_conv1d(x, core.conv));
  tr.b = apply(core.b_proj, tr.conv_act);
  tr.c = apply(core.c_proj, tr.conv_act);
  tr.delta = softplus(matmul(tr.conv_act, core.delta_weight) + core.delta_bias);
  tr.a = state_matrix(core);
  tr.disc = zoh_discretize(tr.delta, tr.a, tr.b);
  tr.y = selective_scan(tr.disc.a_bar, tr.disc.b_bar, tr.c, tr.conv_act, chunk);
  return tr;
}

/// One Mamba block over a (B, N, C) token sequence, with residual output.
inline Var mamba_block_forward(const Var& tokens, const SsmParams& p, const LayerNormParams& norm,
                               std::size_t chunk = 0) {
  if (tokens.rank() != 3) throw ShapeError("mamba_block_forward expects (B, N, C), got " + shape_str(tokens.shape()));
  if (p.in_proj_x.weight.dim(0) != tokens.dim(2)) {
    throw ShapeError("mamba_block_forward: block width " + std::to_string(p.in_proj_x.weight.dim(0)) +
                     " does not match input " + shape_str(tokens.shape()));
  }
  const Var normed = layer_norm(tokens, norm.gamma, norm.beta, 1e-5);
  const Var x = apply(p.in_proj_x, normed);
  const Var z = apply(p.in_proj_z, normed);
  const Var y = selective_branch(x, p.core, chunk).y;
  const Var gated = y * silu(z);
  return apply(p.out_proj, gated) + tokens;
}

// ---------------------------------------------------------------------------
// Initialisation and binding
// ---------------------------------------------------------------------------

/// softplus^{-1}(y) = y + log(-expm1(-y)).
inline double inverse_softplus(double y) { return y + std::log(-std::expm1(-y)); }

inline constexpr double kDeltaInitMin = 1e-3;
inline constexpr double kDeltaInitMax = 1e-1;

inline void init_ssm_core(ParameterSet& ps, const std::string& prefix, const SsmDims& d, Rng& rng) {
  const std::size_t M = d.inner();
  const std::size_t L = d.state;
  const std::size_t W = d.conv_width;
  ps.add(prefix + ".conv.weight", uniform_tensor(Shape{M, W}, 1.0 / std::sqrt(static_cast<double>(W)), rng));
  init_linear(ps, prefix + ".b_proj", M, L, rng);
  init_linear(ps, prefix + ".c_proj", M, L, rng);
  ps.add(prefix + ".delta_proj.weight", uniform_tensor(Shape{M, M}, 1.0 / std::sqrt(static_cast<double>(M)), rng));
  Tensor delta_bias(Shape{M});
  for (double& v : delta_bias.data()) {
    v = inverse_softplus(kDeltaInitMin + (kDeltaInitMax - kDeltaInitMin) * uniform01(rng));
  }
  ps.add(prefix + ".delta_proj.bias", std::move(delta_bias));
  Tensor a_log(Shape{M, L});
  for (std::size_t m = 0; m < M; ++m)
    for (std::size_t l = 0; l < L; ++l) a_log[m * L + l] = std::log(static_cast<double>(l + 1));
  ps.add(prefix + ".a_log", std::move(a_log));
}

inline SsmCore bind_ssm_core(const BoundParameters& bp, const std::string& prefix) {
  return SsmCore{bp(prefix + ".conv.weight"),       bind_linear(bp, prefix + ".b_proj"),
                 bind_linear(bp, prefix + ".c_proj"), bp(prefix + ".delta_proj.weight"),
                 bp(prefix + ".delta_proj.bias"),    bp(prefix + ".a_log")};
}

inline void init_mamba_block(ParameterSet& ps, const std::string& prefix, const SsmDims& d, Rng& rng) {
  const std::size_t C = d.channels;
  const std::size_t M = d.inner();
  init_layer_norm(ps, prefix + ".norm", C);
  init_linear(ps, prefix + ".in_proj_x", C, M, rng);
  init_linear(ps, prefix + ".in_proj_z", C, M, rng);
  init_ssm_core(ps, prefix, d, rng);
  init_linear(ps, prefix + ".out_proj", M, C, rng);
}

struct MambaBlockBinding {
  SsmParams ssm;
  LayerNormParams norm;
};

inline MambaBlockBinding bind_mamba_block(const BoundParameters& bp, const std::string& prefix) {
  return MambaBlockBinding{SsmParams{bind_linear(bp, prefix + ".in_proj_x"), bind_linear(bp, prefix + ".in_proj_z"),
                                     bind_ssm_core(bp, prefix), bind_linear(bp, prefix + ".out_proj")},
                           bind_layer_norm(bp, prefix + ".norm")};
}

/// Learnable scalars of the SSM core: conv M*W, B and C projections
/// 2(M*L + L), delta projection M*M + M, A M*L.
inline constexpr std::size_t ssm_core_param_count(std::size_t M, std::size_t L, std::size_t W) {
  return M * W + 2 * (M * L + L) + M * M + M + M * L;
}

/// Learnable scalars of one Mamba block:
///   norm 2C + in projections 2(C*M + M) + core + out projection M*C + C.
inline constexpr std::size_t mamba_block_param_count(const SsmDims& d) {
  const std::size_t C = d.channels;
  const std::size_t M = d.expansion * d.channels;
  return 2 * C + 2 * (C * M + M) + ssm_core_param_count(M, d.state, d.conv_width) + M * C + C;
}

}  // namespace shmamba::ssm
