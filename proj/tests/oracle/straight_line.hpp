#pragma once

// Plain-loop re-executions of the Mamba block and the cross fusion block.
// Nothing here touches the tape or the library's tensor ops; parameters are
// read as raw row-major arrays.

#include <cmath>
#include <string>
#include <vector>

#include "shmamba/params.hpp"

namespace oracle {

using Vec = std::vector<double>;

struct Seq {
  std::size_t B = 0, N = 0, C = 0;
  Vec v;  // (B, N, C)
  double& at(std::size_t b, std::size_t t, std::size_t c) { return v[(b * N + t) * C + c]; }
  double at(std::size_t b, std::size_t t, std::size_t c) const { return v[(b * N + t) * C + c]; }
};

inline Vec raw(const shmamba::ParameterSet& ps, const std::string& name) {
  const auto d = ps.at(name).data();
  return Vec(d.begin(), d.end());
}

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }
inline double silu(double x) { return x * sigmoid(x); }
inline double softplus(double x) { return std::log1p(std::exp(x)); }

// y = x W + b for one row, W stored (in, out).
inline Vec affine_row(const Vec& x, const Vec& W, const Vec& b) {
  const std::size_t in = x.size(), out = b.size();
  Vec y(b);
  for (std::size_t i = 0; i < in; ++i)
    for (std::size_t o = 0; o < out; ++o) y[o] += x[i] * W[i * out + o];
  return y;
}

inline Vec layer_norm_row(const Vec& x, const Vec& g, const Vec& beta) {
  double mu = 0.0;
  for (double v : x) mu += v;
  mu /= static_cast<double>(x.size());
  double var = 0.0;
  for (double v : x) var += (v - mu) * (v - mu);
  var /= static_cast<double>(x.size());
  Vec y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = (x[i] - mu) / std::sqrt(var + 1e-5) * g[i] + beta[i];
  return y;
}

// Selective branch over one batch row: input proj_x (N, M) -> y (N, M).
struct Core {
  Vec conv, b_w, b_b, c_w, c_b, d_w, d_b, a_log;
  std::size_t M = 0, L = 0, W = 0;
};

inline Core read_core(const shmamba::ParameterSet& ps, const std::string& p) {
  Core c{raw(ps, p + ".conv.weight"),      raw(ps, p + ".b_proj.weight"),     raw(ps, p + ".b_proj.bias"),
         raw(ps, p + ".c_proj.weight"),    raw(ps, p + ".c_proj.bias"),       raw(ps, p + ".delta_proj.weight"),
         raw(ps, p + ".delta_proj.bias"),  raw(ps, p + ".a_log"),             0, 0, 0};
  c.M = c.d_b.size();
  c.L = c.b_b.size();
  c.W = c.conv.size() / c.M;
  return c;
}

inline std::vector<Vec> scan_branch(const std::vector<Vec>& x, const Core& k) {
  const std::size_t N = x.size(), M = k.M, L = k.L, W = k.W;
  // Line: x' = SiLU(Conv1d(x)), causal, tap W-1 on the current step.
  std::vector<Vec> xc(N, Vec(M, 0.0));
  for (std::size_t t = 0; t < N; ++t)
    for (std::size_t m = 0; m < M; ++m) {
      double acc = 0.0;
      for (std::size_t w = 0; w < W; ++w) {
        const std::size_t lag = W - 1 - w;
        if (t >= lag) acc += k.conv[m * W + w] * x[t - lag][m];
      }
      xc[t][m] = silu(acc);
    }
  std::vector<Vec> y(N, Vec(M, 0.0));
  Vec h(M * L, 0.0);
  for (std::size_t t = 0; t < N; ++t) {
    const Vec Bt = affine_row(xc[t], k.b_w, k.b_b);
    const Vec Ct = affine_row(xc[t], k.c_w, k.c_b);
    Vec delta = affine_row(xc[t], k.d_w, k.d_b);
    for (double& d : delta) d = softplus(d);
    for (std::size_t m = 0; m < M; ++m) {
      double ym = 0.0;
      for (std::size_t l = 0; l < L; ++l) {
        const double A = -std::exp(k.a_log[m * L + l]);
        const double u = delta[m] * A;
        const double a_bar = std::exp(u);
        const double b_bar = (u == 0.0 ? 1.0 : std::expm1(u) / u) * delta[m] * Bt[l];
        h[m * L + l] = a_bar * h[m * L + l] + b_bar * xc[t][m];
        ym += Ct[l] * h[m * L + l];
      }
      y[t][m] = ym;
    }
  }
  return y;
}

inline Seq mamba_block(const Seq& in, const shmamba::ParameterSet& ps, const std::string& p) {
  const Vec g = raw(ps, p + ".norm.weight"), beta = raw(ps, p + ".norm.bias");
  const Vec wx = raw(ps, p + ".in_proj_x.weight"), bx = raw(ps, p + ".in_proj_x.bias");
  const Vec wz = raw(ps, p + ".in_proj_z.weight"), bz = raw(ps, p + ".in_proj_z.bias");
  const Vec wo = raw(ps, p + ".out_proj.weight"), bo = raw(ps, p + ".out_proj.bias");
  const Core core = read_core(ps, p);
  Seq out = in;
  for (std::size_t b = 0; b < in.B; ++b) {
    std::vector<Vec> xs(in.N), zs(in.N);
    for (std::size_t t = 0; t < in.N; ++t) {
      Vec row(in.C);
      for (std::size_t c = 0; c < in.C; ++c) row[c] = in.at(b, t, c);
      const Vec n = layer_norm_row(row, g, beta);
      xs[t] = affine_row(n, wx, bx);
      zs[t] = affine_row(n, wz, bz);
    }
    const auto y = scan_branch(xs, core);
    for (std::size_t t = 0; t < in.N; ++t) {
      Vec gated(core.M);
      for (std::size_t m = 0; m < core.M; ++m) gated[m] = y[t][m] * silu(zs[t][m]);
      const Vec o = affine_row(gated, wo, bo);
      for (std::size_t c = 0; c < in.C; ++c) out.at(b, t, c) = o[c] + in.at(b, t, c);
    }
  }
  return out;
}

struct FusionOut {
  Seq audio, visual;
};

inline FusionOut cross_fusion(const Seq& a, const Seq& v, const shmamba::ParameterSet& ps, const std::string& p,
                              bool gate_from_visual = true) {
  auto branch = [&](const Seq& s, const std::string& m, std::size_t b, std::vector<Vec>& normed) {
    const Vec g = raw(ps, p + "." + m + ".norm.weight"), beta = raw(ps, p + "." + m + ".norm.bias");
    const Vec w = raw(ps, p + "." + m + ".in_proj.weight"), bias = raw(ps, p + "." + m + ".in_proj.bias");
    std::vector<Vec> xs(s.N);
    normed.assign(s.N, Vec());
    for (std::size_t t = 0; t < s.N; ++t) {
      Vec row(s.C);
      for (std::size_t c = 0; c < s.C; ++c) row[c] = s.at(b, t, c);
      normed[t] = layer_norm_row(row, g, beta);
      xs[t] = affine_row(normed[t], w, bias);
    }
    return scan_branch(xs, read_core(ps, p + "." + m));
  };
  const Vec wg = raw(ps, p + ".gate.weight"), bg = raw(ps, p + ".gate.bias");
  const Vec woa = raw(ps, p + ".out_audio.weight"), boa = raw(ps, p + ".out_audio.bias");
  const Vec wov = raw(ps, p + ".out_visual.weight"), bov = raw(ps, p + ".out_visual.bias");
  FusionOut out{a, v};
  for (std::size_t b = 0; b < a.B; ++b) {
    std::vector<Vec> na, nv;
    const auto ya = branch(a, "audio", b, na);
    const auto yv = branch(v, "visual", b, nv);
    for (std::size_t t = 0; t < a.N; ++t) {
      const Vec z = affine_row(gate_from_visual ? nv[t] : na[t], wg, bg);
      Vec mixed(z.size());
      for (std::size_t m = 0; m < z.size(); ++m) {
        const double gate = silu(z[m]);
        mixed[m] = ya[t][m] * gate + yv[t][m] * gate;
      }
      const Vec oa = affine_row(mixed, woa, boa);
      const Vec ov = affine_row(mixed, wov, bov);
      for (std::size_t c = 0; c < a.C; ++c) {
        out.audio.at(b, t, c) = oa[c] + a.at(b, t, c);
        out.visual.at(b, t, c) = ov[c] + v.at(b, t, c);
      }
    }
  }
  return out;
}

}  // namespace oracle
