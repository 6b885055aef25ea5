#pragma once

#include <string>

#include "shmamba/ops.hpp"
#include "shmamba/params.hpp"
#include "shmamba/ssm.hpp"

namespace shmamba::fusion {

/// Which normalised stream drives the shared gate.
enum class GateSource { visual, audio };

inline const char* to_string(GateSource g) { return g == GateSource::visual ? "visual" : "audio"; }

inline GateSource gate_source_from_string(const std::string& s) {
  if (s == "visual") return GateSource::visual;
  if (s == "audio") return GateSource::audio;
  throw ConfigError("unknown gate source '" + s + "'");
}

struct CrossFusionParams {
  LayerNormParams norm_audio;
  LayerNormParams norm_visual;
  LinearParams in_audio;   ///< C -> M
  LinearParams in_visual;  ///< C -> M
  ssm::SsmCore core_audio;
  ssm::SsmCore core_visual;
  LinearParams gate;        ///< C -> M, distinct from the visual output projection
  LinearParams out_audio;   ///< M -> C
  LinearParams out_visual;  ///< M -> C
};

struct CrossFusionOutput {
  Var audio;   ///< (B, N, C)
  Var visual;  ///< (B, N, C)
  Var gate;    ///< z, (B, N, M)
};

/// Two selective scans, one per modality, gated by a shared SiLU(z) taken
/// from one stream. The gated outputs are summed and the sum is projected back
/// into each stream with a residual connection.
inline CrossFusionOutput cross_fusion_forward(const Var& audio, const Var& visual, const CrossFusionParams& p,
                                              GateSource gate_source = GateSource::visual, std::size_t chunk = 0) {
  if (audio.shape() != visual.shape() || audio.rank() != 3) {
    throw ShapeError("cross_fusion_forward expects matching (B, N, C) streams, got " + shape_str(audio.shape()) +
                     " and " + shape_str(visual.shape()));
  }
  if (p.in_audio.weight.dim(0) != audio.dim(2)) {
    throw ShapeError("cross_fusion_forward: block width " + std::to_string(p.in_audio.weight.dim(0)) +
                     " does not match input " + shape_str(audio.shape()));
  }
  const Var norm_a = layer_norm(audio, p.norm_audio.gamma, p.norm_audio.beta, 1e-5);
  const Var norm_v = layer_norm(visual, p.norm_visual.gamma, p.norm_visual.beta, 1e-5);
  const Var y_a = ssm::selective_branch(apply(p.in_audio, norm_a), p.core_audio, chunk).y;
  const Var y_v = ssm::selective_branch(apply(p.in_visual, norm_v), p.core_visual, chunk).y;

  const Var z = apply(p.gate, gate_source == GateSource::visual ? norm_v : norm_a);
  const Var gate = silu(z);
  const Var mixed = y_a * gate + y_v * gate;
  return CrossFusionOutput{apply(p.out_audio, mixed) + audio, apply(p.out_visual, mixed) + visual, z};
}

inline void init_cross_fusion(ParameterSet& ps, const std::string& prefix, const ssm::SsmDims& d, Rng& rng) {
  const std::size_t C = d.channels;
  const std::size_t M = d.inner();
  for (const char* m : {"audio", "visual"}) {
    const std::string base = prefix + "." + m;
    init_layer_norm(ps, base + ".norm", C);
    init_linear(ps, base + ".in_proj", C, M, rng);
    ssm::init_ssm_core(ps, base, d, rng);
  }
  init_linear(ps, prefix + ".gate", C, M, rng);
  init_linear(ps, prefix + ".out_audio", M, C, rng);
  init_linear(ps, prefix + ".out_visual", M, C, rng);
}

inline CrossFusionParams bind_cross_fusion(const BoundParameters& bp, const std::string& prefix) {
  return CrossFusionParams{bind_layer_norm(bp, prefix + ".audio.norm"),
                           bind_layer_norm(bp, prefix + ".visual.norm"),
                           bind_linear(bp, prefix + ".audio.in_proj"),
                           bind_linear(bp, prefix + ".visual.in_proj"),
                           ssm::bind_ssm_core(bp, prefix + ".audio"),
                           ssm::bind_ssm_core(bp, prefix + ".visual"),
                           bind_linear(bp, prefix + ".gate"),
                           bind_linear(bp, prefix + ".out_audio"),
                           bind_linear(bp, prefix + ".out_visual")};
}

/// Per modality: norm 2C, input projection C*M + M, SSM core.
/// Shared: gate C*M + M, two output projections 2(M*C + C).
inline constexpr std::size_t cross_fusion_param_count(const ssm::SsmDims& d) {
  const std::size_t C = d.channels;
  const std::size_t M = d.expansion * d.channels;
  const std::size_t per_modality = 2 * C + C * M + M + ssm::ssm_core_param_count(M, d.state, d.conv_width);
  return 2 * per_modality + (C * M + M) + 2 * (M * C + C);
}

}  // namespace shmamba::fusion
