#pragma once

#include <cmath>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "shmamba/data.hpp"
#include "shmamba/error.hpp"
#include "shmamba/fusion.hpp"
#include "shmamba/hyperbolic.hpp"
#include "shmamba/ops.hpp"
#include "shmamba/params.hpp"
#include "shmamba/ssm.hpp"

namespace shmamba::model {

using data::FeatureBundle;
using json = nlohmann::json;

/// Where the alignment branch reads its features from.
enum class AlignTap { encoder, post_mamba };

inline const char* to_string(AlignTap t) { return t == AlignTap::encoder ? "encoder" : "post_mamba"; }

inline AlignTap align_tap_from_string(const std::string& s) {
  if (s == "encoder") return AlignTap::encoder;
  if (s == "post_mamba") return AlignTap::post_mamba;
  throw ConfigError("unknown alignment tap '" + s + "'");
}

struct ModelConfig {
  std::size_t d_audio_in = 128;
  std::size_t d_visual_in = 512;
  std::size_t d_question_in = 512;
  std::size_t d_hidden = 256;
  std::size_t n_blocks = 4;
  double dropout = 0.1;
  double k0 = -0.1;
  std::size_t vocab_size = 42;
  std::size_t state_dim = 16;
  std::size_t conv_width = 4;
  std::size_t expansion = 2;
  hyperbolic::SimilarityNorm align_norm = hyperbolic::SimilarityNorm::row_l2;
  fusion::GateSource gate_source = fusion::GateSource::visual;
  AlignTap align_tap = AlignTap::encoder;
  double ball_eps = hyperbolic::kDefaultBallEps;
  /// 0 runs the literal scan recurrence; >0 the chunked form with this chunk.
  std::size_t scan_chunk = 0;

  ssm::SsmDims ssm_dims() const { return ssm::SsmDims{d_hidden, state_dim, conv_width, expansion}; }

  void validate() const {
    if (d_audio_in < 1 || d_visual_in < 1 || d_question_in < 1 || d_hidden < 1 || vocab_size < 1 || state_dim < 1 ||
        conv_width < 1 || expansion < 1) {
      throw ConfigError("model config: all widths must be >= 1");
    }
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("model config: dropout must lie in [0, 1)");
    if (!(k0 < 0.0)) throw ConfigError("model config: k0 must be negative");
    if (!(ball_eps > 0.0 && ball_eps < 1e-2)) throw ConfigError("model config: ball_eps must lie in (0, 1e-2)");
  }

  /// Full-scale settings: hidden 256, 4 blocks per modality, dropout 0.1,
  /// k0 = -0.1, with 128-d audio and 512-d visual/question features.
  static ModelConfig full() { return ModelConfig{}; }

  /// Desk-scale settings used by the acceptance runs.
  static ModelConfig desk() {
    ModelConfig c;
    c.d_hidden = 64;
    return c;
  }

  /// Copies input widths and answer count from a dataset.
  ModelConfig with_shapes(const data::FeatureShapes& s) const {
    ModelConfig c = *this;
    c.d_audio_in = s.d_audio;
    c.d_visual_in = s.d_visual;
    c.d_question_in = s.d_question;
    c.vocab_size = s.vocab_size;
    return c;
  }
};

inline void to_json(json& j, const ModelConfig& c) {
  j = json{{"d_audio_in", c.d_audio_in},
           {"d_visual_in", c.d_visual_in},
           {"d_question_in", c.d_question_in},
           {"d_hidden", c.d_hidden},
           {"n_blocks", c.n_blocks},
           {"dropout", c.dropout},
           {"k0", c.k0},
           {"vocab_size", c.vocab_size},
           {"state_dim", c.state_dim},
           {"conv_width", c.conv_width},
           {"expansion", c.expansion},
           {"align_norm", hyperbolic::to_string(c.align_norm)},
           {"gate_source", fusion::to_string(c.gate_source)},
           {"align_tap", to_string(c.align_tap)},
           {"ball_eps", c.ball_eps},
           {"scan_chunk", c.scan_chunk}};
}

/// Missing keys keep the values already held by `c`, so a partial document
/// overrides a preset.
inline void merge_json(const json& j, ModelConfig& c) {
  c.d_audio_in = j.value("d_audio_in", c.d_audio_in);
  c.d_visual_in = j.value("d_visual_in", c.d_visual_in);
  c.d_question_in = j.value("d_question_in", c.d_question_in);
  c.d_hidden = j.value("d_hidden", c.d_hidden);
  c.n_blocks = j.value("n_blocks", c.n_blocks);
  c.dropout = j.value("dropout", c.dropout);
  c.k0 = j.value("k0", c.k0);
  c.vocab_size = j.value("vocab_size", c.vocab_size);
  c.state_dim = j.value("state_dim", c.state_dim);
  c.conv_width = j.value("conv_width", c.conv_width);
  c.expansion = j.value("expansion", c.expansion);
  if (j.contains("align_norm")) c.align_norm = hyperbolic::similarity_norm_from_string(j.at("align_norm"));
  if (j.contains("gate_source")) c.gate_source = fusion::gate_source_from_string(j.at("gate_source"));
  if (j.contains("align_tap")) c.align_tap = align_tap_from_string(j.at("align_tap"));
  c.ball_eps = j.value("ball_eps", c.ball_eps);
  c.scan_chunk = j.value("scan_chunk", c.scan_chunk);
}

inline void from_json(const json& j, ModelConfig& c) {
  c = ModelConfig{};
  merge_json(j, c);
}

// ---------------------------------------------------------------------------
// Batching
// ---------------------------------------------------------------------------

struct Batch {
  Tensor audio;     ///< (B, T, D_a)
  Tensor visual;    ///< (B, T, D_v)
  Tensor question;  ///< (B, D_q)
  std::vector<int> labels;
  std::vector<int> query_types;

  std::size_t size() const { return labels.size(); }
};

inline Batch make_batch(std::span<const FeatureBundle* const> samples) {
  if (samples.empty()) throw ShapeError("make_batch: empty batch");
  const FeatureBundle& first = *samples.front();
  const std::size_t B = samples.size();
  const std::size_t T = first.audio.dim(0);
  const std::size_t Da = first.audio.dim(1);
  const std::size_t Dv = first.visual.dim(1);
  const std::size_t Dq = first.question.dim(0);
  Batch batch{Tensor(Shape{B, T, Da}), Tensor(Shape{B, T, Dv}), Tensor(Shape{B, Dq}), {}, {}};
  for (std::size_t b = 0; b < B; ++b) {
    const FeatureBundle& s = *samples[b];
    if (s.audio.shape() != first.audio.shape() || s.visual.shape() != first.visual.shape() ||
        s.question.shape() != first.question.shape()) {
      throw ShapeError("make_batch: sample " + std::to_string(b) + " shapes differ from the first sample");
    }
    std::copy(s.audio.data().begin(), s.audio.data().end(), batch.audio.data().begin() + static_cast<std::ptrdiff_t>(b * T * Da));
    std::copy(s.visual.data().begin(), s.visual.data().end(), batch.visual.data().begin() + static_cast<std::ptrdiff_t>(b * T * Dv));
    std::copy(s.question.data().begin(), s.question.data().end(), batch.question.data().begin() + static_cast<std::ptrdiff_t>(b * Dq));
    batch.labels.push_back(s.label);
    batch.query_types.push_back(s.query_type);
  }
  return batch;
}

inline Batch make_batch(std::span<const FeatureBundle> samples) {
  std::vector<const FeatureBundle*> ptrs;
  for (const auto& s : samples) ptrs.push_back(&s);
  return make_batch(std::span<const FeatureBundle* const>(ptrs));
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

inline std::string block_prefix(const char* modality, std::size_t i) {
  return std::string("mamba.") + modality + "." + std::to_string(i);
}

/// Fresh parameters for `cfg`, deterministic in `seed`. Names:
///   encoder.{audio,visual,question}.{weight,bias}
///   curvature.{weight,bias}
///   mamba.{audio,visual}.<i>.{norm,in_proj_x,in_proj_z,conv,b_proj,c_proj,delta_proj,out_proj}.*, .a_log
///   fusion.{audio,visual}.{norm,in_proj,conv,b_proj,c_proj,delta_proj}.*, .a_log
///   fusion.{gate,out_audio,out_visual}.*
///   head.{fuse,out}.{weight,bias}
inline ParameterSet init_model(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  ParameterSet ps;
  const std::size_t H = cfg.d_hidden;
  init_linear(ps, "encoder.audio", cfg.d_audio_in, H, rng);
  init_linear(ps, "encoder.visual", cfg.d_visual_in, H, rng);
  init_linear(ps, "encoder.question", cfg.d_question_in, H, rng);
  init_linear(ps, "curvature", 2 * H, 1, rng);
  const ssm::SsmDims dims = cfg.ssm_dims();
  for (const char* m : {"audio", "visual"})
    for (std::size_t i = 0; i < cfg.n_blocks; ++i) ssm::init_mamba_block(ps, block_prefix(m, i), dims, rng);
  fusion::init_cross_fusion(ps, "fusion", dims, rng);
  init_linear(ps, "head.fuse", 2 * H, H, rng);
  init_linear(ps, "head.out", H, cfg.vocab_size, rng);
  return ps;
}

struct ParamBreakdown {
  std::size_t total = 0;
  std::vector<std::pair<std::string, std::size_t>> modules;
};

/// Closed-form count of learnable scalars, with H = d_hidden, M = expansion*H,
/// L = state_dim, W = conv_width, n = n_blocks, V = vocab_size:
///
///   encoder   = (D_a + D_v + D_q) H + 3H
///   curvature = 2H + 1
///   core      = MW + 2(ML + L) + M^2 + M + ML
///   block     = 2H + 2(HM + M) + core + MH + H
///   mamba     = 2n * block
///   fusion    = 2(2H + HM + M + core) + HM + M + 2(MH + H)
///   head      = 2H^2 + H + HV + V
inline ParamBreakdown count_params(const ModelConfig& cfg) {
  const std::size_t H = cfg.d_hidden;
  const ssm::SsmDims dims = cfg.ssm_dims();
  ParamBreakdown out;
  out.modules = {
      {"encoder", (cfg.d_audio_in + cfg.d_visual_in + cfg.d_question_in) * H + 3 * H},
      {"curvature", 2 * H + 1},
      {"mamba", 2 * cfg.n_blocks * ssm::mamba_block_param_count(dims)},
      {"fusion", fusion::cross_fusion_param_count(dims)},
      {"head", 2 * H * H + H + H * cfg.vocab_size + cfg.vocab_size},
  };
  for (const auto& [name, n] : out.modules) out.total += n;
  return out;
}

// ---------------------------------------------------------------------------
// Forward pass
// ---------------------------------------------------------------------------

struct EncoderWeights {
  LinearParams audio;
  LinearParams visual;
  LinearParams question;
};

struct Encoded {
  Var audio;     ///< (B, T, H)
  Var visual;    ///< (B, T, H)
  Var question;  ///< (B, H)
};

/// One linear layer per modality into the hidden width, then dropout
/// (train mode only).
inline Encoded encode_features(Tape& tape, const Batch& batch, const ModelConfig& cfg, const EncoderWeights& w,
                               bool train, Rng& rng) {
  if (batch.audio.dim(2) != cfg.d_audio_in || batch.visual.dim(2) != cfg.d_visual_in ||
      batch.question.dim(1) != cfg.d_question_in) {
    throw ShapeError("encode_features: batch widths (" + std::to_string(batch.audio.dim(2)) + ", " +
                     std::to_string(batch.visual.dim(2)) + ", " + std::to_string(batch.question.dim(1)) +
                     ") do not match config (" + std::to_string(cfg.d_audio_in) + ", " +
                     std::to_string(cfg.d_visual_in) + ", " + std::to_string(cfg.d_question_in) + ")");
  }
  const Var a = apply(w.audio, tape.constant(batch.audio));
  const Var v = apply(w.visual, tape.constant(batch.visual));
  const Var q = apply(w.question, tape.constant(batch.question));
  return Encoded{dropout(a, cfg.dropout, train, rng), dropout(v, cfg.dropout, train, rng),
                 dropout(q, cfg.dropout, train, rng)};
}

struct ForwardResult {
  Var logits;  ///< (B, V)
  Var l_align;
  hyperbolic::Curvature curvature;
};

/// encode -> adaptive curvature and alignment loss -> per-modality Mamba
/// stacks -> cross fusion -> temporal mean-pool -> question-conditioned head.
inline ForwardResult shmamba_forward(Tape& tape, const BoundParameters& bp, const Batch& batch, const ModelConfig& cfg,
                                     bool train, Rng& rng) {
  const EncoderWeights enc{bind_linear(bp, "encoder.audio"), bind_linear(bp, "encoder.visual"),
                           bind_linear(bp, "encoder.question")};
  const Encoded e = encode_features(tape, batch, cfg, enc, train, rng);
  const hyperbolic::CurvatureHead head{bp("curvature.weight"), bp("curvature.bias")};

  Var a = e.audio;
  Var v = e.visual;
  ForwardResult out;
  auto align = [&](const Var& audio, const Var& visual) {
    out.curvature = hyperbolic::adaptive_curvature(audio, visual, head, cfg.k0, cfg.ball_eps);
    // A single-row batch has no off-diagonal pairs to align.
    out.l_align = batch.size() < 2 ? tape.constant(Tensor::scalar(0.0))
                                   : hyperbolic::alignment_loss(visual, audio, out.curvature, cfg.align_norm);
  };
  if (cfg.align_tap == AlignTap::encoder) align(a, v);
  for (std::size_t i = 0; i < cfg.n_blocks; ++i) {
    const auto blk = ssm::bind_mamba_block(bp, block_prefix("audio", i));
    a = ssm::mamba_block_forward(a, blk.ssm, blk.norm, cfg.scan_chunk);
  }
  for (std::size_t i = 0; i < cfg.n_blocks; ++i) {
    const auto blk = ssm::bind_mamba_block(bp, block_prefix("visual", i));
    v = ssm::mamba_block_forward(v, blk.ssm, blk.norm, cfg.scan_chunk);
  }
  if (cfg.align_tap == AlignTap::post_mamba) align(a, v);

  const auto fused =
      fusion::cross_fusion_forward(a, v, fusion::bind_cross_fusion(bp, "fusion"), cfg.gate_source, cfg.scan_chunk);
  const Var f_av = concat({mean(fused.audio, 1), mean(fused.visual, 1)}, 1);
  const Var conditioned = apply(bind_linear(bp, "head.fuse"), f_av) * e.question;
  out.logits = apply(bind_linear(bp, "head.out"), conditioned);
  return out;
}

/// Mean cross-entropy of the answer logits.
inline Var answer_loss(const Var& logits, std::span<const int> labels) { return cross_entropy(logits, labels); }

/// Unweighted sum of the alignment and answer losses.
inline Var total_loss(const Var& l_align, const Var& l_qa) { return l_align + l_qa; }

struct LossBreakdown {
  double l_align = 0.0;
  double l_qa = 0.0;
  double total = 0.0;
  double k_used = 0.0;
  double accuracy = 0.0;
};

inline std::vector<int> argmax_rows(const Tensor& logits) {
  const std::size_t B = logits.dim(0);
  const std::size_t V = logits.dim(1);
  std::vector<int> out(B);
  for (std::size_t b = 0; b < B; ++b) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < V; ++c) {
      if (logits[b * V + c] > logits[b * V + best]) best = c;
    }
    out[b] = static_cast<int>(best);
  }
  return out;
}

inline double accuracy(const Tensor& logits, std::span<const int> labels) {
  const auto pred = argmax_rows(logits);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == labels[i];
  return static_cast<double>(correct) / static_cast<double>(pred.size());
}

}  // namespace shmamba::model
