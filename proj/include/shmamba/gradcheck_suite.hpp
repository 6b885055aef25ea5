#pragma once

#include <chrono>
#include <string>
#include <vector>

#include "shmamba/fusion.hpp"
#include "shmamba/gradcheck.hpp"
#include "shmamba/hyperbolic.hpp"
#include "shmamba/model.hpp"
#include "shmamba/ops.hpp"
#include "shmamba/params.hpp"
#include "shmamba/ssm.hpp"

namespace shmamba::gradcheck {

struct Case {
  std::string name;
  MultiScalarFn fn;
  std::vector<Tensor> inputs;
};

struct CaseResult {
  std::string name;
  GradCheckReport report;
  double seconds = 0.0;
  bool passed = false;
};

inline constexpr double kTolerance = 1e-4;

namespace detail {

inline Tensor rand(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = lo + (hi - lo) * uniform01(rng);
  return t;
}

/// Reduces any output to a scalar with fixed random weights so every output
/// coordinate contributes a distinct amount.
inline Var probe(Tape& tape, const Var& y, std::uint64_t seed) {
  Rng rng(seed);
  return sum_all(y * tape.constant(rand(y.shape(), rng)));
}

inline hyperbolic::Curvature curv(const Var& k) { return hyperbolic::Curvature::of(k); }

}  // namespace detail

/// Smallest end-to-end model: hidden 8, T 4, batch 2, 3 answers, state 4,
/// one block per modality, dropout off.
inline model::ModelConfig smallest_model_config() {
  model::ModelConfig c;
  c.d_audio_in = 5;
  c.d_visual_in = 6;
  c.d_question_in = 4;
  c.d_hidden = 8;
  c.n_blocks = 1;
  c.dropout = 0.0;
  c.vocab_size = 3;
  c.state_dim = 4;
  return c;
}

inline Case end_to_end_case(std::uint64_t seed = 11) {
  const model::ModelConfig cfg = smallest_model_config();
  ParameterSet names = model::init_model(cfg, seed);
  Rng rng(seed + 1);
  std::vector<Tensor> inputs;
  for (const auto& [name, t] : names) {
    Tensor p = t;
    for (double& v : p.data()) v += 0.05 * (2.0 * uniform01(rng) - 1.0);
    inputs.push_back(std::move(p));
  }
  model::Batch batch{detail::rand(Shape{2, 4, cfg.d_audio_in}, rng), detail::rand(Shape{2, 4, cfg.d_visual_in}, rng),
                     detail::rand(Shape{2, cfg.d_question_in}, rng), {1, 2}, {0, 1}};
  MultiScalarFn fn = [cfg, names, batch](Tape&, std::span<const Var> vars) {
    BoundParameters bp(names, vars);
    Rng unused(0);
    const auto fwd = model::shmamba_forward(*vars[0].tape(), bp, batch, cfg, false, unused);
    return model::total_loss(fwd.l_align, model::answer_loss(fwd.logits, batch.labels));
  };
  return Case{"model.end_to_end", fn, std::move(inputs)};
}

/// Every differentiable operation, each at a smooth random point, followed by
/// the end-to-end model.
inline std::vector<Case> build_suite(std::uint64_t seed = 7) {
  using namespace hyperbolic;
  Rng rng(seed);
  auto R = [&](Shape s, double lo = -1.0, double hi = 1.0) { return detail::rand(std::move(s), rng, lo, hi); };
  std::vector<Case> cases;
  auto add_case = [&](std::string name, MultiScalarFn fn, std::vector<Tensor> in) {
    cases.push_back(Case{std::move(name), std::move(fn), std::move(in)});
  };
  std::uint64_t probe_seed = seed * 1000;
  auto P = [&]() { return ++probe_seed; };

  // Elementwise arithmetic with broadcasting.
  const struct {
    const char* name;
    BinaryOp op;
  } binaries[] = {{"add", BinaryOp::add}, {"sub", BinaryOp::sub}, {"mul", BinaryOp::mul}, {"div", BinaryOp::div}};
  for (const auto& b : binaries) {
    add_case(std::string("binary.") + b.name,
             [op = b.op, s = P()](Tape& t, std::span<const Var> v) { return detail::probe(t, binary(v[0], v[1], op), s); },
             {R({2, 3, 4}), R({3, 1}, 0.5, 1.5)});
  }
  add_case("affine", [s = P()](Tape& t, std::span<const Var> v) { return detail::probe(t, affine(v[0], -1.7, 0.3), s); },
           {R({3, 4})});

  const struct {
    const char* name;
    UnaryFn fn;
    double lo, hi;
  } unaries[] = {{"silu", UnaryFn::silu, -3, 3},         {"sigmoid", UnaryFn::sigmoid, -3, 3},
                 {"softplus", UnaryFn::softplus, -3, 3}, {"tanh", UnaryFn::tanh, -2, 2},
                 {"exp", UnaryFn::exp, -2, 2},           {"log", UnaryFn::log, 0.2, 3},
                 {"neg", UnaryFn::neg, -2, 2},           {"square", UnaryFn::square, -2, 2},
                 {"sqrt", UnaryFn::sqrt, 0.2, 3}};
  for (const auto& u : unaries) {
    add_case(std::string("unary.") + u.name,
             [fn = u.fn, s = P()](Tape& t, std::span<const Var> v) { return detail::probe(t, apply_unary(v[0], fn), s); },
             {R({3, 5}, u.lo, u.hi)});
  }
  add_case("clamp", [s = P()](Tape& t, std::span<const Var> v) { return detail::probe(t, clamp(v[0], -0.5, 0.5), s); },
           {Tensor(Shape{2, 3}, {-0.9, -0.3, 0.1, 0.2, 0.45, 0.8})});

  // Shape and reduction operations.
  add_case("reshape", [s = P()](Tape& t, std::span<const Var> v) { return detail::probe(t, reshape(v[0], {4, 3}), s); },
           {R({2, 6})});
  add_case("transpose", [s = P()](Tape& t, std::span<const Var> v) { return detail::probe(t, transpose(v[0]), s); },
           {R({3, 4})});
  for (int axis : {0, 1, -1}) {
    add_case("reduce.sum.axis" + std::to_string(axis),
             [axis, s = P()](Tape& t, std::span<const Var> v) { return detail::probe(t, sum(v[0], axis), s); },
             {R({2, 3, 4})});
    add_case("reduce.mean.axis" + std::to_string(axis),
             [axis, s = P()](Tape& t, std::span<const Var> v) { return detail::probe(t, mean(v[0], axis, true), s); },
             {R({2, 3, 4})});
  }
  add_case("reduce.sum_all", [](Tape&, std::span<const Var> v) { return sum_all(square(v[0])); }, {R({3, 4})});
  add_case("reduce.mean_all", [](Tape&, std::span<const Var> v) { return mean_all(square(v[0])); }, {R({3, 4})});
  add_case("concat",
           [s = P()](Tape& t, std::span<const Var> v) { return detail::probe(t, concat({v[0], v[1]}, 1), s); },
           {R({2, 3, 2}), R({2, 1, 2})});

  // Linear algebra and normalisation.
  add_case("matmul.2d", [s = P()](Tape& t, std::span<const Var> v) { return detail::probe(t, matmul(v[0], v[1]), s); },
           {R({3, 4}), R({4, 2})});
  add_case("matmul.3d", [s = P()](Tape& t, std::span<const Var> v) { return detail::probe(t, matmul(v[0], v[1]), s); },
           {R({2, 3, 4}), R({4, 5})});
  add_case("linear",
           [s = P()](Tape& t, std::span<const Var> v) { return detail::probe(t, linear(v[0], v[1], v[2]), s); },
           {R({2, 3, 4}), R({4, 5}), R({5})});
  add_case("softmax",
           [s = P()](Tape& t, std::span<const Var> v) { return detail::probe(t, softmax(v[0], -1), s); }, {R({3, 4}, -2, 2)});
  add_case("cross_entropy",
           [](Tape&, std::span<const Var> v) {
             const int labels[] = {2, 0, 3};
             return cross_entropy(v[0], labels);
           },
           {R({3, 4}, -2, 2)});
  add_case("layer_norm",
           [s = P()](Tape& t, std::span<const Var> v) { return detail::probe(t, layer_norm(v[0], v[1], v[2]), s); },
           {R({2, 3, 5}), R({5}, 0.5, 1.5), R({5})});
  add_case("depthwise_causal_conv1d",
           [s = P()](Tape& t, std::span<const Var> v) { return detail::probe(t, depthwise_causal_conv1d(v[0], v[1]), s); },
           {R({2, 6, 3}), R({3, 4})});

  // Hyperbolic geometry. Curvature is an input so its gradient is checked too.
  const Tensor k = Tensor::scalar(-0.7);
  add_case("hyperbolic.project_to_ball.interior",
           [s = P()](Tape& t, std::span<const Var> v) { return detail::probe(t, project_to_ball(v[0], detail::curv(v[1])).v, s); },
           {R({3, 4}, -0.3, 0.3), k});
  add_case("hyperbolic.project_to_ball.clipped",
           [s = P()](Tape& t, std::span<const Var> v) { return detail::probe(t, project_to_ball(v[0], detail::curv(v[1])).v, s); },
           {R({3, 4}, 1.0, 2.0), k});
  add_case("hyperbolic.mobius_add",
           [s = P()](Tape& t, std::span<const Var> v) {
             const auto c = detail::curv(v[2]);
             return detail::probe(t, mobius_add(project_to_ball(v[0], c), project_to_ball(v[1], c)).v, s);
           },
           {R({3, 4}, -0.4, 0.4), R({3, 4}, -0.4, 0.4), k});
  add_case("hyperbolic.log_map_zero",
           [s = P()](Tape& t, std::span<const Var> v) {
             return detail::probe(t, log_map_zero(PoincarePoint::unchecked(v[0], detail::curv(v[1]))).v, s);
           },
           {R({3, 4}, -0.5, 0.5), k});
  add_case("hyperbolic.log_map_zero.near_origin",
           [s = P()](Tape& t, std::span<const Var> v) {
             return detail::probe(t, log_map_zero(PoincarePoint::unchecked(v[0], detail::curv(v[1]))).v, s);
           },
           {R({2, 3}, -1e-4, 1e-4), k});
  add_case("hyperbolic.exp_map_zero",
           [s = P()](Tape& t, std::span<const Var> v) {
             return detail::probe(t, exp_map_zero(TangentVector{v[0], detail::curv(v[1])}).v, s);
           },
           {R({3, 4}, -1.5, 1.5), k});
  add_case("hyperbolic.exp_map_zero.near_origin",
           [s = P()](Tape& t, std::span<const Var> v) {
             return detail::probe(t, exp_map_zero(TangentVector{v[0], detail::curv(v[1])}).v, s);
           },
           {R({2, 3}, -1e-4, 1e-4), k});
  add_case("hyperbolic.l2_normalize_rows",
           [s = P()](Tape& t, std::span<const Var> v) { return detail::probe(t, l2_normalize_rows(v[0]), s); }, {R({3, 4})});
  add_case("hyperbolic.cosine_similarity_matrix",
           [s = P()](Tape& t, std::span<const Var> v) { return detail::probe(t, cosine_similarity_matrix(v[0]).w, s); },
           {R({4, 3})});
  for (SimilarityNorm mode : {SimilarityNorm::row_l2, SimilarityNorm::frobenius}) {
    add_case(std::string("hyperbolic.normalize_similarity.") + to_string(mode),
             [mode, s = P()](Tape& t, std::span<const Var> v) {
               return detail::probe(t, normalize_similarity(SimilarityMatrix{v[0]}, mode), s);
             },
             {R({4, 4})});
    add_case(std::string("hyperbolic.alignment_loss.") + to_string(mode),
             [mode](Tape&, std::span<const Var> v) { return alignment_loss(v[0], v[1], detail::curv(v[2]), mode); },
             {R({3, 2, 4}), R({3, 2, 4}), Tensor::scalar(-0.3)});
  }
  add_case("hyperbolic.adaptive_curvature",
           [](Tape&, std::span<const Var> v) {
             return adaptive_curvature(v[0], v[1], CurvatureHead{v[2], v[3]}, -0.1).k;
           },
           {R({2, 3, 4}), R({2, 3, 4}), R({8, 1}), R({1})});

  // State space model.
  auto zoh_inputs = [&](double delta_lo, double delta_hi, double a_lo) {
    return std::vector<Tensor>{R({2, 3, 4}, delta_lo, delta_hi), R({4, 3}, a_lo, -0.2), R({2, 3, 3})};
  };
  add_case("ssm.zoh_discretize",
           [s = P()](Tape& t, std::span<const Var> v) {
             const auto d = ssm::zoh_discretize(v[0], v[1], v[2]);
             return detail::probe(t, d.a_bar, s) + detail::probe(t, d.b_bar, s + 1);
           },
           zoh_inputs(0.05, 1.0, -1.5));
  add_case("ssm.zoh_discretize.series_branch",
           [s = P()](Tape& t, std::span<const Var> v) {
             const auto d = ssm::zoh_discretize(v[0], v[1], v[2]);
             return detail::probe(t, d.a_bar, s) + detail::probe(t, d.b_bar, s + 1);
           },
           zoh_inputs(2e-5, 6e-5, -1.2));
  for (std::size_t chunk : {std::size_t{0}, std::size_t{2}}) {
    add_case("ssm.selective_scan.chunk" + std::to_string(chunk),
             [chunk, s = P()](Tape& t, std::span<const Var> v) {
               return detail::probe(t, ssm::selective_scan(v[0], v[1], v[2], v[3], chunk), s);
             },
             {R({2, 5, 3, 2}, 0.3, 0.95), R({2, 5, 3, 2}), R({2, 5, 2}), R({2, 5, 3})});
  }

  // Blocks, with every parameter checked.
  {
    // (B, N, C, M, L) = (1, 4, 4, 8, 4)
    ssm::SsmDims dims{4, 4, 4, 2};
    ParameterSet names;
    Rng init(seed + 5);
    ssm::init_mamba_block(names, "blk", dims, init);
    std::vector<Tensor> in{R({1, 4, 4})};
    for (const auto& [name, t] : names) {
      Tensor p = t;
      for (double& x : p.data()) x += 0.1 * (2.0 * uniform01(rng) - 1.0);
      in.push_back(std::move(p));
    }
    add_case("ssm.mamba_block_forward",
             [names, s = P()](Tape& t, std::span<const Var> v) {
               BoundParameters bp(names, v.subspan(1));
               const auto b = ssm::bind_mamba_block(bp, "blk");
               return detail::probe(t, ssm::mamba_block_forward(v[0], b.ssm, b.norm), s);
             },
             in);
  }
  for (fusion::GateSource gate : {fusion::GateSource::visual, fusion::GateSource::audio}) {
    // (B, N, C) = (1, 4, 8)
    ssm::SsmDims dims{8, 4, 4, 2};
    ParameterSet names;
    Rng init(seed + 6);
    fusion::init_cross_fusion(names, "fuse", dims, init);
    std::vector<Tensor> in{R({1, 4, 8}), R({1, 4, 8})};
    for (const auto& [name, t] : names) {
      Tensor p = t;
      for (double& x : p.data()) x += 0.1 * (2.0 * uniform01(rng) - 1.0);
      in.push_back(std::move(p));
    }
    add_case(std::string("fusion.cross_fusion_forward.gate_") + fusion::to_string(gate),
             [names, gate, s = P()](Tape& t, std::span<const Var> v) {
               BoundParameters bp(names, v.subspan(2));
               const auto out = fusion::cross_fusion_forward(v[0], v[1], fusion::bind_cross_fusion(bp, "fuse"), gate);
               return detail::probe(t, out.audio, s) + detail::probe(t, out.visual, s + 1);
             },
             in);
  }

  add_case("model.answer_loss",
           [](Tape&, std::span<const Var> v) {
             const int labels[] = {1, 0};
             return model::answer_loss(v[0], labels);
           },
           {R({2, 3}, -2, 2)});
  cases.push_back(end_to_end_case(seed + 4));
  return cases;
}

inline CaseResult run_case(const Case& c, double eps = 1e-5) {
  const auto t0 = std::chrono::steady_clock::now();
  CaseResult r;
  r.name = c.name;
  r.report = grad_check(c.fn, c.inputs, eps);
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  r.passed = r.report.max_rel_error < kTolerance;
  return r;
}

}  // namespace shmamba::gradcheck
