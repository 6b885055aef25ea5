#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "shmamba/model.hpp"

using namespace shmamba;
using namespace shmamba::model;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double lo, double hi) {
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = lo + (hi - lo) * uniform01(rng);
  return t;
}

ModelConfig small_config() {
  ModelConfig c;
  c.d_audio_in = 6;
  c.d_visual_in = 5;
  c.d_question_in = 7;
  c.d_hidden = 8;
  c.n_blocks = 1;
  c.dropout = 0.0;
  c.vocab_size = 5;
  c.state_dim = 4;
  return c;
}

Batch random_batch(const ModelConfig& c, std::size_t B, std::size_t T, Rng& rng) {
  Batch b{random_tensor({B, T, c.d_audio_in}, rng, -1, 1), random_tensor({B, T, c.d_visual_in}, rng, -1, 1),
          random_tensor({B, c.d_question_in}, rng, -1, 1), {}, {}};
  for (std::size_t i = 0; i < B; ++i) {
    b.labels.push_back(static_cast<int>(i % c.vocab_size));
    b.query_types.push_back(0);
  }
  return b;
}

struct Forward {
  Tensor logits;
  double l_align, l_qa, k;
};

Forward forward(const ParameterSet& ps, const Batch& batch, const ModelConfig& cfg, bool train = false,
                std::uint64_t dropout_seed = 0) {
  Tape tape;
  BoundParameters bp(tape, ps, false);
  Rng rng(dropout_seed);
  const auto f = shmamba_forward(tape, bp, batch, cfg, train, rng);
  return Forward{f.logits.value(), f.l_align.item(), answer_loss(f.logits, batch.labels).item(), f.curvature.value()};
}

}  // namespace

TEST(CountParams, SingleLinear) {
  ParameterSet ps;
  Rng rng(1);
  init_linear(ps, "lin", 4, 3, rng);
  EXPECT_EQ(ps.scalar_count(), 15u);
}

TEST(CountParams, DeskConfigHandEvaluated) {
  // H=64, M=128, L=16, W=4, n=4, V=42, inputs 128/512/512:
  //   encoder 1152*64 + 192 = 73920, curvature 129, mamba 8 * 48224 = 385792,
  //   fusion 88128, head 8192 + 64 + 2688 + 42 = 10986.
  const ModelConfig cfg = ModelConfig::desk();
  const ParamBreakdown pb = count_params(cfg);
  EXPECT_EQ(pb.total, 558955u);
  const std::vector<std::pair<std::string, std::size_t>> expected = {
      {"encoder", 73920}, {"curvature", 129}, {"mamba", 385792}, {"fusion", 88128}, {"head", 10986}};
  EXPECT_EQ(pb.modules, expected);
  const ParameterSet ps = init_model(cfg, 1);
  EXPECT_EQ(ps.scalar_count(), pb.total);
  for (const auto& [name, n] : pb.modules) EXPECT_EQ(ps.scalar_count(name + "."), n) << name;
}

TEST(CountParams, FullConfigHandEvaluated) {
  const ModelConfig cfg = ModelConfig::full();
  EXPECT_EQ(count_params(cfg).total, 7149931u);
  EXPECT_EQ(init_model(cfg, 1).scalar_count(), 7149931u);
}

TEST(CountParams, DoublingHiddenRoughlyQuadruples) {
  ModelConfig half = ModelConfig::full();
  half.d_hidden = 128;
  const double ratio =
      static_cast<double>(count_params(ModelConfig::full()).total) / static_cast<double>(count_params(half).total);
  EXPECT_GE(ratio, 3.5);
  EXPECT_LE(ratio, 4.5);
}

TEST(CountParams, NoBlocksCountsStrictlyFewer) {
  ModelConfig none = ModelConfig::desk();
  none.n_blocks = 0;
  EXPECT_LT(count_params(none).total, count_params(ModelConfig::desk()).total);
  EXPECT_EQ(count_params(none).total, 173163u);
}

TEST(EncodeFeatures, IdentityWeightsPassThrough) {
  ModelConfig cfg = small_config();
  cfg.d_audio_in = cfg.d_visual_in = cfg.d_question_in = cfg.d_hidden;
  Rng rng(3);
  const Batch batch = random_batch(cfg, 2, 4, rng);
  Tape tape;
  Tensor eye(Shape{8, 8});
  for (std::size_t i = 0; i < 8; ++i) eye[i * 8 + i] = 1.0;
  const LinearParams lin{tape.constant(eye), tape.constant(Tensor(Shape{8}))};
  const Encoded e = encode_features(tape, batch, cfg, EncoderWeights{lin, lin, lin}, false, rng);
  EXPECT_EQ(e.audio.value(), batch.audio);
  EXPECT_EQ(e.visual.value(), batch.visual);
  EXPECT_EQ(e.question.value(), batch.question);
}

TEST(EncodeFeatures, ShapesAndWidthMismatch) {
  ModelConfig cfg = ModelConfig::desk();
  cfg.d_audio_in = 12;
  cfg.d_visual_in = 10;
  cfg.d_question_in = 6;
  const ParameterSet ps = init_model(cfg, 2);
  Rng rng(4);
  const Batch batch = random_batch(cfg, 2, 8, rng);
  Tape tape;
  BoundParameters bp(tape, ps, false);
  const EncoderWeights w{bind_linear(bp, "encoder.audio"), bind_linear(bp, "encoder.visual"),
                         bind_linear(bp, "encoder.question")};
  const Encoded e = encode_features(tape, batch, cfg, w, false, rng);
  EXPECT_EQ(e.audio.value().shape(), (Shape{2, 8, 64}));
  EXPECT_EQ(e.visual.value().shape(), (Shape{2, 8, 64}));
  EXPECT_EQ(e.question.value().shape(), (Shape{2, 64}));

  ModelConfig wrong = cfg;
  wrong.d_visual_in = 11;
  EXPECT_THROW(encode_features(tape, batch, wrong, w, false, rng), ShapeError);
}

TEST(EncodeFeatures, TrainDropoutIsSeedDeterministic) {
  ModelConfig cfg = small_config();
  cfg.dropout = 0.1;
  const ParameterSet ps = init_model(cfg, 5);
  Rng data_rng(5);
  const Batch batch = random_batch(cfg, 3, 6, data_rng);
  const Forward a = forward(ps, batch, cfg, true, 42);
  const Forward b = forward(ps, batch, cfg, true, 42);
  const Forward c = forward(ps, batch, cfg, true, 43);
  EXPECT_EQ(a.logits, b.logits);
  EXPECT_NE(a.logits, c.logits);
}

TEST(Forward, LogitShapeAndProbabilities) {
  const ModelConfig cfg = small_config();
  Rng rng(6);
  const Forward f = forward(init_model(cfg, 6), random_batch(cfg, 3, 5, rng), cfg);
  ASSERT_EQ(f.logits.shape(), (Shape{3, 5}));
  Tape tape;
  const Tensor p = softmax(tape.constant(f.logits), 1).value();
  for (std::size_t b = 0; b < 3; ++b) {
    double s = 0.0;
    for (std::size_t c = 0; c < 5; ++c) s += p[b * 5 + c];
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(Forward, ZeroHeadGivesUniformAnswerLoss) {
  const ModelConfig cfg = small_config();
  ParameterSet ps = init_model(cfg, 7);
  ps.at("head.out.weight").fill(0.0);
  ps.at("head.out.bias").fill(0.0);
  Rng rng(7);
  const Forward f = forward(ps, random_batch(cfg, 4, 5, rng), cfg);
  for (double v : f.logits.data()) EXPECT_EQ(v, 0.0);
  EXPECT_NEAR(f.l_qa, std::log(5.0), 1e-12);
}

TEST(Forward, DeskConfigBitwiseReproducible) {
  ModelConfig cfg = ModelConfig::desk();
  cfg.d_audio_in = 32;
  cfg.d_visual_in = 48;
  cfg.d_question_in = 16;
  Rng rng(8);
  const Batch batch = random_batch(cfg, 2, 8, rng);
  const Forward a = forward(init_model(cfg, 11), batch, cfg, true, 3);
  const Forward b = forward(init_model(cfg, 11), batch, cfg, true, 3);
  EXPECT_EQ(a.logits, b.logits);
  EXPECT_EQ(a.l_align, b.l_align);
}

TEST(Forward, BatchPermutationPermutesRows) {
  const ModelConfig cfg = small_config();
  const ParameterSet ps = init_model(cfg, 9);
  Rng rng(9);
  const Batch batch = random_batch(cfg, 4, 5, rng);
  const std::vector<std::size_t> perm = {2, 0, 3, 1};
  std::vector<FeatureBundle> bundles;
  for (std::size_t i : perm) {
    FeatureBundle s;
    s.audio = Tensor(Shape{5, cfg.d_audio_in});
    s.visual = Tensor(Shape{5, cfg.d_visual_in});
    s.question = Tensor(Shape{cfg.d_question_in});
    std::copy_n(batch.audio.data().begin() + static_cast<std::ptrdiff_t>(i * 5 * cfg.d_audio_in), s.audio.numel(),
                s.audio.data().begin());
    std::copy_n(batch.visual.data().begin() + static_cast<std::ptrdiff_t>(i * 5 * cfg.d_visual_in), s.visual.numel(),
                s.visual.data().begin());
    std::copy_n(batch.question.data().begin() + static_cast<std::ptrdiff_t>(i * cfg.d_question_in),
                s.question.numel(), s.question.data().begin());
    s.label = batch.labels[i];
    bundles.push_back(std::move(s));
  }
  const Forward a = forward(ps, batch, cfg);
  const Forward b = forward(ps, make_batch(std::span<const FeatureBundle>(bundles)), cfg);
  for (std::size_t r = 0; r < perm.size(); ++r)
    for (std::size_t c = 0; c < cfg.vocab_size; ++c)
      EXPECT_NEAR(b.logits[r * cfg.vocab_size + c], a.logits[perm[r] * cfg.vocab_size + c], 1e-12);
  EXPECT_NEAR(a.l_qa, b.l_qa, 1e-12);
  EXPECT_NEAR(a.l_align, b.l_align, 1e-12);
}

TEST(Forward, CurvatureInsideOpenInterval) {
  ModelConfig cfg = small_config();
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    ParameterSet ps = init_model(cfg, seed);
    ps.at("curvature.bias")[0] = (static_cast<double>(seed) - 2.0) * 50.0;
    Rng rng(seed);
    const Forward f = forward(ps, random_batch(cfg, 2, 3, rng), cfg);
    EXPECT_GT(f.k, cfg.k0);
    EXPECT_LT(f.k, 0.0);
    EXPECT_GE(f.l_align, 0.0);
  }
}

TEST(Forward, PostMambaTapChangesAlignmentInput) {
  ModelConfig cfg = small_config();
  const ParameterSet ps = init_model(cfg, 10);
  Rng rng(10);
  const Batch batch = random_batch(cfg, 2, 4, rng);
  const Forward enc = forward(ps, batch, cfg);
  cfg.align_tap = AlignTap::post_mamba;
  const Forward post = forward(ps, batch, cfg);
  EXPECT_EQ(enc.logits, post.logits);
  EXPECT_NE(enc.l_align, post.l_align);
}

TEST(AnswerLoss, ClosedForms) {
  Tape tape;
  const std::vector<int> label42 = {17};
  EXPECT_NEAR(answer_loss(tape.constant(Tensor(Shape{1, 42})), label42).item(), 3.73767, 1e-5);
  const std::vector<int> label1 = {1};
  EXPECT_NEAR(answer_loss(tape.constant(Tensor(Shape{1, 2}, {std::log(1.0), std::log(3.0)})), label1).item(), 0.287682,
              1e-6);
  EXPECT_LT(answer_loss(tape.constant(Tensor(Shape{1, 2}, {0.0, 60.0})), label1).item(), 1e-25);
  const std::vector<int> bad = {2};
  EXPECT_THROW(answer_loss(tape.constant(Tensor(Shape{1, 2})), bad), DomainError);
}

TEST(TotalLoss, SumOfTerms) {
  Tape tape;
  EXPECT_EQ(total_loss(tape.constant(Tensor::scalar(0.0)), tape.constant(Tensor::scalar(1.5))).item(), 1.5);
  EXPECT_NEAR(total_loss(tape.constant(Tensor::scalar(0.125)), tape.constant(Tensor::scalar(3.73767))).item(), 3.86267,
              1e-12);
}

TEST(TotalLoss, GradientIsSumOfTermGradients) {
  const ModelConfig cfg = small_config();
  const ParameterSet ps = init_model(cfg, 12);
  Rng rng(12);
  const Batch batch = random_batch(cfg, 2, 4, rng);
  auto grads_of = [&](int which) {
    Tape tape;
    BoundParameters bp(tape, ps, true);
    Rng drng(0);
    const auto f = shmamba_forward(tape, bp, batch, cfg, false, drng);
    const Var qa = answer_loss(f.logits, batch.labels);
    const Var loss = which == 0 ? total_loss(f.l_align, qa) : which == 1 ? f.l_align : qa;
    const Gradients g = tape.backward(loss);
    return g.of(bp("curvature.weight"));
  };
  const Tensor total = grads_of(0), align = grads_of(1), qa = grads_of(2);
  for (std::size_t i = 0; i < total.numel(); ++i) EXPECT_NEAR(total[i], align[i] + qa[i], 1e-12);
}

TEST(ModelConfig, ValidationAndJson) {
  ModelConfig c = ModelConfig::desk();
  c.dropout = 1.0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = ModelConfig::desk();
  c.k0 = 0.0;
  EXPECT_THROW(c.validate(), ConfigError);

  c = ModelConfig::desk();
  c.align_tap = AlignTap::post_mamba;
  c.gate_source = fusion::GateSource::audio;
  const json j = c;
  const ModelConfig back = j.get<ModelConfig>();
  EXPECT_EQ(json(back), j);

  ModelConfig partial = ModelConfig::desk();
  merge_json(json{{"n_blocks", 2}}, partial);
  EXPECT_EQ(partial.n_blocks, 2u);
  EXPECT_EQ(partial.d_hidden, 64u);
}

TEST(Forward, SingleRowBatchHasNoAlignmentTerm) {
  const ModelConfig cfg = small_config();
  const ParameterSet ps = init_model(cfg, 13);
  Rng rng(13);
  const Forward f = forward(ps, random_batch(cfg, 1, 4, rng), cfg);
  EXPECT_EQ(f.l_align, 0.0);
  EXPECT_GT(f.k, cfg.k0);
  EXPECT_LT(f.k, 0.0);
}
