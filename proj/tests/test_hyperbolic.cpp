#include <gtest/gtest.h>

#include <cmath>

#include "shmamba/gradcheck.hpp"
#include "shmamba/hyperbolic.hpp"

using namespace shmamba;
using namespace shmamba::hyperbolic;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double lo, double hi) {
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = lo + (hi - lo) * uniform01(rng);
  return t;
}

double norm(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

}  // namespace

TEST(ProjectToBall, InteriorUnchangedAndOriginFixed) {
  Tape tape;
  const Curvature c = Curvature::fixed(tape, -0.1);
  const Tensor x = Tensor::matrix({{1.0, -2.0}, {0.0, 0.0}});
  EXPECT_EQ(project_to_ball(tape.constant(x), c).v.value(), x);
}

TEST(ProjectToBall, ClipsToRadius) {
  Tape tape;
  const Curvature c = Curvature::fixed(tape, -0.1, 1e-5);
  const Tensor y = project_to_ball(tape.constant(Tensor::vector({5.0, 0.0})), c).v.value();
  EXPECT_NEAR(y[0], (1.0 - 1e-5) / std::sqrt(0.1), 1e-12);
  EXPECT_NEAR(y[0], 3.16225, 1e-5);
  EXPECT_EQ(y[1], 0.0);
}

TEST(ProjectToBall, NormBoundAndDirectionPreserved) {
  Rng rng(17);
  for (int i = 0; i < 200; ++i) {
    Tape tape;
    const double k = -(0.01 + 2.0 * uniform01(rng));
    const Curvature c = Curvature::fixed(tape, k);
    const Tensor x = random_tensor({5}, rng, -20, 20);
    const Tensor y = project_to_ball(tape.constant(x), c).v.value();
    const double r = (1.0 - c.eps) / std::sqrt(-k);
    EXPECT_LE(norm(y.data()), r * (1.0 + 1e-15));
    if (norm(x.data()) > r) {
      for (std::size_t j = 0; j < 5; ++j) EXPECT_NEAR(y[j] / norm(y.data()), x[j] / norm(x.data()), 1e-12);
    }
  }
}

TEST(MobiusAdd, ZeroIsLeftIdentityExactly) {
  Rng rng(1);
  Tape tape;
  const Curvature c = Curvature::fixed(tape, -1.0);
  const Tensor x = random_tensor({3, 4}, rng, -0.4, 0.4);
  const PoincarePoint zero = project_to_ball(tape.constant(Tensor(Shape{3, 4})), c);
  EXPECT_EQ(mobius_add(zero, project_to_ball(tape.constant(x), c)).v.value(), x);
}

TEST(MobiusAdd, CollinearScalarOracle) {
  Tape tape;
  const Curvature c = Curvature::fixed(tape, -1.0);
  const auto z = project_to_ball(tape.constant(Tensor::vector({0.3, 0.0})), c);
  const auto x = project_to_ball(tape.constant(Tensor::vector({0.2, 0.0})), c);
  const Tensor y = mobius_add(z, x).v.value();
  EXPECT_NEAR(y[0], 0.5 / 1.06, 1e-12);
  EXPECT_NEAR(y[0], 0.471698, 1e-6);
  EXPECT_EQ(y[1], 0.0);
}

TEST(MobiusAdd, InverseCancels) {
  Rng rng(2);
  for (int i = 0; i < 100; ++i) {
    Tape tape;
    const Curvature c = Curvature::fixed(tape, -(0.05 + uniform01(rng)));
    const double r = 0.9 / std::sqrt(c.abs_k());
    Tensor x = random_tensor({6}, rng, -1, 1);
    const double s = r * uniform01(rng) / norm(x.data());
    for (double& v : x.data()) v *= s;
    Tensor neg = x;
    for (double& v : neg.data()) v = -v;
    const Tensor y = mobius_add(project_to_ball(tape.constant(x), c), project_to_ball(tape.constant(neg), c)).v.value();
    EXPECT_LT(norm(y.data()), 1e-9);
  }
}

TEST(MobiusAdd, CurvatureMismatch) {
  Tape tape;
  const Curvature c1 = Curvature::fixed(tape, -1.0);
  const Curvature c2 = Curvature::fixed(tape, -0.5);
  const Tensor x = Tensor::vector({0.1, 0.2});
  EXPECT_THROW(mobius_add(project_to_ball(tape.constant(x), c1), project_to_ball(tape.constant(x), c2)),
               CurvatureMismatchError);
}

TEST(LogMap, Examples) {
  Tape tape;
  const Curvature c1 = Curvature::fixed(tape, -1.0);
  const Curvature c4 = Curvature::fixed(tape, -0.25);
  EXPECT_EQ(log_map_zero(PoincarePoint::unchecked(tape.constant(Tensor::vector({0, 0})), c1)).v.value(),
            Tensor::vector({0, 0}));
  const Tensor a = log_map_zero(PoincarePoint::unchecked(tape.constant(Tensor::vector({0.5, 0})), c1)).v.value();
  EXPECT_NEAR(a[0], std::atanh(0.5), 1e-15);
  EXPECT_NEAR(a[0], 0.549306, 1e-6);
  const Tensor b = log_map_zero(PoincarePoint::unchecked(tape.constant(Tensor::vector({1.0, 0})), c4)).v.value();
  EXPECT_NEAR(b[0], 2.0 * std::atanh(0.5), 1e-15);
  EXPECT_NEAR(b[0], 1.098612, 1e-6);
}

TEST(LogMap, BoundaryIsDomainErrorForRawInput) {
  Tape tape;
  const Curvature c = Curvature::fixed(tape, -1.0);
  EXPECT_THROW(log_map_zero(PoincarePoint::unchecked(tape.constant(Tensor::vector({1.0, 0})), c)), DomainError);
  EXPECT_THROW(log_map_zero(PoincarePoint::unchecked(tape.constant(Tensor::vector({0.8, 0.8})), c)), DomainError);
}

TEST(ExpMap, ExamplesAndRoundTrip) {
  Tape tape;
  const Curvature c = Curvature::fixed(tape, -1.0);
  EXPECT_EQ(exp_map_zero(TangentVector{tape.constant(Tensor::vector({0, 0})), c}).v.value(), Tensor::vector({0, 0}));
  const Tensor y = exp_map_zero(TangentVector{tape.constant(Tensor::vector({0.549306, 0})), c}).v.value();
  EXPECT_NEAR(y[0], 0.5, 1e-6);

  Rng rng(5);
  for (int i = 0; i < 200; ++i) {
    Tape t;
    const Curvature ci = Curvature::fixed(t, -(0.01 + 3.0 * uniform01(rng)));
    Tensor x = random_tensor({4}, rng, -1, 1);
    const double s = 0.9 / std::sqrt(ci.abs_k()) * uniform01(rng) / norm(x.data());
    for (double& v : x.data()) v *= s;
    const auto back = exp_map_zero(log_map_zero(PoincarePoint::unchecked(t.constant(x), ci)));
    EXPECT_LT(max_abs_diff(back.v.value(), x), 1e-9);
  }
}

TEST(ConformalFactor, StandardDefinition) {
  EXPECT_EQ(conformal_factor(Tensor::matrix({{0, 0}}), 0.3)[0], 2.0);
  EXPECT_NEAR(conformal_factor(Tensor::matrix({{0.5, 0}}), 1.0)[0], 2.0 / 0.75, 1e-15);
  EXPECT_THROW(conformal_factor(Tensor::matrix({{1.0, 0}}), 1.0), DomainError);
}

TEST(AdaptiveCurvature, ZeroHeadGivesHalfK0) {
  Rng rng(1);
  Tape tape;
  const Var a = tape.constant(random_tensor({2, 3, 4}, rng, -1, 1));
  const Var v = tape.constant(random_tensor({2, 3, 4}, rng, -1, 1));
  const CurvatureHead head{tape.constant(Tensor(Shape{8, 1})), tape.constant(Tensor(Shape{1}))};
  EXPECT_EQ(adaptive_curvature(a, v, head, -0.1).value(), -0.05);
}

TEST(AdaptiveCurvature, StrictlyInsideOpenInterval) {
  Rng rng(2);
  for (double bias : {-1e6, -40.0, -3.0, 0.0, 3.0, 40.0, 1e6}) {
    Tape tape;
    const Var a = tape.constant(random_tensor({2, 3, 4}, rng, -1, 1));
    const Var v = tape.constant(random_tensor({2, 3, 4}, rng, -1, 1));
    const CurvatureHead head{tape.constant(random_tensor({8, 1}, rng, -1, 1)), tape.constant(Tensor::vector({bias}))};
    const double k = adaptive_curvature(a, v, head, -0.1).value();
    EXPECT_GT(k, -0.1) << bias;
    EXPECT_LT(k, 0.0) << bias;
  }
}

TEST(AdaptiveCurvature, ShapeMismatch) {
  Tape tape;
  const CurvatureHead head{tape.constant(Tensor(Shape{8, 1})), tape.constant(Tensor(Shape{1}))};
  EXPECT_THROW(adaptive_curvature(tape.constant(Tensor(Shape{2, 3, 4})), tape.constant(Tensor(Shape{2, 2, 4})), head, -0.1),
               ShapeError);
}

TEST(CosineSimilarity, Examples) {
  Tape tape;
  EXPECT_EQ(cosine_similarity_matrix(tape.constant(Tensor::matrix({{1, 0}, {0, 1}}))).w.value(),
            Tensor::matrix({{1, 0}, {0, 1}}));
  const Tensor w = cosine_similarity_matrix(tape.constant(Tensor::matrix({{1, 0}, {1, 1}}))).w.value();
  EXPECT_NEAR(w.at({0, 1}), 1.0 / std::sqrt(2.0), 1e-15);
  EXPECT_NEAR(w.at({1, 0}), 1.0 / std::sqrt(2.0), 1e-15);
  const Tensor same = cosine_similarity_matrix(tape.constant(Tensor::matrix({{2, 3}, {2, 3}}))).w.value();
  EXPECT_NEAR(same.at({0, 1}), 1.0, 1e-15);
}

TEST(CosineSimilarity, ZeroRowIsDegenerate) {
  Tape tape;
  EXPECT_THROW(cosine_similarity_matrix(tape.constant(Tensor::matrix({{1, 0}, {0, 0}}))), DegenerateFeatureError);
}

TEST(CosineSimilarity, SymmetricUnitDiagonal) {
  Rng rng(3);
  Tape tape;
  const Tensor w = cosine_similarity_matrix(tape.constant(random_tensor({5, 3}, rng, -1, 1))).w.value();
  for (std::size_t i = 0; i < 5; ++i) {
    EXPECT_NEAR(w.at({i, i}), 1.0, 1e-9);
    for (std::size_t j = 0; j < 5; ++j) {
      EXPECT_EQ(w.at({i, j}), w.at({j, i}));
      EXPECT_LE(std::abs(w.at({i, j})), 1.0 + 1e-12);
    }
  }
}

TEST(AlignmentLoss, InjectedMatrices) {
  Tape tape;
  const Var wv = tape.constant(Tensor::matrix({{1, 0.5}, {0.5, 1}}));
  const Var wa = tape.constant(Tensor::matrix({{1, 0}, {0, 1}}));
  EXPECT_EQ(alignment_from_matrices(wv, wa).item(), 0.125);
}

TEST(AlignmentLoss, ZeroOnIdenticalSymmetricNonNegative) {
  Rng rng(8);
  for (SimilarityNorm mode : {SimilarityNorm::row_l2, SimilarityNorm::frobenius}) {
    for (int i = 0; i < 20; ++i) {
      Tape tape;
      const Curvature c = Curvature::fixed(tape, -0.1);
      const Tensor a = random_tensor({4, 3, 5}, rng, -2, 2);
      const Tensor v = random_tensor({4, 3, 5}, rng, -2, 2);
      EXPECT_EQ(alignment_loss(tape.constant(a), tape.constant(a), c, mode).item(), 0.0);
      const double av = alignment_loss(tape.constant(v), tape.constant(a), c, mode).item();
      const double va = alignment_loss(tape.constant(a), tape.constant(v), c, mode).item();
      EXPECT_GE(av, 0.0);
      EXPECT_EQ(av, va);
    }
  }
}

TEST(AlignmentLoss, NeedsBatchOfTwo) {
  Tape tape;
  const Curvature c = Curvature::fixed(tape, -0.1);
  EXPECT_THROW(alignment_loss(tape.constant(Tensor(Shape{1, 2, 3}, 1.0)), tape.constant(Tensor(Shape{1, 2, 3}, 1.0)), c),
               ShapeError);
}

// Projection and the origin log map only rescale each pooled row, and cosine
// similarity discards row scale, so k drops out up to rounding.
TEST(AlignmentLoss, InvariantToCurvature) {
  Rng rng(12);
  const Tensor v = random_tensor({4, 3, 5}, rng, -4, 4);
  const Tensor a = random_tensor({4, 3, 5}, rng, -4, 4);
  for (SimilarityNorm mode : {SimilarityNorm::row_l2, SimilarityNorm::frobenius}) {
    Tape tape;
    const double ref = alignment_loss(tape.constant(v), tape.constant(a), Curvature::fixed(tape, -0.1), mode).item();
    EXPECT_GT(ref, 0.0);
    for (double k : {-0.01, -0.5, -3.0}) {
      EXPECT_NEAR(alignment_loss(tape.constant(v), tape.constant(a), Curvature::fixed(tape, k), mode).item(), ref,
                  1e-14);
    }
  }
}

TEST(AlignmentLoss, GradCheckThroughClippingBranch) {
  // Features far outside the ball so every pooled row is clipped.
  Rng rng(4);
  std::vector<Tensor> pts{random_tensor({3, 2, 4}, rng, 2, 6), random_tensor({3, 2, 4}, rng, -6, -2),
                          random_tensor({8, 1}, rng, -1, 1), Tensor::vector({0.2})};
  MultiScalarFn f = [](Tape&, std::span<const Var> v) {
    const Curvature c = adaptive_curvature(v[1], v[0], CurvatureHead{v[2], v[3]}, -0.1);
    return alignment_loss(v[0], v[1], c);
  };
  EXPECT_LT(grad_check(f, pts).max_rel_error, 1e-4);
}

TEST(Curvature, Validation) {
  Tape tape;
  EXPECT_THROW(Curvature::fixed(tape, 0.0), DomainError);
  EXPECT_THROW(Curvature::fixed(tape, 0.3), DomainError);
  EXPECT_THROW(Curvature::fixed(tape, -0.1, 0.5), DomainError);
}

TEST(SimilarityNorm, StringRoundTrip) {
  EXPECT_EQ(similarity_norm_from_string(to_string(SimilarityNorm::row_l2)), SimilarityNorm::row_l2);
  EXPECT_EQ(similarity_norm_from_string(to_string(SimilarityNorm::frobenius)), SimilarityNorm::frobenius);
  EXPECT_THROW(similarity_norm_from_string("max"), ConfigError);
}
