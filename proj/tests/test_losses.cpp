#include <cmath>
#include <numbers>

#include <gtest/gtest.h>

#include "dpc/losses.hpp"
#include "dpc/testing/oracles.hpp"
#include "dpc/testing/selfcheck.hpp"

using namespace dpc;
using selfcheck::detail::random_features;
using selfcheck::detail::random_points;
using selfcheck::detail::to_pts;
using selfcheck::detail::to_rows;

namespace {

Matrix<double> rows(std::initializer_list<std::initializer_list<double>> r) {
  Matrix<double> m(static_cast<Eigen::Index>(r.size()), static_cast<Eigen::Index>(r.begin()->size()));
  Eigen::Index i = 0;
  for (const auto& row : r) {
    Eigen::Index j = 0;
    for (double v : row) m(i, j++) = v;
    ++i;
  }
  return m;
}

LatentNeighborhood<double> neighborhood(std::vector<std::vector<Index>> idx, std::vector<std::vector<double>> w) {
  LatentNeighborhood<double> nb;
  nb.k = idx.front().size();
  nb.indices = IndexTable(idx.size(), nb.k);
  nb.weights.resize(static_cast<Eigen::Index>(idx.size()), static_cast<Eigen::Index>(nb.k));
  for (std::size_t i = 0; i < idx.size(); ++i)
    for (std::size_t t = 0; t < nb.k; ++t) {
      nb.indices(i, t) = idx[i][t];
      nb.weights(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(t)) = w[i][t];
    }
  return nb;
}

LossWeights small_weights() {
  LossWeights w;
  w.k_cc = 3;
  w.k_sc = 3;
  w.k_m = 3;
  return w;
}

}  // namespace

TEST(CrossConstruct, WorkedExamples) {
  const auto y = rows({{0, 0, 0}, {3, 0, 0}, {1, 2, 3}});
  const auto one = cross_construct(neighborhood({{2}}, {{1.0}}), y);
  EXPECT_EQ(one.constructed.row(0), y.row(2));

  const auto uni = cross_construct(neighborhood({{0, 1, 2}}, {{1.0 / 3, 1.0 / 3, 1.0 / 3}}), y);
  EXPECT_TRUE(uni.constructed.row(0).isApprox(y.colwise().mean()));

  const auto third = cross_construct(neighborhood({{0, 1}}, {{1.0 / 3, 2.0 / 3}}), y);
  EXPECT_NEAR((third.constructed.row(0) - Eigen::RowVector3d(2, 0, 0)).norm(), 0.0, 1e-15);
}

TEST(CrossConstruct, RejectsOutOfRangeIndex) {
  EXPECT_THROW(cross_construct(neighborhood({{5}}, {{1.0}}), rows({{0, 0, 0}})), InvalidArgument);
}

TEST(CrossConstruct, StaysInsideBoundingBox) {
  Rng rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    const auto x = random_points(rng, 30, 2.0);
    const auto y = random_points(rng, 25, 5.0);
    const auto fx = random_features(rng, 30, 6);
    const auto fy = random_features(rng, 25, 6);
    const auto s = cosine_similarity(fx, fy);
    const auto c = cross_construct(softmax_weights(s, top_k_neighborhood(s, 10, false)), y).constructed;
    const auto sc = self_construct(fx, x, 10).constructed;
    for (int d = 0; d < 3; ++d) {
      EXPECT_GE(c.col(d).minCoeff(), y.col(d).minCoeff() - 1e-12);
      EXPECT_LE(c.col(d).maxCoeff(), y.col(d).maxCoeff() + 1e-12);
      EXPECT_GE(sc.col(d).minCoeff(), x.col(d).minCoeff() - 1e-12);
      EXPECT_LE(sc.col(d).maxCoeff(), x.col(d).maxCoeff() + 1e-12);
    }
  }
}

TEST(SelfConstruct, TwinFeaturesSwapCoordinates) {
  const auto x = rows({{0, 0, 0}, {1, 0, 0}, {0, 5, 0}, {0, 0, 7}});
  const auto f = rows({{1, 0, 0}, {1, 0, 0}, {0, 1, 0}, {0, 0.2, 1}});
  const auto r = self_construct(f, x, 1).constructed;
  EXPECT_EQ(r.row(0), x.row(1));
  EXPECT_EQ(r.row(1), x.row(0));
}

TEST(SelfConstruct, IdenticalFeaturesGiveLeaveOneOutCentroid) {
  Rng rng(2);
  const auto x = random_points(rng, 9);
  const Matrix<double> f = Matrix<double>::Ones(9, 4);
  const auto r = self_construct(f, x, 8).constructed;
  const Eigen::RowVector3d sum = x.colwise().sum();
  for (Eigen::Index i = 0; i < 9; ++i) EXPECT_LT((r.row(i) - (sum - x.row(i)) / 8.0).norm(), 1e-14);
}

TEST(SelfConstruct, ColinearHandCase) {
  const auto x = rows({{0, 0, 0}, {1, 0, 0}, {2, 0, 0}});
  const auto f = rows({{1, 0}, {1, 1}, {0, 1}});
  const auto r = self_construct(f, x, 2).constructed;
  // Row 0 sees cos 1/sqrt2 with point 1 and 0 with point 2.
  const double a = std::exp(1 / std::numbers::sqrt2);
  EXPECT_NEAR(r(0, 0), (a * 1 + 1 * 2) / (a + 1), 1e-14);
  // Row 1 sees equal similarity with both neighbors.
  EXPECT_NEAR(r(1, 0), 1.0, 1e-14);
  const auto want = oracle::construct(oracle::cosine(to_rows(f), to_rows(f)), to_pts(x), 2, true);
  for (int i = 0; i < 3; ++i) EXPECT_NEAR(r(i, 0), want[static_cast<std::size_t>(i)][0], 1e-14);
}

TEST(SelfConstruct, RejectsTooLargeK) {
  EXPECT_THROW(self_construct(rows({{1, 0}, {0, 1}}), rows({{0, 0, 0}, {1, 1, 1}}), 2), InvalidArgument);
}

TEST(Chamfer, WorkedExamples) {
  Rng rng(3);
  const auto p = random_points(rng, 12);
  EXPECT_EQ(chamfer_distance(p, p), 0.0);
  EXPECT_DOUBLE_EQ(chamfer_distance(rows({{0, 0, 0}}), rows({{1, 0, 0}})), 2.0);
  EXPECT_DOUBLE_EQ(chamfer_distance(rows({{0, 0, 0}, {2, 0, 0}}), rows({{0, 0, 0}})), 2.0);
  EXPECT_THROW(chamfer_distance(Matrix<double>(0, 3), p), InvalidArgument);
}

TEST(Chamfer, SymmetricAndMatchesOracle) {
  Rng rng(4);
  for (int trial = 0; trial < 50; ++trial) {
    const auto p = random_points(rng, 1 + uniform_index(rng, 40));
    const auto q = random_points(rng, 1 + uniform_index(rng, 40));
    EXPECT_EQ(chamfer_distance(p, q), chamfer_distance(q, p));
    EXPECT_LT(oracle::relative_error(chamfer_distance(p, q), oracle::chamfer(to_pts(p), to_pts(q)), 1e-300), 1e-9);
  }
}

TEST(Chamfer, SelfcheckSuitePasses) {
  const auto r = selfcheck::chamfer_oracle(200, 64, 31);
  EXPECT_TRUE(r.passed) << r.detail;
}

TEST(Chamfer, BackwardMatchesFiniteDifferences) {
  Rng rng(5);
  Matrix<double> p = random_points(rng, 7);
  Matrix<double> q = random_points(rng, 9);
  const auto r = chamfer(p, q);
  Matrix<double> gp = Matrix<double>::Zero(7, 3), gq = Matrix<double>::Zero(9, 3);
  chamfer_backward(p, q, r, 1.0, &gp, &gq);
  const double h = 1e-7;
  for (Eigen::Index e = 0; e < p.size(); ++e) {
    const double o = p.data()[e];
    p.data()[e] = o + h;
    const double lp = chamfer_distance(p, q);
    p.data()[e] = o - h;
    const double lm = chamfer_distance(p, q);
    p.data()[e] = o;
    EXPECT_NEAR(gp.data()[e], (lp - lm) / (2 * h), 1e-6);
  }
  for (Eigen::Index e = 0; e < q.size(); ++e) {
    const double o = q.data()[e];
    q.data()[e] = o + h;
    const double lp = chamfer_distance(p, q);
    q.data()[e] = o - h;
    const double lm = chamfer_distance(p, q);
    q.data()[e] = o;
    EXPECT_NEAR(gq.data()[e], (lp - lm) / (2 * h), 1e-6);
  }
}

TEST(CrossLoss, WorkedExamples) {
  const auto y = rows({{0, 0, 0}, {1, 1, 1}, {2, 0, 1}});
  ConstructionResult<double> exact{y, {}};
  EXPECT_EQ(cross_loss(y, exact), 0.0);
  ConstructionResult<double> single{rows({{1, 0, 0}}), {}};
  EXPECT_DOUBLE_EQ(cross_loss(rows({{0, 0, 0}}), single), 2.0);
}

TEST(CrossLoss, GrowsWithSmallTranslations) {
  Rng rng(6);
  const auto y = random_points(rng, 40);
  const Eigen::RowVector3d dir = Eigen::RowVector3d(1, 2, -1).normalized();
  double prev = -1;
  for (int s = 0; s <= 10; ++s) {
    ConstructionResult<double> moved{y.rowwise() + dir * (0.002 * s), {}};
    const double l = cross_loss(y, moved);
    EXPECT_GT(l, prev);
    prev = l;
  }
}

TEST(MappingLoss, WorkedExamples) {
  const auto x = rows({{0, 0, 0}, {1, 0, 0}});
  ConstructionResult<double> same{rows({{4, 4, 4}, {4, 4, 4}}), {}};
  EXPECT_EQ(mapping_loss(x, same, 1, 8.0), 0.0);
  ConstructionResult<double> gap{rows({{0, 0, 0}, {0, 1, 0}}), {}};
  EXPECT_NEAR(mapping_loss(x, gap, 1, 8.0), std::exp(-1.0 / 8.0), 1e-15);
  EXPECT_NEAR(mapping_loss(x, gap, 1, 8.0), 0.88250, 1e-5);
}

TEST(MappingLoss, LargeAlphaApproachesUnweightedMean) {
  Rng rng(7);
  const auto x = random_points(rng, 20);
  ConstructionResult<double> yhat{random_points(rng, 20), {}};
  const auto nb = mapping_neighborhood(x, 4, 1e9);
  double plain = 0;
  for (std::size_t i = 0; i < 20; ++i)
    for (std::size_t t = 0; t < 4; ++t)
      plain += (yhat.constructed.row(static_cast<Eigen::Index>(i)) - yhat.constructed.row(nb.indices(i, t))).squaredNorm();
  plain /= 80.0;
  EXPECT_NEAR(mapping_loss(x, yhat, 4, 1e9), plain, 1e-8 * plain);
  EXPECT_NEAR(mapping_loss(x, yhat, 4, 8.0), oracle::mapping(to_pts(x), to_pts(yhat.constructed), 4, 8.0), 1e-14);
}

TEST(MappingLoss, BackwardMatchesFiniteDifferences) {
  Rng rng(8);
  const auto x = random_points(rng, 10);
  Matrix<double> yhat = random_points(rng, 10);
  const auto nb = mapping_neighborhood(x, 3, 8.0);
  Matrix<double> g = Matrix<double>::Zero(10, 3);
  mapping_loss_backward(nb, yhat, 1.0, g);
  for (Eigen::Index e = 0; e < yhat.size(); ++e) {
    const double o = yhat.data()[e], h = 1e-6;
    yhat.data()[e] = o + h;
    const double lp = mapping_loss(nb, yhat);
    yhat.data()[e] = o - h;
    const double lm = mapping_loss(nb, yhat);
    yhat.data()[e] = o;
    EXPECT_NEAR(g.data()[e], (lp - lm) / (2 * h), 1e-8);
  }
}

TEST(MappingLoss, RejectsTooLargeK) {
  ConstructionResult<double> y{rows({{0, 0, 0}, {1, 0, 0}}), {}};
  EXPECT_THROW(mapping_loss(rows({{0, 0, 0}, {1, 0, 0}}), y, 2, 8.0), InvalidArgument);
}

TEST(TotalLoss, AllLambdasZeroGivesZero) {
  Rng rng(9);
  LossWeights w = small_weights();
  w.lambda_cc = w.lambda_sc = w.lambda_m = 0;
  const auto pl = total_loss<double>(random_points(rng, 10), random_points(rng, 10), random_features(rng, 10, 4),
                                     random_features(rng, 10, 4), w, SimilarityKind::Cosine, true);
  EXPECT_EQ(pl.breakdown.total, 0.0);
  EXPECT_TRUE(pl.grad_fx.isZero(0.0));
  EXPECT_TRUE(pl.grad_fy.isZero(0.0));
}

TEST(TotalLoss, DiscriminativeFeaturesOnSameCloudGiveZeroCrossTerms) {
  // One-hot features make S the identity; with a single latent neighbor every
  // point constructs itself exactly.
  Rng rng(10);
  const auto x = random_points(rng, 12);
  const Matrix<double> f = Matrix<double>::Identity(12, 12);
  LossWeights w = small_weights();
  w.k_cc = 1;
  const auto pl = total_loss<double>(x, x, f, f, w);
  EXPECT_EQ(pl.breakdown.cc_target, 0.0);
  EXPECT_EQ(pl.breakdown.cc_source, 0.0);
  EXPECT_GT(pl.breakdown.sc_source, 0.0);
}

TEST(TotalLoss, MatchesIndependentOracle) {
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    const auto x = random_points(rng, 8);
    const auto y = random_points(rng, 8);
    const auto fx = random_features(rng, 8, 4);
    const auto fy = random_features(rng, 8, 4);
    LossWeights w = small_weights();
    w.lambda_cc = uniform(rng, 0, 2);
    w.lambda_sc = uniform(rng, 0, 20);
    w.lambda_m = uniform(rng, 0, 2);
    w.alpha = uniform(rng, 0.5, 10);
    const auto b = total_loss<double>(x, y, fx, fy, w).breakdown;
    const auto o = oracle::total_loss(to_pts(x), to_pts(y), to_rows(fx), to_rows(fy), w.lambda_cc, w.lambda_sc,
                                      w.lambda_m, w.alpha, w.k_cc, w.k_sc, w.k_m);
    EXPECT_NEAR(b.cc_target, o.cc_target, 1e-12);
    EXPECT_NEAR(b.cc_source, o.cc_source, 1e-12);
    EXPECT_NEAR(b.sc_source, o.sc_source, 1e-12);
    EXPECT_NEAR(b.sc_target, o.sc_target, 1e-12);
    EXPECT_NEAR(b.map_source, o.map_source, 1e-12);
    EXPECT_NEAR(b.map_target, o.map_target, 1e-12);
    EXPECT_NEAR(b.total, o.total, 1e-9);
    EXPECT_NEAR(b.total, weighted_total(b, w), 1e-12);
    for (double v : {b.cc_target, b.cc_source, b.sc_source, b.sc_target, b.map_source, b.map_target})
      EXPECT_GE(v, 0.0);
  }
}

TEST(TotalLoss, SwapExchangesTermsExactly) {
  Rng rng(12);
  const auto x = random_points(rng, 15);
  const auto y = random_points(rng, 15);
  const auto fx = random_features(rng, 15, 5);
  const auto fy = random_features(rng, 15, 5);
  const auto w = small_weights();
  const auto a = total_loss<double>(x, y, fx, fy, w, SimilarityKind::Cosine, true);
  const auto b = total_loss<double>(y, x, fy, fx, w, SimilarityKind::Cosine, true);
  EXPECT_EQ(a.breakdown.cc_target, b.breakdown.cc_source);
  EXPECT_EQ(a.breakdown.cc_source, b.breakdown.cc_target);
  EXPECT_EQ(a.breakdown.sc_source, b.breakdown.sc_target);
  EXPECT_EQ(a.breakdown.sc_target, b.breakdown.sc_source);
  EXPECT_EQ(a.breakdown.map_source, b.breakdown.map_target);
  EXPECT_EQ(a.breakdown.map_target, b.breakdown.map_source);
  EXPECT_EQ(a.breakdown.total, b.breakdown.total);
  EXPECT_EQ(a.grad_fx, b.grad_fy);
  EXPECT_EQ(a.grad_fy, b.grad_fx);
}

TEST(TotalLoss, FeatureGradientsMatchFiniteDifferences) {
  Rng rng(13);
  const auto x = random_points(rng, 8);
  const auto y = random_points(rng, 8);
  Matrix<double> fx = random_features(rng, 8, 4);
  Matrix<double> fy = random_features(rng, 8, 4);
  for (auto kind : {SimilarityKind::Cosine, SimilarityKind::Dot}) {
    const auto w = small_weights();
    const auto base = total_loss<double>(x, y, fx, fy, w, kind, true);
    std::size_t checked = 0;
    for (auto [f, g] : {std::pair{&fx, &base.grad_fx}, std::pair{&fy, &base.grad_fy}}) {
      for (Eigen::Index e = 0; e < f->size(); ++e) {
        const double o = f->data()[e], h = 1e-4;
        f->data()[e] = o + h;
        const auto lp = total_loss<double>(x, y, fx, fy, w, kind);
        f->data()[e] = o - h;
        const auto lm = total_loss<double>(x, y, fx, fy, w, kind);
        f->data()[e] = o;
        if (lp.selection_hash != base.selection_hash || lm.selection_hash != base.selection_hash) continue;
        EXPECT_LT(oracle::relative_error(g->data()[e], (lp.breakdown.total - lm.breakdown.total) / (2 * h)), 1e-4)
            << "entry " << e;
        ++checked;
      }
    }
    EXPECT_GT(checked, 48u);
  }
}

TEST(TotalLoss, FullCrossNeighborhoodEqualsKEqualsN) {
  Rng rng(14);
  const auto x = random_points(rng, 10);
  const auto y = random_points(rng, 10);
  const auto fx = random_features(rng, 10, 4);
  const auto fy = random_features(rng, 10, 4);
  LossWeights full = small_weights();
  full.k_cc_full = true;
  LossWeights explicit_n = small_weights();
  explicit_n.k_cc = 10;
  EXPECT_EQ(total_loss<double>(x, y, fx, fy, full).breakdown.total,
            total_loss<double>(x, y, fx, fy, explicit_n).breakdown.total);
}

TEST(TotalLoss, AblationWeightsDropTheirTerms) {
  Rng rng(15);
  const auto x = random_points(rng, 10);
  const auto y = random_points(rng, 10);
  const auto fx = random_features(rng, 10, 4);
  const auto fy = random_features(rng, 10, 4);
  const auto full = total_loss<double>(x, y, fx, fy, small_weights()).breakdown;
  LossWeights no_sc = small_weights();
  no_sc.lambda_sc = 0;
  const auto b = total_loss<double>(x, y, fx, fy, no_sc).breakdown;
  EXPECT_DOUBLE_EQ(b.total, full.cc_target + full.cc_source + full.map_source + full.map_target);
  LossWeights no_m = small_weights();
  no_m.lambda_m = 0;
  EXPECT_DOUBLE_EQ(total_loss<double>(x, y, fx, fy, no_m).breakdown.total,
                   full.cc_target + full.cc_source + 10 * (full.sc_source + full.sc_target));
}

TEST(LossWeights, Validation) {
  LossWeights w;
  w.lambda_sc = -1;
  EXPECT_THROW(w.validate(), InvalidArgument);
  w = LossWeights{};
  w.alpha = 0;
  EXPECT_THROW(w.validate(), InvalidArgument);
  w = LossWeights{};
  w.k_m = 0;
  EXPECT_THROW(w.validate(), InvalidArgument);
}
