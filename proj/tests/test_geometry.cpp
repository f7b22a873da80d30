#include <gtest/gtest.h>

#include <cmath>

#include "fixtures.hpp"

using namespace xpatch;

namespace {

// Linear fixture with the two compared lm_head rows scaled up so the native
// gap clears the finite-denominator threshold.
fx::LinearFixture fixture() {
  auto f = fx::linear_fixture();
  for (auto* m : {&f.pair.pt, &f.pair.it})
    for (TokenId t : {f.t_it, f.t_pt})
      for (std::size_t i = 0; i < 16; ++i) m->lm_head[static_cast<std::size_t>(t) * 16 + i] *= 4.0f;
  return f;
}

// Linear fixture whose descendant embedding is the base plus one constant vector.
PairedCheckpoints constant_shift_pair(const std::vector<float>& c) {
  auto f = fx::linear_fixture();
  auto it = f.pair.pt;
  it.layers[1] = f.pair.it.layers[1];
  for (std::size_t t = 0; t < static_cast<std::size_t>(it.config.vocab_size); ++t)
    for (std::size_t i = 0; i < 16; ++i) it.embed[t * 16 + i] += c[i];
  return {f.pair.pt, it};
}

}  // namespace

TEST(Pca, ConstantShiftIsOneComponent) {
  std::vector<float> c(16, 0.0f);
  c[4] = 0.6f;
  c[9] = -0.8f;
  const auto pair = constant_shift_pair(c);
  const auto f = fixture();
  const auto p = fit_boundary_pca(pair, f.events, 1);
  EXPECT_NEAR(p.variances[0], 1.0, 1e-6);
  for (int i = 1; i < 16; ++i) EXPECT_LT(p.variances[i], 1e-10);
  EXPECT_NEAR(std::abs(p.components(0, 4)), 0.6, 1e-6);
  EXPECT_NEAR(std::abs(p.components(0, 9)), 0.8, 1e-6);
  EXPECT_NEAR(p.mean[4], 0.6, 1e-6);
  EXPECT_LT(p.coord_var.maxCoeff(), 1e-10);
}

TEST(Pca, IdenticalPairHasNoVariance) {
  const auto f = fixture();
  const PairedCheckpoints pair{f.pair.pt, f.pair.pt};
  const auto p = fit_boundary_pca(pair, f.events, 1);
  EXPECT_EQ(p.variances.maxCoeff(), 0.0);
  EXPECT_EQ(p.mean.norm(), 0.0);
  const auto r = closure_test(pair, p, f.events, 2, ClosureControl::none, Readout::common_it);
  EXPECT_TRUE(r.degenerate);
  EXPECT_TRUE(json(r)["closure_fraction"].is_null());
}

TEST(Pca, RecoversPlantedRankTwoSubspace) {
  const auto f = fixture();
  const auto p = fit_boundary_pca(f.pair, f.events, 1);
  // Singular values of the 2x2 block against span{e1, e2} are the cosines
  // of the principal angles.
  Eigen::MatrixXd m(2, 2);
  m << p.components(0, 1), p.components(0, 2), p.components(1, 1), p.components(1, 2);
  const Eigen::JacobiSVD<Eigen::MatrixXd> svd(m);
  const double min_cos = svd.singularValues().minCoeff();
  EXPECT_LT(std::acos(std::min(1.0, min_cos)) * 180.0 / M_PI, 5.0);
  EXPECT_GT(p.variances[1], 100 * p.variances[2]);
}

TEST(Pca, ComponentsAreOrthonormalWithFixedSigns) {
  const auto f = fixture();
  const auto p = fit_boundary_pca(f.pair, f.events, 1);
  const Eigen::MatrixXd gram = p.components * p.components.transpose();
  EXPECT_LT((gram - Eigen::MatrixXd::Identity(16, 16)).cwiseAbs().maxCoeff(), 1e-9);
  for (Eigen::Index r = 0; r < 16; ++r) {
    for (Eigen::Index c = 0; c < 16; ++c) {
      if (p.components(r, c) == 0.0) continue;
      EXPECT_GT(p.components(r, c), 0.0);
      break;
    }
  }
  for (Eigen::Index i = 1; i < 16; ++i) EXPECT_LE(p.variances[i], p.variances[i - 1]);
}

TEST(Closure, FullDeltaIsExactAndRankZeroIsFloor) {
  const auto f = fixture();
  const auto p = fit_boundary_pca(f.pair, f.events, 1);
  const auto full = closure_test(f.pair, p, f.events, 0, ClosureControl::full_delta, Readout::common_it);
  EXPECT_EQ(full.closure_fraction, 1.0);
  EXPECT_EQ(full.rescued_margin, full.native_margin);
  const auto zero = closure_test(f.pair, p, f.events, 0, ClosureControl::none, Readout::common_it, false);
  EXPECT_EQ(zero.closure_fraction, 0.0);
  EXPECT_EQ(zero.rescued_margin, zero.floor_margin);
}

TEST(Closure, FullDeltaExactOnToy) {
  const auto& toy = fx::gated_toy();
  const auto ev = fx::subsample(toy.events, 10);
  const int b = toy.pair.pt.config.boundary();
  const auto p = fit_boundary_pca(toy.pair, ev, b);
  const auto full = closure_test(toy.pair, p, ev, 0, ClosureControl::full_delta, Readout::common_it);
  EXPECT_EQ(full.closure_fraction, 1.0);
  const auto zero = closure_test(toy.pair, p, ev, 0, ClosureControl::none, Readout::common_it, false);
  EXPECT_EQ(zero.closure_fraction, 0.0);
}

TEST(Closure, LinearFixtureRankTwoAndControls) {
  const auto f = fixture();
  const auto [train, heldout] = split_events(f.events, 3);
  ASSERT_FALSE(heldout.empty());
  const auto p = fit_boundary_pca(f.pair, train, 1);
  const auto r2 = closure_test(f.pair, p, heldout, 2, ClosureControl::none, Readout::common_it);
  EXPECT_GE(r2.closure_fraction, 0.95);
  // Linear late stack: the negated delta moves the margin by the same amount the other way.
  const auto s = closure_test(f.pair, p, heldout, 0, ClosureControl::sign_flip_full, Readout::common_it);
  EXPECT_NEAR(s.closure_fraction, -1.0, 1e-4);
  double g = 0, rnd = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    g += closure_test(f.pair, p, f.events, 0, ClosureControl::gaussian_full, Readout::common_it, true, seed)
             .closure_fraction;
    rnd += closure_test(f.pair, p, f.events, 0, ClosureControl::random_full, Readout::common_it, true, seed)
               .closure_fraction;
  }
  EXPECT_LE(std::abs(g / 20), 0.05);
  EXPECT_LE(std::abs(rnd / 20), 0.2);
}

TEST(Closure, InvariantToBasisWithinSubspace) {
  const auto f = fixture();
  const auto p = fit_boundary_pca(f.pair, f.events, 1);
  const auto a = closure_test(f.pair, p, f.events, 2, ClosureControl::none, Readout::common_it);
  auto q = p;
  const double th = 0.7;
  Eigen::Matrix2d rot;
  rot << std::cos(th), -std::sin(th), std::sin(th), std::cos(th);
  q.components.topRows(2) = rot * p.components.topRows(2);
  q.components.row(0) *= -1.0;
  const auto b = closure_test(f.pair, q, f.events, 2, ClosureControl::none, Readout::common_it);
  EXPECT_NEAR(a.closure_fraction, b.closure_fraction, 1e-6);
  const auto all = closure_test(f.pair, p, f.events, 16, ClosureControl::none, Readout::common_it);
  EXPECT_NEAR(all.closure_fraction, 1.0, 1e-5);
}

TEST(Closure, RejectsBadArguments) {
  const auto f = fixture();
  const auto p = fit_boundary_pca(f.pair, f.events, 1);
  EXPECT_THROW(closure_test(f.pair, p, f.events, 17, ClosureControl::none, Readout::common_it), Error);
  EXPECT_THROW(closure_test(f.pair, p, {}, 1, ClosureControl::none, Readout::common_it), Error);
  EXPECT_THROW(fit_boundary_pca(f.pair, f.events, 0), Error);
  EXPECT_THROW(fit_boundary_pca(f.pair, f.events, 2), Error);
  EXPECT_THROW(split_events(f.events, 1), Error);
}

TEST(Closure, RankDeficientFlag) {
  const auto f = fixture();
  const std::vector<DivergenceEvent> two(f.events.begin(), f.events.begin() + 2);
  const auto p = fit_boundary_pca(f.pair, two, 1);
  EXPECT_TRUE(closure_test(f.pair, p, f.events, 4, ClosureControl::none, Readout::common_it).rank_deficient);
  EXPECT_FALSE(closure_test(f.pair, p, f.events, 2, ClosureControl::none, Readout::common_it).rank_deficient);
}

TEST(Persistence, PcaRoundTrip) {
  const auto f = fixture();
  const auto p = fit_boundary_pca(f.pair, f.events, 1);
  const auto dir = fx::temp_dir("pca");
  save_pca(p, dir / "p.xpca");
  const auto back = load_pca(dir / "p.xpca");
  EXPECT_EQ(back.boundary, 1);
  EXPECT_EQ(back.n_samples, f.events.size());
  EXPECT_EQ(serialize_pca(back), serialize_pca(p));
  EXPECT_LT((back.components - p.components).cwiseAbs().maxCoeff(), 1e-6);
}
