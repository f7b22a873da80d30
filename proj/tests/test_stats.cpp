#include <gtest/gtest.h>

#include <cmath>
#include <map>

#include "fixtures.hpp"

using namespace xpatch;

TEST(Bootstrap, TwoClustersMatchEnumeration) {
  // Resampling two singleton clusters gives means 0, 1/2, 1 with
  // probabilities 1/4, 1/2, 1/4.
  const auto b = cluster_bootstrap({{"a", 0.0, ""}, {"b", 1.0, ""}}, 100000, 3);
  std::map<double, double> freq;
  for (double m : b.draws) freq[m] += 1.0 / 100000;
  ASSERT_EQ(freq.size(), 3u);
  EXPECT_NEAR(freq[0.0], 0.25, 0.02 * 0.25);
  EXPECT_NEAR(freq[0.5], 0.50, 0.02 * 0.50);
  EXPECT_NEAR(freq[1.0], 0.25, 0.02 * 0.25);
  EXPECT_EQ(b.mean, 0.5);
  EXPECT_EQ(b.n_clusters, 2u);
}

TEST(Bootstrap, ClustersMoveTogether) {
  // Two members of one cluster are always drawn together.
  const auto b = cluster_bootstrap({{"a", 0.0, ""}, {"a", 0.0, ""}, {"b", 3.0, ""}}, 2000, 1);
  for (double m : b.draws) EXPECT_TRUE(m == 0.0 || m == 1.0 || m == 3.0);
  EXPECT_EQ(b.mean, 1.0);
}

TEST(Bootstrap, SingleClusterIsDegenerate) {
  const auto b = cluster_bootstrap({{"a", 2.0, ""}, {"a", 4.0, ""}}, 100, 0);
  EXPECT_EQ(b.ci_lo, 3.0);
  EXPECT_EQ(b.ci_hi, 3.0);
}

TEST(Bootstrap, StrataAreResampledSeparately) {
  // One cluster per stratum: every draw keeps both.
  const auto b = cluster_bootstrap({{"a", 0.0, "x"}, {"b", 1.0, "y"}}, 500, 2);
  for (double m : b.draws) EXPECT_EQ(m, 0.5);
}

TEST(Bootstrap, SeededAndValidated) {
  const std::vector<ClusterValue> v = {{"a", 1, ""}, {"b", 2, ""}, {"c", 7, ""}};
  EXPECT_EQ(cluster_bootstrap(v, 300, 9).draws, cluster_bootstrap(v, 300, 9).draws);
  EXPECT_NE(cluster_bootstrap(v, 300, 9).draws, cluster_bootstrap(v, 300, 10).draws);
  EXPECT_THROW(cluster_bootstrap({}, 10, 0), Error);
  EXPECT_THROW(cluster_bootstrap(v, 0, 0), Error);
  EXPECT_THROW(cluster_bootstrap(v, 10, 0, 1.0), Error);
}

TEST(FamilyBalance, PublishedFamilyInteractions) {
  const auto s = family_balanced_mean(std::vector<double>{1.253, 1.302, 1.464, 1.847, 2.534});
  EXPECT_NEAR(s.mean, 1.680, 1e-3);
  EXPECT_NEAR(s.median, 1.464, 1e-12);
  EXPECT_EQ(s.min, 1.253);
  EXPECT_EQ(s.max, 2.534);
  EXPECT_EQ(s.n_families, 5u);
  const auto shift = family_balanced_mean(std::vector<double>{5.358, 3.995, 3.938, 5.227, 6.437});
  EXPECT_NEAR(shift.mean, 4.991, 1e-3);
}

TEST(FamilyBalance, IgnoresFamilySize) {
  std::vector<FourCellResult> rs;
  auto add = [&](const std::string& fam, double i) {
    FourCellResult r;
    r.family = fam;
    r.interaction = i;
    rs.push_back(r);
  };
  for (int k = 0; k < 9; ++k) add("big", 1.0);
  add("small", 3.0);
  const auto fam = family_interactions(rs);
  EXPECT_EQ(family_balanced_mean(fam).mean, 2.0);
}

TEST(LabelSwap, ObservedAboveAllNulls) {
  const std::vector<double> v(40, 1.0);
  const auto r = label_swap_null(v, 19999, 0);
  EXPECT_EQ(r.p_value, 1.0 / 20000.0);
  EXPECT_NEAR(r.p_value, 5e-5, 1e-12);
  EXPECT_NEAR(r.null_mean, 0.0, 0.01);
  EXPECT_EQ(r.n_perms, 19999);
}

TEST(LabelSwap, AllZeroMarginsGiveHalf) {
  const std::vector<double> v(30, 0.0);
  const auto r = label_swap_null(v, 19999, 4);
  EXPECT_NEAR(r.p_value, 0.5, 0.02);
}

TEST(LabelSwap, SingleEventNullIsSymmetric) {
  const auto r = label_swap_null({2.0}, 4000, 1);
  std::size_t pos = 0;
  for (double m : r.null_samples) {
    EXPECT_EQ(std::abs(m), 2.0);
    pos += m > 0;
  }
  EXPECT_NEAR(static_cast<double>(pos) / 4000.0, 0.5, 0.03);
  EXPECT_NEAR(r.p_value, 0.25, 0.03);
}

TEST(LabelSwap, PValueFallsAsEffectGrows) {
  Pcg64 rng(2, 2);
  std::vector<double> base(50);
  for (auto& x : base) x = rng.normal();
  double last = 1.0;
  for (double shift : {-0.2, 0.0, 0.2, 0.4, 0.8}) {
    auto v = base;
    for (auto& x : v) x += shift;
    const auto r = label_swap_null(v, 4999, 7);
    EXPECT_LE(r.p_value, last + 0.01);
    last = r.p_value;
  }
  EXPECT_LT(last, 0.001);
}

TEST(Quantiles, TypeSeven) {
  EXPECT_EQ(quantile({1, 2, 3, 4}, 0.5), 2.5);
  EXPECT_EQ(quantile({5}, 0.9), 5.0);
  EXPECT_NEAR(quantile({0, 10}, 0.975), 9.75, 1e-12);
  EXPECT_EQ(median_of({3, 1, 2}), 2.0);
  EXPECT_THROW(quantile({}, 0.5), Error);
}

TEST(Ols, ExactLine) {
  const auto f = ols({0, 1, 2, 3}, {1, 3, 5, 7});
  EXPECT_NEAR(f.slope, 2.0, 1e-12);
  EXPECT_NEAR(f.intercept, 1.0, 1e-12);
  const auto flat = ols({1, 1}, {2, 4});
  EXPECT_EQ(flat.slope, 0.0);
  EXPECT_EQ(flat.intercept, 3.0);
}

TEST(Rng, MixSeedSeparatesStreams) {
  EXPECT_NE(mix_seed(0, 1), mix_seed(0, 2));
  EXPECT_NE(mix_seed(1, 0), mix_seed(0, 1));
  Pcg64 a(5, 17), b(5, 23);
  EXPECT_NE(a(), b());
}
