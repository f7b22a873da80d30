#include <gtest/gtest.h>

#include <cmath>

#include "fixtures.hpp"

using namespace xpatch;

namespace {

// Linear fixture crosscoder: feature 0 reads the descendant's late MLP output
// along unit(w) and writes `scale * write`; feature 1 reads -unit(w) and never fires.
CrosscoderModel linear_crosscoder(const fx::LinearFixture& f, const std::vector<double>& write, double scale) {
  auto m = make_crosscoder(1, 16, 2, 1);
  double nw = 0, nv = 0;
  for (double x : f.w) nw += x * x;
  for (double x : write) nv += x * x;
  nw = std::sqrt(nw);
  nv = std::sqrt(nv);
  for (int i = 0; i < 16; ++i) {
    m.w_enc(0, 16 + i) = f.w[static_cast<std::size_t>(i)] / nw;
    m.w_enc(1, 16 + i) = -f.w[static_cast<std::size_t>(i)] / nw;
    m.dec_it(0, i) = scale * write[static_cast<std::size_t>(i)] / nv;
  }
  return m;
}
}  // namespace

TEST(BatchTopK, GradientsMatchFiniteDifferences) {
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    const auto m = fx::random_crosscoder(3, 5, 2, seed);
    Pcg64 rng(seed, 8);
    const auto xp = fx::random_matrix(4, 3, rng);
    const auto xi = fx::random_matrix(4, 3, rng);
    CrosscoderGrad g;
    const auto base = batch_loss(m, xp, xi, &g);
    const double h = 1e-6;
    auto check = [&](auto member, const auto& grad) {
      for (Eigen::Index i = 0; i < grad.size(); ++i) {
        auto a = m, b = m;
        (a.*member).data()[i] += h;
        (b.*member).data()[i] -= h;
        const auto fa = batch_loss(a, xp, xi), fb = batch_loss(b, xp, xi);
        if (fa.mask != base.mask || fb.mask != base.mask) continue;  // selection boundary
        const double fd = (fa.loss - fb.loss) / (2 * h);
        const double an = grad.data()[i];
        EXPECT_LT(std::abs(fd - an), 1e-4 * std::max(1.0, std::abs(an))) << "index " << i;
      }
    };
    check(&CrosscoderModel::w_enc, g.w_enc);
    check(&CrosscoderModel::b_enc, g.b_enc);
    check(&CrosscoderModel::dec_pt, g.dec_pt);
    check(&CrosscoderModel::dec_it, g.dec_it);
    check(&CrosscoderModel::b_pt, g.b_pt);
    check(&CrosscoderModel::b_it, g.b_it);
  }
}

TEST(BatchTopK, ExactlyBkActive) {
  Pcg64 rng(5, 5);
  for (int B : {1, 3, 8}) {
    for (int k : {1, 2, 4}) {
      const auto pre = fx::random_matrix(B, 6, rng);  // includes negative values
      EXPECT_EQ(batch_topk_mask(pre, k).sum(), static_cast<double>(B * k));
    }
  }
  const Eigen::MatrixXd ties = Eigen::MatrixXd::Constant(4, 5, -1.0);
  const auto mask = batch_topk_mask(ties, 2);
  EXPECT_EQ(mask.sum(), 8.0);
  EXPECT_EQ(mask.row(0).sum(), 5.0);  // lowest flat indices win ties
  EXPECT_EQ(batch_topk_mask(ties, 10).sum(), 20.0);
  Eigen::MatrixXd bad = ties;
  bad(1, 1) = std::nan("");
  EXPECT_THROW(batch_topk_mask(bad, 1), Error);
}

TEST(BatchTopK, TrainingBatchesKeepBk) {
  const auto p = fx::planted_dump(256, 64, 3);
  CrosscoderHyper h;
  h.n_features = 16;
  h.k = 2;
  h.steps = 20;
  h.batch_size = 32;
  const auto r = train_crosscoder(p.dumps, h);
  std::vector<std::size_t> rows(32);
  std::iota(rows.begin(), rows.end(), std::size_t{0});
  const auto fw = batch_loss(r.model, detail::dump_rows(p.dumps.train.pt, 16, rows),
                             detail::dump_rows(p.dumps.train.it, 16, rows));
  EXPECT_EQ(fw.mask.sum(), 64.0);
}

TEST(Training, RecoversPlantedDictionary) {
  const auto p = fx::planted_dump(4000, 1000, 11);
  CrosscoderHyper h;
  h.n_features = 16;
  h.k = 2;
  h.steps = 4000;
  h.batch_size = 64;
  h.lr = 0.01;
  h.seed = 1;
  const auto r = train_crosscoder(p.dumps, h);
  EXPECT_GE(r.heldout.ve_pt, 0.95);
  EXPECT_GE(r.heldout.ve_it, 0.95);
  for (const auto& a : p.atoms) EXPECT_GE(fx::max_cos(r.model, a), 0.9);
  EXPECT_TRUE(std::isfinite(r.final_loss));
}

TEST(Training, SeededRunsRepeat) {
  const auto p = fx::planted_dump(300, 100, 2);
  CrosscoderHyper h;
  h.n_features = 16;
  h.k = 2;
  h.steps = 50;
  const auto a = train_crosscoder(p.dumps, h);
  const auto b = train_crosscoder(p.dumps, h);
  EXPECT_EQ(a.model.w_enc, b.model.w_enc);
  EXPECT_EQ(a.model.dec_it, b.model.dec_it);
  EXPECT_EQ(a.model.threshold, b.model.threshold);
}

TEST(Training, IdentityInitAtZeroSteps) {
  const auto p = fx::planted_dump(200, 50, 2);
  CrosscoderHyper h;
  h.n_features = 32;
  h.k = 4;
  h.steps = 0;
  h.init = CrosscoderInit::identity;
  const auto a = train_crosscoder(p.dumps, h);
  const auto b = train_crosscoder(p.dumps, h);
  EXPECT_EQ(a.model.w_enc, Eigen::MatrixXd::Identity(32, 32));
  EXPECT_EQ(a.model.threshold, b.model.threshold);
  EXPECT_EQ(a.heldout.ve_pt, b.heldout.ve_pt);
  h.n_features = 20;
  EXPECT_THROW(train_crosscoder(p.dumps, h), Error);
}

TEST(Training, DecoderRowsHaveUnitJointNorm) {
  const auto p = fx::planted_dump(300, 100, 2);
  CrosscoderHyper h;
  h.n_features = 16;
  h.k = 2;
  h.steps = 30;
  const auto r = train_crosscoder(p.dumps, h);
  for (int j = 0; j < 16; ++j)
    EXPECT_NEAR(r.model.dec_pt.row(j).squaredNorm() + r.model.dec_it.row(j).squaredNorm(), 1.0, 1e-6);
}

TEST(Persistence, SaveLoadRoundTrip) {
  const auto p = fx::planted_dump(300, 100, 2);
  CrosscoderHyper h;
  h.n_features = 16;
  h.k = 2;
  h.steps = 30;
  const auto r = train_crosscoder(p.dumps, h);
  const auto dir = fx::temp_dir("xccd");
  save_crosscoder(r.model, dir / "m.xccd", {{"note", "x"}});
  const auto back = load_crosscoder(dir / "m.xccd");
  EXPECT_EQ(back.w_enc, r.model.w_enc);
  EXPECT_EQ(back.b_enc, r.model.b_enc);
  EXPECT_EQ(back.dec_pt, r.model.dec_pt);
  EXPECT_EQ(back.dec_it, r.model.dec_it);
  EXPECT_EQ(back.b_pt, r.model.b_pt);
  EXPECT_EQ(back.b_it, r.model.b_it);
  EXPECT_EQ(back.threshold, r.model.threshold);
  EXPECT_EQ(back.layer_set, r.model.layer_set);
  EXPECT_EQ(back.k, 2);
  EXPECT_EQ(serialize_crosscoder(back, {{"note", "x"}}), serialize_crosscoder(r.model, {{"note", "x"}}));
}

TEST(Dumps, AlignedAndClusterSplit) {
  const auto& toy = fx::gated_toy();
  const auto ev = fx::subsample(toy.events, 5);
  const auto d = dump_activations(toy.pair, ev, 5);
  std::size_t toks = 0;
  for (const auto& e : ev) toks += e.prefix.size();
  EXPECT_EQ(d.n_tokens(), toks);
  EXPECT_EQ(d.pt.size(), toks * 64);
  const auto s = split_dump(d, 3);
  EXPECT_EQ(s.train.n_tokens() + s.heldout.n_tokens(), toks);
  for (const auto& g : s.heldout.group)
    EXPECT_EQ(std::count(s.train.group.begin(), s.train.group.end(), g), 0);
  EXPECT_THROW(dump_activations(toy.pair, ev, 6), Error);
}

TEST(Edits, EmptySetAndZeroScaleAreNoOps) {
  const auto f = fx::linear_fixture();
  const auto m = linear_crosscoder(f, f.w, 1.0);
  for (const auto& a : {mediation_drop(m, f.pair, f.events, FeatureSet{}, Readout::common_it),
                        scaled_ablation(m, f.pair, f.events, FeatureSet{{0}}, Readout::common_it, 0.0)}) {
    EXPECT_EQ(a.drop, 0.0);
    EXPECT_EQ(a.i_ablate, a.i_full);
    EXPECT_EQ(a.drop_ii, 0.0);
    EXPECT_EQ(a.drop_pi, 0.0);
  }
  const auto r = feature_rescue(m, f.pair, f.events, FeatureSet{}, Readout::common_it);
  EXPECT_EQ(r.rescue_gain, 0.0);
}

TEST(Edits, UneditedSitesReproduceFactorialCells) {
  const auto& toy = fx::gated_toy();
  const auto m = planted_crosscoder(5, 64, {toy_coupling_direction(toy.pair)});
  for (const auto& e : fx::subsample(toy.events, 25)) {
    const auto c = detail::prepare_event(toy.pair, m, e, Readout::common_it);
    const auto r = score_event(toy.pair, e, Readout::common_it);
    EXPECT_EQ(c.y_pp, r.y_pp);
    EXPECT_EQ(c.y_pi, r.y_pi);
    EXPECT_EQ(c.y_ip, r.y_ip);
    EXPECT_EQ(c.y_ii, r.y_ii);
  }
}

TEST(Edits, PlantedFeatureMediatesLinearFixture) {
  const auto f = fx::linear_fixture();
  const auto m = linear_crosscoder(f, f.w, 1.0);
  const auto med = mediation_drop(m, f.pair, f.events, FeatureSet{{0}}, Readout::common_it, 200, 1);
  EXPECT_GT(std::abs(med.i_full), 0.1);
  EXPECT_NEAR(med.share, 1.0, 1e-4);
  EXPECT_TRUE(med.drop_ci.has_value());
  // Rescue restores only the MLP write: silu(1) * (x1_it - x1_pt) * w . (h_it - h_pt).
  const auto res = feature_rescue(m, f.pair, f.events, FeatureSet{{0}}, Readout::common_it);
  double wd = 0;
  for (std::size_t i = 0; i < 16; ++i)
    wd += f.w[i] * (f.pair.it.lm_head[static_cast<std::size_t>(f.t_it) * 16 + i] -
                    f.pair.it.lm_head[static_cast<std::size_t>(f.t_pt) * 16 + i]);
  double expected = 0;
  for (const auto& e : f.events) {
    const auto t = static_cast<std::size_t>(e.prefix[0]);
    expected += fx::silu(1.0) * (f.pair.it.embed[t * 16 + 1] - f.pair.pt.embed[t * 16 + 1]) * wd;
  }
  expected /= static_cast<double>(f.events.size());
  EXPECT_NEAR(res.rescue_gain, expected, 1e-4 * std::abs(expected));
}

TEST(Edits, PlantedFeatureMediatesToyCoupling) {
  const auto& toy = fx::gated_toy();
  const auto m = planted_crosscoder(5, 64, {toy_coupling_direction(toy.pair)});
  const auto med = mediation_drop(m, toy.pair, fx::subsample(toy.events, 4), FeatureSet{{0}}, Readout::common_it);
  EXPECT_GE(med.share, 0.9);
  EXPECT_GT(med.gate, 0.0);
}

TEST(Ranking, ClosedFormOnLinearFixture) {
  const auto f = fx::linear_fixture();
  const auto& H = f.pair.it.lm_head;
  std::vector<double> h_it(16), h_pt(16);
  for (std::size_t i = 0; i < 16; ++i) {
    h_it[i] = H[static_cast<std::size_t>(f.t_it) * 16 + i];
    h_pt[i] = H[static_cast<std::size_t>(f.t_pt) * 16 + i];
  }
  const double c = 0.7;
  const auto m = linear_crosscoder(f, h_it, c);
  double nw = 0, nh = 0, proj = 0;
  for (std::size_t i = 0; i < 16; ++i) {
    nw += f.w[i] * f.w[i];
    nh += h_it[i] * h_it[i];
    proj += (h_it[i] - h_pt[i]) * h_it[i];
  }
  nw = std::sqrt(nw);
  nh = std::sqrt(nh);
  // Ablation moves the final state by -f * c * unit(h_it); the feature value is
  // silu(1) * x_1 * |w| with x_1 the descendant embedding's coordinate 1.
  double expected = 0;
  for (const auto& e : f.events) {
    const double x1 = f.pair.it.embed[static_cast<std::size_t>(e.prefix[0]) * 16 + 1];
    expected += fx::silu(1.0) * x1 * nw * c * proj / nh;
  }
  expected /= static_cast<double>(f.events.size());
  const auto ranked = rank_features_causal(m, f.pair, f.events, Readout::common_it);
  ASSERT_EQ(ranked.size(), 2u);
  EXPECT_EQ(ranked[0].feature, 0);
  EXPECT_NEAR(ranked[0].score, expected, 1e-4 * std::abs(expected));
  EXPECT_EQ(ranked[0].n_active, static_cast<int>(f.events.size()));
  EXPECT_EQ(ranked[1].score, 0.0);
  EXPECT_EQ(ranked[1].n_active, 0);
}

TEST(Dose, LinearInAlphaAndMatchesMediation) {
  const auto f = fx::linear_fixture();
  auto m = make_crosscoder(1, 16, 3, 1);
  const auto base = linear_crosscoder(f, f.w, 1.0);
  m.w_enc.topRows(2) = base.w_enc;
  m.dec_it.topRows(2) = base.dec_it;
  m.w_enc(2, 16 + 3) = 1.0;  // an unrelated alive feature for the matched control
  m.dec_it(2, 3) = 1.0;
  const auto pts = bucket_edit_dose_response(m, f.pair, f.events, FeatureSet{{0}}, {0.0, 0.5, 1.0}, Readout::common_it, 3);
  ASSERT_EQ(pts.size(), 3u);
  EXPECT_EQ(pts[0].drop, 0.0);
  EXPECT_LT(pts[0].drop, pts[1].drop);
  EXPECT_LT(pts[1].drop, pts[2].drop);
  EXPECT_NEAR(pts[1].drop, 0.5 * pts[2].drop, 1e-4 * std::abs(pts[2].drop));
  EXPECT_EQ(pts[2].drop, mediation_drop(m, f.pair, f.events, FeatureSet{{0}}, Readout::common_it).drop);
}

TEST(FeatureSets, MatchedRandomIsDisjointAndSeeded) {
  auto m = make_crosscoder(0, 4, 10, 1);
  m.threshold[7] = std::numeric_limits<double>::infinity();
  const FeatureSet s{{1, 2, 3}};
  const auto a = matched_random(m, s, 5);
  EXPECT_EQ(a.indices, matched_random(m, s, 5).indices);
  EXPECT_EQ(a.indices.size(), 3u);
  for (int j : a.indices) {
    EXPECT_TRUE(std::find(s.indices.begin(), s.indices.end(), j) == s.indices.end());
    EXPECT_NE(j, 7);
  }
  EXPECT_THROW(matched_random(m, FeatureSet{{1, 1}}, 0), Error);
  EXPECT_THROW(matched_random(m, FeatureSet{{0, 1, 2, 3, 4, 5}}, 0), Error);
}

TEST(Handoff, WindowMustPrecedeLayer) {
  const auto& toy = fx::gated_toy();
  const auto m = planted_crosscoder(5, 64, {toy_coupling_direction(toy.pair)});
  const auto ev = fx::subsample(toy.events, 40);
  EXPECT_THROW(handoff_mediation(m, toy.pair, ev, {3, 6}, HandoffDirection::rescue, FeatureSet{{0}}, Readout::common_it),
               Error);
  EXPECT_THROW(handoff_mediation(m, toy.pair, ev, {2, 2}, HandoffDirection::rescue, FeatureSet{{0}}, Readout::common_it),
               Error);
  const auto h =
      handoff_mediation(m, toy.pair, ev, {0, 4}, HandoffDirection::rescue, FeatureSet{{0}}, Readout::common_it);
  EXPECT_TRUE(std::isfinite(h.total_effect));
}

TEST(Gate, Thresholds) {
  QualityGate g{0.8, 0.8, 4.2, 0.1, 1.0, 0.01, false};
  EXPECT_TRUE(gate_passes(g, 4));
  g.mean_l0 = 4.5;
  EXPECT_FALSE(gate_passes(g, 4));
  g.mean_l0 = 4.0;
  g.alive_fraction_max = 0.3;
  EXPECT_FALSE(gate_passes(g, 4));
  g.alive_fraction_max = 0.1;
  g.random_drop = 0.06;
  EXPECT_FALSE(gate_passes(g, 4));
}
