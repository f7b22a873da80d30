#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "fixtures.hpp"

using namespace xpatch;

namespace {

PairedCheckpoints toy_pair(ToyMode mode, std::uint64_t seed = 7) {
  ToySpec spec;
  spec.mode = mode;
  spec.seed = seed;
  spec.config = toy_config();
  return gen_toy_pair(spec);
}

std::vector<PromptRecord> toy_manifest(int n, std::uint64_t seed = 7) {
  ToySpec spec;
  spec.seed = seed;
  spec.config = toy_config();
  return gen_toy_manifest(toy_language(spec), n, seed);
}

// Normalized final state at the last prompt position, in double.
std::vector<double> final_normed(const Checkpoint& m, const std::vector<TokenId>& toks) {
  const auto s = forward_full(m, toks);
  const auto last = s.last();
  double ss = 0;
  for (float v : last) ss += static_cast<double>(v) * v;
  const double inv = 1.0 / std::sqrt(ss / static_cast<double>(last.size()) + m.config.norm_eps);
  std::vector<double> out(last.size());
  for (std::size_t i = 0; i < last.size(); ++i) out[i] = last[i] * inv * m.final_norm[i];
  return out;
}

}  // namespace

TEST(FirstDivergence, IdenticalPairHasNoEvents) {
  const auto pair = toy_pair(ToyMode::identical);
  const auto manifest = toy_manifest(40);
  const auto res = collect_first_divergences(pair, manifest, 16);
  EXPECT_TRUE(res.events.empty());
  ASSERT_EQ(res.exclusions.size(), manifest.size());
  for (const auto& x : res.exclusions) EXPECT_EQ(x.reason, "no_divergence");
}

TEST(FirstDivergence, BoostedReadoutRowDivergesAtPositionZero) {
  auto pair = toy_pair(ToyMode::identical);
  const auto manifest = toy_manifest(1);
  const auto prompt = *ByteTokenizer(pair.pt).encode(manifest[0].text);
  ASSERT_TRUE(pair.it.is_real(42));
  // Row 42 reads the final state of this prompt with logit 100.
  const auto u = final_normed(pair.it, prompt);
  double nn = 0;
  for (double x : u) nn += x * x;
  const auto d = static_cast<std::size_t>(pair.it.config.d_model);
  for (std::size_t i = 0; i < d; ++i) pair.it.lm_head[42 * d + i] = static_cast<float>(100.0 * u[i] / nn);

  const auto res = collect_first_divergences(pair, manifest, 16);
  ASSERT_EQ(res.events.size(), 1u);
  const auto& e = res.events[0];
  EXPECT_EQ(e.position, 0);
  EXPECT_EQ(e.t_it, 42);
  EXPECT_NE(e.t_pt, 42);
  EXPECT_EQ(e.prefix, prompt);
  EXPECT_EQ(e.kind, EventKind::first_divergence);
}

TEST(FirstDivergence, EveryPromptIsAccountedFor) {
  const auto& toy = fx::gated_toy();
  const auto res = collect_first_divergences(toy.pair, toy.manifest);
  EXPECT_EQ(res.events.size() + res.exclusions.size(), toy.manifest.size());
  EXPECT_FALSE(res.events.empty());
  std::set<std::string> seen;
  for (const auto& e : res.events) seen.insert(e.prompt_id);
  for (const auto& x : res.exclusions) seen.insert(x.prompt_id);
  EXPECT_EQ(seen.size(), toy.manifest.size());
}

TEST(FirstDivergence, EventsAreMinimalAndVerified) {
  const auto& toy = fx::gated_toy();
  for (const auto& e : fx::subsample(toy.events, 7)) {
    EXPECT_NE(e.t_pt, e.t_it);
    EXPECT_EQ(e.prefix.size(), e.prompt_length() + static_cast<std::size_t>(e.position));
    EXPECT_TRUE(verify_first_divergence(toy.pair, e));
    // Any earlier cut agrees, so the stored position is the first.
    const auto pt = greedy_rollout(toy.pair.pt, std::span(e.prefix).first(e.prompt_length()), e.position + 1);
    const auto it = greedy_rollout(toy.pair.it, std::span(e.prefix).first(e.prompt_length()), e.position + 1);
    for (int j = 0; j < e.position; ++j) EXPECT_EQ(pt[static_cast<std::size_t>(j)], it[static_cast<std::size_t>(j)]);
    EXPECT_EQ(pt[static_cast<std::size_t>(e.position)], e.t_pt);
    EXPECT_EQ(it[static_cast<std::size_t>(e.position)], e.t_it);

    auto bad = e;
    bad.t_it = e.t_pt;
    EXPECT_FALSE(verify_first_divergence(toy.pair, bad));
  }
}

TEST(FirstDivergence, EmptyPromptIsExcluded) {
  const auto& toy = fx::gated_toy();
  PromptRecord r;
  r.id = "empty";
  const auto res = collect_first_divergences(toy.pair, std::vector<PromptRecord>{r});
  ASSERT_EQ(res.exclusions.size(), 1u);
  EXPECT_EQ(res.exclusions[0].reason, "token_invalid");
}

TEST(FirstDivergence, ClusterAndFamilyDefaults) {
  const auto& toy = fx::gated_toy();
  auto r = toy.manifest[0];
  r.cluster_id.clear();
  r.family.clear();
  const auto res = collect_first_divergences(toy.pair, std::vector<PromptRecord>{r});
  for (const auto& e : res.events) {
    EXPECT_EQ(e.cluster_id, r.id);
    EXPECT_EQ(e.family, "default");
  }
}

TEST(PreDivergence, StepsBackOnePosition) {
  auto e = fx::event({1, 2, 3, 4, 5, 6}, 7, 8, "a");
  e.position = 3;
  auto z = fx::event({1, 2}, 7, 8, "b");
  z.position = 0;
  const auto res = collect_pre_divergence({e, z});
  ASSERT_EQ(res.events.size(), 1u);
  const auto& p = res.events[0];
  EXPECT_EQ(p.position, 2);
  EXPECT_EQ(p.prefix, (std::vector<TokenId>{1, 2, 3, 4, 5}));
  EXPECT_EQ(p.t_pt, 7);
  EXPECT_EQ(p.t_it, 8);
  EXPECT_EQ(p.kind, EventKind::pre_divergence);
  ASSERT_EQ(res.exclusions.size(), 1u);
  EXPECT_EQ(res.exclusions[0].prompt_id, "b");
  EXPECT_EQ(res.exclusions[0].reason, "skipped_position_zero");
}

TEST(RandomDisagreement, DeterministicAndAfterFirst) {
  const auto& toy = fx::gated_toy();
  const std::vector<PromptRecord> few(toy.manifest.begin(), toy.manifest.begin() + 30);
  for (auto src : {RolloutSource::pt, RolloutSource::it}) {
    const auto a = collect_random_disagreements(toy.pair, few, src, 5, 64);
    const auto b = collect_random_disagreements(toy.pair, few, src, 5, 64);
    ASSERT_EQ(a.events.size(), b.events.size());
    EXPECT_EQ(a.events.size() + a.exclusions.size(), few.size());
    for (std::size_t i = 0; i < a.events.size(); ++i) {
      EXPECT_EQ(a.events[i].prefix, b.events[i].prefix);
      EXPECT_NE(a.events[i].t_pt, a.events[i].t_it);
    }
    const auto first = collect_first_divergences(toy.pair, few, 64);
    for (const auto& e : a.events) {
      for (const auto& f : first.events) {
        if (f.prompt_id != e.prompt_id) continue;
        EXPECT_GT(e.position, f.position);
      }
    }
  }
}

TEST(NativeHistory, EventsSitAtHorizons) {
  const auto& toy = fx::gated_toy();
  const std::vector<PromptRecord> few(toy.manifest.begin(), toy.manifest.begin() + 20);
  const auto res = collect_native_history(toy.pair, few, RolloutSource::it, {8, 4});
  EXPECT_EQ(res.events.size() + res.exclusions.size(), 2 * few.size());
  for (const auto& e : res.events) {
    ASSERT_TRUE(e.horizon.has_value());
    EXPECT_EQ(e.position, *e.horizon);
    EXPECT_NE(e.t_pt, e.t_it);
    EXPECT_EQ(e.kind, EventKind::native_history);
  }
  EXPECT_THROW(collect_native_history(toy.pair, few, RolloutSource::it, {}), Error);
}
