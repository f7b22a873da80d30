#include <gtest/gtest.h>

#include <cmath>

#include "fixtures.hpp"

using namespace xpatch;

namespace {

const std::vector<DivergenceEvent>& sample() {
  static const auto s = fx::subsample(fx::gated_toy().events, 10);
  return s;
}

std::vector<DivergenceEvent> with_answers() {
  std::vector<DivergenceEvent> out;
  for (const auto& e : fx::gated_toy().events)
    if (e.answer && out.size() < 12) out.push_back(e);
  return out;
}

}  // namespace

TEST(Continuation, HorizonZeroIsTheTokenFactorial) {
  const auto& pair = fx::gated_toy().pair;
  const auto res = constrained_continuation(pair, sample(), {0, 2}, TailVariant::standard, Readout::common_it, 0, 200);
  double sum = 0;
  for (const auto& e : sample()) {
    const double i = score_event(pair, e, Readout::common_it).interaction;
    EXPECT_NEAR(res.per_event.at(e.id()).at(0), i, 1e-6);
    sum += i;
  }
  ASSERT_EQ(res.points[0].horizon, 0);
  EXPECT_NEAR(res.points[0].interaction, sum / static_cast<double>(sample().size()), 1e-6);
  EXPECT_TRUE(std::isnan(res.points[0].tail_only));
}

TEST(Continuation, SurvivorBaselineAtEveryHorizon) {
  const auto& pair = fx::gated_toy().pair;
  for (auto v : {TailVariant::standard, TailVariant::same_forced, TailVariant::shuffled_tail,
                 TailVariant::tail_only_view}) {
    const auto res = constrained_continuation(pair, sample(), {0, 1, 4, 8}, v, Readout::common_it, 0, 200);
    ASSERT_EQ(res.points.size(), 4u);
    for (const auto& p : res.points) {
      EXPECT_EQ(p.n_survivors + p.n_dropped, sample().size());
      if (p.n_survivors > 0) {
        EXPECT_TRUE(std::isfinite(p.c0_on_survivors));
      }
      EXPECT_TRUE(json(p).contains("c0_on_survivors"));
    }
  }
}

TEST(Continuation, IdenticalPairIsZero) {
  ToySpec spec;
  spec.mode = ToyMode::identical;
  spec.seed = 7;
  spec.config = toy_config();
  const auto pair = gen_toy_pair(spec);
  const std::vector<DivergenceEvent> few(sample().begin(), sample().begin() + 4);
  const auto res = constrained_continuation(pair, few, {0, 4}, TailVariant::standard, Readout::common_it, 0, 100);
  for (const auto& [id, by_n] : res.per_event)
    for (const auto& [n, c] : by_n) EXPECT_EQ(c, 0.0);
}

TEST(Continuation, ShuffledTailBelowStandardAtEight) {
  const auto& pair = fx::gated_toy().pair;
  const auto std8 = constrained_continuation(pair, sample(), {8}, TailVariant::standard, Readout::common_it, 0, 200);
  const auto shuf8 =
      constrained_continuation(pair, sample(), {8}, TailVariant::shuffled_tail, Readout::common_it, 0, 200);
  ASSERT_GT(std8.points[0].n_survivors, 0u);
  EXPECT_LT(shuf8.points[0].interaction, std8.points[0].interaction);
}

TEST(Continuation, TailOnlyViewDropsTheForcedTerm) {
  const auto& pair = fx::gated_toy().pair;
  const auto a = constrained_continuation(pair, sample(), {4}, TailVariant::standard, Readout::common_it, 0, 100);
  const auto b = constrained_continuation(pair, sample(), {4}, TailVariant::tail_only_view, Readout::common_it, 0, 100);
  ASSERT_EQ(a.points[0].n_survivors, b.points[0].n_survivors);
  EXPECT_NEAR(b.points[0].interaction, a.points[0].tail_only, 1e-9);
  EXPECT_NEAR(a.points[0].interaction - a.points[0].tail_only, a.points[0].c0_on_survivors, 1e-9);
}

TEST(Continuation, ShuffleKeepsForcedTokenAndTailMultiset) {
  detail::NativeTails t;
  t.it_after_t_it = {5, 6, 7, 8, 9, 10};
  t.pt_after_t_pt = {11, 12, 13, 14, 15, 16};
  const auto e = fx::event({1, 2}, 3, 4, "x");
  const auto c = *build_candidates(e, t, 6, TailVariant::shuffled_tail, 3);
  EXPECT_EQ(c.descendant.front(), 4);
  auto tail = std::vector<TokenId>(c.descendant.begin() + 1, c.descendant.end());
  std::sort(tail.begin(), tail.end());
  EXPECT_EQ(tail, t.it_after_t_it);
  EXPECT_EQ(c.base, (std::vector<TokenId>{3, 11, 12, 13, 14, 15, 16}));
  EXPECT_FALSE(build_candidates(e, t, 7, TailVariant::standard, 0).has_value());
}

TEST(Continuation, LogSoftmaxSkipsMaskedTokens) {
  const float inf = std::numeric_limits<float>::infinity();
  const std::vector<float> l = {0.0f, -inf, std::log(3.0f)};
  const auto lp = log_softmax_real(l);
  EXPECT_NEAR(lp[0], std::log(0.25), 1e-7);
  EXPECT_NEAR(lp[2], std::log(0.75), 1e-7);
  EXPECT_TRUE(std::isinf(lp[1]));
}

TEST(ForcedToken, AlwaysTrueValidatorGivesZeroDeltas) {
  const auto& pair = fx::gated_toy().pair;
  const auto events = with_answers();
  ASSERT_FALSE(events.empty());
  const auto res = forced_token_bridge(pair, events, [](const std::string&, const std::string&) { return true; }, 4);
  EXPECT_EQ(res.deltas.size(), events.size());
  for (const auto& d : res.deltas) {
    EXPECT_EQ(d.descendant_minus_base, 0.0);
    EXPECT_EQ(d.descendant_minus_rank, 0.0);
    EXPECT_EQ(d.descendant_minus_class, 0.0);
  }
  EXPECT_EQ(res.categories.back().category, "ALL");
  EXPECT_EQ(res.scores.size(), 4 * events.size());
}

TEST(ForcedToken, BranchesUseDistinctTokens) {
  const auto& pair = fx::gated_toy().pair;
  const auto res = forced_token_bridge(pair, with_answers(), exact_substring_validator, 8);
  for (std::size_t i = 0; i + 3 < res.scores.size(); i += 4) {
    EXPECT_EQ(res.scores[i].branch, Branch::descendant);
    for (std::size_t k = 2; k < 4; ++k) {
      EXPECT_NE(res.scores[i + k].forced, res.scores[i].forced);
      EXPECT_NE(res.scores[i + k].forced, res.scores[i + 1].forced);
    }
  }
}

TEST(ForcedToken, UnscoreableAndThrowingValidators) {
  const auto& pair = fx::gated_toy().pair;
  auto e = with_answers().front();
  auto no_answer = e;
  no_answer.answer.reset();
  const auto a = forced_token_bridge(pair, {no_answer});
  ASSERT_EQ(a.exclusions.size(), 1u);
  EXPECT_EQ(a.exclusions[0].reason, "unscoreable_category");
  const auto b = forced_token_bridge(pair, {e}, [](const std::string&, const std::string&) -> bool {
    throw std::runtime_error("bad");
  });
  ASSERT_EQ(b.exclusions.size(), 1u);
  EXPECT_EQ(b.exclusions[0].reason, "validator_exception");
  EXPECT_TRUE(b.deltas.empty());
}

TEST(ForcedToken, ExactSubstring) {
  EXPECT_TRUE(exact_substring_validator("xx42yy", "42"));
  EXPECT_FALSE(exact_substring_validator("xx4 2yy", "42"));
  EXPECT_FALSE(exact_substring_validator("anything", ""));
}

TEST(ForcedToken, TokenClasses) {
  EXPECT_EQ(token_class("a"), TokenClass::alpha);
  EXPECT_EQ(token_class("7"), TokenClass::numeric);
  EXPECT_EQ(token_class("!"), TokenClass::punct);
  EXPECT_EQ(token_class(" x"), TokenClass::space_leading);
  EXPECT_EQ(token_class("<eos>"), TokenClass::other);
  EXPECT_EQ(token_class(""), TokenClass::other);
}
