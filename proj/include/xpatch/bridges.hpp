#pragma once

// Consequence bridges: constrained-continuation sequence margins scored under
// the four hybrid cells, and forced-token suffix-only objective scoring.

#include <algorithm>
#include <array>
#include <optional>
#include <cctype>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "xpatch/divergence.hpp"
#include "xpatch/factorial.hpp"
#include "xpatch/stats.hpp"

namespace xpatch {

// ---------------------------------------------------------------------------
// Constrained continuation

enum class TailVariant { standard, same_forced, shuffled_tail, tail_only_view };

NLOHMANN_JSON_SERIALIZE_ENUM(TailVariant, {{TailVariant::standard, "standard"},
                                           {TailVariant::same_forced, "same_forced"},
                                           {TailVariant::shuffled_tail, "shuffled_tail"},
                                           {TailVariant::tail_only_view, "tail_only_view"}})

struct CandidatePair {
  std::vector<TokenId> descendant;  // forced token + N tail tokens
  std::vector<TokenId> base;
  int horizon = 0;
  TailVariant variant = TailVariant::standard;
};

/// Log-softmax over real tokens, in double.
inline std::vector<double> log_softmax_real(std::span<const float> logits) {
  double mx = -std::numeric_limits<double>::infinity();
  for (float v : logits)
    if (std::isfinite(v)) mx = std::max(mx, static_cast<double>(v));
  double s = 0;
  for (float v : logits)
    if (std::isfinite(v)) s += std::exp(static_cast<double>(v) - mx);
  const double lse = mx + std::log(s);
  std::vector<double> out(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i)
    out[i] = std::isfinite(logits[i]) ? static_cast<double>(logits[i]) - lse : -std::numeric_limits<double>::infinity();
  return out;
}

/// Teacher-forced log-probabilities of `cand` after `prefix` under cell (U, L):
/// element k is log p(cand[k] | prefix, cand[0..k)).
inline std::vector<double> candidate_logprobs(ModelPair pair, const std::vector<TokenId>& prefix,
                                              const std::vector<TokenId>& cand, Side upstream, Side late, Readout r) {
  std::vector<TokenId> input = prefix;
  input.insert(input.end(), cand.begin(), cand.end() - 1);
  const auto u = upstream_states(pair, upstream, input);
  const auto out = forward_late(pair.get(late), u, pair.boundary());
  const auto& reader = reader_for(pair, r, late);
  std::vector<double> lp;
  for (std::size_t k = 0; k < cand.size(); ++k) {
    const auto row = readout_row(reader, out.row(prefix.size() - 1 + k), true);
    lp.push_back(log_softmax_real(row)[static_cast<std::size_t>(cand[k])]);
  }
  return lp;
}

struct ContinuationPoint {
  int horizon = 0;
  double interaction = 0;  // C_N (tail-only sum for the tail_only_view variant)
  BootstrapResult ci;
  double c0_on_survivors = 0;  // survivor-subset discipline
  double tail_only = std::numeric_limits<double>::quiet_NaN();
  std::size_t n_survivors = 0;
  std::size_t n_dropped = 0;
};

struct ContinuationResult {
  TailVariant variant = TailVariant::standard;
  std::vector<ContinuationPoint> points;
  std::vector<Exclusion> exclusions;
  std::map<std::string, std::map<int, double>> per_event;  // event id -> N -> C_N
};

namespace detail {

struct NativeTails {
  std::vector<TokenId> it_after_t_it;
  std::vector<TokenId> pt_after_t_pt;
  std::vector<TokenId> pt_after_t_it;
};

inline std::vector<TokenId> native_tail(const Checkpoint& m, std::vector<TokenId> prefix, TokenId forced, int n) {
  if (n <= 0) return {};
  const auto eos = eos_token(m);
  if (eos && forced == *eos) return {};
  prefix.push_back(forced);
  return greedy_rollout(m, prefix, n);
}

}  // namespace detail

/// Builds the candidate pair for one event at horizon N, or nullopt when a tail is too short.
inline std::optional<CandidatePair> build_candidates(const DivergenceEvent& e, const detail::NativeTails& tails, int n,
                                                     TailVariant variant, std::uint64_t seed) {
  CandidatePair c;
  c.horizon = n;
  c.variant = variant;
  const auto& dtail = tails.it_after_t_it;
  const auto& btail = variant == TailVariant::same_forced ? tails.pt_after_t_it : tails.pt_after_t_pt;
  if (static_cast<int>(dtail.size()) < n || static_cast<int>(btail.size()) < n) return std::nullopt;
  c.descendant.push_back(e.t_it);
  c.descendant.insert(c.descendant.end(), dtail.begin(), dtail.begin() + n);
  c.base.push_back(variant == TailVariant::same_forced ? e.t_it : e.t_pt);
  c.base.insert(c.base.end(), btail.begin(), btail.begin() + n);
  if (variant == TailVariant::shuffled_tail && n > 1) {
    Pcg64 rng(mix_seed(seed, static_cast<std::uint64_t>(n)), detail::fnv1a(e.id()));
    rng.shuffle(std::span<TokenId>(c.descendant.data() + 1, static_cast<std::size_t>(n)));
  }
  return c;
}

/// Per-position DiD terms of the teacher-forced log-probability gap between
/// two candidates; C_N is the sum of terms 0..N.
inline std::vector<double> sequence_did_terms(ModelPair pair, const std::vector<TokenId>& prefix,
                                              const std::vector<TokenId>& desc, const std::vector<TokenId>& base,
                                              Readout r) {
  XPATCH_CHECK(desc.size() == base.size() && !desc.empty(), ErrorCode::InvalidArgument, "candidate lengths differ");
  static constexpr Side kCells[4][2] = {{Side::pt, Side::pt}, {Side::pt, Side::it}, {Side::it, Side::pt}, {Side::it, Side::it}};
  static constexpr double kSign[4] = {+1, -1, -1, +1};  // (y_ii - y_ip) - (y_pi - y_pp)
  std::vector<double> terms(desc.size(), 0.0);
  for (int c = 0; c < 4; ++c) {
    const auto d = candidate_logprobs(pair, prefix, desc, kCells[c][0], kCells[c][1], r);
    const auto b = candidate_logprobs(pair, prefix, base, kCells[c][0], kCells[c][1], r);
    for (std::size_t k = 0; k < terms.size(); ++k) terms[k] += kSign[c] * (d[k] - b[k]);
  }
  return terms;
}

/// C_N for each horizon. Candidates come from native greedy continuations
/// (IT after t_it, PT after t_pt) and are teacher-forced through all four cells.
inline ContinuationResult constrained_continuation(ModelPair pair, const std::vector<DivergenceEvent>& events,
                                                   std::vector<int> horizons, TailVariant variant, Readout r,
                                                   std::uint64_t seed = 0, int n_resamples = 1000) {
  XPATCH_CHECK(!horizons.empty(), ErrorCode::InvalidArgument, "no horizons");
  std::sort(horizons.begin(), horizons.end());
  XPATCH_CHECK(horizons.front() >= 0, ErrorCode::InvalidArgument, "horizons must be >= 0");
  const int n_max = horizons.back();
  ContinuationResult res;
  res.variant = variant;
  struct Row {
    std::string cluster, family;
    double c0 = 0;
    std::map<int, std::pair<double, double>> by_n;  // N -> (C_N, tail-only C_N)
  };
  std::vector<Row> rows;
  for (const auto& e : events) {
    check_event(pair, e);
    detail::NativeTails tails;
    tails.it_after_t_it = detail::native_tail(*pair.it, e.prefix, e.t_it, n_max);
    tails.pt_after_t_pt = detail::native_tail(*pair.pt, e.prefix, e.t_pt, n_max);
    if (variant == TailVariant::same_forced) tails.pt_after_t_it = detail::native_tail(*pair.pt, e.prefix, e.t_it, n_max);
    Row row;
    row.cluster = e.cluster_id;
    row.family = e.family;
    auto record = [&](int n, const std::vector<double>& terms) {
      double full = 0, tail = 0;
      for (int k = 0; k <= n; ++k) {
        full += terms[static_cast<std::size_t>(k)];
        if (k > 0) tail += terms[static_cast<std::size_t>(k)];
      }
      row.by_n[n] = {full, tail};
      res.per_event[e.id()][n] = full;
    };
    if (variant == TailVariant::shuffled_tail) {
      for (int n : horizons) {
        const auto cand = build_candidates(e, tails, n, variant, seed);
        if (cand) record(n, sequence_did_terms(pair, e.prefix, cand->descendant, cand->base, r));
      }
    } else {
      // Candidates for smaller N are prefixes of the longest one that exists.
      int longest = -1;
      for (int n : horizons)
        if (build_candidates(e, tails, n, variant, seed)) longest = n;
      if (longest >= 0) {
        const auto cand = build_candidates(e, tails, longest, variant, seed);
        const auto terms = sequence_did_terms(pair, e.prefix, cand->descendant, cand->base, r);
        for (int n : horizons)
          if (n <= longest) record(n, terms);
      }
    }
    row.c0 = sequence_did_terms(pair, e.prefix, {e.t_it}, {e.t_pt}, r)[0];
    for (int n : horizons)
      if (!row.by_n.count(n)) res.exclusions.push_back({e.prompt_id, "continuation_failed", "N=" + std::to_string(n)});
    rows.push_back(std::move(row));
  }
  for (int n : horizons) {
    ContinuationPoint p;
    p.horizon = n;
    std::vector<ClusterValue> vals;
    double c0 = 0, tail = 0;
    for (const auto& row : rows) {
      auto it = row.by_n.find(n);
      if (it == row.by_n.end()) {
        ++p.n_dropped;
        continue;
      }
      const bool tail_view = variant == TailVariant::tail_only_view;
      vals.push_back({row.cluster, tail_view ? it->second.second : it->second.first, row.family});
      c0 += row.c0;
      tail += it->second.second;
    }
    p.n_dropped += events.size() - rows.size();
    p.n_survivors = vals.size();
    if (!vals.empty()) {
      p.ci = cluster_bootstrap(vals, n_resamples, mix_seed(seed, 1000 + static_cast<std::uint64_t>(n)));
      p.interaction = p.ci.mean;
      p.c0_on_survivors = c0 / static_cast<double>(vals.size());
      if (n > 0) p.tail_only = tail / static_cast<double>(vals.size());
    }
    res.points.push_back(p);
  }
  return res;
}

// ---------------------------------------------------------------------------
// Forced-token bridge

enum class TokenClass { alpha, numeric, punct, space_leading, other };

NLOHMANN_JSON_SERIALIZE_ENUM(TokenClass, {{TokenClass::alpha, "alpha"},
                                          {TokenClass::numeric, "numeric"},
                                          {TokenClass::punct, "punct"},
                                          {TokenClass::space_leading, "space_leading"},
                                          {TokenClass::other, "other"}})

/// Class of a token's decoded text, judged by its first byte.
inline TokenClass token_class(std::string_view text) {
  if (text.empty()) return TokenClass::other;
  const auto c = static_cast<unsigned char>(text[0]);
  if (std::isspace(c)) return TokenClass::space_leading;
  if (text.size() > 1 && text.front() == '<' && text.back() == '>') return TokenClass::other;
  if (std::isalpha(c)) return TokenClass::alpha;
  if (std::isdigit(c)) return TokenClass::numeric;
  if (std::ispunct(c)) return TokenClass::punct;
  return TokenClass::other;
}

enum class Branch { descendant, base, rank_matched, class_matched };

NLOHMANN_JSON_SERIALIZE_ENUM(Branch, {{Branch::descendant, "descendant"},
                                      {Branch::base, "base"},
                                      {Branch::rank_matched, "rank_matched"},
                                      {Branch::class_matched, "class_matched"}})

/// Validators are pure functions of (suffix text, expected answer).
using Validator = std::function<bool(const std::string& suffix, const std::string& answer)>;

inline bool exact_substring_validator(const std::string& suffix, const std::string& answer) {
  return !answer.empty() && suffix.find(answer) != std::string::npos;
}

struct BranchScore {
  std::string event_id;
  std::string category;
  Branch branch = Branch::descendant;
  TokenId forced = 0;
  std::string suffix;
  bool success = false;
};

inline void to_json(json& j, const BranchScore& b) {
  j = json{{"event_id", b.event_id}, {"category", b.category}, {"branch", b.branch},
           {"forced_token", b.forced}, {"suffix", b.suffix},   {"success", b.success}};
}

struct BranchDelta {
  std::string event_id;
  std::string cluster_id;
  std::string category;
  double descendant_minus_base = 0;
  double descendant_minus_rank = 0;
  double descendant_minus_class = 0;
};

inline void to_json(json& j, const BranchDelta& d) {
  j = json{{"event_id", d.event_id},
           {"cluster_id", d.cluster_id},
           {"category", d.category},
           {"descendant_minus_base", d.descendant_minus_base},
           {"descendant_minus_rank_matched", d.descendant_minus_rank},
           {"descendant_minus_class_matched", d.descendant_minus_class}};
}

struct CategoryDelta {
  std::string category;
  BootstrapResult delta;  // descendant - base
  double vs_rank_matched = 0;
  double vs_class_matched = 0;
  std::size_t n_events = 0;
};

struct ForcedTokenResult {
  std::vector<BranchScore> scores;
  std::vector<BranchDelta> deltas;
  std::vector<CategoryDelta> categories;  // plus an "ALL" row last
  std::vector<Exclusion> exclusions;
};

/// Rank-matched and class-matched alternatives from the descendant's logits.
inline std::pair<TokenId, TokenId> alternative_tokens(const Checkpoint& it, std::span<const float> it_logits,
                                                      TokenId t_it, TokenId t_pt) {
  std::vector<TokenId> order;
  for (std::size_t t = 0; t < it_logits.size(); ++t)
    if (it.is_real(static_cast<TokenId>(t)) && static_cast<TokenId>(t) != t_it && static_cast<TokenId>(t) != t_pt)
      order.push_back(static_cast<TokenId>(t));
  XPATCH_CHECK(!order.empty(), ErrorCode::EmptyInput, "no alternative real tokens");
  std::stable_sort(order.begin(), order.end(), [&](TokenId a, TokenId b) {
    return it_logits[static_cast<std::size_t>(a)] > it_logits[static_cast<std::size_t>(b)];
  });
  const TokenId rank = order.front();
  const auto cls = token_class(it.vocab[static_cast<std::size_t>(t_it)]);
  TokenId klass = rank;
  for (TokenId t : order)
    if (token_class(it.vocab[static_cast<std::size_t>(t)]) == cls) {
      klass = t;
      break;
    }
  return {rank, klass};
}

inline ForcedTokenResult forced_token_bridge(ModelPair pair, const std::vector<DivergenceEvent>& events,
                                             const Validator& validator = exact_substring_validator, int budget = 8,
                                             std::uint64_t seed = 0, int n_resamples = 1000) {
  XPATCH_CHECK(budget >= 1, ErrorCode::InvalidArgument, "budget must be >= 1");
  ForcedTokenResult res;
  const ByteTokenizer tok(*pair.it);
  std::map<std::string, std::vector<ClusterValue>> by_cat;
  std::map<std::string, std::pair<double, double>> alt_sums;
  for (const auto& e : events) {
    check_event(pair, e);
    XPATCH_CHECK(e.t_it != e.t_pt, ErrorCode::InvalidArgument, "event has identical divergent tokens");
    if (!e.answer) {
      res.exclusions.push_back({e.prompt_id, "unscoreable_category", e.category});
      continue;
    }
    const auto it_logits = readout_row(*pair.it, forward_full(*pair.it, e.prefix).last(), true);
    const auto [rank_tok, class_tok] = alternative_tokens(*pair.it, it_logits, e.t_it, e.t_pt);
    const std::pair<Branch, TokenId> branches[4] = {
        {Branch::descendant, e.t_it}, {Branch::base, e.t_pt}, {Branch::rank_matched, rank_tok},
        {Branch::class_matched, class_tok}};
    std::vector<BranchScore> local;
    bool failed = false;
    for (const auto& [branch, forced] : branches) {
      BranchScore s;
      s.event_id = e.id();
      s.category = e.category;
      s.branch = branch;
      s.forced = forced;
      s.suffix = tok.decode(detail::native_tail(*pair.it, e.prefix, forced, budget));
      try {
        s.success = validator(s.suffix, *e.answer);
      } catch (const std::exception& ex) {
        res.exclusions.push_back({e.prompt_id, "validator_exception", ex.what()});
        failed = true;
        break;
      }
      local.push_back(std::move(s));
    }
    if (failed) continue;
    BranchDelta d;
    d.event_id = e.id();
    d.cluster_id = e.cluster_id;
    d.category = e.category;
    d.descendant_minus_base = double(local[0].success) - double(local[1].success);
    d.descendant_minus_rank = double(local[0].success) - double(local[2].success);
    d.descendant_minus_class = double(local[0].success) - double(local[3].success);
    for (const std::string& cat : {e.category, std::string("ALL")}) {
      by_cat[cat].push_back({e.cluster_id, d.descendant_minus_base, ""});
      alt_sums[cat].first += d.descendant_minus_rank;
      alt_sums[cat].second += d.descendant_minus_class;
    }
    res.deltas.push_back(d);
    res.scores.insert(res.scores.end(), local.begin(), local.end());
  }
  for (const auto& [cat, vals] : by_cat) {
    if (cat == "ALL") continue;
    CategoryDelta c;
    c.category = cat;
    c.delta = cluster_bootstrap(vals, n_resamples, mix_seed(seed, detail::fnv1a(cat)));
    c.n_events = vals.size();
    c.vs_rank_matched = alt_sums[cat].first / static_cast<double>(vals.size());
    c.vs_class_matched = alt_sums[cat].second / static_cast<double>(vals.size());
    res.categories.push_back(c);
  }
  if (by_cat.count("ALL")) {
    CategoryDelta c;
    c.category = "ALL";
    const auto& vals = by_cat["ALL"];
    c.delta = cluster_bootstrap(vals, n_resamples, mix_seed(seed, detail::fnv1a("ALL")));
    c.n_events = vals.size();
    c.vs_rank_matched = alt_sums["ALL"].first / static_cast<double>(vals.size());
    c.vs_class_matched = alt_sums["ALL"].second / static_cast<double>(vals.size());
    res.categories.push_back(c);
  }
  return res;
}

// ---------------------------------------------------------------------------
// Serialization

inline void to_json(json& j, const ContinuationPoint& p) {
  auto num = [](double x) { return std::isfinite(x) ? json(x) : json(nullptr); };
  j = json{{"horizon", p.horizon},
           {"interaction", ci_json(p.ci)},
           {"c0_on_survivors", p.c0_on_survivors},
           {"tail_only", num(p.tail_only)},
           {"n_survivors", p.n_survivors},
           {"n_dropped", p.n_dropped}};
}

inline void to_json(json& j, const ContinuationResult& r) {
  j = json{{"variant", r.variant}, {"points", r.points}, {"n_exclusions", r.exclusions.size()}};
}

inline void to_json(json& j, const CategoryDelta& c) {
  j = json{{"category", c.category},
           {"descendant_minus_base", ci_json(c.delta)},
           {"descendant_minus_rank_matched", c.vs_rank_matched},
           {"descendant_minus_class_matched", c.vs_class_matched},
           {"n_events", c.n_events}};
}

}  // namespace xpatch
