#pragma once

// Paired greedy rollouts and the event collectors built on them.

#include <algorithm>
#include <optional>
#include <string>
#include <vector>

#include "xpatch/records.hpp"
#include "xpatch/rng.hpp"
#include "xpatch/runtime.hpp"
#include "xpatch/tokenizer.hpp"

namespace xpatch {

enum class RolloutSource { pt, it };

NLOHMANN_JSON_SERIALIZE_ENUM(RolloutSource, {{RolloutSource::pt, "pt"}, {RolloutSource::it, "it"}})

/// Both models' greedy next token at every step of one rollout.
struct PairedTrace {
  std::vector<TokenId> generated;  // tokens actually appended
  std::vector<TokenId> pt_next;    // PT argmax given prompt + generated[0..i)
  std::vector<TokenId> it_next;
  bool hit_eos = false;

  std::optional<std::size_t> first_disagreement() const {
    for (std::size_t i = 0; i < pt_next.size(); ++i)
      if (pt_next[i] != it_next[i]) return i;
    return std::nullopt;
  }
};

/// Steps both models over the same history. The history follows `source`;
/// with stop_at_disagreement the trace ends at the first disagreeing step.
inline PairedTrace trace_pair(const PairedCheckpoints& pair, std::span<const TokenId> prompt, RolloutSource source,
                              int max_new, bool stop_at_disagreement) {
  XPATCH_CHECK(max_new >= 1, ErrorCode::InvalidArgument, "max_new must be >= 1");
  const auto eos = eos_token(pair.pt);
  DecodeSession pt(pair.pt), it(pair.it);
  for (TokenId t : prompt) {
    pt.step(t);
    it.step(t);
  }
  PairedTrace tr;
  for (int i = 0; i < max_new; ++i) {
    const TokenId a = argmax(pt.logits(true));
    const TokenId b = argmax(it.logits(true));
    tr.pt_next.push_back(a);
    tr.it_next.push_back(b);
    if (a != b && stop_at_disagreement) break;
    const TokenId next = source == RolloutSource::pt ? a : b;
    tr.generated.push_back(next);
    if (eos && next == *eos) {
      tr.hit_eos = true;
      break;
    }
    if (i + 1 < max_new) {
      pt.step(next);
      it.step(next);
    }
  }
  return tr;
}

struct CollectResult {
  std::vector<DivergenceEvent> events;
  std::vector<Exclusion> exclusions;
};

namespace detail {

inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline DivergenceEvent make_event(const PromptRecord& r, std::vector<TokenId> prefix, int position, TokenId t_pt,
                                  TokenId t_it, EventKind kind) {
  DivergenceEvent e;
  e.prompt_id = r.id;
  e.cluster_id = r.cluster_id.empty() ? r.id : r.cluster_id;
  e.family = r.family.empty() ? "default" : r.family;
  e.category = r.category;
  e.prefix = std::move(prefix);
  e.position = position;
  e.t_pt = t_pt;
  e.t_it = t_it;
  e.kind = kind;
  e.answer = r.answer;
  return e;
}

inline std::optional<std::vector<TokenId>> encode_prompt(const PairedCheckpoints& pair, const PromptRecord& r) {
  auto ids = ByteTokenizer(pair.pt).encode(r.text);
  if (!ids || ids->empty()) return std::nullopt;
  for (TokenId t : *ids)
    if (t < 0 || t >= pair.pt.config.vocab_size) return std::nullopt;
  return ids;
}

inline std::vector<TokenId> extend(std::vector<TokenId> prompt, std::span<const TokenId> gen, std::size_t n) {
  prompt.insert(prompt.end(), gen.begin(), gen.begin() + static_cast<std::ptrdiff_t>(n));
  return prompt;
}

}  // namespace detail

/// Re-runs both models without a cache over the stored prefix and checks
/// agreement before `position` and the stored pair at `position`.
inline bool verify_first_divergence(const PairedCheckpoints& pair, const DivergenceEvent& e) {
  const auto lp = readout(forward_full(pair.pt, e.prefix), pair.pt, true);
  const auto li = readout(forward_full(pair.it, e.prefix), pair.it, true);
  const std::size_t start = e.prompt_length() - 1;
  for (std::size_t j = 0; j <= static_cast<std::size_t>(e.position); ++j) {
    const TokenId a = argmax(lp.row(start + j));
    const TokenId b = argmax(li.row(start + j));
    if (j < static_cast<std::size_t>(e.position)) {
      if (a != b || a != e.prefix[start + j + 1]) return false;
    } else if (a != e.t_pt || b != e.t_it) {
      return false;
    }
  }
  return true;
}

inline CollectResult collect_first_divergences(const PairedCheckpoints& pair, const std::vector<PromptRecord>& manifest,
                                               int max_new = 128) {
  validate_pair(pair);
  CollectResult out;
  for (const auto& r : manifest) {
    auto prompt = detail::encode_prompt(pair, r);
    if (!prompt) {
      out.exclusions.push_back({r.id, "token_invalid", "prompt cannot be tokenized"});
      continue;
    }
    const auto tr = trace_pair(pair, *prompt, RolloutSource::pt, max_new, true);
    const auto at = tr.first_disagreement();
    if (!at) {
      out.exclusions.push_back({r.id, "no_divergence", tr.hit_eos ? "eos before divergence" : "budget exhausted"});
      continue;
    }
    auto e = detail::make_event(r, detail::extend(*prompt, tr.generated, *at), static_cast<int>(*at), tr.pt_next[*at],
                                tr.it_next[*at], EventKind::first_divergence);
    if (!verify_first_divergence(pair, e)) {
      out.exclusions.push_back({r.id, "verification_failed", "cached and recomputed rollouts disagree"});
      continue;
    }
    out.events.push_back(std::move(e));
  }
  return out;
}

/// Same as above; malformed manifest lines count as exclusions.
inline CollectResult collect_first_divergences(const PairedCheckpoints& pair, const ManifestReadResult& manifest,
                                               int max_new = 128) {
  auto out = collect_first_divergences(pair, manifest.records, max_new);
  out.exclusions.insert(out.exclusions.end(), manifest.malformed.begin(), manifest.malformed.end());
  return out;
}

/// One uniformly drawn disagreement strictly after the first one, along the
/// source model's own greedy rollout.
inline CollectResult collect_random_disagreements(const PairedCheckpoints& pair,
                                                  const std::vector<PromptRecord>& manifest, RolloutSource source,
                                                  std::uint64_t seed, int max_new = 128) {
  validate_pair(pair);
  CollectResult out;
  const auto kind = source == RolloutSource::pt ? EventKind::random_pt_rollout : EventKind::random_it_rollout;
  for (const auto& r : manifest) {
    auto prompt = detail::encode_prompt(pair, r);
    if (!prompt) {
      out.exclusions.push_back({r.id, "token_invalid", "prompt cannot be tokenized"});
      continue;
    }
    const auto tr = trace_pair(pair, *prompt, source, max_new, false);
    std::vector<std::size_t> later;
    bool seen_first = false;
    for (std::size_t i = 0; i < tr.pt_next.size(); ++i) {
      if (tr.pt_next[i] == tr.it_next[i]) continue;
      if (seen_first) later.push_back(i);
      seen_first = true;
    }
    if (later.empty()) {
      out.exclusions.push_back({r.id, "no_later_disagreement", ""});
      continue;
    }
    Pcg64 rng(mix_seed(seed, detail::fnv1a(r.id)), 31);
    const std::size_t at = later[rng.bounded(later.size())];
    out.events.push_back(detail::make_event(r, detail::extend(*prompt, tr.generated, at), static_cast<int>(at),
                                            tr.pt_next[at], tr.it_next[at], kind));
  }
  return out;
}

/// Step back one position from each first divergence and keep its future labels.
inline CollectResult collect_pre_divergence(const std::vector<DivergenceEvent>& first_div_events) {
  CollectResult out;
  for (const auto& e : first_div_events) {
    if (e.position < 1) {
      out.exclusions.push_back({e.prompt_id, "skipped_position_zero", ""});
      continue;
    }
    DivergenceEvent p = e;
    p.prefix.pop_back();
    p.position = e.position - 1;
    p.kind = EventKind::pre_divergence;
    out.events.push_back(std::move(p));
  }
  return out;
}

inline CollectResult collect_native_history(const PairedCheckpoints& pair, const std::vector<PromptRecord>& manifest,
                                            RolloutSource history_source, std::vector<int> horizons = {4, 8, 16}) {
  validate_pair(pair);
  XPATCH_CHECK(!horizons.empty(), ErrorCode::InvalidArgument, "no horizons");
  std::sort(horizons.begin(), horizons.end());
  XPATCH_CHECK(horizons.front() >= 0, ErrorCode::InvalidArgument, "horizons must be >= 0");
  CollectResult out;
  for (const auto& r : manifest) {
    auto prompt = detail::encode_prompt(pair, r);
    if (!prompt) {
      out.exclusions.push_back({r.id, "token_invalid", "prompt cannot be tokenized"});
      continue;
    }
    const auto tr = trace_pair(pair, *prompt, history_source, horizons.back() + 1, false);
    for (int h : horizons) {
      const auto hh = static_cast<std::size_t>(h);
      const std::string tag = "h=" + std::to_string(h);
      if (hh >= tr.pt_next.size()) {
        out.exclusions.push_back({r.id, "history_too_short", tag});
        continue;
      }
      if (tr.pt_next[hh] == tr.it_next[hh]) {
        out.exclusions.push_back({r.id, "agree_at_horizon", tag});
        continue;
      }
      auto e = detail::make_event(r, detail::extend(*prompt, tr.generated, hh), h, tr.pt_next[hh], tr.it_next[hh],
                                  EventKind::native_history);
      e.horizon = h;
      out.events.push_back(std::move(e));
    }
  }
  return out;
}

}  // namespace xpatch
