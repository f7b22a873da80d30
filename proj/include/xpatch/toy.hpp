#pragma once

// Synthetic paired checkpoints with known structure.
//
// The base ("PT") model implements a noisy successor language over the real
// tokens: the unembedding row of token b reads the embedding of pred(b), so
// the greedy continuation of token a is succ(a), a fixed cycle over all real
// tokens. Attention and MLP weights are small random perturbations.
//
// Descendant ("IT") variants:
//   identical       byte-equal copy
//   late_only       random perturbation of layers >= boundary, final norm, lm_head
//   upstream_only   random perturbation of the embedding and layers < boundary
//   gated_coupling  (a) an upstream MLP unit per trigger token writes a fixed
//                   direction v_k into the residual stream when the current
//                   token is that trigger, (b) a final-layer MLP unit reads
//                   <state, v_k> and writes toward the target token, and
//                   (c) a late MLP unit per "switch" token redirects its
//                   successor, a late-only disagreement that does not depend
//                   on upstream state.
//
// Under (a)+(b) the IT late effect exists only when the IT upstream state is
// present, so the four-cell interaction at trigger sites is positive by
// construction.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "xpatch/model.hpp"
#include "xpatch/records.hpp"
#include "xpatch/rng.hpp"

namespace xpatch {

enum class ToyMode { identical, late_only, upstream_only, gated_coupling };

NLOHMANN_JSON_SERIALIZE_ENUM(ToyMode, {{ToyMode::identical, "identical"},
                                       {ToyMode::late_only, "late_only"},
                                       {ToyMode::upstream_only, "upstream_only"},
                                       {ToyMode::gated_coupling, "gated_coupling"}})

struct ToySpec {
  ToyMode mode = ToyMode::gated_coupling;
  ModelConfig config;
  std::uint64_t seed = 7;
};

/// The toy vocab layout: printable ASCII, then <eos>, <unk>, and non-real fillers.
inline constexpr int kToyPrintable = 95;
inline constexpr int kToyMinVocab = kToyPrintable + 3;

/// Planted structure of a generated pair.
struct ToyLanguage {
  std::vector<TokenId> succ;      // successor of each real token (cycle)
  std::vector<TokenId> triggers;  // upstream-gated coupling sites
  std::vector<TokenId> switches;  // late-only disagreement sites
  std::vector<TokenId> switch_targets;
  TokenId target = 0;              // token the coupling pushes toward
  int coupling_layer = 0;          // upstream layer holding the trigger units
  int switch_layer = 0;            // late layer holding the switch units
  std::vector<std::vector<float>> directions;  // v_k, unit norm

  /// Next token under the descendant's planted rules.
  TokenId it_next(TokenId t) const {
    if (std::find(triggers.begin(), triggers.end(), t) != triggers.end()) return target;
    for (std::size_t i = 0; i < switches.size(); ++i)
      if (switches[i] == t) return switch_targets[i];
    return succ[static_cast<std::size_t>(t)];
  }
};

/// Default toy config: 6 layers, d_model 64, GQA 4/2 heads, vocab 128.
inline ModelConfig toy_config(int n_layers = 6, int d_model = 64) {
  ModelConfig c;
  c.n_layers = n_layers;
  c.d_model = d_model;
  c.n_heads = 4;
  c.n_kv_heads = 2;
  c.d_ff = 2 * d_model;
  c.vocab_size = 128;
  c.rope_theta = 10000.0;
  c.norm_eps = 1e-5;
  c.late_boundary = -1;
  c.resolve();
  return c;
}

namespace detail {

inline constexpr float kToyLogitScale = 10.0f;
inline constexpr float kToyBaseNoise = 0.1f;
inline constexpr float kToyPerturbation = 0.3f;
inline constexpr float kToyUpstreamGain = 0.25f;   // v_k written with ~64 * gain
inline constexpr float kToyCouplingGain = 0.5f;    // final-layer push toward target
inline constexpr float kToySwitchGain = 0.2f;

inline void fill_normal(std::vector<float>& t, Pcg64& rng, double scale) {
  for (auto& x : t) x = static_cast<float>(rng.normal() * scale);
}

inline std::vector<float> unit(std::vector<float> v) {
  double n = 0;
  for (float x : v) n += static_cast<double>(x) * x;
  n = std::sqrt(n);
  for (auto& x : v) x = static_cast<float>(x / n);
  return v;
}

inline ToyLanguage plan_language(const ModelConfig& c, Pcg64& rng) {
  const int n_real = kToyPrintable + 1;  // printable + <eos>
  ToyLanguage lang;
  // Specials sit on the cycle in the order target, 4 switches, trigger,
  // trigger, with gaps of at least 3. A switch skips one cycle step, so the
  // descendant's own walk from the target passes every switch before it
  // reaches a trigger and loops back.
  for (int attempt = 0;; ++attempt) {
    XPATCH_CHECK(attempt < 10000, ErrorCode::InvalidSpec, "could not place toy specials");
    std::vector<TokenId> order(static_cast<std::size_t>(n_real));
    std::iota(order.begin(), order.end(), 0);
    rng.shuffle(std::span<TokenId>(order));
    lang.succ.assign(static_cast<std::size_t>(c.vocab_size), 0);
    for (int i = 0; i < n_real; ++i)
      lang.succ[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])] =
          order[static_cast<std::size_t>((i + 1) % n_real)];
    std::vector<int> slots{0};
    for (int k = 0; k < 6; ++k) slots.push_back(slots.back() + 3 + static_cast<int>(rng.bounded(k == 5 ? 20 : 8)));
    if (slots.back() > n_real - 3) continue;
    bool ok = true;
    for (int s : slots)
      for (int off = 0; off < 3; ++off)
        if (order[static_cast<std::size_t>((s + off) % n_real)] == kToyPrintable) ok = false;
    if (!ok) continue;
    auto at = [&](int i) { return order[static_cast<std::size_t>(i % n_real)]; };
    lang.target = at(slots[0]);
    lang.switches = {at(slots[1]), at(slots[2]), at(slots[3]), at(slots[4])};
    lang.switch_targets.clear();
    for (int k = 1; k <= 4; ++k) lang.switch_targets.push_back(at(slots[static_cast<std::size_t>(k)] + 2));
    lang.triggers = {at(slots[5]), at(slots[6])};
    break;
  }
  lang.coupling_layer = std::min(1, c.boundary() - 1);
  lang.switch_layer = c.n_layers - 2 >= c.boundary() ? c.n_layers - 2 : c.n_layers - 1;
  // Orthonormal coupling directions.
  const auto d = static_cast<std::size_t>(c.d_model);
  for (std::size_t k = 0; k < lang.triggers.size(); ++k) {
    std::vector<float> v(d);
    fill_normal(v, rng, 1.0);
    for (const auto& prev : lang.directions) {
      double dot = 0;
      for (std::size_t i = 0; i < d; ++i) dot += static_cast<double>(v[i]) * prev[i];
      for (std::size_t i = 0; i < d; ++i) v[i] -= static_cast<float>(dot * prev[i]);
    }
    lang.directions.push_back(unit(std::move(v)));
  }
  return lang;
}

inline Checkpoint make_toy_base(const ModelConfig& c, const ToyLanguage& lang, std::uint64_t seed) {
  Checkpoint ck = make_empty_checkpoint(c);
  const auto d = static_cast<std::size_t>(c.d_model);
  const auto V = static_cast<std::size_t>(c.vocab_size);
  for (std::size_t i = 0; i < V; ++i) {
    if (i < static_cast<std::size_t>(kToyPrintable)) ck.vocab[i] = std::string(1, static_cast<char>(32 + i));
    else if (i == kToyPrintable) ck.vocab[i] = "<eos>";
    else if (i == kToyPrintable + 1) ck.vocab[i] = "<unk>";
    else ck.vocab[i] = "<extra_" + std::to_string(i - kToyPrintable - 2) + ">";
    ck.real_token_mask[i] = i <= static_cast<std::size_t>(kToyPrintable);
  }
  Pcg64 rng(seed, 11);
  fill_normal(ck.embed, rng, 1.0);
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
  const double inv_sqrt_ff = 1.0 / std::sqrt(static_cast<double>(c.d_ff));
  const int n_reserved = 4;  // last units of every MLP stay zero in the base
  for (auto& L : ck.layers) {
    fill_normal(L.wq, rng, inv_sqrt_d);
    fill_normal(L.wk, rng, inv_sqrt_d);
    fill_normal(L.wv, rng, inv_sqrt_d);
    fill_normal(L.wo, rng, kToyBaseNoise * inv_sqrt_d);
    fill_normal(L.w_gate, rng, inv_sqrt_d);
    fill_normal(L.w_up, rng, inv_sqrt_d);
    fill_normal(L.w_down, rng, kToyBaseNoise * inv_sqrt_ff);
    const auto ff = static_cast<std::size_t>(c.d_ff);
    for (std::size_t u = ff - n_reserved; u < ff; ++u) {
      std::fill_n(L.w_gate.begin() + static_cast<std::ptrdiff_t>(u * d), d, 0.0f);
      std::fill_n(L.w_up.begin() + static_cast<std::ptrdiff_t>(u * d), d, 0.0f);
      for (std::size_t r = 0; r < d; ++r) L.w_down[r * ff + u] = 0.0f;
    }
  }
  // Unembedding: real token b reads the embedding of its predecessor.
  std::vector<TokenId> pred(V, 0);
  for (std::size_t a = 0; a <= static_cast<std::size_t>(kToyPrintable); ++a)
    pred[static_cast<std::size_t>(lang.succ[a])] = static_cast<TokenId>(a);
  for (std::size_t b = 0; b < V; ++b) {
    float* row = ck.lm_head.data() + b * d;
    if (ck.real_token_mask[b]) {
      const float* e = ck.embed.data() + static_cast<std::size_t>(pred[b]) * d;
      for (std::size_t i = 0; i < d; ++i) row[i] = kToyLogitScale / static_cast<float>(d) * e[i];
    } else {
      for (std::size_t i = 0; i < d; ++i) row[i] = static_cast<float>(rng.normal() * 0.01);
    }
  }
  return ck;
}

/// Plants a gated MLP unit: out += w_down_dir * silu(g) * u with g = u = <read, normed x>.
inline void plant_unit(Checkpoint& ck, int layer, std::size_t unit_index, std::span<const float> read, float read_gain,
                       std::span<const float> write, float write_gain) {
  auto& L = ck.layers[static_cast<std::size_t>(layer)];
  const auto d = static_cast<std::size_t>(ck.config.d_model);
  const auto ff = static_cast<std::size_t>(ck.config.d_ff);
  for (std::size_t i = 0; i < d; ++i) {
    L.w_gate[unit_index * d + i] = read_gain * read[i];
    L.w_up[unit_index * d + i] = read_gain * read[i];
    L.w_down[i * ff + unit_index] = write_gain * write[i];
  }
}

inline std::vector<float> embedding_row(const Checkpoint& ck, TokenId t) {
  const auto d = static_cast<std::size_t>(ck.config.d_model);
  return {ck.embed.begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(t) * d),
          ck.embed.begin() + static_cast<std::ptrdiff_t>((static_cast<std::size_t>(t) + 1) * d)};
}

inline void perturb(std::vector<float>& t, Pcg64& rng, double scale) {
  for (auto& x : t) x += static_cast<float>(rng.normal() * scale);
}

struct ToyBuild {
  PairedCheckpoints pair;
  ToyLanguage language;
};

inline ToyBuild build_toy(const ToySpec& spec) {
  ModelConfig c = spec.config;
  try {
    c.resolve();
  } catch (const Error& e) {
    throw Error(ErrorCode::InvalidSpec, e.what());
  }
  XPATCH_CHECK(c.vocab_size >= kToyMinVocab, ErrorCode::InvalidSpec,
               "toy vocab needs at least " + std::to_string(kToyMinVocab) + " entries");
  XPATCH_CHECK(c.d_ff >= 8, ErrorCode::InvalidSpec, "toy d_ff must be >= 8");
  Pcg64 lang_rng(spec.seed, 3);
  ToyBuild out;
  out.language = plan_language(c, lang_rng);
  out.pair.pt = make_toy_base(c, out.language, spec.seed);
  out.pair.it = out.pair.pt;
  Checkpoint& it = out.pair.it;
  const int b = c.boundary();
  Pcg64 rng(spec.seed, 29);
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(c.d_model));

  switch (spec.mode) {
    case ToyMode::identical:
      break;
    case ToyMode::late_only:
    case ToyMode::upstream_only: {
      const bool late = spec.mode == ToyMode::late_only;
      for (int i = 0; i < c.n_layers; ++i) {
        if ((i >= b) != late) continue;
        auto& L = it.layers[static_cast<std::size_t>(i)];
        for (auto* t : {&L.wq, &L.wk, &L.wv, &L.wo, &L.w_gate, &L.w_up, &L.w_down})
          perturb(*t, rng, kToyPerturbation * inv_sqrt_d);
        perturb(L.norm_attn, rng, 0.05);
        perturb(L.norm_mlp, rng, 0.05);
      }
      if (late) {
        perturb(it.final_norm, rng, 0.05);
        perturb(it.lm_head, rng, kToyPerturbation * kToyLogitScale / c.d_model);
      } else {
        perturb(it.embed, rng, kToyPerturbation);
      }
      break;
    }
    case ToyMode::gated_coupling: {
      const auto& lang = out.language;
      const auto ff = static_cast<std::size_t>(c.d_ff);
      const auto target_read = unit(embedding_row(it, [&] {
        for (std::size_t a = 0; a <= static_cast<std::size_t>(kToyPrintable); ++a)
          if (lang.succ[a] == lang.target) return static_cast<TokenId>(a);
        return TokenId{0};
      }()));
      for (std::size_t k = 0; k < lang.triggers.size(); ++k) {
        const auto trig = unit(embedding_row(it, lang.triggers[k]));
        plant_unit(it, lang.coupling_layer, ff - 1 - k, trig, 1.0f, lang.directions[k], kToyUpstreamGain);
        plant_unit(it, c.n_layers - 1, ff - 1 - k, lang.directions[k], 1.0f, target_read, kToyCouplingGain);
      }
      for (std::size_t s = 0; s < lang.switches.size(); ++s) {
        const auto read = unit(embedding_row(it, lang.switches[s]));
        TokenId pred_target = 0;
        for (std::size_t a = 0; a <= static_cast<std::size_t>(kToyPrintable); ++a)
          if (lang.succ[a] == lang.switch_targets[s]) pred_target = static_cast<TokenId>(a);
        const auto write = unit(embedding_row(it, pred_target));
        const std::size_t slot = lang.switch_layer == c.n_layers - 1 ? ff - 3 - s : ff - 1 - s;
        XPATCH_CHECK(slot >= ff - 8, ErrorCode::InvalidSpec, "not enough reserved MLP units");
        plant_unit(it, lang.switch_layer, slot, read, 1.0f, write, kToySwitchGain);
      }
      break;
    }
  }
  return out;
}

}  // namespace detail

inline PairedCheckpoints gen_toy_pair(const ToySpec& spec) { return detail::build_toy(spec).pair; }

inline ToyLanguage toy_language(const ToySpec& spec) { return detail::build_toy(spec).language; }

/// Write direction of MLP unit `unit` in `layer` (a column of w_down).
inline std::vector<float> mlp_write_direction(const Checkpoint& ck, int layer, std::size_t unit) {
  const auto& L = ck.layers.at(static_cast<std::size_t>(layer));
  const auto d = static_cast<std::size_t>(ck.config.d_model);
  const auto ff = static_cast<std::size_t>(ck.config.d_ff);
  XPATCH_CHECK(unit < ff, ErrorCode::InvalidArgument, "unit outside d_ff");
  std::vector<float> out(d);
  for (std::size_t i = 0; i < d; ++i) out[i] = L.w_down[i * ff + unit];
  return out;
}

/// Direction the final-layer coupling units write into (both triggers share it).
inline std::vector<float> toy_coupling_direction(const PairedCheckpoints& pair) {
  const auto& c = pair.it.config;
  return mlp_write_direction(pair.it, c.n_layers - 1, static_cast<std::size_t>(c.d_ff - 1));
}

/// Elementwise (1 - a) x + a y over every tensor; vocab and config come from `x`.
inline Checkpoint interpolate_weights(const Checkpoint& x, const Checkpoint& y, double a) {
  validate_pair(x, y);
  XPATCH_CHECK(a >= 0.0 && a <= 1.0, ErrorCode::AlphaOutOfRange, "alpha outside [0, 1]");
  Checkpoint out = x;
  std::vector<const std::vector<float>*> src;
  for_each_tensor(y, [&](const std::string&, const auto&, const std::vector<float>& t) { src.push_back(&t); });
  std::size_t i = 0;
  const auto fa = static_cast<float>(a);
  for_each_tensor(out, [&](const std::string&, const auto&, std::vector<float>& t) {
    const auto& o = *src[i++];
    for (std::size_t k = 0; k < t.size(); ++k) t[k] = (1.0f - fa) * t[k] + fa * o[k];
  });
  return out;
}

/// Synthetic prompt manifest for a gated_coupling pair. Prompt classes:
///   GOV-FORMAT / GOV-CONV   end with a trigger token (coupling site at position 0)
///   CONTENT-REASON          end with a trigger; carry the exact answer the
///                           coupled continuation produces
///   BASELINE                end with an ordinary token
/// Consecutive prompt pairs share a cluster id.
inline std::vector<PromptRecord> gen_toy_manifest(const ToyLanguage& lang, int n_prompts, std::uint64_t seed) {
  Pcg64 rng(seed, 101);
  std::vector<TokenId> plain;
  for (TokenId t = 0; t < kToyPrintable; ++t) {
    const bool special = std::find(lang.triggers.begin(), lang.triggers.end(), t) != lang.triggers.end() ||
                         std::find(lang.switches.begin(), lang.switches.end(), t) != lang.switches.end() ||
                         t == lang.target;
    if (!special) plain.push_back(t);
  }
  static const char* kFamilies[] = {"alpha", "beta", "gamma", "delta"};
  static const char* kCategories[] = {"GOV-FORMAT", "GOV-CONV", "CONTENT-REASON", "BASELINE"};
  auto spell = [](TokenId t) { return std::string(1, static_cast<char>(32 + t)); };
  std::vector<PromptRecord> out;
  for (int i = 0; i < n_prompts; ++i) {
    PromptRecord r;
    char buf[32];
    std::snprintf(buf, sizeof buf, "toy-%04d", i);
    r.id = buf;
    std::snprintf(buf, sizeof buf, "cluster-%04d", i / 2);
    r.cluster_id = buf;
    r.family = kFamilies[(i / 2) % 4];
    const int cls = static_cast<int>(rng.bounded(10));
    r.category = cls < 3 ? kCategories[0] : cls < 5 ? kCategories[1] : cls < 7 ? kCategories[2] : kCategories[3];
    r.source = "synthetic";
    const int len = 6 + static_cast<int>(rng.bounded(12));
    for (int k = 0; k < len; ++k) r.text += spell(plain[rng.bounded(plain.size())]);
    if (r.category != std::string("BASELINE")) {
      r.text += spell(lang.triggers[rng.bounded(lang.triggers.size())]);
      if (r.category == std::string("CONTENT-REASON")) {
        TokenId t = lang.target;
        std::string answer;
        for (int k = 0; k < 2; ++k) {
          t = lang.it_next(t);
          answer += t < kToyPrintable ? spell(t) : std::string();
        }
        r.answer = answer;
      }
    }
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace xpatch
