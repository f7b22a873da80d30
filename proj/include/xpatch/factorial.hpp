#pragma once

// Four-cell upstream x late-stack factorial. A cell Y(U, L) computes the
// boundary states with the upstream model, runs the late model's layers from
// the boundary over every position, and reads logit(t_it) - logit(t_pt) at the
// event position through the chosen reader.

#include <algorithm>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "xpatch/records.hpp"
#include "xpatch/runtime.hpp"
#include "xpatch/stats.hpp"

namespace xpatch {

enum class Readout { common_it, common_pt, native };

NLOHMANN_JSON_SERIALIZE_ENUM(Readout, {{Readout::common_it, "common_it"},
                                       {Readout::common_pt, "common_pt"},
                                       {Readout::native, "native"}})

/// Accepts "common-it" / "common_it" style spellings.
inline Readout parse_readout(std::string s) {
  std::replace(s.begin(), s.end(), '-', '_');
  if (s == "common_it") return Readout::common_it;
  if (s == "common_pt") return Readout::common_pt;
  if (s == "native") return Readout::native;
  throw Error(ErrorCode::InvalidArgument, "unknown readout " + s);
}

enum class Side { pt, it };

/// Non-owning view of a checkpoint pair; stage sweeps pair one base with many stages.
struct ModelPair {
  const Checkpoint* pt;
  const Checkpoint* it;
  ModelPair(const Checkpoint& a, const Checkpoint& b) : pt(&a), it(&b) {}
  ModelPair(const PairedCheckpoints& p) : pt(&p.pt), it(&p.it) {}  // NOLINT
  const Checkpoint& get(Side s) const { return s == Side::pt ? *pt : *it; }
  int boundary() const { return pt->config.boundary(); }
};

inline const Checkpoint& reader_for(ModelPair pair, Readout r, Side late) {
  switch (r) {
    case Readout::common_it: return *pair.it;
    case Readout::common_pt: return *pair.pt;
    case Readout::native: return pair.get(late);
  }
  return *pair.it;
}

inline double token_margin(std::span<const float> logits, TokenId t_it, TokenId t_pt) {
  return static_cast<double>(logits[static_cast<std::size_t>(t_it)]) -
         static_cast<double>(logits[static_cast<std::size_t>(t_pt)]);
}

inline ResidualStates upstream_states(ModelPair pair, Side side, std::span<const TokenId> tokens) {
  auto s = forward_upstream(pair.get(side), tokens, pair.boundary());
  s.source = side == Side::pt ? StateSource::pt : StateSource::it;
  return s;
}

/// Late stack + readout margin at the last position of `upstream`.
inline double late_margin(ModelPair pair, const ResidualStates& upstream, Side late, Readout r, TokenId t_it,
                          TokenId t_pt, const MlpHook* hook = nullptr) {
  const auto out = forward_late(pair.get(late), upstream, pair.boundary(), hook);
  return token_margin(readout_row(reader_for(pair, r, late), out.last(), true), t_it, t_pt);
}

inline void check_event(ModelPair pair, const DivergenceEvent& e) {
  detail::check_tokens(*pair.pt, e.prefix);
  XPATCH_CHECK(e.t_pt >= 0 && e.t_pt < pair.pt->config.vocab_size && e.t_it >= 0 &&
                   e.t_it < pair.pt->config.vocab_size,
               ErrorCode::TokenOutOfRange, "event label outside vocab");
  XPATCH_CHECK(!e.prefix.empty(), ErrorCode::EmptyInput, "event has an empty prefix");
}

inline double score_cell(ModelPair pair, const DivergenceEvent& e, Side upstream, Side late, Readout r) {
  check_event(pair, e);
  return late_margin(pair, upstream_states(pair, upstream, e.prefix), late, r, e.t_it, e.t_pt);
}

/// Margin of an unpatched full forward, for diagonal checks.
inline double native_margin(const Checkpoint& m, const Checkpoint& reader, const DivergenceEvent& e) {
  const auto out = forward_full(m, e.prefix);
  return token_margin(readout_row(reader, out.last(), true), e.t_it, e.t_pt);
}

struct FourCellResult {
  std::string event_id;
  std::string prompt_id;
  std::string cluster_id;
  std::string family;
  std::string category;
  EventKind kind = EventKind::first_divergence;
  int position = 0;
  Readout readout = Readout::common_it;
  double y_pp = 0, y_pi = 0, y_ip = 0, y_ii = 0;
  double late_effect_pt_up = 0;
  double late_effect_it_up = 0;
  double interaction = 0;

  void derive() {
    late_effect_pt_up = y_pi - y_pp;
    late_effect_it_up = y_ii - y_ip;
    interaction = late_effect_it_up - late_effect_pt_up;
  }
};

inline void to_json(json& j, const FourCellResult& r) {
  j = json{{"event_id", r.event_id},
           {"prompt_id", r.prompt_id},
           {"cluster_id", r.cluster_id},
           {"family", r.family},
           {"category", r.category},
           {"kind", r.kind},
           {"position", r.position},
           {"readout", r.readout},
           {"y_pp", r.y_pp},
           {"y_pi", r.y_pi},
           {"y_ip", r.y_ip},
           {"y_ii", r.y_ii},
           {"late_effect_pt_up", r.late_effect_pt_up},
           {"late_effect_it_up", r.late_effect_it_up},
           {"interaction", r.interaction}};
}

inline void from_json(const json& j, FourCellResult& r) {
  j.at("event_id").get_to(r.event_id);
  j.at("prompt_id").get_to(r.prompt_id);
  j.at("cluster_id").get_to(r.cluster_id);
  j.at("family").get_to(r.family);
  r.category = j.value("category", std::string());
  j.at("kind").get_to(r.kind);
  j.at("position").get_to(r.position);
  j.at("readout").get_to(r.readout);
  j.at("y_pp").get_to(r.y_pp);
  j.at("y_pi").get_to(r.y_pi);
  j.at("y_ip").get_to(r.y_ip);
  j.at("y_ii").get_to(r.y_ii);
  r.derive();
}

inline FourCellResult make_result(const DivergenceEvent& e, Readout r) {
  FourCellResult out;
  out.event_id = e.id();
  out.prompt_id = e.prompt_id;
  out.cluster_id = e.cluster_id;
  out.family = e.family;
  out.category = e.category;
  out.kind = e.kind;
  out.position = e.position;
  out.readout = r;
  return out;
}

inline FourCellResult score_event(ModelPair pair, const DivergenceEvent& e, Readout r) {
  check_event(pair, e);
  const auto u_pt = upstream_states(pair, Side::pt, e.prefix);
  const auto u_it = upstream_states(pair, Side::it, e.prefix);
  auto out = make_result(e, r);
  out.y_pp = late_margin(pair, u_pt, Side::pt, r, e.t_it, e.t_pt);
  out.y_pi = late_margin(pair, u_pt, Side::it, r, e.t_it, e.t_pt);
  out.y_ip = late_margin(pair, u_it, Side::pt, r, e.t_it, e.t_pt);
  out.y_ii = late_margin(pair, u_it, Side::it, r, e.t_it, e.t_pt);
  out.derive();
  return out;
}

struct FactorialRun {
  std::vector<FourCellResult> results;
  std::vector<Exclusion> exclusions;
};

inline FactorialRun score_factorial(ModelPair pair, const std::vector<DivergenceEvent>& events, Readout r) {
  validate_pair(*pair.pt, *pair.it);
  FactorialRun run;
  for (const auto& e : events) {
    try {
      run.results.push_back(score_event(pair, e, r));
    } catch (const Error& err) {
      run.exclusions.push_back({e.prompt_id, "scoring_failed", err.what()});
    }
  }
  return run;
}

struct ScaleConversions {
  double matched_portable_ratio = 0;
  double portable_share = 0;
  double native_diagonal_shift = 0;
  double interaction_share = 0;
  double odds_multiplier = 1;
  bool ratio_degenerate = false;  // |late_effect_pt_up| < eps
  bool share_degenerate = false;  // |native_diagonal_shift| < eps
};

inline constexpr double kDegenerateEps = 1e-9;

/// Denominator floor for per-event fractions (rescue, handoff, closure).
inline constexpr double kFiniteDenominator = 0.25;

/// Conversions of aggregated four-cell means. Degenerate ratios are flagged and set to NaN.
inline ScaleConversions scale_conversions(double y_pp, double y_pi, double y_ip, double y_ii) {
  ScaleConversions s;
  const double late_pt = y_pi - y_pp;
  const double late_it = y_ii - y_ip;
  const double interaction = late_it - late_pt;
  s.native_diagonal_shift = y_ii - y_pp;
  s.odds_multiplier = std::exp(interaction);
  s.ratio_degenerate = std::abs(late_pt) < kDegenerateEps;
  s.share_degenerate = std::abs(s.native_diagonal_shift) < kDegenerateEps;
  const double nan = std::numeric_limits<double>::quiet_NaN();
  s.matched_portable_ratio = s.ratio_degenerate ? nan : late_it / late_pt;
  s.portable_share = std::abs(late_it) < kDegenerateEps ? nan : late_pt / late_it;
  s.interaction_share = s.share_degenerate ? nan : interaction / s.native_diagonal_shift;
  return s;
}

/// Same conversions from late effects and the native shift directly.
inline ScaleConversions scale_conversions_from_effects(double late_pt, double late_it, double native_shift) {
  // y_pp = 0, y_pi = late_pt, y_ii = native_shift, y_ip = native_shift - late_it
  return scale_conversions(0.0, late_pt, native_shift - late_it, native_shift);
}

/// Non-finite values serialize as null.
inline json num_or_null(double x) { return std::isfinite(x) ? json(x) : json(nullptr); }

inline void to_json(json& j, const ScaleConversions& s) {
  const auto num = num_or_null;
  j = json{{"matched_portable_ratio", num(s.matched_portable_ratio)},
           {"portable_share", num(s.portable_share)},
           {"native_diagonal_shift", num(s.native_diagonal_shift)},
           {"interaction_share", num(s.interaction_share)},
           {"odds_multiplier", num(s.odds_multiplier)},
           {"ratio_degenerate", s.ratio_degenerate},
           {"share_degenerate", s.share_degenerate}};
}

struct FactorialSummary {
  std::size_t n_events = 0;
  double y_pp = 0, y_pi = 0, y_ip = 0, y_ii = 0;
  double late_effect_pt_up = 0, late_effect_it_up = 0, interaction = 0;
  BootstrapResult interaction_ci;
  BootstrapResult late_pt_ci;
  BootstrapResult late_it_ci;
  ScaleConversions conversions;
};

inline std::vector<ClusterValue> cluster_values(const std::vector<FourCellResult>& rs,
                                                double (*field)(const FourCellResult&)) {
  std::vector<ClusterValue> v;
  v.reserve(rs.size());
  for (const auto& r : rs) v.push_back({r.cluster_id, field(r), r.family});
  return v;
}

/// Means over events, with family-stratified cluster bootstrap intervals.
inline FactorialSummary summarize_factorial(const std::vector<FourCellResult>& rs, int n_resamples,
                                            std::uint64_t seed) {
  XPATCH_CHECK(!rs.empty(), ErrorCode::NoResults, "no factorial results");
  FactorialSummary s;
  s.n_events = rs.size();
  for (const auto& r : rs) {
    s.y_pp += r.y_pp;
    s.y_pi += r.y_pi;
    s.y_ip += r.y_ip;
    s.y_ii += r.y_ii;
  }
  const auto n = static_cast<double>(rs.size());
  s.y_pp /= n;
  s.y_pi /= n;
  s.y_ip /= n;
  s.y_ii /= n;
  s.late_effect_pt_up = s.y_pi - s.y_pp;
  s.late_effect_it_up = s.y_ii - s.y_ip;
  s.interaction = s.late_effect_it_up - s.late_effect_pt_up;
  s.interaction_ci = cluster_bootstrap(cluster_values(rs, [](const FourCellResult& r) { return r.interaction; }),
                                       n_resamples, seed);
  s.late_pt_ci = cluster_bootstrap(cluster_values(rs, [](const FourCellResult& r) { return r.late_effect_pt_up; }),
                                   n_resamples, mix_seed(seed, 1));
  s.late_it_ci = cluster_bootstrap(cluster_values(rs, [](const FourCellResult& r) { return r.late_effect_it_up; }),
                                   n_resamples, mix_seed(seed, 2));
  s.conversions = scale_conversions(s.y_pp, s.y_pi, s.y_ip, s.y_ii);
  return s;
}

inline json ci_json(const BootstrapResult& b) {
  return json{{"mean", b.mean}, {"ci_lo", b.ci_lo}, {"ci_hi", b.ci_hi}, {"level", b.level},
              {"n_clusters", b.n_clusters}};
}

inline void to_json(json& j, const FactorialSummary& s) {
  j = json{{"n_events", s.n_events},
           {"y_pp", s.y_pp},
           {"y_pi", s.y_pi},
           {"y_ip", s.y_ip},
           {"y_ii", s.y_ii},
           {"late_effect_pt_up", ci_json(s.late_pt_ci)},
           {"late_effect_it_up", ci_json(s.late_it_ci)},
           {"interaction", ci_json(s.interaction_ci)},
           {"conversions", s.conversions}};
}

/// Per-family mean interactions and their family-balanced summary.
inline std::map<std::string, double> family_interactions(const std::vector<FourCellResult>& rs) {
  std::map<std::string, std::pair<double, int>> acc;
  for (const auto& r : rs) {
    acc[r.family].first += r.interaction;
    ++acc[r.family].second;
  }
  std::map<std::string, double> out;
  for (const auto& [f, a] : acc) out[f] = a.first / a.second;
  return out;
}

// ---------------------------------------------------------------------------
// Window substitution

enum class WindowUnit { full_block, mlp_only };

NLOHMANN_JSON_SERIALIZE_ENUM(WindowUnit, {{WindowUnit::full_block, "full_block"}, {WindowUnit::mlp_only, "mlp_only"}})

struct LayerWindow {
  int begin = 0;  // [begin, end)
  int end = 0;
  bool contains(int layer) const { return layer >= begin && layer < end; }
  bool empty() const { return end <= begin; }
};

struct WindowMetrics {
  double identity_transfer_rate = 0;
  double margin_gain = 0;
  std::size_t n_events = 0;
};

inline void to_json(json& j, const WindowMetrics& m) {
  j = json{{"identity_transfer_rate", m.identity_transfer_rate}, {"margin_gain", m.margin_gain}, {"n_events", m.n_events}};
}

/// Host model with the window's blocks (or only its MLP sublayers) computed by the donor.
inline LayerPlan window_plan(const Checkpoint& host, const Checkpoint& donor, LayerWindow w, WindowUnit unit) {
  XPATCH_CHECK(w.begin >= 0 && w.end <= host.config.n_layers && w.begin <= w.end, ErrorCode::WindowOutOfRange,
               "window outside depth");
  auto plan = uniform_plan(host);
  for (int l = w.begin; l < w.end; ++l) {
    auto& p = plan[static_cast<std::size_t>(l)];
    if (unit == WindowUnit::full_block) p.attn = &donor;
    p.mlp = &donor;
  }
  return plan;
}

/// Identity transfer: the substituted host argmax is the donor's divergent token
/// while the unmodified host argmax is not. Gain: mean change in Y.
inline WindowMetrics window_substitution_metrics(ModelPair pair, const std::vector<DivergenceEvent>& events,
                                                 LayerWindow w, WindowUnit unit, Side host, Readout r) {
  const Side donor = host == Side::pt ? Side::it : Side::pt;
  const auto& H = pair.get(host);
  const auto& D = pair.get(donor);
  const auto plan = window_plan(H, D, w, unit);
  const auto host_plan = uniform_plan(H);
  const auto& reader = r == Readout::native ? H : reader_for(pair, r, host);
  WindowMetrics m;
  if (events.empty()) return m;
  double gain = 0;
  std::size_t transfers = 0;
  for (const auto& e : events) {
    check_event(pair, e);
    const TokenId donor_tok = donor == Side::it ? e.t_it : e.t_pt;
    const auto emb = embed_tokens(H, e.prefix);
    const auto base = readout_row(reader, run_layers(host_plan, emb, H.config.n_layers).last(), true);
    const auto sub = readout_row(reader, run_layers(plan, emb, H.config.n_layers).last(), true);
    gain += token_margin(sub, e.t_it, e.t_pt) - token_margin(base, e.t_it, e.t_pt);
    if (argmax(sub) == donor_tok && argmax(base) != donor_tok) ++transfers;
  }
  m.n_events = events.size();
  m.margin_gain = gain / static_cast<double>(events.size());
  m.identity_transfer_rate = static_cast<double>(transfers) / static_cast<double>(events.size());
  return m;
}

// ---------------------------------------------------------------------------
// Fixed-support stage sweep

struct StageScore {
  std::string name;
  double interaction = 0;
  double percent_of_final = 0;
  double native_top1_rate = 0;  // stage native argmax == t_final
  std::size_t n_events = 0;
  std::vector<Exclusion> dropped;
};

inline void to_json(json& j, const StageScore& s) {
  j = json{{"stage", s.name},
           {"interaction", s.interaction},
           {"percent_of_final", s.percent_of_final},
           {"native_top1_rate", s.native_top1_rate},
           {"n_events", s.n_events},
           {"n_dropped", s.dropped.size()}};
}

/// PT := base and IT := stage on fixed (t_base, t_final) labels.
inline std::vector<StageScore> stage_sweep(const Checkpoint& base, const Checkpoint& final_ck,
                                           const std::vector<std::pair<std::string, const Checkpoint*>>& stages,
                                           const std::vector<DivergenceEvent>& events, Readout r) {
  auto score = [&](const std::string& name, const Checkpoint& stage) {
    XPATCH_CHECK(stage.vocab == base.vocab, ErrorCode::PairMismatch, "stage " + name + " has a different vocab");
    StageScore s;
    s.name = name;
    std::vector<DivergenceEvent> kept;
    for (const auto& e : events) {
      if (!base.is_real(e.t_pt) || !base.is_real(e.t_it) || !stage.is_real(e.t_pt) || !stage.is_real(e.t_it))
        s.dropped.push_back({e.prompt_id, "target_token_missing", name});
      else
        kept.push_back(e);
    }
    const ModelPair pair(base, stage);
    double sum = 0;
    std::size_t top1 = 0;
    for (const auto& e : kept) {
      sum += score_event(pair, e, r).interaction;
      const auto out = forward_full(stage, e.prefix);
      if (argmax(readout_row(stage, out.last(), true)) == e.t_it) ++top1;
    }
    s.n_events = kept.size();
    s.interaction = kept.empty() ? 0.0 : sum / static_cast<double>(kept.size());
    s.native_top1_rate = kept.empty() ? 0.0 : static_cast<double>(top1) / static_cast<double>(kept.size());
    return s;
  };
  const auto fin = score("final", final_ck);
  std::vector<StageScore> out;
  for (const auto& [name, ck] : stages) {
    auto s = score(name, *ck);
    s.percent_of_final = std::abs(fin.interaction) < kDegenerateEps ? 0.0 : 100.0 * s.interaction / fin.interaction;
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace xpatch
