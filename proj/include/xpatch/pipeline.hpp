#pragma once

// Config-driven pipeline: one JSON config in, one run directory out.
//
// Stages run in the fixed order diverge, factorial, controls, bridges,
// crosscoder, closure, report. Every artifact carries a provenance header with
// the toolkit version, the config hash, input content hashes and seeds.
// Nothing time- or host-dependent is written, so reruns are byte-identical.

#include <algorithm>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "xpatch/bridges.hpp"
#include "xpatch/controls.hpp"
#include "xpatch/crosscoder.hpp"
#include "xpatch/divergence.hpp"
#include "xpatch/factorial.hpp"
#include "xpatch/geometry.hpp"
#include "xpatch/hash.hpp"
#include "xpatch/records.hpp"
#include "xpatch/report.hpp"
#include "xpatch/toy.hpp"

namespace xpatch {

inline const std::vector<std::string> kStageOrder = {"diverge",    "factorial", "controls", "bridges",
                                                     "crosscoder", "closure",   "report"};

struct ToySource {
  ToyMode mode = ToyMode::gated_coupling;
  std::uint64_t seed = 7;
  int n_prompts = 200;
};

struct PipelineConfig {
  std::optional<std::string> pt, it, manifest;
  std::optional<ToySource> toy;
  std::optional<int> boundary;
  std::vector<Readout> readouts = {Readout::common_it, Readout::common_pt};
  std::uint64_t seed = 0;
  int bootstrap = 10000;
  int max_new = 128;
  std::vector<std::string> stages = kStageOrder;
  json controls = json::object();
  json bridges = json::object();
  json crosscoder = json::object();
  json closure = json::object();
  json raw;  // as given, hashed into every artifact

  Readout primary() const { return readouts.front(); }
  bool wants(const std::string& s) const { return std::find(stages.begin(), stages.end(), s) != stages.end(); }
};

inline PipelineConfig parse_pipeline_config(const json& j) {
  XPATCH_CHECK(j.is_object(), ErrorCode::InvalidArgument, "config must be a JSON object");
  PipelineConfig c;
  c.raw = j;
  try {
    if (j.contains("toy")) {
      const auto& t = j["toy"];
      ToySource s;
      s.mode = t.value("mode", s.mode);
      s.seed = t.value("seed", s.seed);
      s.n_prompts = t.value("n_prompts", s.n_prompts);
      XPATCH_CHECK(s.n_prompts >= 1, ErrorCode::InvalidArgument, "toy.n_prompts must be >= 1");
      c.toy = s;
    } else {
      auto need = [&](const char* key) {
        XPATCH_CHECK(j.contains(key), ErrorCode::MissingInput, std::string("config needs '") + key + "' or 'toy'");
        return j[key].get<std::string>();
      };
      c.pt = need("pt");
      c.it = need("it");
      c.manifest = need("manifest");
    }
    if (j.contains("boundary") && !j["boundary"].is_null()) c.boundary = j["boundary"].get<int>();
    if (j.contains("readouts")) {
      c.readouts.clear();
      for (const auto& r : j["readouts"]) c.readouts.push_back(parse_readout(r.get<std::string>()));
      XPATCH_CHECK(!c.readouts.empty(), ErrorCode::InvalidArgument, "readouts is empty");
    }
    c.seed = j.value("seed", c.seed);
    c.bootstrap = j.value("bootstrap", c.bootstrap);
    c.max_new = j.value("max_new", c.max_new);
    if (j.contains("stages")) c.stages = j["stages"].get<std::vector<std::string>>();
    c.controls = j.value("controls", json::object());
    c.bridges = j.value("bridges", json::object());
    c.crosscoder = j.value("crosscoder", json::object());
    c.closure = j.value("closure", json::object());
  } catch (const json::exception& e) {
    throw Error(ErrorCode::InvalidArgument, std::string("bad config: ") + e.what());
  }
  XPATCH_CHECK(c.bootstrap >= 1, ErrorCode::InvalidArgument, "bootstrap must be >= 1");
  XPATCH_CHECK(c.max_new >= 1, ErrorCode::InvalidArgument, "max_new must be >= 1");
  for (const auto& s : c.stages)
    XPATCH_CHECK(std::find(kStageOrder.begin(), kStageOrder.end(), s) != kStageOrder.end(), ErrorCode::InvalidArgument,
                 "unknown stage " + s);
  return c;
}

/// Applies a late-boundary override to both checkpoints.
inline void set_boundary(PairedCheckpoints& pair, std::optional<int> b) {
  if (!b) return;
  for (auto* ck : {&pair.pt, &pair.it}) {
    XPATCH_CHECK(*b > 0 && *b < ck->config.n_layers, ErrorCode::BoundaryOutOfRange, "boundary must satisfy 0 < b < n");
    ck->config.late_boundary = *b;
  }
}

/// Writes a JSON artifact as {"xpatch_header": ..., "results": ...}.
inline void write_artifact(const std::filesystem::path& p, const json& header, const json& results) {
  detail::write_text(p, json{{"xpatch_header", header}, {"results", results}}.dump(2) + "\n");
}

namespace detail {

struct RunContext {
  PipelineConfig cfg;
  std::filesystem::path out;
  std::string config_hash;
  std::map<std::string, std::string> inputs;  // name -> sha256
  PairedCheckpoints pair;
  std::vector<PromptRecord> manifest;
  std::vector<DivergenceEvent> events;
  std::map<Readout, std::vector<FourCellResult>> results;
  bool diverged = false;

  json header(const std::string& stage, json params = json::object()) const {
    params["config_hash"] = config_hash;
    params["seed"] = cfg.seed;
    params["bootstrap"] = cfg.bootstrap;
    params["boundary"] = pair.pt.config.boundary();
    return provenance(stage, inputs, params);
  }
};

inline void require(bool ok, const std::string& stage, const std::string& needs) {
  XPATCH_CHECK(ok, ErrorCode::StageDependencyUnmet, "stage '" + stage + "' needs '" + needs + "'");
}

inline std::vector<double> interactions_of(const std::vector<FourCellResult>& rs) {
  std::vector<double> v;
  v.reserve(rs.size());
  for (const auto& r : rs) v.push_back(r.interaction);
  return v;
}

inline json factorial_block(ModelPair pair, const std::vector<DivergenceEvent>& events, Readout r, int bootstrap,
                            std::uint64_t seed) {
  if (events.empty()) return json{{"n_events", 0}};
  const auto run = score_factorial(pair, events, r);
  if (run.results.empty()) return json{{"n_events", 0}, {"n_exclusions", run.exclusions.size()}};
  json j = summarize_factorial(run.results, bootstrap, seed);
  j["n_exclusions"] = run.exclusions.size();
  return j;
}

inline void load_inputs(RunContext& ctx) {
  const auto& c = ctx.cfg;
  std::filesystem::create_directories(ctx.out / "inputs");
  if (c.toy) {
    ToySpec spec;
    spec.mode = c.toy->mode;
    spec.seed = c.toy->seed;
    spec.config = toy_config();
    const auto build = build_toy(spec);
    ctx.pair = build.pair;
    ctx.manifest = gen_toy_manifest(build.language, c.toy->n_prompts, c.toy->seed);
    save_checkpoint(ctx.pair.pt, ctx.out / "inputs" / "pt.xpck");
    save_checkpoint(ctx.pair.it, ctx.out / "inputs" / "it.xpck");
    write_manifest(ctx.out / "inputs" / "manifest.jsonl", ctx.manifest);
    ctx.inputs["pt"] = sha256_file(ctx.out / "inputs" / "pt.xpck");
    ctx.inputs["it"] = sha256_file(ctx.out / "inputs" / "it.xpck");
    ctx.inputs["manifest"] = sha256_file(ctx.out / "inputs" / "manifest.jsonl");
  } else {
    for (const auto& p : {*c.pt, *c.it, *c.manifest})
      XPATCH_CHECK(std::filesystem::exists(p), ErrorCode::MissingInput, "missing input " + p);
    ctx.pair.pt = load_checkpoint(*c.pt);
    ctx.pair.it = load_checkpoint(*c.it);
    ctx.inputs["pt"] = sha256_file(*c.pt);
    ctx.inputs["it"] = sha256_file(*c.it);
    ctx.inputs["manifest"] = sha256_file(*c.manifest);
    auto m = read_manifest(*c.manifest);
    ctx.manifest = m.records;
  }
  set_boundary(ctx.pair, c.boundary);
  validate_pair(ctx.pair);
}

inline void stage_diverge(RunContext& ctx) {
  auto res = collect_first_divergences(ctx.pair, ctx.manifest, ctx.cfg.max_new);
  if (!ctx.cfg.toy) {
    const auto m = read_manifest(*ctx.cfg.manifest);
    res.exclusions.insert(res.exclusions.end(), m.malformed.begin(), m.malformed.end());
  }
  const json h = ctx.header("diverge", {{"max_new", ctx.cfg.max_new}});
  write_jsonl(ctx.out / "events.jsonl", h, res.events);
  write_jsonl(ctx.out / "exclusions.jsonl", h, res.exclusions);
  ctx.events = std::move(res.events);
  ctx.diverged = true;
}

inline void stage_factorial(RunContext& ctx) {
  require(ctx.diverged, "factorial", "diverge");
  for (Readout r : ctx.cfg.readouts) {
    auto run = score_factorial(ctx.pair, ctx.events, r);
    const json h = ctx.header("factorial", {{"readout", r}});
    write_jsonl(ctx.out / factorial_file(r), h, run.results);
    if (!run.exclusions.empty())
      write_jsonl(ctx.out / ("factorial_" + json(r).get<std::string>() + "_exclusions.jsonl"), h, run.exclusions);
    ctx.results[r] = std::move(run.results);
  }
}

inline void stage_controls(RunContext& ctx) {
  require(!ctx.results.empty(), "controls", "factorial");
  const auto& o = ctx.cfg.controls;
  const Readout r = ctx.cfg.primary();
  const auto& rs = ctx.results.at(r);
  const ModelPair pair(ctx.pair);
  const auto seed = ctx.cfg.seed;
  const int n_draws = o.value("signed_permutation_draws", 64);
  const int n_perms = o.value("label_swap_perms", 19999);
  const auto alphas = o.value("alphas", std::vector<double>{0.0, 0.25, 0.5, 0.75, 1.0});
  json out = json::object();
  out["readout"] = r;
  if (ctx.events.empty()) {
    write_artifact(ctx.out / "controls.json", ctx.header("controls", o), out);
    return;
  }
  out["first_divergence"] = summarize_factorial(rs, ctx.cfg.bootstrap, seed);
  out["interpolation"] = interpolation_sweep(pair, ctx.events, alphas, r);
  out["signed_permutation"] = signed_permutation_null(pair, ctx.events, seed, n_draws, r);
  out["label_swap"] = label_swap_null(interactions_of(rs), n_perms, mix_seed(seed, 23));
  out["commitment"] = pre_late_commitment(pair, ctx.events, rs);

  const auto pre = collect_pre_divergence(ctx.events);
  out["pre_divergence"] = factorial_block(pair, pre.events, r, ctx.cfg.bootstrap, seed);
  out["pre_divergence"]["n_skipped"] = pre.exclusions.size();

  json rd = json::object();
  double balanced = 0;
  int n_sources = 0;
  for (auto src : {RolloutSource::pt, RolloutSource::it}) {
    const auto got = collect_random_disagreements(ctx.pair, ctx.manifest, src, seed, ctx.cfg.max_new);
    auto block = factorial_block(pair, got.events, r, ctx.cfg.bootstrap, seed);
    block["n_no_later"] = got.exclusions.size();
    if (block.contains("interaction")) {
      balanced += block["interaction"]["mean"].get<double>();
      ++n_sources;
    }
    rd[json(src).get<std::string>()] = block;
  }
  rd["source_balanced_interaction"] = n_sources > 0 ? json(balanced / n_sources) : json(nullptr);
  out["random_disagreement"] = rd;

  const auto hist = collect_native_history(ctx.pair, ctx.manifest, RolloutSource::it,
                                           o.value("history_horizons", std::vector<int>{4, 8, 16}));
  out["native_history"] = factorial_block(pair, hist.events, r, ctx.cfg.bootstrap, seed);

  const int n = ctx.pair.pt.config.n_layers;
  const int b = ctx.pair.pt.config.boundary();
  json windows = json::array();
  for (Side host : {Side::pt, Side::it}) {
    json w = window_substitution_metrics(pair, ctx.events, LayerWindow{b, n}, WindowUnit::full_block, host, r);
    w["host"] = host == Side::pt ? "pt" : "it";
    w["window"] = {b, n};
    windows.push_back(w);
  }
  out["window_substitution"] = windows;
  write_artifact(ctx.out / "controls.json",
                 ctx.header("controls", {{"signed_permutation_draws", n_draws},
                                         {"label_swap_perms", n_perms},
                                         {"alphas", alphas}}),
                 out);
}

inline void stage_bridges(RunContext& ctx) {
  require(ctx.diverged, "bridges", "diverge");
  const auto& o = ctx.cfg.bridges;
  const Readout r = ctx.cfg.primary();
  const auto horizons = o.value("horizons", std::vector<int>{0, 1, 2, 4, 8});
  const int n_resamples = std::min(ctx.cfg.bootstrap, o.value("bootstrap", 1000));
  const int budget = o.value("forced_budget", 8);
  json out = json::object();
  if (!ctx.events.empty()) {
    json cont = json::object();
    for (auto v : {TailVariant::standard, TailVariant::same_forced, TailVariant::shuffled_tail,
                   TailVariant::tail_only_view})
      cont[json(v).get<std::string>()] =
          constrained_continuation(ctx.pair, ctx.events, horizons, v, r, ctx.cfg.seed, n_resamples);
    out["continuation"] = cont;
    const auto f = forced_token_bridge(ctx.pair, ctx.events, exact_substring_validator, budget, ctx.cfg.seed, n_resamples);
    out["forced_token"] = {{"categories", f.categories}, {"n_scored", f.scores.size()}, {"n_exclusions", f.exclusions.size()}};
  }
  write_artifact(ctx.out / "bridges.json",
                 ctx.header("bridges", {{"horizons", horizons}, {"bootstrap", n_resamples}, {"forced_budget", budget}}),
                 out);
}

inline void stage_crosscoder(RunContext& ctx) {
  require(ctx.diverged, "crosscoder", "diverge");
  const auto& o = ctx.cfg.crosscoder;
  const Readout r = ctx.cfg.primary();
  auto hyper = o.get<CrosscoderHyper>();
  if (!o.contains("seed")) hyper.seed = ctx.cfg.seed;
  if (!o.contains("steps")) hyper.steps = 500;
  const int layer = o.value("layer", ctx.pair.pt.config.n_layers - 1);
  const int top_n = o.value("top_features", 4);
  json out = json::object();
  json params = {{"hyper", hyper}, {"layer", layer}, {"top_features", top_n}};
  if (ctx.events.empty()) {
    write_artifact(ctx.out / "crosscoder.json", ctx.header("crosscoder", params), out);
    return;
  }
  const auto dump = dump_activations(ctx.pair, ctx.events, layer);
  const auto trained = train_crosscoder(split_dump(dump), hyper);
  const auto& m = trained.model;
  const ModelPair pair(ctx.pair);
  const auto ranked = rank_features_causal(m, pair, ctx.events, r);
  const auto gate = quality_gate(m, trained.heldout, pair, ctx.events, r, ctx.cfg.seed, &ranked);
  const auto top = top_causal(ranked, static_cast<std::size_t>(top_n));
  out["metrics"] = trained.heldout;
  out["final_loss"] = trained.final_loss;
  out["loss_curve"] = trained.loss_curve;
  out["gate"] = gate;
  out["gate_passes"] = gate_passes(gate, hyper.k);
  json rk = json::array();
  for (std::size_t i = 0; i < std::min<std::size_t>(ranked.size(), 16); ++i)
    rk.push_back({{"feature", ranked[i].feature}, {"score", ranked[i].score}, {"n_active", ranked[i].n_active}});
  out["ranking"] = rk;
  out["top_set"] = top.indices;
  out["mediation"] = mediation_drop(m, pair, ctx.events, top, r, std::min(ctx.cfg.bootstrap, 1000), ctx.cfg.seed);
  out["mediation_matched_random"] = mediation_drop(m, pair, ctx.events, matched_random(m, top, ctx.cfg.seed), r);
  out["rescue"] = feature_rescue(m, pair, ctx.events, top, r);
  const int b = ctx.pair.pt.config.boundary();
  if (b <= layer) out["handoff"] = handoff_mediation(m, pair, ctx.events, LayerWindow{0, b}, HandoffDirection::rescue, top, r);
  out["dose_response"] =
      bucket_edit_dose_response(m, pair, ctx.events, top, o.value("alphas", std::vector<double>{0, 0.5, 1, 1.5, 2}),
                                r, ctx.cfg.seed);
  save_crosscoder(m, ctx.out / "crosscoder.xccd", ctx.header("crosscoder", params));
  write_artifact(ctx.out / "crosscoder.json", ctx.header("crosscoder", params), out);
}

inline void stage_closure(RunContext& ctx) {
  require(ctx.diverged, "closure", "diverge");
  const auto& o = ctx.cfg.closure;
  const Readout r = ctx.cfg.primary();
  const int every = o.value("heldout_every", 5);
  const int b = o.value("boundary", ctx.pair.pt.config.boundary());
  const auto ranks = o.value("ranks", std::vector<int>{0, 1, 2, 4, 8});
  json params = {{"heldout_every", every}, {"closure_boundary", b}, {"ranks", ranks}};
  json out = json::object();
  const auto [train, heldout] = split_events(ctx.events, every);
  if (!train.empty() && !heldout.empty()) {
    const ModelPair pair(ctx.pair);
    const auto p = fit_boundary_pca(pair, train, b);
    json rows = json::array();
    for (int k : ranks) {
      if (k > p.d) continue;
      rows.push_back(closure_test(pair, p, heldout, k, ClosureControl::none, r, true, ctx.cfg.seed));
      rows.push_back(closure_test(pair, p, heldout, k, ClosureControl::none, r, false, ctx.cfg.seed));
    }
    json controls = json::array();
    const int k_ctl = std::min(p.d, ranks.empty() ? 0 : *std::max_element(ranks.begin(), ranks.end()));
    for (auto c : {ClosureControl::gaussian_full, ClosureControl::random_full, ClosureControl::sign_flip_full,
                   ClosureControl::full_delta})
      controls.push_back(closure_test(pair, p, heldout, k_ctl, c, r, true, ctx.cfg.seed));
    out["by_rank"] = rows;
    out["controls"] = controls;
    out["n_train"] = train.size();
    out["variances"] = p.variances;
    save_pca(p, ctx.out / "pca.xpca");
  }
  write_artifact(ctx.out / "closure.json", ctx.header("closure", params), out);
}

}  // namespace detail

/// Runs the configured stages into `out_dir`, which must be absent or empty.
inline void run_pipeline(const json& config, const std::filesystem::path& out_dir) {
  detail::RunContext ctx;
  ctx.cfg = parse_pipeline_config(config);
  ctx.out = out_dir;
  XPATCH_CHECK(!std::filesystem::exists(out_dir) || std::filesystem::is_empty(out_dir), ErrorCode::InvalidArgument,
               "run directory is not empty: " + out_dir.string());
  std::filesystem::create_directories(out_dir);
  ctx.config_hash = sha256_hex(config.dump());
  detail::load_inputs(ctx);
  write_artifact(out_dir / "config.json", ctx.header("config"), config);

  // Dependencies must appear in the same config.
  const auto& c = ctx.cfg;
  for (const auto& s : {"factorial", "bridges", "crosscoder", "closure"})
    if (c.wants(s)) detail::require(c.wants("diverge"), s, "diverge");
  for (const auto& s : {"controls", "report"})
    if (c.wants(s)) detail::require(c.wants("factorial"), s, "factorial");

  if (c.wants("diverge")) detail::stage_diverge(ctx);
  if (c.wants("factorial")) detail::stage_factorial(ctx);
  if (c.wants("controls")) detail::stage_controls(ctx);
  if (c.wants("bridges")) detail::stage_bridges(ctx);
  if (c.wants("crosscoder")) detail::stage_crosscoder(ctx);
  if (c.wants("closure")) detail::stage_closure(ctx);
  if (c.wants("report")) emit_report(out_dir);
}

inline void run_pipeline(const std::filesystem::path& config_file, const std::filesystem::path& out_dir) {
  run_pipeline(detail::read_json_file(config_file), out_dir);
}

}  // namespace xpatch
