// xpatch command-line front end.
//
// Exit codes: 0 success, 2 validation failure, 3 missing input,
// 4 internal numerical error.

#include <CLI11.hpp>

#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "xpatch.hpp"

namespace fs = std::filesystem;
using namespace xpatch;

namespace {

int exit_code(ErrorCode c) {
  switch (c) {
    case ErrorCode::MissingInput:
    case ErrorCode::Io:
      return 3;
    case ErrorCode::NonFiniteLoss:
      return 4;
    default:
      return 2;
  }
}

struct Common {
  std::string pt, it, manifest, events, out;
  std::optional<int> boundary;
  std::string readout = "common-it";
  std::uint64_t seed = 0;
  int bootstrap = 10000;
  int max_new = 128;
};

void add_pair(CLI::App* sc, Common& c) {
  sc->add_option("--pt", c.pt, "base checkpoint")->required();
  sc->add_option("--it", c.it, "descendant checkpoint")->required();
  sc->add_option("--boundary", c.boundary, "late boundary override");
}

void add_stats(CLI::App* sc, Common& c) {
  sc->add_option("--readout", c.readout, "common-it | common-pt | native");
  sc->add_option("--seed", c.seed);
  sc->add_option("--bootstrap", c.bootstrap, "bootstrap resamples");
}

void require_file(const std::string& p) {
  XPATCH_CHECK(fs::exists(p), ErrorCode::MissingInput, "missing input " + p);
}

PairedCheckpoints load_pair(const Common& c) {
  require_file(c.pt);
  require_file(c.it);
  PairedCheckpoints pair{load_checkpoint(c.pt), load_checkpoint(c.it)};
  set_boundary(pair, c.boundary);
  validate_pair(pair);
  return pair;
}

std::vector<DivergenceEvent> load_events(const Common& c) {
  require_file(c.events);
  return read_events(c.events);
}

fs::path out_dir(const Common& c) {
  const fs::path p = c.out.empty() ? fs::path(".") : fs::path(c.out);
  fs::create_directories(p);
  return p;
}

/// Context for running one pipeline stage from flags.
detail::RunContext context(const Common& c, const std::string& stage, const json& opts) {
  detail::RunContext ctx;
  ctx.out = out_dir(c);
  ctx.pair = load_pair(c);
  ctx.inputs["pt"] = sha256_file(c.pt);
  ctx.inputs["it"] = sha256_file(c.it);
  if (!c.events.empty()) {
    ctx.events = load_events(c);
    ctx.inputs["events"] = sha256_file(c.events);
    ctx.diverged = true;
  }
  if (!c.manifest.empty()) {
    require_file(c.manifest);
    ctx.manifest = read_manifest(c.manifest).records;
    ctx.inputs["manifest"] = sha256_file(c.manifest);
  }
  ctx.cfg.readouts = {parse_readout(c.readout)};
  ctx.cfg.seed = c.seed;
  ctx.cfg.bootstrap = c.bootstrap;
  ctx.cfg.max_new = c.max_new;
  json raw = {{"stage", stage}, {"options", opts}, {"readout", c.readout}, {"seed", c.seed}, {"bootstrap", c.bootstrap}};
  ctx.cfg.raw = raw;
  ctx.config_hash = sha256_hex(raw.dump());
  return ctx;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"First-divergence cross-patching toolkit"};
  app.require_subcommand(1);
  Common c;

  // gen-toy
  auto* gen = app.add_subcommand("gen-toy", "write a synthetic checkpoint pair and manifest");
  std::string toy_mode = "gated_coupling";
  int n_prompts = 200;
  std::uint64_t toy_seed = 7;
  gen->add_option("--mode", toy_mode, "identical | late_only | upstream_only | gated_coupling");
  gen->add_option("--seed", toy_seed);
  gen->add_option("--n-prompts", n_prompts);
  gen->add_option("--out", c.out)->required();

  // diverge
  auto* div = app.add_subcommand("diverge", "collect first-divergence events");
  add_pair(div, c);
  std::string kind = "first";
  div->add_option("--manifest", c.manifest)->required();
  div->add_option("--kind", kind, "first | random-pt | random-it | pre");
  div->add_option("--max-new", c.max_new);
  div->add_option("--seed", c.seed);
  div->add_option("--out", c.out)->required();

  // factorial
  auto* fac = app.add_subcommand("factorial", "score the four-cell factorial");
  add_pair(fac, c);
  add_stats(fac, c);
  fac->add_option("--events", c.events)->required();
  fac->add_option("--out", c.out)->required();

  // controls
  auto* ctl = app.add_subcommand("controls", "validation controls");
  add_pair(ctl, c);
  add_stats(ctl, c);
  ctl->add_option("--events", c.events)->required();
  ctl->add_option("--manifest", c.manifest)->required();
  ctl->add_option("--max-new", c.max_new);
  ctl->add_option("--out", c.out)->required();

  // bridges
  std::vector<int> horizons = {0, 1, 2, 4, 8};
  std::string variant = "standard";
  auto* bc = app.add_subcommand("bridge-continuation", "constrained continuation margins C_N");
  add_pair(bc, c);
  add_stats(bc, c);
  bc->add_option("--events", c.events)->required();
  bc->add_option("--horizons", horizons);
  bc->add_option("--variant", variant, "standard | same_forced | shuffled_tail | tail_only_view");
  bc->add_option("--out", c.out)->required();

  int budget = 8;
  auto* bf = app.add_subcommand("bridge-forced", "forced-token suffix-only scoring");
  add_pair(bf, c);
  add_stats(bf, c);
  bf->add_option("--events", c.events)->required();
  bf->add_option("--budget", budget);
  bf->add_option("--out", c.out)->required();

  // crosscoder
  CrosscoderHyper hyper;
  std::optional<int> layer;
  auto* ct = app.add_subcommand("crosscoder-train", "train a paired BatchTopK crosscoder");
  add_pair(ct, c);
  ct->add_option("--events", c.events)->required();
  ct->add_option("--layer", layer);
  ct->add_option("--features", hyper.n_features);
  ct->add_option("--k", hyper.k);
  ct->add_option("--steps", hyper.steps);
  ct->add_option("--lr", hyper.lr);
  ct->add_option("--batch-size", hyper.batch_size);
  ct->add_option("--seed", hyper.seed);
  ct->add_option("--out", c.out)->required();

  std::string cc_path;
  int top_n = 4;
  auto* ca = app.add_subcommand("crosscoder-analyze", "rank, ablate and rescue crosscoder features");
  add_pair(ca, c);
  add_stats(ca, c);
  ca->add_option("--events", c.events)->required();
  ca->add_option("--crosscoder", cc_path)->required();
  ca->add_option("--top", top_n);
  ca->add_option("--out", c.out)->required();

  // closure
  std::vector<int> ranks = {0, 1, 2, 4, 8};
  int heldout_every = 5;
  auto* cl = app.add_subcommand("closure", "boundary-state PCA closure");
  add_pair(cl, c);
  add_stats(cl, c);
  cl->add_option("--events", c.events)->required();
  cl->add_option("--ranks", ranks);
  cl->add_option("--heldout-every", heldout_every);
  cl->add_option("--out", c.out)->required();

  // stage sweep
  std::vector<std::string> stage_specs;
  auto* ss = app.add_subcommand("stage-sweep", "fixed-support sweep over intermediate checkpoints");
  add_pair(ss, c);
  add_stats(ss, c);
  ss->add_option("--events", c.events)->required();
  ss->add_option("--stage", stage_specs, "name=path, in training order")->required();
  ss->add_option("--out", c.out)->required();

  // report and run
  auto* rep = app.add_subcommand("report", "emit summary.json and tables for a run directory");
  rep->add_option("--out", c.out, "run directory")->required();

  std::string config;
  auto* run = app.add_subcommand("run", "run a pipeline config into a fresh run directory");
  run->add_option("config", config)->required();
  run->add_option("--out", c.out)->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) {
      ToySpec spec;
      spec.mode = json(toy_mode).get<ToyMode>();
      spec.seed = toy_seed;
      spec.config = toy_config();
      const auto b = detail::build_toy(spec);
      const auto dir = out_dir(c);
      save_checkpoint(b.pair.pt, dir / "pt.xpck");
      save_checkpoint(b.pair.it, dir / "it.xpck");
      write_manifest(dir / "manifest.jsonl", gen_toy_manifest(b.language, n_prompts, toy_seed));
    } else if (div->parsed()) {
      auto ctx = context(c, "diverge", {{"kind", kind}, {"max_new", c.max_new}});
      CollectResult res;
      if (kind == "first") {
        res = collect_first_divergences(ctx.pair, ctx.manifest, c.max_new);
      } else if (kind == "random-pt" || kind == "random-it") {
        const auto src = kind == "random-pt" ? RolloutSource::pt : RolloutSource::it;
        res = collect_random_disagreements(ctx.pair, ctx.manifest, src, c.seed, c.max_new);
      } else if (kind == "pre") {
        res = collect_pre_divergence(collect_first_divergences(ctx.pair, ctx.manifest, c.max_new).events);
      } else {
        throw Error(ErrorCode::InvalidArgument, "unknown kind " + kind);
      }
      const json h = ctx.header("diverge", {{"kind", kind}, {"max_new", c.max_new}});
      write_jsonl(ctx.out / "events.jsonl", h, res.events);
      write_jsonl(ctx.out / "exclusions.jsonl", h, res.exclusions);
      std::cout << res.events.size() << " events, " << res.exclusions.size() << " exclusions\n";
    } else if (fac->parsed()) {
      auto ctx = context(c, "factorial", json::object());
      detail::stage_factorial(ctx);
      const auto& rs = ctx.results.at(ctx.cfg.primary());
      if (!rs.empty()) std::cout << json(summarize_factorial(rs, c.bootstrap, c.seed)).dump(2) << '\n';
    } else if (ctl->parsed()) {
      auto ctx = context(c, "controls", json::object());
      detail::stage_factorial(ctx);
      detail::stage_controls(ctx);
    } else if (bc->parsed()) {
      auto ctx = context(c, "bridge-continuation", {{"horizons", horizons}, {"variant", variant}});
      const auto v = json(variant).get<TailVariant>();
      const auto res = constrained_continuation(ctx.pair, ctx.events, horizons, v, ctx.cfg.primary(), c.seed,
                                                std::min(c.bootstrap, 1000));
      write_artifact(ctx.out / "continuation.json",
                     ctx.header("bridge-continuation", {{"horizons", horizons}, {"variant", variant}}), res);
    } else if (bf->parsed()) {
      auto ctx = context(c, "bridge-forced", {{"budget", budget}});
      const auto res = forced_token_bridge(ctx.pair, ctx.events, exact_substring_validator, budget, c.seed,
                                           std::min(c.bootstrap, 1000));
      write_artifact(ctx.out / "forced_token.json", ctx.header("bridge-forced", {{"budget", budget}}),
                     {{"scores", res.scores}, {"deltas", res.deltas}, {"categories", res.categories},
                      {"exclusions", res.exclusions}});
    } else if (ct->parsed()) {
      auto ctx = context(c, "crosscoder-train", hyper);
      const int l = layer.value_or(ctx.pair.pt.config.n_layers - 1);
      const auto trained = train_crosscoder(split_dump(dump_activations(ctx.pair, ctx.events, l)), hyper);
      const json h = ctx.header("crosscoder-train", {{"hyper", hyper}, {"layer", l}});
      save_crosscoder(trained.model, ctx.out / "crosscoder.xccd", h);
      write_artifact(ctx.out / "crosscoder_train.json", h,
                     {{"metrics", trained.heldout}, {"final_loss", trained.final_loss},
                      {"loss_curve", trained.loss_curve}});
      std::cout << json(trained.heldout).dump(2) << '\n';
    } else if (ca->parsed()) {
      require_file(cc_path);
      auto ctx = context(c, "crosscoder-analyze", {{"top", top_n}});
      const auto m = load_crosscoder(cc_path);
      const ModelPair pair(ctx.pair);
      const Readout r = ctx.cfg.primary();
      const auto ranked = rank_features_causal(m, pair, ctx.events, r);
      const auto top = top_causal(ranked, static_cast<std::size_t>(top_n));
      json rk = json::array();
      for (const auto& f : ranked) rk.push_back({{"feature", f.feature}, {"score", f.score}, {"n_active", f.n_active}});
      write_artifact(ctx.out / "crosscoder_analysis.json", ctx.header("crosscoder-analyze", {{"top", top_n}}),
                     {{"ranking", rk},
                      {"top_set", top.indices},
                      {"mediation", mediation_drop(m, pair, ctx.events, top, r, std::min(c.bootstrap, 1000), c.seed)},
                      {"mediation_matched_random",
                       mediation_drop(m, pair, ctx.events, matched_random(m, top, c.seed), r)},
                      {"rescue", feature_rescue(m, pair, ctx.events, top, r)}});
    } else if (cl->parsed()) {
      auto ctx = context(c, "closure", {{"ranks", ranks}, {"heldout_every", heldout_every}});
      ctx.cfg.closure = {{"ranks", ranks}, {"heldout_every", heldout_every}};
      detail::stage_closure(ctx);
    } else if (ss->parsed()) {
      auto ctx = context(c, "stage-sweep", {{"stages", stage_specs}});
      std::vector<Checkpoint> held;
      held.reserve(stage_specs.size());
      std::vector<std::pair<std::string, const Checkpoint*>> stages;
      for (const auto& s : stage_specs) {
        const auto eq = s.find('=');
        XPATCH_CHECK(eq != std::string::npos, ErrorCode::InvalidArgument, "expected name=path, got " + s);
        const auto path = s.substr(eq + 1);
        require_file(path);
        held.push_back(load_checkpoint(path));
        ctx.inputs["stage:" + s.substr(0, eq)] = sha256_file(path);
      }
      for (std::size_t i = 0; i < held.size(); ++i)
        stages.emplace_back(stage_specs[i].substr(0, stage_specs[i].find('=')), &held[i]);
      const auto res = stage_sweep(ctx.pair.pt, ctx.pair.it, stages, ctx.events, ctx.cfg.primary());
      write_artifact(ctx.out / "stage_sweep.json", ctx.header("stage-sweep", {{"stages", stage_specs}}), res);
    } else if (rep->parsed()) {
      emit_report(c.out);
    } else if (run->parsed()) {
      require_file(config);
      run_pipeline(fs::path(config), fs::path(c.out));
    }
  } catch (const Error& e) {
    std::cerr << "xpatch: " << e.what() << '\n';
    return exit_code(e.code());
  } catch (const std::exception& e) {
    std::cerr << "xpatch: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
