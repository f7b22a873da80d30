#pragma once

// Run-directory report: summary.json plus table_b1.csv and table_b2.csv.
//
// The report reads only files inside the run directory, so it can be
// regenerated from a finished run at any time.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "xpatch/factorial.hpp"
#include "xpatch/records.hpp"
#include "xpatch/stats.hpp"

namespace xpatch {

/// Optional sections copied into summary.json when present and non-empty.
inline const std::vector<std::string> kReportSections = {"controls", "bridges", "crosscoder", "closure", "stage_sweep"};

inline std::string factorial_file(Readout r) { return "factorial_" + json(r).get<std::string>() + ".jsonl"; }

struct FamilyRow {
  std::string family;
  std::size_t n_events = 0;
  double late_effect_pt_up = 0;
  double late_effect_it_up = 0;
  double interaction = 0;
  double native_diagonal_shift = 0;
  double interaction_share = 0;  // NaN when the shift is degenerate
};

inline std::vector<FamilyRow> family_rows(const std::vector<FourCellResult>& rs) {
  struct Acc {
    std::size_t n = 0;
    double pp = 0, pi = 0, ip = 0, ii = 0;
  };
  std::map<std::string, Acc> acc;
  for (const auto& r : rs) {
    auto& a = acc[r.family];
    ++a.n;
    a.pp += r.y_pp;
    a.pi += r.y_pi;
    a.ip += r.y_ip;
    a.ii += r.y_ii;
  }
  std::vector<FamilyRow> out;
  for (const auto& [f, a] : acc) {
    const double n = static_cast<double>(a.n);
    const auto c = scale_conversions(a.pp / n, a.pi / n, a.ip / n, a.ii / n);
    FamilyRow row;
    row.family = f;
    row.n_events = a.n;
    row.late_effect_pt_up = (a.pi - a.pp) / n;
    row.late_effect_it_up = (a.ii - a.ip) / n;
    row.interaction = row.late_effect_it_up - row.late_effect_pt_up;
    row.native_diagonal_shift = c.native_diagonal_shift;
    row.interaction_share = c.interaction_share;
    out.push_back(row);
  }
  return out;
}

inline void to_json(json& j, const FamilyRow& r) {
  j = json{{"family", r.family},
           {"n_events", r.n_events},
           {"late_effect_pt_up", r.late_effect_pt_up},
           {"late_effect_it_up", r.late_effect_it_up},
           {"interaction", r.interaction},
           {"native_diagonal_shift", r.native_diagonal_shift},
           {"interaction_share", num_or_null(r.interaction_share)}};
}

inline json family_summary_json(const FamilySummary& s) {
  return json{{"mean", s.mean}, {"median", s.median}, {"min", s.min}, {"max", s.max}, {"n_families", s.n_families}};
}

/// Family-balanced centers of the per-family effects, with conversions
/// computed from those centers rather than from pooled events.
inline json family_balanced_json(const std::vector<FamilyRow>& rows) {
  std::map<std::string, double> pt, it, inter, shift;
  for (const auto& r : rows) {
    pt[r.family] = r.late_effect_pt_up;
    it[r.family] = r.late_effect_it_up;
    inter[r.family] = r.interaction;
    shift[r.family] = r.native_diagonal_shift;
  }
  const auto s_pt = family_balanced_mean(pt);
  const auto s_it = family_balanced_mean(it);
  const auto s_int = family_balanced_mean(inter);
  const auto s_shift = family_balanced_mean(shift);
  return json{{"late_effect_pt_up", family_summary_json(s_pt)},
              {"late_effect_it_up", family_summary_json(s_it)},
              {"interaction", family_summary_json(s_int)},
              {"native_diagonal_shift", family_summary_json(s_shift)},
              {"conversions", scale_conversions_from_effects(s_pt.mean, s_it.mean, s_shift.mean)}};
}

namespace detail {

inline std::string csv_num(double x) {
  if (!std::isfinite(x)) return "";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", x);
  return buf;
}

inline std::string csv_text(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string q = "\"";
  for (char c : s) q += c == '"' ? std::string("\"\"") : std::string(1, c);
  return q + "\"";
}

inline void write_text(const std::filesystem::path& p, const std::string& s) {
  std::ofstream out(p, std::ios::trunc | std::ios::binary);
  XPATCH_CHECK(out.good(), ErrorCode::Io, "cannot write " + p.string());
  out << s;
}

inline json read_json_file(const std::filesystem::path& p) {
  std::ifstream in(p);
  XPATCH_CHECK(in.good(), ErrorCode::MissingInput, "cannot open " + p.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::Parse, p.string() + ": " + e.what());
  }
}

inline bool section_empty(const json& j) { return j.is_null() || (j.is_object() && j.empty()); }

}  // namespace detail

struct ReportFiles {
  json summary;
  std::string table_b1;
  std::string table_b2;
};

/// Builds the report from per-readout factorial results. `sections` holds
/// optional stage outputs keyed by section name.
inline ReportFiles build_report(const std::map<Readout, std::vector<FourCellResult>>& results, int n_resamples,
                                std::uint64_t seed, const json& sections = json::object()) {
  bool any = false;
  for (const auto& [r, rs] : results) any = any || !rs.empty();
  XPATCH_CHECK(any, ErrorCode::NoResults, "no factorial results");

  ReportFiles f;
  f.summary = json::object();
  f.summary["toolkit"] = kToolkitVersion;
  f.summary["bootstrap"] = {{"n_resamples", n_resamples}, {"seed", seed}};
  std::ostringstream b1, b2;
  b1 << "scope,readout,n_events,late_effect_pt_up,pt_ci_lo,pt_ci_hi,late_effect_it_up,it_ci_lo,it_ci_hi,"
        "interaction,interaction_ci_lo,interaction_ci_hi,matched_portable_ratio,portable_share,"
        "native_diagonal_shift,interaction_share\n";
  b2 << "readout,family,n_events,interaction,native_diagonal_shift,interaction_share\n";

  json readouts = json::object();
  for (const auto& [r, rs] : results) {
    if (rs.empty()) continue;
    const std::string name = json(r).get<std::string>();
    const auto s = summarize_factorial(rs, n_resamples, seed);
    const auto rows = family_rows(rs);
    json block = s;
    block["families"] = rows;
    block["family_balanced"] = family_balanced_json(rows);
    readouts[name] = block;

    const auto& c = s.conversions;
    b1 << "all_events," << name << ',' << s.n_events << ',' << detail::csv_num(s.late_effect_pt_up) << ','
       << detail::csv_num(s.late_pt_ci.ci_lo) << ',' << detail::csv_num(s.late_pt_ci.ci_hi) << ','
       << detail::csv_num(s.late_effect_it_up) << ',' << detail::csv_num(s.late_it_ci.ci_lo) << ','
       << detail::csv_num(s.late_it_ci.ci_hi) << ',' << detail::csv_num(s.interaction) << ','
       << detail::csv_num(s.interaction_ci.ci_lo) << ',' << detail::csv_num(s.interaction_ci.ci_hi) << ','
       << detail::csv_num(c.matched_portable_ratio) << ',' << detail::csv_num(c.portable_share) << ','
       << detail::csv_num(c.native_diagonal_shift) << ',' << detail::csv_num(c.interaction_share) << '\n';

    const auto& fb = block["family_balanced"];
    const auto& fc = fb["conversions"];
    auto jnum = [](const json& j) { return j.is_number() ? j.get<double>() : std::nan(""); };
    b1 << "family_balanced," << name << ',' << s.n_events << ','
       << detail::csv_num(fb["late_effect_pt_up"]["mean"].get<double>()) << ",,,"
       << detail::csv_num(fb["late_effect_it_up"]["mean"].get<double>()) << ",,,"
       << detail::csv_num(fb["interaction"]["mean"].get<double>()) << ",,,"
       << detail::csv_num(jnum(fc["matched_portable_ratio"])) << ',' << detail::csv_num(jnum(fc["portable_share"]))
       << ',' << detail::csv_num(jnum(fc["native_diagonal_shift"])) << ','
       << detail::csv_num(jnum(fc["interaction_share"])) << '\n';

    for (const auto& row : rows)
      b2 << name << ',' << detail::csv_text(row.family) << ',' << row.n_events << ','
         << detail::csv_num(row.interaction) << ',' << detail::csv_num(row.native_diagonal_shift) << ','
         << detail::csv_num(row.interaction_share) << '\n';
  }
  f.summary["readouts"] = readouts;
  for (const auto& key : kReportSections)
    if (sections.contains(key) && !detail::section_empty(sections[key])) f.summary[key] = sections[key];
  f.table_b1 = b1.str();
  f.table_b2 = b2.str();
  return f;
}

/// Reads factorial_<readout>.jsonl and optional <section>.json files from
/// `run_dir` and writes summary.json, table_b1.csv and table_b2.csv there.
inline json emit_report(const std::filesystem::path& run_dir) {
  XPATCH_CHECK(std::filesystem::is_directory(run_dir), ErrorCode::MissingInput, "no run directory " + run_dir.string());
  std::map<Readout, std::vector<FourCellResult>> results;
  int n_resamples = 10000;
  std::uint64_t seed = 0;
  for (Readout r : {Readout::common_it, Readout::common_pt, Readout::native}) {
    const auto p = run_dir / factorial_file(r);
    if (!std::filesystem::exists(p)) continue;
    const auto f = read_jsonl(p);
    const auto params = f.header.value("params", json::object());
    n_resamples = params.value("bootstrap", n_resamples);
    seed = params.value("seed", seed);
    auto& rs = results[r];
    for (const auto& row : f.rows) rs.push_back(row.get<FourCellResult>());
  }
  XPATCH_CHECK(!results.empty(), ErrorCode::NoResults, "no factorial results in " + run_dir.string());

  json sections = json::object();
  for (const auto& key : kReportSections) {
    const auto p = run_dir / (key + ".json");
    if (std::filesystem::exists(p)) sections[key] = detail::read_json_file(p).value("results", json());
  }
  auto files = build_report(results, n_resamples, seed, sections);
  detail::write_text(run_dir / "summary.json", files.summary.dump(2) + "\n");
  detail::write_text(run_dir / "table_b1.csv", files.table_b1);
  detail::write_text(run_dir / "table_b2.csv", files.table_b2);
  return files.summary;
}

}  // namespace xpatch
