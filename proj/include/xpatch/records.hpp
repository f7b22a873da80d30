#pragma once

// Prompt manifests, divergence events and exclusion logs, with their JSONL
// encodings. A JSONL artifact may start with one provenance line of the form
// {"xpatch_header": {...}}; readers skip it.

#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "xpatch/error.hpp"
#include "xpatch/model.hpp"

namespace xpatch {

inline constexpr std::string_view kToolkitVersion = "xpatch 0.1.0";

struct PromptRecord {
  std::string id;
  std::string category;
  std::string source;
  std::string text;
  std::string cluster_id;  // defaults to id
  std::string family;
  std::optional<std::string> answer;  // exact-answer validator metadata
};

inline void to_json(json& j, const PromptRecord& r) {
  j = json{{"id", r.id},     {"category", r.category},     {"source", r.source},
           {"text", r.text}, {"cluster_id", r.cluster_id}, {"family", r.family}};
  if (r.answer) j["answer"] = *r.answer;
}

enum class EventKind { first_divergence, random_pt_rollout, random_it_rollout, pre_divergence, native_history };

NLOHMANN_JSON_SERIALIZE_ENUM(EventKind, {{EventKind::first_divergence, "first_divergence"},
                                         {EventKind::random_pt_rollout, "random_pt_rollout"},
                                         {EventKind::random_it_rollout, "random_it_rollout"},
                                         {EventKind::pre_divergence, "pre_divergence"},
                                         {EventKind::native_history, "native_history"}})

struct DivergenceEvent {
  std::string prompt_id;
  std::string cluster_id;
  std::string family;
  std::string category;
  std::vector<TokenId> prefix;  // prompt tokens followed by `position` generated tokens
  int position = 0;
  TokenId t_pt = 0;
  TokenId t_it = 0;
  EventKind kind = EventKind::first_divergence;
  std::optional<int> horizon;
  std::optional<std::string> answer;

  std::string id() const {
    std::string s = prompt_id + "#" + json(kind).get<std::string>() + "@" + std::to_string(position);
    if (horizon) s += "h" + std::to_string(*horizon);
    return s;
  }

  std::size_t prompt_length() const { return prefix.size() - static_cast<std::size_t>(position); }

  bool operator==(const DivergenceEvent&) const = default;
};

inline void to_json(json& j, const DivergenceEvent& e) {
  j = json{{"event_id", e.id()}, {"prompt_id", e.prompt_id}, {"cluster_id", e.cluster_id},
           {"family", e.family}, {"category", e.category},   {"prefix_token_ids", e.prefix},
           {"position", e.position}, {"t_pt", e.t_pt},       {"t_it", e.t_it},
           {"kind", e.kind}};
  if (e.horizon) j["horizon"] = *e.horizon;
  if (e.answer) j["answer"] = *e.answer;
}

inline void from_json(const json& j, DivergenceEvent& e) {
  j.at("prompt_id").get_to(e.prompt_id);
  e.cluster_id = j.value("cluster_id", e.prompt_id);
  e.family = j.value("family", std::string("default"));
  e.category = j.value("category", std::string());
  j.at("prefix_token_ids").get_to(e.prefix);
  j.at("position").get_to(e.position);
  j.at("t_pt").get_to(e.t_pt);
  j.at("t_it").get_to(e.t_it);
  j.at("kind").get_to(e.kind);
  if (j.contains("horizon")) e.horizon = j["horizon"].get<int>();
  if (j.contains("answer")) e.answer = j["answer"].get<std::string>();
}

struct Exclusion {
  std::string prompt_id;
  std::string reason;
  std::string detail;
  bool operator==(const Exclusion&) const = default;
};

inline void to_json(json& j, const Exclusion& x) {
  j = json{{"prompt_id", x.prompt_id}, {"reason", x.reason}};
  if (!x.detail.empty()) j["detail"] = x.detail;
}

inline void from_json(const json& j, Exclusion& x) {
  j.at("prompt_id").get_to(x.prompt_id);
  j.at("reason").get_to(x.reason);
  x.detail = j.value("detail", std::string());
}

struct ManifestReadResult {
  std::vector<PromptRecord> records;
  std::vector<Exclusion> malformed;  // reason malformed_record, never fatal
  std::size_t lines = 0;             // non-blank lines seen
};

/// One PromptRecord per line. Bad lines are logged, not thrown.
inline ManifestReadResult parse_manifest(std::istream& in) {
  ManifestReadResult out;
  std::set<std::string> seen;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    ++out.lines;
    const std::string where = "line:" + std::to_string(lineno);
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception&) {
      out.malformed.push_back({where, "malformed_record", "invalid JSON"});
      continue;
    }
    if (!j.is_object() || !j.contains("id") || !j["id"].is_string() || !j.contains("text") || !j["text"].is_string()) {
      out.malformed.push_back({j.is_object() && j.contains("id") && j["id"].is_string() ? j["id"].get<std::string>() : where,
                               "malformed_record", "missing id or text"});
      continue;
    }
    PromptRecord r;
    r.id = j["id"].get<std::string>();
    r.text = j["text"].get<std::string>();
    auto str_field = [&](const char* key, std::string fallback) {
      return j.contains(key) && j[key].is_string() ? j[key].get<std::string>() : fallback;
    };
    r.category = str_field("category", "");
    r.source = str_field("source", "");
    r.cluster_id = str_field("cluster_id", r.id);
    r.family = str_field("family", "default");
    if (j.contains("answer") && j["answer"].is_string()) r.answer = j["answer"].get<std::string>();
    if (r.text.empty()) {
      out.malformed.push_back({r.id, "malformed_record", "empty text"});
      continue;
    }
    if (!seen.insert(r.id).second) {
      out.malformed.push_back({r.id, "malformed_record", "duplicate id"});
      continue;
    }
    out.records.push_back(std::move(r));
  }
  return out;
}

inline ManifestReadResult read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  XPATCH_CHECK(in.good(), ErrorCode::MissingInput, "cannot open manifest " + path.string());
  return parse_manifest(in);
}

inline void write_manifest(const std::filesystem::path& path, const std::vector<PromptRecord>& records) {
  std::ofstream out(path, std::ios::trunc);
  XPATCH_CHECK(out.good(), ErrorCode::Io, "cannot write " + path.string());
  for (const auto& r : records) out << json(r).dump() << '\n';
}

/// Writes rows as JSONL with a leading provenance line.
template <typename T>
void write_jsonl(const std::filesystem::path& path, const json& header, const std::vector<T>& rows) {
  std::ofstream out(path, std::ios::trunc | std::ios::binary);
  XPATCH_CHECK(out.good(), ErrorCode::Io, "cannot write " + path.string());
  out << json{{"xpatch_header", header}}.dump() << '\n';
  for (const auto& r : rows) out << json(r).dump() << '\n';
}

struct JsonlFile {
  json header = json::object();
  std::vector<json> rows;
};

inline JsonlFile read_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  XPATCH_CHECK(in.good(), ErrorCode::MissingInput, "cannot open " + path.string());
  JsonlFile f;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw Error(ErrorCode::Parse, path.string() + ": " + e.what());
    }
    if (j.is_object() && j.contains("xpatch_header")) {
      f.header = j["xpatch_header"];
    } else {
      f.rows.push_back(std::move(j));
    }
  }
  return f;
}

inline std::vector<DivergenceEvent> read_events(const std::filesystem::path& path) {
  std::vector<DivergenceEvent> events;
  for (const auto& j : read_jsonl(path).rows) events.push_back(j.get<DivergenceEvent>());
  return events;
}

/// Provenance block embedded in every artifact.
inline json provenance(const std::string& stage, const std::map<std::string, std::string>& input_hashes,
                       const json& params) {
  return json{{"toolkit", kToolkitVersion}, {"stage", stage}, {"inputs", input_hashes}, {"params", params}};
}

}  // namespace xpatch
