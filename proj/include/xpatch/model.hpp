#pragma once

// Checkpoint model: pre-norm decoder-only transformer with RMSNorm, rotary
// positions, gated SiLU MLP, no biases and an untied unembedding.
//
// Tensor naming (row-major, [out, in] for projections):
//   embed                      [vocab, d_model]
//   layers.{i}.norm_attn       [d_model]
//   layers.{i}.attn.wq         [n_heads * head_dim, d_model]
//   layers.{i}.attn.wk         [n_kv_heads * head_dim, d_model]
//   layers.{i}.attn.wv         [n_kv_heads * head_dim, d_model]
//   layers.{i}.attn.wo         [d_model, n_heads * head_dim]
//   layers.{i}.norm_mlp        [d_model]
//   layers.{i}.mlp.w_gate      [d_ff, d_model]
//   layers.{i}.mlp.w_up        [d_ff, d_model]
//   layers.{i}.mlp.w_down      [d_model, d_ff]
//   final_norm                 [d_model]
//   lm_head                    [vocab, d_model]

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "xpatch/container.hpp"
#include "xpatch/error.hpp"
#include "xpatch/hash.hpp"

namespace xpatch {

using TokenId = std::int32_t;

inline constexpr std::string_view kCheckpointMagic = "XPCK0001";

/// round-half-up of 0.6 * n_layers
inline int default_late_boundary(int n_layers) { return static_cast<int>(std::floor(0.6 * n_layers + 0.5)); }

struct ModelConfig {
  int n_layers = 0;
  int d_model = 0;
  int n_heads = 0;
  int n_kv_heads = 0;
  int d_ff = 0;
  int vocab_size = 0;
  double rope_theta = 10000.0;
  double norm_eps = 1e-5;
  int late_boundary = -1;  // -1 until resolved

  int head_dim() const { return d_model / n_heads; }

  int boundary() const { return late_boundary >= 0 ? late_boundary : default_late_boundary(n_layers); }

  /// Validates and fills the default boundary.
  void resolve() {
    XPATCH_CHECK(n_layers > 1 && d_model > 0 && n_heads > 0 && n_kv_heads > 0 && d_ff > 0 && vocab_size > 1,
                 ErrorCode::InvalidConfig, "all dimensions must be positive (n_layers >= 2)");
    XPATCH_CHECK(d_model % n_heads == 0, ErrorCode::InvalidConfig, "d_model must be divisible by n_heads");
    XPATCH_CHECK(n_heads % n_kv_heads == 0, ErrorCode::InvalidConfig, "n_heads must be divisible by n_kv_heads");
    XPATCH_CHECK(head_dim() % 2 == 0, ErrorCode::InvalidConfig, "head_dim must be even for rotary embeddings");
    XPATCH_CHECK(rope_theta > 0 && norm_eps > 0, ErrorCode::InvalidConfig, "rope_theta and norm_eps must be positive");
    if (late_boundary < 0) late_boundary = default_late_boundary(n_layers);
    XPATCH_CHECK(late_boundary > 0 && late_boundary < n_layers, ErrorCode::InvalidConfig,
                 "late_boundary must satisfy 0 < b < n_layers");
  }

  bool operator==(const ModelConfig&) const = default;
};

inline void to_json(json& j, const ModelConfig& c) {
  j = json{{"n_layers", c.n_layers},   {"d_model", c.d_model},       {"n_heads", c.n_heads},
           {"n_kv_heads", c.n_kv_heads}, {"d_ff", c.d_ff},           {"vocab_size", c.vocab_size},
           {"rope_theta", c.rope_theta}, {"norm_eps", c.norm_eps},   {"late_boundary", c.late_boundary}};
}

inline void from_json(const json& j, ModelConfig& c) {
  j.at("n_layers").get_to(c.n_layers);
  j.at("d_model").get_to(c.d_model);
  j.at("n_heads").get_to(c.n_heads);
  j.at("n_kv_heads").get_to(c.n_kv_heads);
  j.at("d_ff").get_to(c.d_ff);
  j.at("vocab_size").get_to(c.vocab_size);
  c.rope_theta = j.value("rope_theta", 10000.0);
  c.norm_eps = j.value("norm_eps", 1e-5);
  c.late_boundary = j.contains("late_boundary") && !j["late_boundary"].is_null() ? j["late_boundary"].get<int>() : -1;
}

struct LayerWeights {
  std::vector<float> norm_attn, wq, wk, wv, wo;
  std::vector<float> norm_mlp, w_gate, w_up, w_down;

  bool operator==(const LayerWeights&) const = default;
};

struct Checkpoint {
  ModelConfig config;
  std::vector<float> embed;
  std::vector<LayerWeights> layers;
  std::vector<float> final_norm;
  std::vector<float> lm_head;
  std::vector<std::string> vocab;
  std::vector<bool> real_token_mask;

  bool is_real(TokenId t) const {
    return t >= 0 && t < static_cast<TokenId>(real_token_mask.size()) && real_token_mask[static_cast<std::size_t>(t)];
  }

  std::optional<TokenId> token_id(std::string_view text) const {
    for (std::size_t i = 0; i < vocab.size(); ++i)
      if (vocab[i] == text) return static_cast<TokenId>(i);
    return std::nullopt;
  }

  bool operator==(const Checkpoint&) const = default;
};

/// Visits every tensor with its canonical name and declared shape.
template <typename CheckpointT, typename Fn>
void for_each_tensor(CheckpointT& ck, Fn&& fn) {
  const auto& c = ck.config;
  const auto d = static_cast<std::size_t>(c.d_model);
  const auto hd = static_cast<std::size_t>(c.head_dim());
  const auto nq = static_cast<std::size_t>(c.n_heads) * hd;
  const auto nkv = static_cast<std::size_t>(c.n_kv_heads) * hd;
  const auto ff = static_cast<std::size_t>(c.d_ff);
  const auto v = static_cast<std::size_t>(c.vocab_size);
  fn(std::string("embed"), std::vector<std::size_t>{v, d}, ck.embed);
  for (std::size_t i = 0; i < ck.layers.size(); ++i) {
    auto& L = ck.layers[i];
    const std::string p = "layers." + std::to_string(i) + ".";
    fn(p + "norm_attn", std::vector<std::size_t>{d}, L.norm_attn);
    fn(p + "attn.wq", std::vector<std::size_t>{nq, d}, L.wq);
    fn(p + "attn.wk", std::vector<std::size_t>{nkv, d}, L.wk);
    fn(p + "attn.wv", std::vector<std::size_t>{nkv, d}, L.wv);
    fn(p + "attn.wo", std::vector<std::size_t>{d, nq}, L.wo);
    fn(p + "norm_mlp", std::vector<std::size_t>{d}, L.norm_mlp);
    fn(p + "mlp.w_gate", std::vector<std::size_t>{ff, d}, L.w_gate);
    fn(p + "mlp.w_up", std::vector<std::size_t>{ff, d}, L.w_up);
    fn(p + "mlp.w_down", std::vector<std::size_t>{d, ff}, L.w_down);
  }
  fn(std::string("final_norm"), std::vector<std::size_t>{d}, ck.final_norm);
  fn(std::string("lm_head"), std::vector<std::size_t>{v, d}, ck.lm_head);
}

/// Allocates zeroed tensors of the right shapes and unit norm gains.
inline Checkpoint make_empty_checkpoint(ModelConfig config) {
  config.resolve();
  Checkpoint ck;
  ck.config = config;
  ck.layers.resize(static_cast<std::size_t>(config.n_layers));
  for_each_tensor(ck, [](const std::string& name, const std::vector<std::size_t>& shape, std::vector<float>& t) {
    std::size_t n = 1;
    for (auto s : shape) n *= s;
    const bool is_norm = name.ends_with("norm") || name.ends_with("norm_attn") || name.ends_with("norm_mlp");
    t.assign(n, is_norm ? 1.0f : 0.0f);
  });
  ck.vocab.resize(static_cast<std::size_t>(config.vocab_size));
  for (std::size_t i = 0; i < ck.vocab.size(); ++i) ck.vocab[i] = "<t" + std::to_string(i) + ">";
  ck.real_token_mask.assign(static_cast<std::size_t>(config.vocab_size), true);
  return ck;
}

inline void validate_checkpoint(const Checkpoint& ck) {
  ModelConfig c = ck.config;
  c.resolve();
  XPATCH_CHECK(c == ck.config, ErrorCode::InvalidConfig, "checkpoint config has unresolved late_boundary");
  XPATCH_CHECK(ck.layers.size() == static_cast<std::size_t>(c.n_layers), ErrorCode::ShapeMismatch,
               "layer count does not match config");
  for_each_tensor(ck, [](const std::string& name, const std::vector<std::size_t>& shape, const std::vector<float>& t) {
    std::size_t n = 1;
    for (auto s : shape) n *= s;
    XPATCH_CHECK(t.size() == n, ErrorCode::ShapeMismatch, "tensor " + name + " has wrong size");
  });
  XPATCH_CHECK(ck.vocab.size() == static_cast<std::size_t>(c.vocab_size), ErrorCode::VocabMaskInvalid,
               "vocab length does not match vocab_size");
  XPATCH_CHECK(ck.real_token_mask.size() == static_cast<std::size_t>(c.vocab_size), ErrorCode::VocabMaskInvalid,
               "real_token_mask length does not match vocab_size");
  std::size_t n_real = 0;
  for (bool b : ck.real_token_mask) n_real += b ? 1 : 0;
  XPATCH_CHECK(n_real >= 2, ErrorCode::VocabMaskInvalid, "real_token_mask needs at least 2 real tokens");
}

struct PairedCheckpoints {
  Checkpoint pt;
  Checkpoint it;
};

/// Shared tokenization and architecture; required before any patching.
inline void validate_pair(const Checkpoint& pt, const Checkpoint& it) {
  validate_checkpoint(pt);
  validate_checkpoint(it);
  XPATCH_CHECK(pt.config == it.config, ErrorCode::PairMismatch, "model configs differ");
  XPATCH_CHECK(pt.vocab == it.vocab, ErrorCode::PairMismatch, "vocab lists differ");
  XPATCH_CHECK(pt.real_token_mask == it.real_token_mask, ErrorCode::PairMismatch, "real-token masks differ");
}

inline void validate_pair(const PairedCheckpoints& pair) { validate_pair(pair.pt, pair.it); }

inline std::string serialize_checkpoint(const Checkpoint& ck, const json& extra = json::object()) {
  validate_checkpoint(ck);
  ContainerWriter w{std::string(kCheckpointMagic)};
  for_each_tensor(ck, [&](const std::string& name, const std::vector<std::size_t>& shape, const std::vector<float>& t) {
    w.add(name, shape, t);
  });
  json header = extra;
  header["config"] = ck.config;
  header["vocab"] = ck.vocab;
  std::vector<int> mask;
  mask.reserve(ck.real_token_mask.size());
  for (bool b : ck.real_token_mask) mask.push_back(b ? 1 : 0);
  header["real_token_mask"] = mask;
  return w.bytes(std::move(header));
}

inline void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  const auto blob = serialize_checkpoint(ck);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  XPATCH_CHECK(out.good(), ErrorCode::Io, "cannot write " + path.string());
  out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
}

inline Checkpoint checkpoint_from_container(ContainerFile file) {
  Checkpoint ck;
  try {
    ck.config = file.header.at("config").get<ModelConfig>();
    ck.vocab = file.header.at("vocab").get<std::vector<std::string>>();
    for (int b : file.header.at("real_token_mask").get<std::vector<int>>()) ck.real_token_mask.push_back(b != 0);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::Parse, std::string("checkpoint header: ") + e.what());
  }
  ck.config.resolve();
  ck.layers.resize(static_cast<std::size_t>(ck.config.n_layers));
  for_each_tensor(ck, [&](const std::string& name, const std::vector<std::size_t>& shape, std::vector<float>& t) {
    auto found = file.tensors.find(name);
    XPATCH_CHECK(found != file.tensors.end(), ErrorCode::ShapeMismatch, "tensor " + name + " is missing");
    XPATCH_CHECK(found->second.shape == shape, ErrorCode::ShapeMismatch, "tensor " + name + " has wrong shape");
    t = std::move(found->second.data);
  });
  validate_checkpoint(ck);
  return ck;
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return checkpoint_from_container(read_container(path, kCheckpointMagic));
}

inline std::string checkpoint_hash(const Checkpoint& ck) { return sha256_hex(serialize_checkpoint(ck)); }

/// Vocab entry "<eos>" ends a rollout when present.
inline std::optional<TokenId> eos_token(const Checkpoint& ck) { return ck.token_id("<eos>"); }

}  // namespace xpatch
