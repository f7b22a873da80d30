#pragma once

// Deterministic f32 forward passes. Every reduction is a plain sequential loop
// so results do not depend on scheduling; the split forward (upstream then
// late) runs the identical per-layer code as the unsplit forward and is
// therefore bit-identical to it. Incremental decoding (DecodeSession) runs the
// same per-position kernels against a KV cache, which makes it bit-identical
// to full recomputation as well.

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <limits>
#include <span>
#include <vector>

#include "xpatch/model.hpp"

namespace xpatch {

enum class StateSource { pt, it, interpolated, perturbed };

/// Hidden states entering layer `produced_at_layer` (after all blocks below it).
struct ResidualStates {
  std::size_t n_pos = 0;
  std::size_t d_model = 0;
  std::vector<float> values;
  int produced_at_layer = 0;
  StateSource source = StateSource::pt;

  std::span<float> row(std::size_t pos) { return {values.data() + pos * d_model, d_model}; }
  std::span<const float> row(std::size_t pos) const { return {values.data() + pos * d_model, d_model}; }
  std::span<const float> last() const { return row(n_pos - 1); }
};

/// Which checkpoint supplies each sublayer of a layer.
struct SublayerSource {
  const Checkpoint* attn = nullptr;
  const Checkpoint* mlp = nullptr;
};

using LayerPlan = std::vector<SublayerSource>;

inline LayerPlan uniform_plan(const Checkpoint& m) {
  return LayerPlan(static_cast<std::size_t>(m.config.n_layers), SublayerSource{&m, &m});
}

/// Called after an MLP sublayer output is computed and before it is added to
/// the residual. Hooks may rewrite `mlp_out` in place.
struct MlpSite {
  int layer;
  std::size_t position;
  std::size_t n_pos;
  std::span<float> mlp_out;
  std::span<const float> residual;  // residual stream entering the MLP sublayer
};
using MlpHook = std::function<void(const MlpSite&)>;

namespace kernels {

inline void rmsnorm(std::span<const float> x, std::span<const float> w, double eps, std::span<float> out) {
  float ss = 0.0f;
  for (float v : x) ss += v * v;
  const float mean = ss / static_cast<float>(x.size());
  const float inv = 1.0f / std::sqrt(mean + static_cast<float>(eps));
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * inv * w[i];
}

/// Dot product with eight interleaved partial sums combined in a fixed tree.
/// The order is part of the numeric contract: same inputs, same bits.
inline float dot(const float* a, const float* b, std::size_t n) {
  typedef float v8 __attribute__((vector_size(32)));
  v8 acc = {0, 0, 0, 0, 0, 0, 0, 0};
  std::size_t c = 0;
  for (; c + 8 <= n; c += 8) {
    v8 x, y;
    std::memcpy(&x, a + c, sizeof x);
    std::memcpy(&y, b + c, sizeof y);
    acc += x * y;
  }
  for (std::size_t k = 0; c < n && k < 8; ++c, ++k) acc[k] += a[c] * b[c];
  return ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
}

/// out[r] = sum_c W[r, c] * x[c], W row-major [rows, x.size()].
inline void matvec(std::span<const float> W, std::span<const float> x, std::span<float> out) {
  const std::size_t cols = x.size();
  for (std::size_t r = 0; r < out.size(); ++r) out[r] = dot(W.data() + r * cols, x.data(), cols);
}

inline float silu(float x) { return x / (1.0f + std::exp(-x)); }

/// cos/sin of pos * theta^(-2i/head_dim), computed in double and cached per thread.
struct RopeTable {
  double theta = 0;
  int head_dim = 0;
  std::vector<float> cos, sin;  // [pos][i]
  std::size_t n_pos = 0;

  void ensure(double th, int hd, std::size_t pos) {
    if (th != theta || hd != head_dim) {
      theta = th;
      head_dim = hd;
      cos.clear();
      sin.clear();
      n_pos = 0;
    }
    const int half = hd / 2;
    while (n_pos <= pos) {
      for (int i = 0; i < half; ++i) {
        const double freq = std::pow(theta, -2.0 * i / head_dim);
        const double angle = static_cast<double>(n_pos) * freq;
        cos.push_back(static_cast<float>(std::cos(angle)));
        sin.push_back(static_cast<float>(std::sin(angle)));
      }
      ++n_pos;
    }
  }
};

/// Interleaved-pair rotary embedding over consecutive heads of width head_dim.
inline void rope(std::span<float> v, int head_dim, std::size_t pos, double theta) {
  thread_local RopeTable table;
  table.ensure(theta, head_dim, pos);
  const int half = head_dim / 2;
  const float* cs = table.cos.data() + pos * static_cast<std::size_t>(half);
  const float* sn = table.sin.data() + pos * static_cast<std::size_t>(half);
  for (std::size_t h = 0; h * static_cast<std::size_t>(head_dim) < v.size(); ++h) {
    float* p = v.data() + h * static_cast<std::size_t>(head_dim);
    for (int i = 0; i < half; ++i) {
      const float a = p[2 * i];
      const float b = p[2 * i + 1];
      p[2 * i] = a * cs[i] - b * sn[i];
      p[2 * i + 1] = a * sn[i] + b * cs[i];
    }
  }
}

}  // namespace kernels

/// Keys and values of one layer for positions [0, n).
struct KvCache {
  std::vector<float> k;
  std::vector<float> v;
  std::size_t n = 0;
};

namespace detail {

struct Scratch {
  std::vector<float> normed, q, att, o, gate, up, hidden, mlp_out;
};

inline void attention_qkv(const Checkpoint& m, int layer, std::span<const float> x, std::size_t pos,
                          std::span<float> q, KvCache& cache, Scratch& s) {
  const auto& c = m.config;
  const auto& w = m.layers[static_cast<std::size_t>(layer)];
  const std::size_t kv_dim = static_cast<std::size_t>(c.n_kv_heads * c.head_dim());
  s.normed.resize(x.size());
  kernels::rmsnorm(x, w.norm_attn, c.norm_eps, s.normed);
  kernels::matvec(w.wq, s.normed, q);
  kernels::rope(q, c.head_dim(), pos, c.rope_theta);
  cache.k.resize((cache.n + 1) * kv_dim);
  cache.v.resize((cache.n + 1) * kv_dim);
  std::span<float> k(cache.k.data() + cache.n * kv_dim, kv_dim);
  std::span<float> v(cache.v.data() + cache.n * kv_dim, kv_dim);
  kernels::matvec(w.wk, s.normed, k);
  kernels::matvec(w.wv, s.normed, v);
  kernels::rope(k, c.head_dim(), pos, c.rope_theta);
  ++cache.n;
}

/// Causal attention of position `pos` over cache[0..pos]; adds the output to x.
inline void attention_out(const Checkpoint& m, int layer, std::span<const float> q, const KvCache& cache,
                          std::size_t pos, std::span<float> x, Scratch& s) {
  const auto& c = m.config;
  const auto& w = m.layers[static_cast<std::size_t>(layer)];
  const auto hd = static_cast<std::size_t>(c.head_dim());
  const auto kv_dim = static_cast<std::size_t>(c.n_kv_heads) * hd;
  const auto group = static_cast<std::size_t>(c.n_heads / c.n_kv_heads);
  const float scale = 1.0f / std::sqrt(static_cast<float>(hd));
  s.att.assign(static_cast<std::size_t>(c.n_heads) * hd, 0.0f);
  std::vector<float> p(pos + 1);
  for (std::size_t h = 0; h < static_cast<std::size_t>(c.n_heads); ++h) {
    const std::size_t kvh = h / group;
    const float* qh = q.data() + h * hd;
    float mx = -std::numeric_limits<float>::infinity();
    for (std::size_t j = 0; j <= pos; ++j) {
      const float* kj = cache.k.data() + j * kv_dim + kvh * hd;
      p[j] = kernels::dot(qh, kj, hd) * scale;
      mx = std::max(mx, p[j]);
    }
    float sum = 0.0f;
    for (std::size_t j = 0; j <= pos; ++j) {
      p[j] = std::exp(p[j] - mx);
      sum += p[j];
    }
    float* out = s.att.data() + h * hd;
    for (std::size_t j = 0; j <= pos; ++j) {
      const float pj = p[j] / sum;
      const float* vj = cache.v.data() + j * kv_dim + kvh * hd;
      for (std::size_t i = 0; i < hd; ++i) out[i] += pj * vj[i];
    }
  }
  s.o.resize(x.size());
  kernels::matvec(w.wo, s.att, s.o);
  for (std::size_t i = 0; i < x.size(); ++i) x[i] += s.o[i];
}

inline void mlp_block(const Checkpoint& m, int layer, std::span<float> x, std::size_t pos, std::size_t n_pos,
                      const MlpHook* hook, Scratch& s) {
  const auto& c = m.config;
  const auto& w = m.layers[static_cast<std::size_t>(layer)];
  const auto ff = static_cast<std::size_t>(c.d_ff);
  s.normed.resize(x.size());
  kernels::rmsnorm(x, w.norm_mlp, c.norm_eps, s.normed);
  s.gate.resize(ff);
  s.up.resize(ff);
  s.hidden.resize(ff);
  kernels::matvec(w.w_gate, s.normed, s.gate);
  kernels::matvec(w.w_up, s.normed, s.up);
  for (std::size_t i = 0; i < ff; ++i) s.hidden[i] = kernels::silu(s.gate[i]) * s.up[i];
  s.mlp_out.resize(x.size());
  kernels::matvec(w.w_down, s.hidden, s.mlp_out);
  if (hook && *hook) (*hook)(MlpSite{layer, pos, n_pos, s.mlp_out, x});
  for (std::size_t i = 0; i < x.size(); ++i) x[i] += s.mlp_out[i];
}

inline void check_tokens(const Checkpoint& m, std::span<const TokenId> tokens) {
  for (TokenId t : tokens)
    XPATCH_CHECK(t >= 0 && t < m.config.vocab_size, ErrorCode::TokenOutOfRange,
                 "token id " + std::to_string(t) + " outside vocab");
}

}  // namespace detail

inline ResidualStates embed_tokens(const Checkpoint& m, std::span<const TokenId> tokens) {
  detail::check_tokens(m, tokens);
  XPATCH_CHECK(!tokens.empty(), ErrorCode::EmptyInput, "empty token sequence");
  ResidualStates s;
  s.n_pos = tokens.size();
  s.d_model = static_cast<std::size_t>(m.config.d_model);
  s.values.resize(s.n_pos * s.d_model);
  for (std::size_t p = 0; p < s.n_pos; ++p) {
    const float* e = m.embed.data() + static_cast<std::size_t>(tokens[p]) * s.d_model;
    std::copy(e, e + s.d_model, s.values.begin() + static_cast<std::ptrdiff_t>(p * s.d_model));
  }
  s.produced_at_layer = 0;
  return s;
}

/// Runs layers [states.produced_at_layer, end) of `plan` over all positions.
inline ResidualStates run_layers(std::span<const SublayerSource> plan, ResidualStates states, int end,
                                 const MlpHook* hook = nullptr) {
  XPATCH_CHECK(end >= states.produced_at_layer && end <= static_cast<int>(plan.size()),
               ErrorCode::BoundaryOutOfRange, "layer range outside plan");
  detail::Scratch s;
  std::vector<float> q;
  for (int layer = states.produced_at_layer; layer < end; ++layer) {
    const auto& src = plan[static_cast<std::size_t>(layer)];
    const auto& cfg = src.attn->config;
    XPATCH_CHECK(static_cast<std::size_t>(cfg.d_model) == states.d_model, ErrorCode::DimMismatch,
                 "states width does not match model");
    const auto q_dim = static_cast<std::size_t>(cfg.n_heads * cfg.head_dim());
    q.assign(states.n_pos * q_dim, 0.0f);
    KvCache cache;
    for (std::size_t p = 0; p < states.n_pos; ++p)
      detail::attention_qkv(*src.attn, layer, states.row(p), p, {q.data() + p * q_dim, q_dim}, cache, s);
    for (std::size_t p = 0; p < states.n_pos; ++p) {
      detail::attention_out(*src.attn, layer, {q.data() + p * q_dim, q_dim}, cache, p, states.row(p), s);
      detail::mlp_block(*src.mlp, layer, states.row(p), p, states.n_pos, hook, s);
    }
  }
  states.produced_at_layer = end;
  return states;
}

inline ResidualStates forward_upstream(const Checkpoint& m, std::span<const TokenId> tokens, int boundary) {
  XPATCH_CHECK(boundary >= 0 && boundary <= m.config.n_layers, ErrorCode::BoundaryOutOfRange,
               "boundary " + std::to_string(boundary) + " outside [0, n_layers]");
  auto plan = uniform_plan(m);
  return run_layers(plan, embed_tokens(m, tokens), boundary);
}

inline ResidualStates forward_late(const Checkpoint& m, ResidualStates states, int boundary,
                                   const MlpHook* hook = nullptr) {
  XPATCH_CHECK(states.produced_at_layer == boundary, ErrorCode::BoundaryMismatch,
               "states were produced at layer " + std::to_string(states.produced_at_layer) + ", not " +
                   std::to_string(boundary));
  XPATCH_CHECK(boundary >= 0 && boundary <= m.config.n_layers, ErrorCode::BoundaryOutOfRange, "boundary outside model");
  auto plan = uniform_plan(m);
  return run_layers(plan, std::move(states), m.config.n_layers, hook);
}

inline ResidualStates forward_full(const Checkpoint& m, std::span<const TokenId> tokens) {
  return forward_upstream(m, tokens, m.config.n_layers);
}

/// Final norm + unembedding of one state row; non-real tokens become -inf when masked.
inline std::vector<float> readout_row(const Checkpoint& reader, std::span<const float> state, bool mask_real_tokens) {
  const auto& c = reader.config;
  XPATCH_CHECK(state.size() == static_cast<std::size_t>(c.d_model), ErrorCode::DimMismatch,
               "state width does not match reader");
  std::vector<float> normed(state.size());
  kernels::rmsnorm(state, reader.final_norm, c.norm_eps, normed);
  std::vector<float> logits(static_cast<std::size_t>(c.vocab_size));
  kernels::matvec(reader.lm_head, normed, logits);
  if (mask_real_tokens)
    for (std::size_t t = 0; t < logits.size(); ++t)
      if (!reader.real_token_mask[t]) logits[t] = -std::numeric_limits<float>::infinity();
  return logits;
}

struct Logits {
  std::size_t n_pos = 0;
  std::size_t vocab = 0;
  std::vector<float> values;
  std::span<const float> row(std::size_t p) const { return {values.data() + p * vocab, vocab}; }
};

inline Logits readout(const ResidualStates& states, const Checkpoint& reader, bool mask_real_tokens) {
  XPATCH_CHECK(states.d_model == static_cast<std::size_t>(reader.config.d_model), ErrorCode::DimMismatch,
               "state width does not match reader");
  Logits out;
  out.n_pos = states.n_pos;
  out.vocab = static_cast<std::size_t>(reader.config.vocab_size);
  out.values.reserve(out.n_pos * out.vocab);
  for (std::size_t p = 0; p < states.n_pos; ++p) {
    auto row = readout_row(reader, states.row(p), mask_real_tokens);
    out.values.insert(out.values.end(), row.begin(), row.end());
  }
  return out;
}

/// Highest logit; ties go to the lowest token id.
inline TokenId argmax(std::span<const float> logits) {
  std::size_t best = 0;
  for (std::size_t t = 1; t < logits.size(); ++t)
    if (logits[t] > logits[best]) best = t;
  return static_cast<TokenId>(best);
}

/// Incremental decoding for one model. step() runs the same kernels as
/// run_layers, so the final state of each position matches forward_full.
class DecodeSession {
 public:
  explicit DecodeSession(const Checkpoint& m) : model_(&m), caches_(static_cast<std::size_t>(m.config.n_layers)) {}

  /// Appends one token and returns its post-final-layer state.
  std::span<const float> step(TokenId token) {
    const auto& c = model_->config;
    XPATCH_CHECK(token >= 0 && token < c.vocab_size, ErrorCode::TokenOutOfRange, "token id outside vocab");
    const auto d = static_cast<std::size_t>(c.d_model);
    state_.assign(model_->embed.begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(token) * d),
                  model_->embed.begin() + static_cast<std::ptrdiff_t>((static_cast<std::size_t>(token) + 1) * d));
    std::vector<float> q(static_cast<std::size_t>(c.n_heads * c.head_dim()));
    for (int layer = 0; layer < c.n_layers; ++layer) {
      auto& cache = caches_[static_cast<std::size_t>(layer)];
      detail::attention_qkv(*model_, layer, state_, pos_, q, cache, scratch_);
      detail::attention_out(*model_, layer, q, cache, pos_, state_, scratch_);
      detail::mlp_block(*model_, layer, state_, pos_, pos_ + 1, nullptr, scratch_);
    }
    ++pos_;
    return state_;
  }

  std::vector<float> logits(bool mask_real_tokens = true) const { return readout_row(*model_, state_, mask_real_tokens); }

  std::size_t position() const { return pos_; }

 private:
  const Checkpoint* model_;
  std::vector<KvCache> caches_;
  detail::Scratch scratch_;
  std::vector<float> state_;
  std::size_t pos_ = 0;
};

/// Greedy decoding over real tokens; stops after emitting "<eos>" if the vocab has one.
inline std::vector<TokenId> greedy_rollout(const Checkpoint& m, std::span<const TokenId> prompt, int max_new) {
  XPATCH_CHECK(max_new >= 1, ErrorCode::InvalidArgument, "max_new must be >= 1");
  XPATCH_CHECK(!prompt.empty(), ErrorCode::EmptyInput, "empty prompt");
  detail::check_tokens(m, prompt);
  const auto eos = eos_token(m);
  DecodeSession session(m);
  for (TokenId t : prompt) session.step(t);
  std::vector<TokenId> out;
  for (int i = 0; i < max_new; ++i) {
    const TokenId next = argmax(session.logits(true));
    out.push_back(next);
    if (eos && next == *eos) break;
    if (i + 1 < max_new) session.step(next);
  }
  return out;
}

}  // namespace xpatch
