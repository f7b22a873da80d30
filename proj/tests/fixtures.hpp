#pragma once

// Shared test fixtures: small random checkpoints, a double-precision
// reference forward pass, and a pair whose late stack is linear in the
// boundary state.

#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include "xpatch.hpp"

namespace fx {

using namespace xpatch;

inline ModelConfig small_config(int n_layers = 3, int d = 16, int vocab = 12) {
  ModelConfig c;
  c.n_layers = n_layers;
  c.d_model = d;
  c.n_heads = 4;
  c.n_kv_heads = 2;
  c.d_ff = 24;
  c.vocab_size = vocab;
  c.resolve();
  return c;
}

/// Random weights at scale `s`, norm gains near 1.
inline Checkpoint random_model(ModelConfig c, std::uint64_t seed, double s = 0.3) {
  auto ck = make_empty_checkpoint(c);
  Pcg64 rng(seed, 1);
  for_each_tensor(ck, [&](const std::string& name, const std::vector<std::size_t>&, std::vector<float>& t) {
    const bool norm = name.ends_with("norm") || name.ends_with("norm_attn") || name.ends_with("norm_mlp");
    for (auto& v : t) v = static_cast<float>(norm ? 1.0 + 0.1 * rng.normal() : s * rng.normal());
  });
  return ck;
}

inline DivergenceEvent event(std::vector<TokenId> prefix, TokenId t_pt, TokenId t_it, std::string prompt,
                             std::string family = "f") {
  DivergenceEvent e;
  e.prompt_id = prompt;
  e.cluster_id = prompt;
  e.family = family;
  e.category = "c";
  e.prefix = std::move(prefix);
  e.position = 0;
  e.t_pt = t_pt;
  e.t_it = t_it;
  return e;
}

// ---------------------------------------------------------------------------
// Reference forward in double, written directly from the architecture
// description rather than from the runtime.

struct RefModel {
  const Checkpoint& m;

  double w(const std::vector<float>& t, std::size_t r, std::size_t c, std::size_t cols) const {
    return t[r * cols + c];
  }

  std::vector<double> rms(const std::vector<double>& x, const std::vector<float>& g) const {
    double ss = 0;
    for (double v : x) ss += v * v;
    const double inv = 1.0 / std::sqrt(ss / static_cast<double>(x.size()) + m.config.norm_eps);
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * inv * g[i];
    return out;
  }

  std::vector<double> mv(const std::vector<float>& W, const std::vector<double>& x, std::size_t rows) const {
    std::vector<double> out(rows, 0.0);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < x.size(); ++c) out[r] += w(W, r, c, x.size()) * x[c];
    return out;
  }

  void rotate(std::vector<double>& v, std::size_t pos) const {
    const auto hd = static_cast<std::size_t>(m.config.head_dim());
    for (std::size_t h = 0; h < v.size() / hd; ++h)
      for (std::size_t i = 0; i < hd / 2; ++i) {
        const double ang = static_cast<double>(pos) * std::pow(m.config.rope_theta, -2.0 * i / hd);
        double& a = v[h * hd + 2 * i];
        double& b = v[h * hd + 2 * i + 1];
        const double a0 = a, b0 = b;
        a = a0 * std::cos(ang) - b0 * std::sin(ang);
        b = a0 * std::sin(ang) + b0 * std::cos(ang);
      }
  }

  /// Final-layer states for every position.
  std::vector<std::vector<double>> forward(const std::vector<TokenId>& toks) const {
    const auto& c = m.config;
    const auto d = static_cast<std::size_t>(c.d_model);
    const auto hd = static_cast<std::size_t>(c.head_dim());
    const auto nh = static_cast<std::size_t>(c.n_heads), nkv = static_cast<std::size_t>(c.n_kv_heads);
    std::vector<std::vector<double>> x;
    for (TokenId t : toks) {
      std::vector<double> row(d);
      for (std::size_t i = 0; i < d; ++i) row[i] = m.embed[static_cast<std::size_t>(t) * d + i];
      x.push_back(row);
    }
    for (const auto& L : m.layers) {
      std::vector<std::vector<double>> q, k, v;
      for (std::size_t p = 0; p < x.size(); ++p) {
        const auto n = rms(x[p], L.norm_attn);
        q.push_back(mv(L.wq, n, nh * hd));
        k.push_back(mv(L.wk, n, nkv * hd));
        v.push_back(mv(L.wv, n, nkv * hd));
        rotate(q.back(), p);
        rotate(k.back(), p);
      }
      for (std::size_t p = 0; p < x.size(); ++p) {
        std::vector<double> att(nh * hd, 0.0);
        for (std::size_t h = 0; h < nh; ++h) {
          const std::size_t g = h / (nh / nkv);
          std::vector<double> s(p + 1);
          double mx = -1e300;
          for (std::size_t j = 0; j <= p; ++j) {
            double dot = 0;
            for (std::size_t i = 0; i < hd; ++i) dot += q[p][h * hd + i] * k[j][g * hd + i];
            s[j] = dot / std::sqrt(static_cast<double>(hd));
            mx = std::max(mx, s[j]);
          }
          double z = 0;
          for (auto& sj : s) z += (sj = std::exp(sj - mx));
          for (std::size_t j = 0; j <= p; ++j)
            for (std::size_t i = 0; i < hd; ++i) att[h * hd + i] += s[j] / z * v[j][g * hd + i];
        }
        const auto o = mv(L.wo, att, d);
        for (std::size_t i = 0; i < d; ++i) x[p][i] += o[i];
        const auto n = rms(x[p], L.norm_mlp);
        const auto ff = static_cast<std::size_t>(c.d_ff);
        const auto gate = mv(L.w_gate, n, ff), up = mv(L.w_up, n, ff);
        std::vector<double> hid(ff);
        for (std::size_t i = 0; i < ff; ++i) hid[i] = gate[i] / (1.0 + std::exp(-gate[i])) * up[i];
        const auto down = mv(L.w_down, hid, d);
        for (std::size_t i = 0; i < d; ++i) x[p][i] += down[i];
      }
    }
    return x;
  }

  std::vector<double> logits(const std::vector<double>& state) const {
    return mv(m.lm_head, rms(state, m.final_norm), static_cast<std::size_t>(m.config.vocab_size));
  }
};

// ---------------------------------------------------------------------------
// Linear fixture. Two layers, boundary 1, zero attention. Norm gains of 1e6
// with eps 1e12 make every RMSNorm the identity up to float rounding. The
// descendant's late MLP has one unit whose gate reads a constant coordinate
// and whose up projection reads `v`, so the late effect is linear in the
// boundary state. The descendant's embedding adds a rank-2 shift plus noise.

struct LinearFixture {
  PairedCheckpoints pair;
  std::vector<DivergenceEvent> events;
  std::vector<double> v;  // up-projection read direction
  std::vector<double> w;  // MLP write direction
  double gate_gain = 1.0;
  TokenId t_it = 1, t_pt = 2;
};

inline LinearFixture linear_fixture(int n_tokens = 60, std::uint64_t seed = 11) {
  ModelConfig c;
  c.n_layers = 2;
  c.d_model = 16;
  c.n_heads = 2;
  c.n_kv_heads = 1;
  c.d_ff = 4;
  c.vocab_size = n_tokens;
  c.norm_eps = 1e12;
  c.late_boundary = 1;
  LinearFixture f;
  auto pt = make_empty_checkpoint(c);
  for_each_tensor(pt, [](const std::string& name, const std::vector<std::size_t>&, std::vector<float>& t) {
    if (name.ends_with("norm") || name.ends_with("norm_attn") || name.ends_with("norm_mlp"))
      std::fill(t.begin(), t.end(), 1e6f);
  });
  Pcg64 rng(seed, 5);
  const std::size_t d = 16;
  // Coordinate 0 is constant 1. PT embeddings put a positive value on
  // coordinate 1 so the planted feature also fires under PT upstream.
  for (std::size_t t = 0; t < static_cast<std::size_t>(n_tokens); ++t) {
    pt.embed[t * d + 0] = 1.0f;
    pt.embed[t * d + 1] = static_cast<float>(0.5 + 0.1 * rng.uniform());
    pt.embed[t * d + 2] = static_cast<float>(0.2 * rng.normal());
    for (std::size_t i = 3; i < d; ++i) pt.embed[t * d + i] = static_cast<float>(0.5 * rng.normal());
  }
  for (auto& x : pt.lm_head) x = static_cast<float>(rng.normal() * 0.5);
  auto it = pt;
  for (std::size_t t = 0; t < static_cast<std::size_t>(n_tokens); ++t) {
    it.embed[t * d + 1] += static_cast<float>(2.0 + 0.2 * rng.normal());
    it.embed[t * d + 2] += static_cast<float>(1.0 * rng.normal());
    for (std::size_t i = 3; i < d; ++i) it.embed[t * d + i] += static_cast<float>(1e-3 * rng.normal());
  }
  f.v.assign(d, 0.0);
  f.v[1] = 1.0;
  f.w.assign(d, 0.0);
  for (std::size_t i = 3; i < d; ++i) f.w[i] = rng.normal() * 0.3;
  auto& L = it.layers[1];
  L.w_gate[0 * d + 0] = static_cast<float>(f.gate_gain);
  for (std::size_t i = 0; i < d; ++i) {
    L.w_up[0 * d + i] = static_cast<float>(f.v[i]);
    L.w_down[i * 4 + 0] = static_cast<float>(f.w[i]);
  }
  f.w.assign(d, 0.0);
  for (std::size_t i = 0; i < d; ++i) f.w[i] = L.w_down[i * 4 + 0];
  f.pair = {pt, it};
  for (TokenId t = 3; t < n_tokens; ++t)
    f.events.push_back(event({t}, f.t_pt, f.t_it, "p" + std::to_string(t), t % 2 ? "odd" : "even"));
  return f;
}

inline double silu(double x) { return x / (1.0 + std::exp(-x)); }

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("xpatch_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

/// The gated toy pair and its first-divergence events, built once per binary.
struct Toy {
  PairedCheckpoints pair;
  ToyLanguage language;
  std::vector<PromptRecord> manifest;
  std::vector<DivergenceEvent> events;
};

inline const Toy& gated_toy() {
  static const Toy toy = [] {
    Toy t;
    ToySpec spec;
    spec.mode = ToyMode::gated_coupling;
    spec.seed = 7;
    spec.config = toy_config();
    auto b = detail::build_toy(spec);
    t.pair = b.pair;
    t.language = b.language;
    t.manifest = gen_toy_manifest(t.language, 200, 7);
    t.events = collect_first_divergences(t.pair, t.manifest).events;
    return t;
  }();
  return toy;
}

/// Every `stride`-th event, for faster tests.
inline std::vector<DivergenceEvent> subsample(const std::vector<DivergenceEvent>& e, std::size_t stride) {
  std::vector<DivergenceEvent> out;
  for (std::size_t i = 0; i < e.size(); i += stride) out.push_back(e[i]);
  return out;
}

/// Crosscoder with every parameter drawn at scale 0.5.
inline CrosscoderModel random_crosscoder(int d, int F, int k, std::uint64_t seed) {
  auto m = make_crosscoder(0, d, F, k);
  Pcg64 rng(seed, 2);
  auto fill = [&](auto& t) {
    for (Eigen::Index i = 0; i < t.size(); ++i) t.data()[i] = 0.5 * rng.normal();
  };
  fill(m.w_enc);
  fill(m.b_enc);
  fill(m.dec_pt);
  fill(m.dec_it);
  fill(m.b_pt);
  fill(m.b_it);
  return m;
}

inline Eigen::MatrixXd random_matrix(Eigen::Index r, Eigen::Index c, Pcg64& rng) {
  Eigen::MatrixXd x(r, c);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = rng.normal();
  return x;
}

// Sparse sums of planted atoms, the same code in both branches.
struct Planted {
  DumpSplit dumps;
  std::vector<Eigen::VectorXd> atoms;  // joint [pt; it], unit norm
};

inline Planted planted_dump(std::size_t n_train, std::size_t n_heldout, std::uint64_t seed) {
  const int d = 16, n_atoms = 8;
  Pcg64 rng(seed, 4);
  Planted p;
  for (int a = 0; a < n_atoms; ++a) {
    Eigen::VectorXd v(2 * d);
    for (int i = 0; i < 2 * d; ++i) v[i] = rng.normal();
    p.atoms.push_back(v / v.norm());
  }
  auto fill = [&](ActivationDump& dump, std::size_t n, const std::string& tag) {
    dump.layer = 0;
    dump.d = d;
    for (std::size_t t = 0; t < n; ++t) {
      Eigen::VectorXd x = Eigen::VectorXd::Zero(2 * d);
      for (const auto& v : p.atoms)
        if (rng.uniform() < 0.25) x += (0.5 + 1.5 * rng.uniform()) * v;
      for (int i = 0; i < d; ++i) dump.pt.push_back(static_cast<float>(x[i]));
      for (int i = 0; i < d; ++i) dump.it.push_back(static_cast<float>(x[d + i]));
      dump.group.push_back(tag + std::to_string(t / 8));
    }
  };
  fill(p.dumps.train, n_train, "train");
  fill(p.dumps.heldout, n_heldout, "heldout");
  return p;
}

/// Largest cosine between `atom` and a joint decoder row.
inline double max_cos(const CrosscoderModel& m, const Eigen::VectorXd& atom) {
  double best = 0;
  for (int j = 0; j < m.n_features; ++j) {
    Eigen::VectorXd row(2 * m.d_in);
    row << m.dec_pt.row(j).transpose(), m.dec_it.row(j).transpose();
    best = std::max(best, row.dot(atom) / row.norm());
  }
  return best;
}

}  // namespace fx
