#pragma once

// Paired PT/IT BatchTopK crosscoder on MLP outputs of one layer: training,
// held-out metrics, the quality gate, and feature edits inside the IT late
// stack.
//
// The encoder reads [x_pt; x_it]. Inside a hybrid pass only the IT MLP output
// exists, so the PT-branch input at an edit site is taken from a twin pass
// that runs the PT late stack on the same upstream state.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "xpatch/container.hpp"
#include "xpatch/divergence.hpp"
#include "xpatch/factorial.hpp"
#include "xpatch/stats.hpp"

namespace xpatch {

inline constexpr std::string_view kCrosscoderMagic = "XCCD0001";

// ---------------------------------------------------------------------------
// Activation dumps

/// Position-aligned PT and IT MLP outputs, one row per token.
struct ActivationDump {
  int layer = 0;
  std::size_t d = 0;
  std::vector<float> pt;
  std::vector<float> it;
  std::vector<std::string> group;  // cluster id of the source sequence

  std::size_t n_tokens() const { return group.size(); }
};

namespace detail {

inline std::vector<float> capture_mlp_outputs(const Checkpoint& m, std::span<const TokenId> tokens, int layer) {
  std::vector<float> rows;
  const MlpHook hook = [&](const MlpSite& s) {
    if (s.layer == layer) rows.insert(rows.end(), s.mlp_out.begin(), s.mlp_out.end());
  };
  auto plan = uniform_plan(m);
  run_layers(plan, embed_tokens(m, tokens), layer + 1, &hook);
  return rows;
}

}  // namespace detail

/// Dumps every prefix position of every sequence.
inline ActivationDump dump_activations(const PairedCheckpoints& pair, const std::vector<DivergenceEvent>& events,
                                       int layer) {
  validate_pair(pair);
  XPATCH_CHECK(layer >= 0 && layer < pair.pt.config.n_layers, ErrorCode::InvalidArgument, "layer outside model");
  ActivationDump d;
  d.layer = layer;
  d.d = static_cast<std::size_t>(pair.pt.config.d_model);
  for (const auto& e : events) {
    const auto a = detail::capture_mlp_outputs(pair.pt, e.prefix, layer);
    const auto b = detail::capture_mlp_outputs(pair.it, e.prefix, layer);
    XPATCH_CHECK(a.size() == b.size() && a.size() == e.prefix.size() * d.d, ErrorCode::DumpMisaligned,
                 "PT and IT dumps differ for " + e.id());
    d.pt.insert(d.pt.end(), a.begin(), a.end());
    d.it.insert(d.it.end(), b.begin(), b.end());
    d.group.insert(d.group.end(), e.prefix.size(), e.cluster_id);
  }
  return d;
}

inline void check_dump(const ActivationDump& d) {
  XPATCH_CHECK(d.d > 0 && d.pt.size() == d.n_tokens() * d.d && d.it.size() == d.pt.size(), ErrorCode::DumpMisaligned,
               "dump rows do not line up");
}

struct DumpSplit {
  ActivationDump train;
  ActivationDump heldout;
};

/// Held-out rows are whole clusters: those with hash(cluster) % every == 0.
inline DumpSplit split_dump(const ActivationDump& d, int heldout_every = 5) {
  check_dump(d);
  XPATCH_CHECK(heldout_every >= 2, ErrorCode::InvalidArgument, "heldout_every must be >= 2");
  DumpSplit s;
  s.train.layer = s.heldout.layer = d.layer;
  s.train.d = s.heldout.d = d.d;
  for (std::size_t i = 0; i < d.n_tokens(); ++i) {
    auto& dst = detail::fnv1a(d.group[i]) % static_cast<std::uint64_t>(heldout_every) == 0 ? s.heldout : s.train;
    dst.pt.insert(dst.pt.end(), d.pt.begin() + static_cast<std::ptrdiff_t>(i * d.d),
                  d.pt.begin() + static_cast<std::ptrdiff_t>((i + 1) * d.d));
    dst.it.insert(dst.it.end(), d.it.begin() + static_cast<std::ptrdiff_t>(i * d.d),
                  d.it.begin() + static_cast<std::ptrdiff_t>((i + 1) * d.d));
    dst.group.push_back(d.group[i]);
  }
  XPATCH_CHECK(s.train.n_tokens() > 0 && s.heldout.n_tokens() > 0, ErrorCode::EmptyInput,
               "split left an empty train or held-out set");
  return s;
}

// ---------------------------------------------------------------------------
// Model

struct CrosscoderModel {
  std::vector<int> layer_set;
  int d_in = 0;
  int n_features = 0;
  int k = 0;
  Eigen::MatrixXd w_enc;   // [F][2 d_in], input is [x_pt; x_it]
  Eigen::VectorXd b_enc;   // [F]
  Eigen::MatrixXd dec_pt;  // [F][d_in]
  Eigen::MatrixXd dec_it;  // [F][d_in]
  Eigen::VectorXd b_pt;    // [d_in]
  Eigen::VectorXd b_it;    // [d_in]
  Eigen::VectorXd threshold;  // eval-time cutoff; +inf for features never selected

  int layer() const { return layer_set.front(); }
  bool alive(int j) const { return std::isfinite(threshold[j]); }

  void validate() const {
    XPATCH_CHECK(layer_set.size() == 1, ErrorCode::InvalidArgument, "a crosscoder covers exactly one layer");
    XPATCH_CHECK(d_in > 0 && n_features > 0 && k > 0 && k <= n_features, ErrorCode::InvalidArgument,
                 "bad crosscoder sizes");
    const auto F = static_cast<Eigen::Index>(n_features), D = static_cast<Eigen::Index>(d_in);
    XPATCH_CHECK(w_enc.rows() == F && w_enc.cols() == 2 * D && b_enc.size() == F && dec_pt.rows() == F &&
                     dec_pt.cols() == D && dec_it.rows() == F && dec_it.cols() == D && b_pt.size() == D &&
                     b_it.size() == D && threshold.size() == F,
                 ErrorCode::ShapeMismatch, "crosscoder tensor shapes");
  }

  Eigen::VectorXd pre_activation(std::span<const float> x_pt, std::span<const float> x_it) const {
    XPATCH_CHECK(x_pt.size() == static_cast<std::size_t>(d_in) && x_it.size() == x_pt.size(), ErrorCode::DimMismatch,
                 "activation width does not match crosscoder");
    Eigen::VectorXd x(2 * d_in);
    for (int i = 0; i < d_in; ++i) {
      x[i] = x_pt[static_cast<std::size_t>(i)];
      x[d_in + i] = x_it[static_cast<std::size_t>(i)];
    }
    return w_enc * x + b_enc;
  }

  /// Eval-time activations: positive values at or above the frozen threshold.
  Eigen::VectorXd encode(std::span<const float> x_pt, std::span<const float> x_it) const {
    Eigen::VectorXd f = pre_activation(x_pt, x_it);
    for (int j = 0; j < n_features; ++j)
      if (!(f[j] > 0.0 && f[j] >= threshold[j])) f[j] = 0.0;
    return f;
  }
};

inline CrosscoderModel make_crosscoder(int layer, int d_in, int n_features, int k) {
  CrosscoderModel m;
  m.layer_set = {layer};
  m.d_in = d_in;
  m.n_features = n_features;
  m.k = k;
  m.w_enc = Eigen::MatrixXd::Zero(n_features, 2 * d_in);
  m.b_enc = Eigen::VectorXd::Zero(n_features);
  m.dec_pt = Eigen::MatrixXd::Zero(n_features, d_in);
  m.dec_it = Eigen::MatrixXd::Zero(n_features, d_in);
  m.b_pt = Eigen::VectorXd::Zero(d_in);
  m.b_it = Eigen::VectorXd::Zero(d_in);
  m.threshold = Eigen::VectorXd::Zero(n_features);
  m.validate();
  return m;
}

/// Scales each feature's joint decoder row [dec_pt; dec_it] to unit norm.
inline void normalize_decoder(CrosscoderModel& m) {
  for (int j = 0; j < m.n_features; ++j) {
    const double n = std::sqrt(m.dec_pt.row(j).squaredNorm() + m.dec_it.row(j).squaredNorm());
    if (n > 0) {
      m.dec_pt.row(j) /= n;
      m.dec_it.row(j) /= n;
    }
  }
}

/// Rounds every parameter to f32 so a saved model reloads bit-identically.
inline void round_to_f32(CrosscoderModel& m) {
  auto r = [](auto& t) { t = t.unaryExpr([](double v) { return static_cast<double>(static_cast<float>(v)); }); };
  r(m.w_enc);
  r(m.b_enc);
  r(m.dec_pt);
  r(m.dec_it);
  r(m.b_pt);
  r(m.b_it);
  r(m.threshold);
}

// ---------------------------------------------------------------------------
// BatchTopK loss and gradients

/// 1 for the global top B*k pre-activations of a batch (ties: lower flat index).
inline Eigen::MatrixXd batch_topk_mask(const Eigen::MatrixXd& pre, int k) {
  const auto total = static_cast<std::size_t>(pre.size());
  const auto keep = std::min(total, static_cast<std::size_t>(pre.rows()) * static_cast<std::size_t>(k));
  std::vector<std::size_t> idx(total);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  const auto F = static_cast<std::size_t>(pre.cols());
  auto value = [&](std::size_t i) { return pre(static_cast<Eigen::Index>(i / F), static_cast<Eigen::Index>(i % F)); };
  for (std::size_t i = 0; i < total; ++i)
    XPATCH_CHECK(std::isfinite(value(i)), ErrorCode::NonFiniteLoss, "non-finite pre-activation");
  std::nth_element(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(keep), idx.end(),
                   [&](std::size_t a, std::size_t b) {
                     const double va = value(a), vb = value(b);
                     return va > vb || (va == vb && a < b);
                   });
  Eigen::MatrixXd mask = Eigen::MatrixXd::Zero(pre.rows(), pre.cols());
  for (std::size_t i = 0; i < keep; ++i)
    mask(static_cast<Eigen::Index>(idx[i] / F), static_cast<Eigen::Index>(idx[i] % F)) = 1.0;
  return mask;
}

struct CrosscoderGrad {
  Eigen::MatrixXd w_enc, dec_pt, dec_it;
  Eigen::VectorXd b_enc, b_pt, b_it;
};

struct BatchForward {
  Eigen::MatrixXd pre;   // [B][F]
  Eigen::MatrixXd mask;  // [B][F]
  Eigen::MatrixXd acts;  // pre * mask
  double loss = 0;
};

/// Loss = (1/B) sum_b (|x_pt - xhat_pt|^2 + |x_it - xhat_it|^2). Gradients
/// hold the selection fixed (the mask is piecewise constant).
inline BatchForward batch_loss(const CrosscoderModel& m, const Eigen::MatrixXd& x_pt, const Eigen::MatrixXd& x_it,
                               CrosscoderGrad* grad = nullptr) {
  XPATCH_CHECK(x_pt.rows() == x_it.rows() && x_pt.cols() == m.d_in && x_it.cols() == m.d_in && x_pt.rows() > 0,
               ErrorCode::DumpMisaligned, "batch shapes");
  const auto B = static_cast<double>(x_pt.rows());
  Eigen::MatrixXd x(x_pt.rows(), 2 * m.d_in);
  x << x_pt, x_it;
  BatchForward fw;
  fw.pre = (x * m.w_enc.transpose()).rowwise() + m.b_enc.transpose();
  fw.mask = batch_topk_mask(fw.pre, m.k);
  fw.acts = fw.pre.cwiseProduct(fw.mask);
  const Eigen::MatrixXd e_pt = x_pt - ((fw.acts * m.dec_pt).rowwise() + m.b_pt.transpose());
  const Eigen::MatrixXd e_it = x_it - ((fw.acts * m.dec_it).rowwise() + m.b_it.transpose());
  fw.loss = (e_pt.squaredNorm() + e_it.squaredNorm()) / B;
  XPATCH_CHECK(std::isfinite(fw.loss), ErrorCode::NonFiniteLoss, "reconstruction loss is not finite");
  if (grad) {
    const Eigen::MatrixXd g_pt = (-2.0 / B) * e_pt;
    const Eigen::MatrixXd g_it = (-2.0 / B) * e_it;
    grad->dec_pt = fw.acts.transpose() * g_pt;
    grad->dec_it = fw.acts.transpose() * g_it;
    grad->b_pt = g_pt.colwise().sum().transpose();
    grad->b_it = g_it.colwise().sum().transpose();
    const Eigen::MatrixXd d_pre = (g_pt * m.dec_pt.transpose() + g_it * m.dec_it.transpose()).cwiseProduct(fw.mask);
    grad->w_enc = d_pre.transpose() * x;
    grad->b_enc = d_pre.colwise().sum().transpose();
  }
  return fw;
}

// ---------------------------------------------------------------------------
// Training

enum class CrosscoderInit { random, identity };

NLOHMANN_JSON_SERIALIZE_ENUM(CrosscoderInit, {{CrosscoderInit::random, "random"}, {CrosscoderInit::identity, "identity"}})

struct CrosscoderHyper {
  int n_features = 64;
  int k = 4;
  double lr = 0.01;
  int steps = 2000;
  std::uint64_t seed = 0;
  int batch_size = 64;
  double momentum = 0.9;
  CrosscoderInit init = CrosscoderInit::random;
};

inline void to_json(json& j, const CrosscoderHyper& h) {
  j = {{"n_features", h.n_features}, {"k", h.k},   {"lr", h.lr},         {"steps", h.steps},
       {"seed", h.seed},             {"batch_size", h.batch_size}, {"momentum", h.momentum}, {"init", h.init}};
}

inline void from_json(const json& j, CrosscoderHyper& h) {
  CrosscoderHyper d;
  h.n_features = j.value("n_features", d.n_features);
  h.k = j.value("k", d.k);
  h.lr = j.value("lr", d.lr);
  h.steps = j.value("steps", d.steps);
  h.seed = j.value("seed", d.seed);
  h.batch_size = j.value("batch_size", d.batch_size);
  h.momentum = j.value("momentum", d.momentum);
  h.init = j.value("init", d.init);
}

struct CrosscoderMetrics {
  double ve_pt = 0;
  double ve_it = 0;
  double mean_l0 = 0;
  double alive_fraction_max = 0;  // highest per-feature firing rate
  int n_alive = 0;                // features firing on at least one token
  std::size_t n_tokens = 0;
};

inline void to_json(json& j, const CrosscoderMetrics& m) {
  j = {{"ve_pt", m.ve_pt},
       {"ve_it", m.ve_it},
       {"mean_l0", m.mean_l0},
       {"alive_fraction_max", m.alive_fraction_max},
       {"n_alive", m.n_alive},
       {"n_tokens", m.n_tokens}};
}

namespace detail {

inline Eigen::MatrixXd dump_rows(const std::vector<float>& v, std::size_t d, std::span<const std::size_t> rows) {
  Eigen::MatrixXd out(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(d));
  for (std::size_t r = 0; r < rows.size(); ++r)
    for (std::size_t c = 0; c < d; ++c)
      out(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = v[rows[r] * d + c];
  return out;
}

inline Eigen::VectorXd dump_mean(const std::vector<float>& v, std::size_t d, std::size_t n) {
  Eigen::VectorXd m = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(d));
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < d; ++c) m[static_cast<Eigen::Index>(c)] += v[r * d + c];
  return m / static_cast<double>(n);
}

inline void init_crosscoder(CrosscoderModel& m, const ActivationDump& train, const CrosscoderHyper& h) {
  if (h.init == CrosscoderInit::identity) {
    XPATCH_CHECK(h.n_features == 2 * m.d_in, ErrorCode::InvalidArgument, "identity init needs n_features = 2 d_in");
    m.w_enc.setIdentity();
    m.dec_pt.topRows(m.d_in).setIdentity();
    m.dec_it.bottomRows(m.d_in).setIdentity();
    return;
  }
  Pcg64 rng(h.seed, 37);
  for (int j = 0; j < m.n_features; ++j)
    for (int i = 0; i < m.d_in; ++i) {
      m.dec_pt(j, i) = rng.normal();
      m.dec_it(j, i) = rng.normal();
    }
  normalize_decoder(m);
  m.w_enc << m.dec_pt, m.dec_it;
  m.b_pt = dump_mean(train.pt, train.d, train.n_tokens());
  m.b_it = dump_mean(train.it, train.d, train.n_tokens());
}

/// Minimum selected value per feature over one pass of the train set.
inline Eigen::VectorXd calibrate_thresholds(const CrosscoderModel& m, const ActivationDump& train, int batch_size) {
  Eigen::VectorXd th = Eigen::VectorXd::Constant(m.n_features, std::numeric_limits<double>::infinity());
  const std::size_t n = train.n_tokens();
  for (std::size_t start = 0; start < n; start += static_cast<std::size_t>(batch_size)) {
    std::vector<std::size_t> rows;
    for (std::size_t r = start; r < std::min(n, start + static_cast<std::size_t>(batch_size)); ++r) rows.push_back(r);
    const auto fw = batch_loss(m, dump_rows(train.pt, train.d, rows), dump_rows(train.it, train.d, rows));
    for (Eigen::Index b = 0; b < fw.mask.rows(); ++b)
      for (int j = 0; j < m.n_features; ++j)
        if (fw.mask(b, j) > 0) th[j] = std::min(th[j], fw.pre(b, j));
  }
  return th;
}

}  // namespace detail

inline CrosscoderMetrics evaluate_crosscoder(const CrosscoderModel& m, const ActivationDump& heldout) {
  check_dump(heldout);
  XPATCH_CHECK(heldout.d == static_cast<std::size_t>(m.d_in), ErrorCode::DimMismatch, "dump width");
  const std::size_t n = heldout.n_tokens(), d = heldout.d;
  XPATCH_CHECK(n > 0, ErrorCode::EmptyInput, "empty held-out dump");
  const auto mean_pt = detail::dump_mean(heldout.pt, d, n);
  const auto mean_it = detail::dump_mean(heldout.it, d, n);
  double sse_pt = 0, sse_it = 0, sst_pt = 0, sst_it = 0, l0 = 0;
  std::vector<std::size_t> fires(static_cast<std::size_t>(m.n_features), 0);
  for (std::size_t r = 0; r < n; ++r) {
    std::span<const float> xp(heldout.pt.data() + r * d, d), xi(heldout.it.data() + r * d, d);
    const Eigen::VectorXd f = m.encode(xp, xi);
    const Eigen::VectorXd rp = m.dec_pt.transpose() * f + m.b_pt;
    const Eigen::VectorXd ri = m.dec_it.transpose() * f + m.b_it;
    for (std::size_t c = 0; c < d; ++c) {
      const auto ci = static_cast<Eigen::Index>(c);
      sse_pt += (xp[c] - rp[ci]) * (xp[c] - rp[ci]);
      sse_it += (xi[c] - ri[ci]) * (xi[c] - ri[ci]);
      sst_pt += (xp[c] - mean_pt[ci]) * (xp[c] - mean_pt[ci]);
      sst_it += (xi[c] - mean_it[ci]) * (xi[c] - mean_it[ci]);
    }
    for (int j = 0; j < m.n_features; ++j)
      if (f[j] != 0.0) {
        ++fires[static_cast<std::size_t>(j)];
        l0 += 1;
      }
  }
  CrosscoderMetrics out;
  out.ve_pt = sst_pt > 0 ? 1.0 - sse_pt / sst_pt : 0.0;
  out.ve_it = sst_it > 0 ? 1.0 - sse_it / sst_it : 0.0;
  out.mean_l0 = l0 / static_cast<double>(n);
  for (std::size_t c : fires) {
    out.alive_fraction_max = std::max(out.alive_fraction_max, static_cast<double>(c) / static_cast<double>(n));
    if (c > 0) ++out.n_alive;
  }
  out.n_tokens = n;
  return out;
}

struct TrainResult {
  CrosscoderModel model;
  CrosscoderMetrics heldout;
  double final_loss = 0;
  std::vector<double> loss_curve;  // mean loss per 100 steps
};

/// SGD with momentum over a seeded batch order; decoder rows renormalized
/// after each step; thresholds calibrated on the train set afterwards.
inline TrainResult train_crosscoder(const DumpSplit& dumps, const CrosscoderHyper& h) {
  check_dump(dumps.train);
  check_dump(dumps.heldout);
  XPATCH_CHECK(dumps.train.d == dumps.heldout.d && dumps.train.layer == dumps.heldout.layer, ErrorCode::DumpMisaligned,
               "train and held-out dumps differ in layer or width");
  XPATCH_CHECK(h.steps >= 0 && h.batch_size >= 1 && h.lr > 0, ErrorCode::InvalidArgument, "bad trainer settings");
  const auto& train = dumps.train;
  auto m = make_crosscoder(train.layer, static_cast<int>(train.d), h.n_features, h.k);
  detail::init_crosscoder(m, train, h);

  const std::size_t n = train.n_tokens();
  const auto B = std::min(n, static_cast<std::size_t>(h.batch_size));
  std::vector<std::size_t> order(n);
  std::size_t cursor = n;  // forces a shuffle on the first step
  std::uint64_t epoch = 0;
  CrosscoderGrad g;
  CrosscoderGrad v{Eigen::MatrixXd::Zero(m.w_enc.rows(), m.w_enc.cols()),
                   Eigen::MatrixXd::Zero(m.dec_pt.rows(), m.dec_pt.cols()),
                   Eigen::MatrixXd::Zero(m.dec_it.rows(), m.dec_it.cols()),
                   Eigen::VectorXd::Zero(m.b_enc.size()),
                   Eigen::VectorXd::Zero(m.b_pt.size()),
                   Eigen::VectorXd::Zero(m.b_it.size())};
  TrainResult res;
  double window = 0;
  for (int step = 0; step < h.steps; ++step) {
    if (cursor + B > n) {
      std::iota(order.begin(), order.end(), std::size_t{0});
      Pcg64 rng(mix_seed(h.seed, epoch++), 41);
      rng.shuffle(std::span<std::size_t>(order));
      cursor = 0;
    }
    std::span<const std::size_t> rows(order.data() + cursor, B);
    cursor += B;
    const auto fw = batch_loss(m, detail::dump_rows(train.pt, train.d, rows), detail::dump_rows(train.it, train.d, rows), &g);
    res.final_loss = fw.loss;
    window += fw.loss;
    if ((step + 1) % 100 == 0 || step + 1 == h.steps) {
      res.loss_curve.push_back(window / static_cast<double>(step % 100 + 1));
      window = 0;
    }
    auto update = [&](auto& p, auto& vel, const auto& grad) {
      vel = h.momentum * vel + grad;
      p -= h.lr * vel;
    };
    update(m.w_enc, v.w_enc, g.w_enc);
    update(m.b_enc, v.b_enc, g.b_enc);
    update(m.dec_pt, v.dec_pt, g.dec_pt);
    update(m.dec_it, v.dec_it, g.dec_it);
    update(m.b_pt, v.b_pt, g.b_pt);
    update(m.b_it, v.b_it, g.b_it);
    normalize_decoder(m);
  }
  round_to_f32(m);
  m.threshold = detail::calibrate_thresholds(m, train, static_cast<int>(B));
  round_to_f32(m);
  res.heldout = evaluate_crosscoder(m, dumps.heldout);
  res.model = std::move(m);
  return res;
}

// ---------------------------------------------------------------------------
// Persistence

inline std::string serialize_crosscoder(const CrosscoderModel& m, const json& extra = json::object()) {
  m.validate();
  ContainerWriter w{std::string(kCrosscoderMagic)};
  auto put = [&](const std::string& name, const auto& t, std::vector<std::size_t> shape) {
    std::vector<float> data;
    // Eigen is column-major; store row-major.
    for (Eigen::Index r = 0; r < t.rows(); ++r)
      for (Eigen::Index c = 0; c < t.cols(); ++c) data.push_back(static_cast<float>(t(r, c)));
    w.add(name, std::move(shape), data);
  };
  const auto F = static_cast<std::size_t>(m.n_features), D = static_cast<std::size_t>(m.d_in);
  put("w_enc", m.w_enc, {F, 2 * D});
  put("b_enc", m.b_enc, {F});
  put("dec_pt", m.dec_pt, {F, D});
  put("dec_it", m.dec_it, {F, D});
  put("b_pt", m.b_pt, {D});
  put("b_it", m.b_it, {D});
  put("threshold", m.threshold, {F});
  json header = {{"kind", "crosscoder"},
                 {"layer_set", m.layer_set},
                 {"d_in", m.d_in},
                 {"n_features", m.n_features},
                 {"k", m.k}};
  if (!extra.empty()) header["meta"] = extra;
  return w.bytes(header);
}

inline void save_crosscoder(const CrosscoderModel& m, const std::filesystem::path& path, const json& extra = json::object()) {
  const auto blob = serialize_crosscoder(m, extra);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  XPATCH_CHECK(out.good(), ErrorCode::Io, "cannot write " + path.string());
  out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
}

inline CrosscoderModel load_crosscoder(const std::filesystem::path& path) {
  auto file = read_container(path, kCrosscoderMagic);
  CrosscoderModel m;
  try {
    m.layer_set = file.header.at("layer_set").get<std::vector<int>>();
    m.d_in = file.header.at("d_in").get<int>();
    m.n_features = file.header.at("n_features").get<int>();
    m.k = file.header.at("k").get<int>();
  } catch (const json::exception& e) {
    throw Error(ErrorCode::Parse, std::string("crosscoder header: ") + e.what());
  }
  auto take = [&](const std::string& name, Eigen::Index rows, Eigen::Index cols) {
    const auto it = file.tensors.find(name);
    XPATCH_CHECK(it != file.tensors.end(), ErrorCode::ShapeMismatch, "missing tensor " + name);
    XPATCH_CHECK(it->second.numel() == static_cast<std::size_t>(rows * cols), ErrorCode::ShapeMismatch,
                 "tensor " + name + " has the wrong size");
    Eigen::MatrixXd t(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r)
      for (Eigen::Index c = 0; c < cols; ++c) t(r, c) = it->second.data[static_cast<std::size_t>(r * cols + c)];
    return t;
  };
  const Eigen::Index F = m.n_features, D = m.d_in;
  m.w_enc = take("w_enc", F, 2 * D);
  m.b_enc = take("b_enc", F, 1);
  m.dec_pt = take("dec_pt", F, D);
  m.dec_it = take("dec_it", F, D);
  m.b_pt = take("b_pt", D, 1);
  m.b_it = take("b_it", D, 1);
  m.threshold = take("threshold", F, 1);
  m.validate();
  return m;
}

// ---------------------------------------------------------------------------
// Feature sets

enum class Selection { causal_topk, matched_random, top_active_noncausal, same_delta_random, bucket };

NLOHMANN_JSON_SERIALIZE_ENUM(Selection, {{Selection::causal_topk, "causal_topk"},
                                         {Selection::matched_random, "matched_random"},
                                         {Selection::top_active_noncausal, "top_active_noncausal"},
                                         {Selection::same_delta_random, "same_delta_random"},
                                         {Selection::bucket, "bucket"}})

struct FeatureSet {
  std::vector<int> indices;
  Selection selection = Selection::causal_topk;

  void validate(const CrosscoderModel& m) const {
    auto s = indices;
    std::sort(s.begin(), s.end());
    XPATCH_CHECK(std::adjacent_find(s.begin(), s.end()) == s.end(), ErrorCode::InvalidArgument,
                 "feature set has duplicates");
    for (int j : s)
      XPATCH_CHECK(j >= 0 && j < m.n_features, ErrorCode::InvalidArgument, "feature index outside model");
  }
};

/// Size-matched draw from alive features outside `s`.
inline FeatureSet matched_random(const CrosscoderModel& m, const FeatureSet& s, std::uint64_t seed) {
  s.validate(m);
  std::vector<int> pool;
  for (int j = 0; j < m.n_features; ++j)
    if (m.alive(j) && std::find(s.indices.begin(), s.indices.end(), j) == s.indices.end()) pool.push_back(j);
  XPATCH_CHECK(pool.size() >= s.indices.size(), ErrorCode::InvalidArgument, "not enough alive features for a matched set");
  Pcg64 rng(seed, 43);
  rng.shuffle(std::span<int>(pool));
  FeatureSet out{{pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(s.indices.size())}, Selection::matched_random};
  std::sort(out.indices.begin(), out.indices.end());
  return out;
}

// ---------------------------------------------------------------------------
// Edit sites

/// Feature-space edit: fills `delta` (length F) from the site's activations;
/// returns false to leave the site untouched.
using FeatureEdit = std::function<bool(const Eigen::VectorXd& f, Eigen::VectorXd& delta)>;

namespace detail {

/// Layers below the boundary from `upstream`, the rest from `late`.
inline LayerPlan hybrid_plan(ModelPair pair, Side upstream, Side late) {
  const int n = pair.pt->config.n_layers, b = pair.boundary();
  LayerPlan plan(static_cast<std::size_t>(n));
  for (int l = 0; l < n; ++l) {
    const auto* m = &pair.get(l < b ? upstream : late);
    plan[static_cast<std::size_t>(l)] = {m, m};
  }
  return plan;
}

/// The same pass with the PT late stack; supplies the encoder's PT branch.
inline LayerPlan twin_plan(ModelPair pair, LayerPlan plan) {
  for (std::size_t l = static_cast<std::size_t>(pair.boundary()); l < plan.size(); ++l) plan[l] = {pair.pt, pair.pt};
  return plan;
}

struct EditSite {
  LayerPlan plan;
  ResidualStates entering;  // states entering the crosscoder layer
  std::vector<float> twin;  // PT-branch MLP output at the event position
  const Checkpoint* reader = nullptr;
  TokenId t_it = 0;
  TokenId t_pt = 0;
};

inline EditSite prepare_site(ModelPair pair, const CrosscoderModel& m, LayerPlan plan, const Checkpoint& reader,
                             const DivergenceEvent& e) {
  const int layer = m.layer();
  XPATCH_CHECK(layer >= pair.boundary() && layer < pair.pt->config.n_layers, ErrorCode::InvalidArgument,
               "crosscoder layer must sit in the late stack");
  XPATCH_CHECK(m.d_in == pair.pt->config.d_model, ErrorCode::DimMismatch, "crosscoder width does not match model");
  const auto twin = twin_plan(pair, plan);
  int shared = 0;
  while (shared < layer && plan[static_cast<std::size_t>(shared)].attn == twin[static_cast<std::size_t>(shared)].attn &&
         plan[static_cast<std::size_t>(shared)].mlp == twin[static_cast<std::size_t>(shared)].mlp)
    ++shared;
  const auto common = run_layers(plan, embed_tokens(*plan[0].attn, e.prefix), shared);
  EditSite s;
  s.entering = run_layers(plan, common, layer);
  const std::size_t last = e.prefix.size() - 1;
  const MlpHook capture = [&](const MlpSite& site) {
    if (site.layer == layer && site.position == last) s.twin.assign(site.mlp_out.begin(), site.mlp_out.end());
  };
  run_layers(twin, common, layer + 1, &capture);
  s.plan = std::move(plan);
  s.reader = &reader;
  s.t_it = e.t_it;
  s.t_pt = e.t_pt;
  return s;
}

/// Runs the site to the end, editing at the crosscoder layer and event position.
inline double site_margin(const CrosscoderModel& m, const EditSite& s, const FeatureEdit* edit = nullptr,
                          Eigen::VectorXd* acts = nullptr) {
  const int layer = m.layer();
  const std::size_t last = s.entering.n_pos - 1;
  const MlpHook hook = [&](const MlpSite& site) {
    if (site.layer != layer || site.position != last) return;
    const Eigen::VectorXd f = m.encode(s.twin, site.mlp_out);
    if (acts) *acts = f;
    if (!edit) return;
    Eigen::VectorXd delta = Eigen::VectorXd::Zero(m.n_features);
    if (!(*edit)(f, delta)) return;
    const Eigen::VectorXd write = m.dec_it.transpose() * delta;
    for (std::size_t i = 0; i < site.mlp_out.size(); ++i)
      site.mlp_out[i] = static_cast<float>(static_cast<double>(site.mlp_out[i]) + write[static_cast<Eigen::Index>(i)]);
  };
  const auto out = run_layers(s.plan, s.entering, static_cast<int>(s.plan.size()), &hook);
  return token_margin(readout_row(*s.reader, out.last(), true), s.t_it, s.t_pt);
}

/// Removes `scale` times the IT-branch contribution of the features in `s`.
inline FeatureEdit ablate_edit(const FeatureSet& s, double scale = 1.0) {
  return [idx = s.indices, scale](const Eigen::VectorXd& f, Eigen::VectorXd& delta) {
    if (idx.empty() || scale == 0.0) return false;
    for (int j : idx) delta[j] = -scale * f[j];
    return true;
  };
}

struct EventSites {
  EditSite pi, ii;
  double y_pp = 0, y_ip = 0, y_pi = 0, y_ii = 0;
  Eigen::VectorXd f_pi, f_ii;
};

inline EventSites prepare_event(ModelPair pair, const CrosscoderModel& m, const DivergenceEvent& e, Readout r) {
  check_event(pair, e);
  EventSites s;
  const auto u_pt = upstream_states(pair, Side::pt, e.prefix);
  const auto u_it = upstream_states(pair, Side::it, e.prefix);
  s.y_pp = late_margin(pair, u_pt, Side::pt, r, e.t_it, e.t_pt);
  s.y_ip = late_margin(pair, u_it, Side::pt, r, e.t_it, e.t_pt);
  const auto& reader = reader_for(pair, r, Side::it);
  s.pi = prepare_site(pair, m, hybrid_plan(pair, Side::pt, Side::it), reader, e);
  s.ii = prepare_site(pair, m, hybrid_plan(pair, Side::it, Side::it), reader, e);
  s.y_pi = site_margin(m, s.pi, nullptr, &s.f_pi);
  s.y_ii = site_margin(m, s.ii, nullptr, &s.f_ii);
  return s;
}

inline std::vector<ClusterValue> event_values(const std::vector<DivergenceEvent>& events, const std::vector<double>& v) {
  std::vector<ClusterValue> out;
  for (std::size_t i = 0; i < events.size(); ++i) out.push_back({events[i].cluster_id, v[i], events[i].family});
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Causal ranking

struct RankedFeature {
  int feature = 0;
  double score = 0;   // mean margin drop in (U_IT, L_IT)
  int n_active = 0;   // events where the feature fired
};

inline std::vector<RankedFeature> rank_features_causal(const CrosscoderModel& m, ModelPair pair,
                                                       const std::vector<DivergenceEvent>& events, Readout r) {
  m.validate();
  XPATCH_CHECK(!events.empty(), ErrorCode::EmptyInput, "no events");
  std::vector<RankedFeature> out(static_cast<std::size_t>(m.n_features));
  for (int j = 0; j < m.n_features; ++j) out[static_cast<std::size_t>(j)].feature = j;
  for (const auto& e : events) {
    check_event(pair, e);
    const auto site = detail::prepare_site(pair, m, detail::hybrid_plan(pair, Side::it, Side::it),
                                           reader_for(pair, r, Side::it), e);
    Eigen::VectorXd f;
    const double base = detail::site_margin(m, site, nullptr, &f);
    for (int j = 0; j < m.n_features; ++j) {
      if (f[j] == 0.0) continue;
      const auto edit = detail::ablate_edit(FeatureSet{{j}, Selection::causal_topk});
      out[static_cast<std::size_t>(j)].score += base - detail::site_margin(m, site, &edit);
      ++out[static_cast<std::size_t>(j)].n_active;
    }
  }
  for (auto& f : out) f.score /= static_cast<double>(events.size());
  std::stable_sort(out.begin(), out.end(), [](const RankedFeature& a, const RankedFeature& b) { return a.score > b.score; });
  return out;
}

inline FeatureSet top_causal(const std::vector<RankedFeature>& ranked, std::size_t n) {
  FeatureSet s{{}, Selection::causal_topk};
  for (std::size_t i = 0; i < std::min(n, ranked.size()); ++i) s.indices.push_back(ranked[i].feature);
  return s;
}

/// Features with the largest mean activation in (U_IT, L_IT) outside `s`.
inline FeatureSet top_active_noncausal(const CrosscoderModel& m, ModelPair pair, const std::vector<DivergenceEvent>& events,
                                       const FeatureSet& s, Readout r) {
  s.validate(m);
  Eigen::VectorXd total = Eigen::VectorXd::Zero(m.n_features);
  for (const auto& e : events) {
    check_event(pair, e);
    const auto site = detail::prepare_site(pair, m, detail::hybrid_plan(pair, Side::it, Side::it),
                                           reader_for(pair, r, Side::it), e);
    Eigen::VectorXd f;
    detail::site_margin(m, site, nullptr, &f);
    total += f;
  }
  std::vector<int> pool;
  for (int j = 0; j < m.n_features; ++j)
    if (std::find(s.indices.begin(), s.indices.end(), j) == s.indices.end()) pool.push_back(j);
  std::stable_sort(pool.begin(), pool.end(), [&](int a, int b) { return total[a] > total[b]; });
  pool.resize(std::min(pool.size(), s.indices.size()));
  std::sort(pool.begin(), pool.end());
  return {pool, Selection::top_active_noncausal};
}

// ---------------------------------------------------------------------------
// Mediation and the causal gate

struct MediationResult {
  double i_full = 0;
  double i_ablate = 0;
  double drop = 0;
  double share = 0;
  bool degenerate = false;  // |i_full| < 1e-6
  double drop_ii = 0;       // mean margin drop in (U_IT, L_IT)
  double drop_pi = 0;       // mean margin drop in (U_PT, L_IT)
  double gate = 0;          // drop_ii - drop_pi
  std::optional<BootstrapResult> drop_ci;
  std::vector<double> per_event_drop;
};

inline void to_json(json& j, const MediationResult& m) {
  j = {{"i_full", m.i_full},   {"i_ablate", m.i_ablate}, {"drop", m.drop},       {"share", m.share},
       {"degenerate", m.degenerate}, {"drop_ii", m.drop_ii}, {"drop_pi", m.drop_pi}, {"gate", m.gate}};
  if (m.degenerate) j["share"] = nullptr;
  if (m.drop_ci) j["drop_ci"] = ci_json(*m.drop_ci);
}

/// Scales the IT-branch contributions of `s` by (1 - alpha) in both IT-late cells.
inline MediationResult scaled_ablation(const CrosscoderModel& m, ModelPair pair, const std::vector<DivergenceEvent>& events,
                                       const FeatureSet& s, Readout r, double alpha, int n_resamples = 0,
                                       std::uint64_t seed = 0) {
  m.validate();
  s.validate(m);
  XPATCH_CHECK(!events.empty(), ErrorCode::EmptyInput, "no events");
  const auto edit = detail::ablate_edit(s, alpha);
  MediationResult res;
  double full = 0, abl = 0, dii = 0, dpi = 0;
  for (const auto& e : events) {
    const auto c = detail::prepare_event(pair, m, e, r);
    const double a_pi = detail::site_margin(m, c.pi, &edit);
    const double a_ii = detail::site_margin(m, c.ii, &edit);
    const double i_full = (c.y_ii - c.y_ip) - (c.y_pi - c.y_pp);
    const double i_abl = (a_ii - c.y_ip) - (a_pi - c.y_pp);
    full += i_full;
    abl += i_abl;
    dii += c.y_ii - a_ii;
    dpi += c.y_pi - a_pi;
    res.per_event_drop.push_back(i_full - i_abl);
  }
  const auto n = static_cast<double>(events.size());
  res.i_full = full / n;
  res.i_ablate = abl / n;
  res.drop = res.i_full - res.i_ablate;
  res.drop_ii = dii / n;
  res.drop_pi = dpi / n;
  res.gate = res.drop_ii - res.drop_pi;
  res.degenerate = std::abs(res.i_full) < 1e-6;
  res.share = res.degenerate ? std::numeric_limits<double>::quiet_NaN() : res.drop / res.i_full;
  if (n_resamples > 0) res.drop_ci = cluster_bootstrap(detail::event_values(events, res.per_event_drop), n_resamples, seed);
  return res;
}

inline MediationResult mediation_drop(const CrosscoderModel& m, ModelPair pair, const std::vector<DivergenceEvent>& events,
                                      const FeatureSet& s, Readout r, int n_resamples = 0, std::uint64_t seed = 0) {
  return scaled_ablation(m, pair, events, s, r, 1.0, n_resamples, seed);
}

inline double causal_gate(const CrosscoderModel& m, ModelPair pair, const std::vector<DivergenceEvent>& events,
                          const FeatureSet& s, Readout r) {
  return mediation_drop(m, pair, events, s, r).gate;
}

// ---------------------------------------------------------------------------
// Feature rescue

struct RescueResult {
  double rescue_gain = 0;          // mean over all events
  double rescue_fraction = 0;      // mean over events with |missing| >= 0.25
  double missing_margin = 0;       // mean y_ii - y_pi
  std::size_t n_fraction_events = 0;
  bool missing_degenerate = false;  // no event passed the filter
  std::vector<double> per_event_gain;
};

inline void to_json(json& j, const RescueResult& r) {
  j = {{"rescue_gain", r.rescue_gain},
       {"rescue_fraction", r.missing_degenerate ? json(nullptr) : json(r.rescue_fraction)},
       {"missing_margin", r.missing_margin},
       {"n_fraction_events", r.n_fraction_events},
       {"missing_degenerate", r.missing_degenerate}};
}

/// Copies S's activations from the native (U_IT, L_IT) pass into (U_PT, L_IT),
/// replacing the hybrid's own S contributions.
inline RescueResult feature_rescue(const CrosscoderModel& m, ModelPair pair, const std::vector<DivergenceEvent>& events,
                                   const FeatureSet& s, Readout r) {
  m.validate();
  s.validate(m);
  XPATCH_CHECK(!events.empty(), ErrorCode::EmptyInput, "no events");
  RescueResult res;
  double gain = 0, frac = 0, missing = 0;
  for (const auto& e : events) {
    const auto c = detail::prepare_event(pair, m, e, r);
    const Eigen::VectorXd native = c.f_ii;
    const FeatureEdit edit = [&](const Eigen::VectorXd& f, Eigen::VectorXd& delta) {
      if (s.indices.empty()) return false;
      for (int j : s.indices) delta[j] = native[j] - f[j];
      return true;
    };
    const double g = detail::site_margin(m, c.pi, &edit) - c.y_pi;
    const double miss = c.y_ii - c.y_pi;
    res.per_event_gain.push_back(g);
    gain += g;
    missing += miss;
    if (std::abs(miss) >= kFiniteDenominator) {
      frac += g / miss;
      ++res.n_fraction_events;
    }
  }
  const auto n = static_cast<double>(events.size());
  res.rescue_gain = gain / n;
  res.missing_margin = missing / n;
  res.missing_degenerate = res.n_fraction_events == 0;
  res.rescue_fraction = res.missing_degenerate ? std::numeric_limits<double>::quiet_NaN()
                                               : frac / static_cast<double>(res.n_fraction_events);
  return res;
}

// ---------------------------------------------------------------------------
// Handoff mediation

enum class HandoffDirection { rescue, degrade };

NLOHMANN_JSON_SERIALIZE_ENUM(HandoffDirection, {{HandoffDirection::rescue, "rescue"}, {HandoffDirection::degrade, "degrade"}})

struct HandoffResult {
  double total_effect = 0;       // mean over all events
  double mediated_part = 0;      // mean over all events
  double mediated_fraction = 0;  // mean over events with |total| >= 0.25
  std::size_t n_fraction_events = 0;
  bool fraction_degenerate = false;
};

inline void to_json(json& j, const HandoffResult& h) {
  j = {{"total_effect", h.total_effect},
       {"mediated_part", h.mediated_part},
       {"mediated_fraction", h.fraction_degenerate ? json(nullptr) : json(h.mediated_fraction)},
       {"n_fraction_events", h.n_fraction_events}};
}

/// rescue: (U_PT, L_IT) with the window taken from IT; degrade: (U_IT, L_IT)
/// with the window taken from PT. S is ablated in both passes for the
/// mediated part.
inline HandoffResult handoff_mediation(const CrosscoderModel& m, ModelPair pair, const std::vector<DivergenceEvent>& events,
                                       LayerWindow window, HandoffDirection dir, const FeatureSet& s, Readout r) {
  m.validate();
  s.validate(m);
  XPATCH_CHECK(!events.empty(), ErrorCode::EmptyInput, "no events");
  XPATCH_CHECK(window.begin >= 0 && window.begin < window.end, ErrorCode::WindowOutOfRange, "empty or negative window");
  XPATCH_CHECK(window.end <= m.layer(), ErrorCode::WindowOverlapsLayerSet, "window must end before the crosscoder layer");
  const Side up = dir == HandoffDirection::rescue ? Side::pt : Side::it;
  const Side donor = dir == HandoffDirection::rescue ? Side::it : Side::pt;
  const auto base_plan = detail::hybrid_plan(pair, up, Side::it);
  auto pert_plan = base_plan;
  for (int l = window.begin; l < window.end; ++l) pert_plan[static_cast<std::size_t>(l)] = {&pair.get(donor), &pair.get(donor)};
  const auto& reader = reader_for(pair, r, Side::it);
  const auto edit = detail::ablate_edit(s);
  HandoffResult res;
  double total = 0, mediated = 0, frac = 0;
  for (const auto& e : events) {
    check_event(pair, e);
    const auto base = detail::prepare_site(pair, m, base_plan, reader, e);
    const auto pert = detail::prepare_site(pair, m, pert_plan, reader, e);
    const double t = detail::site_margin(m, pert) - detail::site_margin(m, base);
    const double t_abl = detail::site_margin(m, pert, &edit) - detail::site_margin(m, base, &edit);
    total += t;
    mediated += t - t_abl;
    if (std::abs(t) >= kFiniteDenominator) {
      frac += (t - t_abl) / t;
      ++res.n_fraction_events;
    }
  }
  const auto n = static_cast<double>(events.size());
  res.total_effect = total / n;
  res.mediated_part = mediated / n;
  res.fraction_degenerate = res.n_fraction_events == 0;
  res.mediated_fraction = res.fraction_degenerate ? std::numeric_limits<double>::quiet_NaN()
                                                  : frac / static_cast<double>(res.n_fraction_events);
  return res;
}

// ---------------------------------------------------------------------------
// Dose response

struct DosePoint {
  double alpha = 0;
  double drop = 0;                // bucket
  double matched_random_drop = 0;
  double same_delta_random_drop = 0;
};

inline void to_json(json& j, const DosePoint& p) {
  j = {{"alpha", p.alpha},
       {"drop", p.drop},
       {"matched_random_drop", p.matched_random_drop},
       {"same_delta_random_drop", p.same_delta_random_drop}};
}

namespace detail {

/// Random feature-space direction with the norm of the bucket edit, per event.
inline double same_delta_drop(const CrosscoderModel& m, ModelPair pair, const std::vector<DivergenceEvent>& events,
                              const FeatureSet& bucket, Readout r, double alpha, std::uint64_t seed) {
  double total = 0;
  for (const auto& e : events) {
    const auto c = prepare_event(pair, m, e, r);
    Pcg64 rng(mix_seed(seed, fnv1a(e.id())), 47);
    Eigen::VectorXd dir(m.n_features);
    for (int j = 0; j < m.n_features; ++j) dir[j] = rng.normal();
    dir /= dir.norm();
    auto scaled = [&](const Eigen::VectorXd& f) {
      double n2 = 0;
      for (int j : bucket.indices) n2 += f[j] * f[j];
      return Eigen::VectorXd(alpha * std::sqrt(n2) * dir);
    };
    const FeatureEdit edit = [&](const Eigen::VectorXd& f, Eigen::VectorXd& delta) {
      if (bucket.indices.empty() || alpha == 0.0) return false;
      delta = scaled(f);
      return true;
    };
    const double a_pi = site_margin(m, c.pi, &edit);
    const double a_ii = site_margin(m, c.ii, &edit);
    total += (c.y_ii - c.y_pi) - (a_ii - a_pi);
  }
  return total / static_cast<double>(events.size());
}

}  // namespace detail

inline std::vector<DosePoint> bucket_edit_dose_response(const CrosscoderModel& m, ModelPair pair,
                                                        const std::vector<DivergenceEvent>& events, const FeatureSet& bucket,
                                                        const std::vector<double>& alphas, Readout r, std::uint64_t seed) {
  bucket.validate(m);
  const auto control = matched_random(m, bucket, seed);
  std::vector<DosePoint> out;
  for (double a : alphas) {
    XPATCH_CHECK(a >= 0, ErrorCode::AlphaOutOfRange, "dose alpha must be >= 0");
    DosePoint p;
    p.alpha = a;
    p.drop = scaled_ablation(m, pair, events, bucket, r, a).drop;
    p.matched_random_drop = scaled_ablation(m, pair, events, control, r, a).drop;
    p.same_delta_random_drop = detail::same_delta_drop(m, pair, events, bucket, r, a, seed);
    out.push_back(p);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Quality gate

struct QualityGate {
  double ve_pt = 0;
  double ve_it = 0;
  double mean_l0 = 0;
  double alive_fraction_max = 0;
  double causal_drop_top200 = 0;
  double random_drop = 0;
  bool passed = false;
};

inline void to_json(json& j, const QualityGate& g) {
  j = {{"ve_pt", g.ve_pt},
       {"ve_it", g.ve_it},
       {"mean_l0", g.mean_l0},
       {"alive_fraction_max", g.alive_fraction_max},
       {"causal_drop_top200", g.causal_drop_top200},
       {"random_drop", g.random_drop},
       {"passed", g.passed}};
}

inline bool gate_passes(const QualityGate& g, int k) {
  return g.ve_pt >= 0.75 && g.ve_it >= 0.75 && std::abs(g.mean_l0 - k) / k <= 0.10 && g.alive_fraction_max >= 0.01 &&
         g.alive_fraction_max <= 0.20 && g.causal_drop_top200 > 0 && g.random_drop <= 0.05;
}

/// Top set size is min(200, half the alive features) so a disjoint matched
/// random set always exists.
inline QualityGate quality_gate(const CrosscoderModel& m, const CrosscoderMetrics& heldout, ModelPair pair,
                                const std::vector<DivergenceEvent>& events, Readout r, std::uint64_t seed,
                                const std::vector<RankedFeature>* ranked = nullptr) {
  QualityGate g;
  g.ve_pt = heldout.ve_pt;
  g.ve_it = heldout.ve_it;
  g.mean_l0 = heldout.mean_l0;
  g.alive_fraction_max = heldout.alive_fraction_max;
  int n_alive = 0;
  for (int j = 0; j < m.n_features; ++j) n_alive += m.alive(j) ? 1 : 0;
  const auto own = ranked ? std::vector<RankedFeature>{} : rank_features_causal(m, pair, events, r);
  const auto top = top_causal(ranked ? *ranked : own, std::min<std::size_t>(200, static_cast<std::size_t>(n_alive / 2)));
  if (!top.indices.empty()) {
    g.causal_drop_top200 = mediation_drop(m, pair, events, top, r).drop;
    g.random_drop = mediation_drop(m, pair, events, matched_random(m, top, seed), r).drop;
  }
  g.passed = gate_passes(g, m.k);
  return g;
}

// ---------------------------------------------------------------------------
// Planted dictionaries

/// One feature per direction, reading and writing the IT branch only, with a
/// zero threshold: the feature fires when the IT output projects positively.
inline CrosscoderModel planted_crosscoder(int layer, int d_in, const std::vector<std::vector<float>>& it_directions,
                                          int k = 1) {
  XPATCH_CHECK(!it_directions.empty(), ErrorCode::EmptyInput, "no planted directions");
  auto m = make_crosscoder(layer, d_in, static_cast<int>(it_directions.size()), k);
  for (std::size_t j = 0; j < it_directions.size(); ++j) {
    XPATCH_CHECK(it_directions[j].size() == static_cast<std::size_t>(d_in), ErrorCode::DimMismatch, "direction width");
    double n = 0;
    for (float v : it_directions[j]) n += static_cast<double>(v) * v;
    n = std::sqrt(n);
    XPATCH_CHECK(n > 0, ErrorCode::InvalidArgument, "zero planted direction");
    for (int i = 0; i < d_in; ++i) {
      const double u = it_directions[j][static_cast<std::size_t>(i)] / n;
      m.dec_it(static_cast<Eigen::Index>(j), i) = u;
      m.w_enc(static_cast<Eigen::Index>(j), d_in + i) = u;
    }
  }
  round_to_f32(m);
  return m;
}

}  // namespace xpatch
