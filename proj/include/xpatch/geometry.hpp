#pragma once

// Boundary-state closure: PCA of IT-minus-PT boundary shifts, rank-k
// injection into the weak (U_PT, L_IT) hybrid, and matched controls.
//
// Injections are applied at every prefix position, each position using its
// own shift, so the full-delta control rebuilds U_IT exactly.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <limits>
#include <vector>

#include "xpatch/container.hpp"
#include "xpatch/controls.hpp"
#include "xpatch/factorial.hpp"

namespace xpatch {

inline constexpr std::string_view kPcaMagic = "XPCA0001";

struct BoundaryPca {
  int boundary = 0;
  int d = 0;
  std::size_t n_samples = 0;
  Eigen::VectorXd mean;        // mean shift
  Eigen::MatrixXd components;  // [d][d], row i = i-th direction
  Eigen::VectorXd variances;   // second moment along each direction, descending
  Eigen::VectorXd coord_var;   // per-coordinate variance of the shift
};

namespace detail {

inline void check_boundary(ModelPair pair, int boundary) {
  XPATCH_CHECK(boundary > 0 && boundary < pair.pt->config.n_layers, ErrorCode::BoundaryOutOfRange,
               "closure boundary must be inside the model");
}

/// Flips each row so its first nonzero coordinate is positive.
inline void fix_signs(Eigen::MatrixXd& rows) {
  for (Eigen::Index r = 0; r < rows.rows(); ++r)
    for (Eigen::Index c = 0; c < rows.cols(); ++c) {
      if (rows(r, c) == 0.0) continue;
      if (rows(r, c) < 0.0) rows.row(r) *= -1.0;
      break;
    }
}

}  // namespace detail

/// Directions are eigenvectors of the uncentered second moment of the
/// event-position shifts, so a constant shift shows up as one component.
inline BoundaryPca fit_boundary_pca(ModelPair pair, const std::vector<DivergenceEvent>& train, int boundary) {
  detail::check_boundary(pair, boundary);
  XPATCH_CHECK(!train.empty(), ErrorCode::EmptyInput, "no train events");
  const int d = pair.pt->config.d_model;
  BoundaryPca p;
  p.boundary = boundary;
  p.d = d;
  p.n_samples = train.size();
  Eigen::MatrixXd second = Eigen::MatrixXd::Zero(d, d);
  Eigen::VectorXd sum = Eigen::VectorXd::Zero(d), sumsq = Eigen::VectorXd::Zero(d);
  for (const auto& e : train) {
    check_event(pair, e);
    const auto u_pt = forward_upstream(*pair.pt, e.prefix, boundary);
    const auto u_it = forward_upstream(*pair.it, e.prefix, boundary);
    Eigen::VectorXd delta(d);
    for (int i = 0; i < d; ++i)
      delta[i] = static_cast<double>(u_it.last()[static_cast<std::size_t>(i)]) -
                 static_cast<double>(u_pt.last()[static_cast<std::size_t>(i)]);
    for (int r = 0; r < d; ++r)
      for (int c = 0; c < d; ++c) second(r, c) += delta[r] * delta[c];
    sum += delta;
    sumsq += delta.cwiseProduct(delta);
  }
  const auto n = static_cast<double>(train.size());
  second /= n;
  p.mean = sum / n;
  p.coord_var = (sumsq / n - p.mean.cwiseProduct(p.mean)).cwiseMax(0.0);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(second);
  XPATCH_CHECK(eig.info() == Eigen::Success, ErrorCode::InvalidArgument, "eigensolver failed");
  // Eigen returns ascending eigenvalues.
  p.components = eig.eigenvectors().transpose().colwise().reverse();
  p.variances = eig.eigenvalues().reverse().cwiseMax(0.0);
  detail::fix_signs(p.components);
  return p;
}

enum class ClosureControl { none, gaussian_full, random_full, sign_flip_full, full_delta };

NLOHMANN_JSON_SERIALIZE_ENUM(ClosureControl, {{ClosureControl::none, "none"},
                                              {ClosureControl::gaussian_full, "gaussian_full"},
                                              {ClosureControl::random_full, "random_full"},
                                              {ClosureControl::sign_flip_full, "sign_flip_full"},
                                              {ClosureControl::full_delta, "full_delta"}})

struct ClosureResult {
  int boundary = 0;
  int rank = 0;
  ClosureControl control = ClosureControl::none;
  bool include_mean = true;
  double floor_margin = 0;
  double native_margin = 0;
  double rescued_margin = 0;
  double closure_fraction = 0;
  bool degenerate = false;      // |native - floor| < 0.25
  bool rank_deficient = false;  // fewer fit samples than the rank
  std::size_t n_events = 0;
};

inline void to_json(json& j, const ClosureResult& c) {
  j = {{"boundary", c.boundary},
       {"rank", c.rank},
       {"control", c.control},
       {"include_mean", c.include_mean},
       {"floor_margin", c.floor_margin},
       {"native_margin", c.native_margin},
       {"rescued_margin", c.rescued_margin},
       {"closure_fraction", c.degenerate ? json(nullptr) : json(c.closure_fraction)},
       {"degenerate", c.degenerate},
       {"rank_deficient", c.rank_deficient},
       {"n_events", c.n_events}};
}

namespace detail {

/// Vector added at one position: mean + projection of (delta - mean) onto
/// the top `rank` directions, or the control's replacement.
inline Eigen::VectorXd injection(const BoundaryPca& p, const Eigen::VectorXd& delta, int rank, ClosureControl control,
                                 bool include_mean, Pcg64& rng) {
  switch (control) {
    case ClosureControl::full_delta: return delta;
    case ClosureControl::sign_flip_full: return -delta;
    case ClosureControl::gaussian_full: {
      Eigen::VectorXd g(p.d);
      for (int i = 0; i < p.d; ++i) g[i] = rng.normal() * std::sqrt(p.coord_var[i]);
      return g;
    }
    case ClosureControl::random_full: {
      Eigen::VectorXd g(p.d);
      for (int i = 0; i < p.d; ++i) g[i] = rng.normal();
      return g * (delta.norm() / g.norm());
    }
    case ClosureControl::none: break;
  }
  const Eigen::VectorXd centered = include_mean ? Eigen::VectorXd(delta - p.mean) : delta;
  Eigen::VectorXd out = include_mean ? p.mean : Eigen::VectorXd::Zero(p.d);
  if (rank > 0) {
    const auto basis = p.components.topRows(rank);
    out += basis.transpose() * (basis * centered);
  }
  return out;
}

}  // namespace detail

inline ClosureResult closure_test(ModelPair pair, const BoundaryPca& p, const std::vector<DivergenceEvent>& heldout, int rank,
                                  ClosureControl control, Readout r, bool include_mean = true, std::uint64_t seed = 0) {
  detail::check_boundary(pair, p.boundary);
  XPATCH_CHECK(p.d == pair.pt->config.d_model, ErrorCode::DimMismatch, "PCA width does not match model");
  XPATCH_CHECK(rank >= 0 && rank <= p.components.rows(), ErrorCode::RankExceedsFit, "rank exceeds fitted directions");
  XPATCH_CHECK(!heldout.empty(), ErrorCode::EmptyInput, "no held-out events");
  ClosureResult res;
  res.boundary = p.boundary;
  res.rank = rank;
  res.control = control;
  res.include_mean = include_mean;
  res.rank_deficient = static_cast<std::size_t>(rank) > p.n_samples;
  res.n_events = heldout.size();
  const auto& reader = reader_for(pair, r, Side::it);
  const auto d = static_cast<std::size_t>(p.d);
  double fl = 0, na = 0, re = 0;
  for (const auto& e : heldout) {
    check_event(pair, e);
    const auto u_pt = forward_upstream(*pair.pt, e.prefix, p.boundary);
    const auto u_it = forward_upstream(*pair.it, e.prefix, p.boundary);
    auto late = [&](const ResidualStates& u) {
      const auto out = forward_late(*pair.it, u, p.boundary);
      return token_margin(readout_row(reader, out.last(), true), e.t_it, e.t_pt);
    };
    Pcg64 rng(mix_seed(seed, detail::fnv1a(e.id())), 53);
    auto injected = u_pt;
    for (std::size_t pos = 0; pos < u_pt.n_pos; ++pos) {
      Eigen::VectorXd delta(p.d);
      for (std::size_t i = 0; i < d; ++i)
        delta[static_cast<Eigen::Index>(i)] =
            static_cast<double>(u_it.values[pos * d + i]) - static_cast<double>(u_pt.values[pos * d + i]);
      const auto add = detail::injection(p, delta, rank, control, include_mean, rng);
      for (std::size_t i = 0; i < d; ++i)
        injected.values[pos * d + i] =
            static_cast<float>(static_cast<double>(u_pt.values[pos * d + i]) + add[static_cast<Eigen::Index>(i)]);
    }
    injected.source = StateSource::perturbed;
    fl += late(u_pt);
    na += late(u_it);
    re += late(injected);
  }
  const auto n = static_cast<double>(heldout.size());
  res.floor_margin = fl / n;
  res.native_margin = na / n;
  res.rescued_margin = re / n;
  res.degenerate = std::abs(res.native_margin - res.floor_margin) < kFiniteDenominator;
  res.closure_fraction = res.degenerate ? std::numeric_limits<double>::quiet_NaN()
                                        : (res.rescued_margin - res.floor_margin) / (res.native_margin - res.floor_margin);
  return res;
}

/// Train/held-out split by cluster: hash(cluster) % every == 0 is held out.
inline std::pair<std::vector<DivergenceEvent>, std::vector<DivergenceEvent>> split_events(
    const std::vector<DivergenceEvent>& events, int heldout_every = 5) {
  XPATCH_CHECK(heldout_every >= 2, ErrorCode::InvalidArgument, "heldout_every must be >= 2");
  std::pair<std::vector<DivergenceEvent>, std::vector<DivergenceEvent>> out;
  for (const auto& e : events)
    (detail::fnv1a(e.cluster_id) % static_cast<std::uint64_t>(heldout_every) == 0 ? out.second : out.first).push_back(e);
  return out;
}

// ---------------------------------------------------------------------------
// Persistence

inline std::string serialize_pca(const BoundaryPca& p) {
  ContainerWriter w{std::string(kPcaMagic)};
  auto put = [&](const std::string& name, const auto& t, std::vector<std::size_t> shape) {
    std::vector<float> data;
    for (Eigen::Index r = 0; r < t.rows(); ++r)
      for (Eigen::Index c = 0; c < t.cols(); ++c) data.push_back(static_cast<float>(t(r, c)));
    w.add(name, std::move(shape), data);
  };
  const auto d = static_cast<std::size_t>(p.d);
  put("mean", p.mean, {d});
  put("components", p.components, {static_cast<std::size_t>(p.components.rows()), d});
  put("variances", p.variances, {static_cast<std::size_t>(p.variances.size())});
  put("coord_var", p.coord_var, {d});
  return w.bytes({{"kind", "boundary_pca"}, {"boundary", p.boundary}, {"d", p.d}, {"n_samples", p.n_samples}});
}

inline void save_pca(const BoundaryPca& p, const std::filesystem::path& path) {
  const auto blob = serialize_pca(p);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  XPATCH_CHECK(out.good(), ErrorCode::Io, "cannot write " + path.string());
  out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
}

inline BoundaryPca load_pca(const std::filesystem::path& path) {
  auto file = read_container(path, kPcaMagic);
  BoundaryPca p;
  try {
    p.boundary = file.header.at("boundary").get<int>();
    p.d = file.header.at("d").get<int>();
    p.n_samples = file.header.at("n_samples").get<std::size_t>();
  } catch (const json::exception& e) {
    throw Error(ErrorCode::Parse, std::string("pca header: ") + e.what());
  }
  auto take = [&](const std::string& name, Eigen::Index rows, Eigen::Index cols) {
    const auto it = file.tensors.find(name);
    XPATCH_CHECK(it != file.tensors.end() && it->second.numel() == static_cast<std::size_t>(rows * cols),
                 ErrorCode::ShapeMismatch, "bad tensor " + name);
    Eigen::MatrixXd t(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r)
      for (Eigen::Index c = 0; c < cols; ++c) t(r, c) = it->second.data[static_cast<std::size_t>(r * cols + c)];
    return t;
  };
  const auto& comp = file.tensors.at("components");
  XPATCH_CHECK(comp.shape.size() == 2, ErrorCode::ShapeMismatch, "components must be 2-d");
  const auto r = static_cast<Eigen::Index>(comp.shape[0]);
  p.mean = take("mean", p.d, 1);
  p.components = take("components", r, p.d);
  p.variances = take("variances", r, 1);
  p.coord_var = take("coord_var", p.d, 1);
  return p;
}

}  // namespace xpatch
