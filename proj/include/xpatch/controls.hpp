#pragma once

// Hybrid-state controls: PT-to-IT interpolation at the boundary, the signed
// permutation null, and the pre-late logit-commitment filter.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <vector>

#include "xpatch/divergence.hpp"
#include "xpatch/factorial.hpp"

namespace xpatch {

// ---------------------------------------------------------------------------
// Interpolation

/// U(a) = (1 - a) U_PT + a U_IT; both endpoints are reproduced exactly.
inline ResidualStates interpolate_states(const ResidualStates& u_pt, const ResidualStates& u_it, double alpha) {
  XPATCH_CHECK(u_pt.values.size() == u_it.values.size(), ErrorCode::DimMismatch, "state shapes differ");
  ResidualStates out = u_pt;
  out.source = StateSource::interpolated;
  const auto a = static_cast<float>(alpha);
  const float b = 1.0f - a;
  for (std::size_t i = 0; i < out.values.size(); ++i) out.values[i] = b * u_pt.values[i] + a * u_it.values[i];
  return out;
}

struct InterpolationPoint {
  double alpha = 0;
  double mean_late_effect = 0;  // mean D(alpha)
};

struct InterpolationResult {
  std::vector<InterpolationPoint> curve;
  std::vector<std::vector<double>> per_event;  // [event][alpha]
  double slope = 0;
  double intercept = 0;
};

inline InterpolationResult interpolation_sweep(ModelPair pair, const std::vector<DivergenceEvent>& events,
                                               std::vector<double> alphas, Readout r) {
  for (double a : alphas)
    XPATCH_CHECK(a >= 0.0 && a <= 1.0, ErrorCode::AlphaOutOfRange, "alpha outside [0, 1]");
  std::sort(alphas.begin(), alphas.end());
  alphas.erase(std::unique(alphas.begin(), alphas.end()), alphas.end());
  XPATCH_CHECK(!alphas.empty() && alphas.front() == 0.0 && alphas.back() == 1.0, ErrorCode::AlphaOutOfRange,
               "alphas must include 0 and 1");
  XPATCH_CHECK(!events.empty(), ErrorCode::EmptyInput, "no events");
  InterpolationResult res;
  std::vector<double> sums(alphas.size(), 0.0);
  for (const auto& e : events) {
    check_event(pair, e);
    const auto u_pt = upstream_states(pair, Side::pt, e.prefix);
    const auto u_it = upstream_states(pair, Side::it, e.prefix);
    std::vector<double> row;
    for (std::size_t k = 0; k < alphas.size(); ++k) {
      const auto u = interpolate_states(u_pt, u_it, alphas[k]);
      const double d = late_margin(pair, u, Side::it, r, e.t_it, e.t_pt) - late_margin(pair, u, Side::pt, r, e.t_it, e.t_pt);
      row.push_back(d);
      sums[k] += d;
    }
    res.per_event.push_back(std::move(row));
  }
  std::vector<double> means;
  for (std::size_t k = 0; k < alphas.size(); ++k) {
    means.push_back(sums[k] / static_cast<double>(events.size()));
    res.curve.push_back({alphas[k], means.back()});
  }
  const auto fit = ols(alphas, means);
  res.slope = fit.slope;
  res.intercept = fit.intercept;
  return res;
}

// ---------------------------------------------------------------------------
// Signed-permutation null

/// Per position: delta~[i] = sign_i * delta[perm(i)], drawn from `rng`.
inline std::vector<double> signed_permutation(std::span<const double> delta, Pcg64& rng) {
  std::vector<std::size_t> perm(delta.size());
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  rng.shuffle(std::span<std::size_t>(perm));
  std::vector<double> out(delta.size());
  for (std::size_t i = 0; i < delta.size(); ++i) out[i] = rng.coin() ? -delta[perm[i]] : delta[perm[i]];
  return out;
}

/// Sum of squares accumulated in sorted order so that permutations of the
/// same values give the same bits.
inline double sorted_sq_norm(std::span<const double> v) {
  std::vector<double> sq(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) sq[i] = v[i] * v[i];
  std::sort(sq.begin(), sq.end());
  double s = 0;
  for (double x : sq) s += x;
  return s;
}

/// Boundary delta U_IT - U_PT in double, row-major [pos][d].
inline std::vector<double> boundary_delta(const ResidualStates& u_pt, const ResidualStates& u_it) {
  std::vector<double> d(u_pt.values.size());
  for (std::size_t i = 0; i < d.size(); ++i)
    d[i] = static_cast<double>(u_it.values[i]) - static_cast<double>(u_pt.values[i]);
  return d;
}

/// U_PT + delta, rounded once to f32.
inline ResidualStates apply_delta(const ResidualStates& u_pt, std::span<const double> delta, StateSource src) {
  ResidualStates out = u_pt;
  out.source = src;
  for (std::size_t i = 0; i < out.values.size(); ++i)
    out.values[i] = static_cast<float>(static_cast<double>(u_pt.values[i]) + delta[i]);
  return out;
}

struct SignedPermutationResult {
  double observed_interaction = 0;
  double null_mean = 0;
  double ratio = 0;
  bool degenerate = false;  // |observed| < 1e-9
  std::vector<double> draw_means;
};

/// Draw `draw` for event `e` uses Pcg64(mix_seed(seed, draw), hash(event id)).
inline SignedPermutationResult signed_permutation_null(ModelPair pair, const std::vector<DivergenceEvent>& events,
                                                       std::uint64_t seed, int n_draws, Readout r) {
  XPATCH_CHECK(n_draws >= 1, ErrorCode::InvalidArgument, "n_draws must be >= 1");
  XPATCH_CHECK(!events.empty(), ErrorCode::EmptyInput, "no events");
  SignedPermutationResult res;
  std::vector<double> draw_sums(static_cast<std::size_t>(n_draws), 0.0);
  double obs = 0;
  for (const auto& e : events) {
    check_event(pair, e);
    const auto u_pt = upstream_states(pair, Side::pt, e.prefix);
    const auto u_it = upstream_states(pair, Side::it, e.prefix);
    const double y_pp = late_margin(pair, u_pt, Side::pt, r, e.t_it, e.t_pt);
    const double y_pi = late_margin(pair, u_pt, Side::it, r, e.t_it, e.t_pt);
    const double y_ip = late_margin(pair, u_it, Side::pt, r, e.t_it, e.t_pt);
    const double y_ii = late_margin(pair, u_it, Side::it, r, e.t_it, e.t_pt);
    obs += (y_ii - y_ip) - (y_pi - y_pp);
    const auto delta = boundary_delta(u_pt, u_it);
    const std::size_t d = u_pt.d_model;
    for (int k = 0; k < n_draws; ++k) {
      Pcg64 rng(mix_seed(seed, static_cast<std::uint64_t>(k)), detail::fnv1a(e.id()));
      std::vector<double> shuffled(delta.size());
      for (std::size_t p = 0; p < u_pt.n_pos; ++p) {
        const auto row = signed_permutation(std::span<const double>(delta.data() + p * d, d), rng);
        std::copy(row.begin(), row.end(), shuffled.begin() + static_cast<std::ptrdiff_t>(p * d));
      }
      const auto u = apply_delta(u_pt, shuffled, StateSource::perturbed);
      const double late_null =
          late_margin(pair, u, Side::it, r, e.t_it, e.t_pt) - late_margin(pair, u, Side::pt, r, e.t_it, e.t_pt);
      draw_sums[static_cast<std::size_t>(k)] += late_null - (y_pi - y_pp);
    }
  }
  const auto n = static_cast<double>(events.size());
  res.observed_interaction = obs / n;
  double total = 0;
  for (double s : draw_sums) {
    res.draw_means.push_back(s / n);
    total += s / n;
  }
  res.null_mean = total / n_draws;
  res.degenerate = std::abs(res.observed_interaction) < kDegenerateEps;
  res.ratio = res.degenerate ? std::numeric_limits<double>::quiet_NaN() : res.null_mean / res.observed_interaction;
  return res;
}

// ---------------------------------------------------------------------------
// Pre-late logit commitment

/// IT reader applied to the IT state entering `boundary` at the event position.
inline double boundary_margin(ModelPair pair, const DivergenceEvent& e, std::optional<int> boundary = std::nullopt) {
  const auto u = forward_upstream(*pair.it, e.prefix, boundary.value_or(pair.boundary()));
  return token_margin(readout_row(*pair.it, u.last(), true), e.t_it, e.t_pt);
}

struct MarginBin {
  double margin_lo = 0;
  double margin_hi = 0;
  double mean_interaction = 0;
  std::size_t n = 0;
};

struct CommitmentResult {
  std::vector<double> boundary_margins;  // per input event
  double filtered_interaction = 0;       // mean over events with boundary margin <= 0
  std::size_t n_filtered = 0;
  bool empty_subset = false;
  std::vector<MarginBin> quintiles;
  double controlled_interaction = 0;  // OLS intercept of interaction on boundary margin
  double margin_slope = 0;
};

/// `results[i]` must be the factorial result of `events[i]`.
inline CommitmentResult pre_late_commitment(ModelPair pair, const std::vector<DivergenceEvent>& events,
                                            const std::vector<FourCellResult>& results) {
  XPATCH_CHECK(events.size() == results.size(), ErrorCode::InvalidArgument, "events and results differ in length");
  XPATCH_CHECK(!events.empty(), ErrorCode::EmptyInput, "no events");
  CommitmentResult c;
  std::vector<double> inter;
  double sum = 0;
  for (std::size_t i = 0; i < events.size(); ++i) {
    XPATCH_CHECK(results[i].event_id == events[i].id(), ErrorCode::InvalidArgument, "result order mismatch");
    c.boundary_margins.push_back(boundary_margin(pair, events[i]));
    inter.push_back(results[i].interaction);
    if (c.boundary_margins.back() <= 0) {
      sum += results[i].interaction;
      ++c.n_filtered;
    }
  }
  c.empty_subset = c.n_filtered == 0;
  c.filtered_interaction = c.empty_subset ? std::numeric_limits<double>::quiet_NaN() : sum / static_cast<double>(c.n_filtered);
  std::vector<std::size_t> order(events.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return c.boundary_margins[a] < c.boundary_margins[b]; });
  const std::size_t n = order.size();
  for (std::size_t q = 0; q < 5; ++q) {
    const std::size_t lo = q * n / 5, hi = (q + 1) * n / 5;
    if (hi <= lo) continue;
    MarginBin bin;
    bin.margin_lo = c.boundary_margins[order[lo]];
    bin.margin_hi = c.boundary_margins[order[hi - 1]];
    double s = 0;
    for (std::size_t k = lo; k < hi; ++k) s += inter[order[k]];
    bin.n = hi - lo;
    bin.mean_interaction = s / static_cast<double>(bin.n);
    c.quintiles.push_back(bin);
  }
  const auto fit = ols(c.boundary_margins, inter);
  c.controlled_interaction = fit.intercept;
  c.margin_slope = fit.slope;
  return c;
}

// ---------------------------------------------------------------------------
// Serialization

inline void to_json(json& j, const InterpolationResult& r) {
  j = json{{"slope", r.slope}, {"intercept", r.intercept}, {"curve", json::array()}};
  for (const auto& p : r.curve) j["curve"].push_back({{"alpha", p.alpha}, {"mean_late_effect", p.mean_late_effect}});
}

inline void to_json(json& j, const SignedPermutationResult& r) {
  j = json{{"observed_interaction", r.observed_interaction},
           {"null_mean", r.null_mean},
           {"ratio", num_or_null(r.ratio)},
           {"degenerate", r.degenerate},
           {"n_draws", r.draw_means.size()}};
}

inline void to_json(json& j, const CommitmentResult& c) {
  j = json{{"filtered_interaction", num_or_null(c.filtered_interaction)},
           {"n_filtered", c.n_filtered},
           {"empty_subset", c.empty_subset},
           {"controlled_interaction", c.controlled_interaction},
           {"margin_slope", c.margin_slope},
           {"quintiles", json::array()}};
  for (const auto& b : c.quintiles)
    j["quintiles"].push_back({{"margin_lo", b.margin_lo},
                              {"margin_hi", b.margin_hi},
                              {"mean_interaction", b.mean_interaction},
                              {"n", b.n}});
}

inline void to_json(json& j, const NullResult& r) {
  j = json{{"observed", r.observed},
           {"null_mean", r.null_mean},
           {"null_q999", r.null_q999},
           {"p_value", r.p_value},
           {"n_perms", r.n_perms}};
}

}  // namespace xpatch
