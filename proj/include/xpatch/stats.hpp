#pragma once

// Cluster bootstrap, family-balanced means, sign-flip nulls and small helpers.
// Every draw i is generated from Pcg64(mix_seed(seed, i), stream) so any draw
// can be reproduced alone.

#include <algorithm>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "xpatch/error.hpp"
#include "xpatch/rng.hpp"

namespace xpatch {

inline double mean_of(const std::vector<double>& v) {
  XPATCH_CHECK(!v.empty(), ErrorCode::EmptyInput, "mean of empty sample");
  double s = 0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

/// Hyndman-Fan type 7 quantile (linear interpolation between order statistics).
inline double quantile(std::vector<double> v, double q) {
  XPATCH_CHECK(!v.empty(), ErrorCode::EmptyInput, "quantile of empty sample");
  std::sort(v.begin(), v.end());
  const double h = (static_cast<double>(v.size()) - 1.0) * q;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (h - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

inline double median_of(std::vector<double> v) { return quantile(std::move(v), 0.5); }

struct ClusterValue {
  std::string cluster;
  double value = 0;
  std::string stratum;  // optional: clusters are resampled within their stratum
};

struct BootstrapResult {
  double mean = 0;
  double ci_lo = 0;
  double ci_hi = 0;
  double level = 0.95;
  std::size_t n_clusters = 0;
  std::size_t n_values = 0;
  std::vector<double> draws;  // per-resample means, in draw order
};

/// Percentile interval of the mean of all member values, resampling clusters
/// with replacement (within strata when strata are given).
inline BootstrapResult cluster_bootstrap(const std::vector<ClusterValue>& values, int n_resamples, std::uint64_t seed,
                                         double level = 0.95) {
  XPATCH_CHECK(!values.empty(), ErrorCode::EmptyInput, "bootstrap needs at least one value");
  XPATCH_CHECK(n_resamples >= 1, ErrorCode::InvalidArgument, "n_resamples must be >= 1");
  XPATCH_CHECK(level > 0 && level < 1, ErrorCode::InvalidArgument, "level must be in (0, 1)");
  // cluster -> (sum, count), grouped by stratum in sorted order
  std::map<std::string, std::map<std::string, std::pair<double, std::size_t>>> strata;
  double total = 0;
  for (const auto& v : values) {
    auto& c = strata[v.stratum][v.cluster];
    c.first += v.value;
    ++c.second;
    total += v.value;
  }
  std::vector<std::vector<std::pair<double, std::size_t>>> groups;
  BootstrapResult out;
  for (const auto& [name, clusters] : strata) {
    groups.emplace_back();
    for (const auto& [cid, sc] : clusters) groups.back().push_back(sc);
    out.n_clusters += clusters.size();
  }
  out.n_values = values.size();
  out.mean = total / static_cast<double>(values.size());
  out.level = level;
  out.draws.reserve(static_cast<std::size_t>(n_resamples));
  for (int i = 0; i < n_resamples; ++i) {
    Pcg64 rng(mix_seed(seed, static_cast<std::uint64_t>(i)), 17);
    double sum = 0;
    std::size_t count = 0;
    for (const auto& g : groups)
      for (std::size_t k = 0; k < g.size(); ++k) {
        const auto& pick = g[rng.bounded(g.size())];
        sum += pick.first;
        count += pick.second;
      }
    out.draws.push_back(sum / static_cast<double>(count));
  }
  out.ci_lo = quantile(out.draws, (1.0 - level) / 2.0);
  out.ci_hi = quantile(out.draws, (1.0 + level) / 2.0);
  return out;
}

struct FamilySummary {
  double mean = 0;
  double median = 0;
  double min = 0;
  double max = 0;
  std::size_t n_families = 0;
};

/// Unweighted mean over families, plus range and median.
inline FamilySummary family_balanced_mean(const std::map<std::string, double>& family_means) {
  XPATCH_CHECK(!family_means.empty(), ErrorCode::EmptyInput, "no families");
  std::vector<double> v;
  for (const auto& [k, m] : family_means) v.push_back(m);
  FamilySummary s;
  s.mean = mean_of(v);
  s.median = median_of(v);
  s.min = *std::min_element(v.begin(), v.end());
  s.max = *std::max_element(v.begin(), v.end());
  s.n_families = v.size();
  return s;
}

inline FamilySummary family_balanced_mean(const std::vector<double>& family_means) {
  std::map<std::string, double> m;
  for (std::size_t i = 0; i < family_means.size(); ++i) m[std::to_string(i)] = family_means[i];
  return family_balanced_mean(m);
}

struct NullResult {
  double observed = 0;
  double null_mean = 0;
  double null_q999 = 0;
  double p_value = 1;
  int n_perms = 0;
  std::vector<double> null_samples;
};

/// Sign-flip null for a mean of per-event interactions. Flipping an event's
/// label pair negates all four margins and so its interaction. Nulls tied with
/// the observed value count with probability 1/2 (seeded per draw).
inline NullResult label_swap_null(const std::vector<double>& event_interactions, int n_perms, std::uint64_t seed) {
  XPATCH_CHECK(!event_interactions.empty(), ErrorCode::EmptyInput, "no events");
  XPATCH_CHECK(n_perms >= 1, ErrorCode::InvalidArgument, "n_perms must be >= 1");
  NullResult r;
  r.observed = mean_of(event_interactions);
  r.n_perms = n_perms;
  r.null_samples.reserve(static_cast<std::size_t>(n_perms));
  double exceed = 0;
  double sum = 0;
  const auto n = static_cast<double>(event_interactions.size());
  for (int i = 0; i < n_perms; ++i) {
    Pcg64 rng(mix_seed(seed, static_cast<std::uint64_t>(i)), 23);
    double s = 0;
    for (double x : event_interactions) s += rng.coin() ? -x : x;
    const double m = s / n;
    r.null_samples.push_back(m);
    sum += m;
    if (m > r.observed || (m == r.observed && rng.coin())) exceed += 1;
  }
  r.null_mean = sum / n_perms;
  r.null_q999 = quantile(r.null_samples, 0.999);
  r.p_value = (1.0 + exceed) / (1.0 + n_perms);
  return r;
}

struct LinearFit {
  double intercept = 0;
  double slope = 0;
};

/// Ordinary least squares y = a + b x.
inline LinearFit ols(const std::vector<double>& x, const std::vector<double>& y) {
  XPATCH_CHECK(x.size() == y.size() && !x.empty(), ErrorCode::EmptyInput, "ols needs paired samples");
  const double mx = mean_of(x);
  const double my = mean_of(y);
  double sxy = 0, sxx = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
  }
  LinearFit f;
  f.slope = sxx > 0 ? sxy / sxx : 0.0;
  f.intercept = my - f.slope * mx;
  return f;
}

}  // namespace xpatch
