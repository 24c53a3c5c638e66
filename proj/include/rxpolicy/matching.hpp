#pragma once

#include <nlohmann/json.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "rxpolicy/cohort.hpp"
#include "rxpolicy/parallel.hpp"

namespace rxp {

// Linear-interpolation empirical quantile (type 7) of an ascending sample.
inline double quantile_sorted(std::span<const double> sorted, double q) {
  require(!sorted.empty(), ErrorKind::TooFewObservations, "quantile of an empty sample");
  const double h = (static_cast<double>(sorted.size()) - 1.0) * q;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (h - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

struct RiskStrata {
  std::vector<double> boundaries;  // strictly ascending; value <= boundary falls below it
  std::vector<std::string> warnings;

  std::size_t k() const { return boundaries.size() + 1; }

  std::size_t bucket_of(double value) const {
    return static_cast<std::size_t>(std::lower_bound(boundaries.begin(), boundaries.end(), value) -
                                    boundaries.begin());
  }

  nlohmann::json to_json() const { return {{"boundaries", boundaries}, {"k", k()}, {"warnings", warnings}}; }
};

// Cut points at the i/k quantiles. Ties that make cut points coincide (or
// leave the top bucket empty) collapse buckets and leave a warning.
inline RiskStrata make_strata(std::span<const double> sts_values, std::size_t k) {
  require(k >= 1, ErrorKind::InvalidArgument, "bucket count must be >= 1");
  require(sts_values.size() >= k, ErrorKind::TooFewPatients,
          std::to_string(sts_values.size()) + " patients cannot fill " + std::to_string(k) + " buckets");
  std::vector<double> sorted(sts_values.begin(), sts_values.end());
  std::sort(sorted.begin(), sorted.end());
  RiskStrata strata;
  for (std::size_t i = 1; i < k; ++i) {
    const double cut = quantile_sorted(sorted, static_cast<double>(i) / static_cast<double>(k));
    if (cut >= sorted.back()) continue;
    if (!strata.boundaries.empty() && cut <= strata.boundaries.back()) continue;
    strata.boundaries.push_back(cut);
  }
  if (strata.k() < k)
    strata.warnings.push_back("DegenerateStrata: tied risk values collapsed " + std::to_string(k) + " buckets into " +
                              std::to_string(strata.k()));
  return strata;
}

struct MatchedPair {
  std::string savr_id;
  std::string tavr_id;
  double distance = 0.0;
  std::size_t bucket = 0;
  std::size_t savr_row = 0;  // row in the input cohort
  std::size_t tavr_row = 0;
};

struct MatchOptions {
  std::string sts_feature = "sts_risk";
  std::vector<std::string> distance_features;  // empty: every feature except the STS column
  double prognostic_weight = 0.0;
};

struct MatchedCohort {
  RiskStrata strata;
  std::vector<MatchedPair> pairs;
  Cohort cohort;                           // matched patients, input order
  std::vector<std::size_t> empty_buckets;  // buckets with an empty arm (no pairs)
};

// Greedy 1:1 nearest-neighbour matching without replacement inside each risk
// bucket: the closest unmatched SAVR/TAVR pair is taken first. Squared
// distance = sum of standardized covariate gaps^2 + prognostic_weight * sum
// of risk-score gaps^2. Ties go to the lexicographically smaller
// (savr_id, tavr_id).
inline MatchedCohort match_within_strata(const Cohort& cohort, const RiskStrata& strata, const MatchOptions& options,
                                         std::span<const std::array<double, 2>> risk_scores = {}) {
  cohort.require_complete("match");
  require(options.prognostic_weight >= 0.0, ErrorKind::InvalidArgument, "prognostic weight must be >= 0");
  require(options.prognostic_weight == 0.0 || risk_scores.size() == cohort.size(), ErrorKind::InconsistentDimensions,
          "prognostic weight > 0 needs one risk-score row per patient");
  const std::size_t sts = cohort.schema.require_index(options.sts_feature);

  std::vector<std::size_t> dist_cols;
  if (options.distance_features.empty()) {
    for (std::size_t c = 0; c < cohort.num_features(); ++c)
      if (c != sts) dist_cols.push_back(c);
  } else {
    for (const auto& name : options.distance_features) dist_cols.push_back(cohort.schema.require_index(name));
  }
  std::vector<double> mean(dist_cols.size(), 0.0), sd(dist_cols.size(), 0.0);
  for (std::size_t j = 0; j < dist_cols.size(); ++j) {
    const auto col = cohort.column(dist_cols[j]);
    double s = 0.0;
    for (double v : col) s += v;
    mean[j] = s / static_cast<double>(col.size());
    double ss = 0.0;
    for (double v : col) ss += (v - mean[j]) * (v - mean[j]);
    sd[j] = col.size() > 1 ? std::sqrt(ss / static_cast<double>(col.size() - 1)) : 0.0;
  }

  auto distance_sq = [&](std::size_t a, std::size_t b) {
    double d = 0.0;
    for (std::size_t j = 0; j < dist_cols.size(); ++j) {
      if (!(sd[j] > 0.0)) continue;
      const double gap = (cohort.features(a, dist_cols[j]) - cohort.features(b, dist_cols[j])) / sd[j];
      d += gap * gap;
    }
    if (options.prognostic_weight > 0.0) {
      double r = 0.0;
      for (std::size_t t = 0; t < 2; ++t) {
        const double gap = risk_scores[a][t] - risk_scores[b][t];
        r += gap * gap;
      }
      d += options.prognostic_weight * r;
    }
    return d;
  };

  const std::size_t k = strata.k();
  std::vector<std::vector<std::size_t>> savr(k), tavr(k);
  for (std::size_t r = 0; r < cohort.size(); ++r) {
    const std::size_t b = strata.bucket_of(cohort.features(r, sts));
    (cohort.arms[r] == Arm::SAVR ? savr[b] : tavr[b]).push_back(r);
  }

  std::vector<std::vector<MatchedPair>> per_bucket(k);
  parallel_for(k, [&](std::size_t b) {
    struct Candidate {
      double d2;
      std::size_t s, t;
    };
    std::vector<Candidate> candidates;
    candidates.reserve(savr[b].size() * tavr[b].size());
    for (std::size_t s : savr[b])
      for (std::size_t t : tavr[b]) candidates.push_back({distance_sq(s, t), s, t});
    std::sort(candidates.begin(), candidates.end(), [&](const Candidate& x, const Candidate& y) {
      if (x.d2 != y.d2) return x.d2 < y.d2;
      return std::tie(cohort.ids[x.s], cohort.ids[x.t]) < std::tie(cohort.ids[y.s], cohort.ids[y.t]);
    });
    std::vector<bool> used(cohort.size(), false);
    const std::size_t target = std::min(savr[b].size(), tavr[b].size());
    for (const auto& c : candidates) {
      if (per_bucket[b].size() == target) break;
      if (used[c.s] || used[c.t]) continue;
      used[c.s] = used[c.t] = true;
      per_bucket[b].push_back({cohort.ids[c.s], cohort.ids[c.t], std::sqrt(c.d2), b, c.s, c.t});
    }
  });

  MatchedCohort out;
  out.strata = strata;
  std::vector<bool> keep(cohort.size(), false);
  for (std::size_t b = 0; b < k; ++b) {
    if (savr[b].empty() || tavr[b].empty()) out.empty_buckets.push_back(b);
    for (auto& p : per_bucket[b]) {
      keep[p.savr_row] = keep[p.tavr_row] = true;
      out.pairs.push_back(std::move(p));
    }
  }
  std::vector<std::size_t> rows;
  for (std::size_t r = 0; r < cohort.size(); ++r)
    if (keep[r]) rows.push_back(r);
  out.cohort = cohort.subset(rows);
  return out;
}

inline std::string pairs_to_csv(std::span<const MatchedPair> pairs) {
  std::ostringstream out;
  out << "savr_id,tavr_id,bucket,distance\n";
  for (const auto& p : pairs)
    out << p.savr_id << ',' << p.tavr_id << ',' << p.bucket << ',' << io::format_number(p.distance) << '\n';
  return out.str();
}

}  // namespace rxp
