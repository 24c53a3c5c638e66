#pragma once

#include <boost/math/distributions/normal.hpp>
#include <boost/math/distributions/students_t.hpp>

#include <algorithm>
#include <cmath>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "rxpolicy/cohort.hpp"

namespace rxp {

struct SampleSummary {
  std::size_t n = 0;
  double mean = 0.0;
  double sd = 0.0;  // n-1 denominator
};

inline SampleSummary summarize(std::span<const double> values) {
  SampleSummary s;
  s.n = values.size();
  if (s.n == 0) return s;
  double sum = 0.0;
  for (double v : values) sum += v;
  s.mean = sum / static_cast<double>(s.n);
  if (s.n > 1) {
    double ss = 0.0;
    for (double v : values) ss += (v - s.mean) * (v - s.mean);
    s.sd = std::sqrt(ss / static_cast<double>(s.n - 1));
  }
  return s;
}

// |mean_a - mean_b| / sqrt((var_a + var_b) / 2); nullopt when the pooled
// variance is zero (reported as "--").
inline std::optional<double> smd_from_moments(double mean_a, double var_a, double mean_b, double var_b) {
  const double pooled = 0.5 * (var_a + var_b);
  if (!(pooled > 0.0)) return std::nullopt;
  return std::fabs(mean_a - mean_b) / std::sqrt(pooled);
}

inline std::optional<double> smd_from_summary(double mean_a, double sd_a, double mean_b, double sd_b) {
  return smd_from_moments(mean_a, sd_a * sd_a, mean_b, sd_b * sd_b);
}

inline std::optional<double> compute_smd(std::span<const double> a, std::span<const double> b, FeatureKind kind) {
  require(!a.empty() && !b.empty(), ErrorKind::TooFewObservations, "SMD needs a nonempty sample per arm");
  const auto sa = summarize(a);
  const auto sb = summarize(b);
  if (kind == FeatureKind::Binary)
    return smd_from_moments(sa.mean, sa.mean * (1.0 - sa.mean), sb.mean, sb.mean * (1.0 - sb.mean));
  return smd_from_moments(sa.mean, sa.sd * sa.sd, sb.mean, sb.sd * sb.sd);
}

// Two-sided. Continuous: Welch t-test with Welch-Satterthwaite df.
// Binary: pooled two-proportion z-test.
inline double compute_p_value(std::span<const double> a, std::span<const double> b, FeatureKind kind) {
  require(a.size() >= 2 && b.size() >= 2, ErrorKind::TooFewObservations,
          "p-value needs at least 2 observations per arm");
  const auto sa = summarize(a);
  const auto sb = summarize(b);
  const double na = static_cast<double>(sa.n);
  const double nb = static_cast<double>(sb.n);
  const double diff = sa.mean - sb.mean;
  if (kind == FeatureKind::Binary) {
    const double pooled = (sa.mean * na + sb.mean * nb) / (na + nb);
    const double se = std::sqrt(pooled * (1.0 - pooled) * (1.0 / na + 1.0 / nb));
    if (!(se > 0.0)) return diff == 0.0 ? 1.0 : 0.0;
    const double z = std::fabs(diff) / se;
    return std::clamp(2.0 * boost::math::cdf(boost::math::complement(boost::math::normal_distribution<>(), z)), 0.0,
                      1.0);
  }
  const double va = sa.sd * sa.sd / na;
  const double vb = sb.sd * sb.sd / nb;
  const double se = std::sqrt(va + vb);
  if (!(se > 0.0)) return diff == 0.0 ? 1.0 : 0.0;
  const double t = std::fabs(diff) / se;
  const double df = (va + vb) * (va + vb) / (va * va / (na - 1.0) + vb * vb / (nb - 1.0));
  const boost::math::students_t_distribution<> dist(df);
  return std::clamp(2.0 * boost::math::cdf(boost::math::complement(dist, t)), 0.0, 1.0);
}

struct BalanceRow {
  std::string feature;
  FeatureKind kind = FeatureKind::Continuous;
  double mean_savr = 0.0;
  double mean_tavr = 0.0;
  double sd_savr = 0.0;
  double sd_tavr = 0.0;
  std::optional<double> smd;
  std::optional<double> p_value;
};

struct BalanceReport {
  std::vector<BalanceRow> rows;  // descending SMD, undefined SMDs last
  double threshold = 0.1;
  std::size_t n_savr = 0;
  std::size_t n_tavr = 0;

  const BalanceRow* find(std::string_view feature) const {
    for (const auto& r : rows)
      if (r.feature == feature) return &r;
    return nullptr;
  }

  double max_smd() const {
    double m = 0.0;
    for (const auto& r : rows)
      if (r.smd) m = std::max(m, *r.smd);
    return m;
  }

  std::size_t count_above_threshold() const {
    return static_cast<std::size_t>(
        std::count_if(rows.begin(), rows.end(), [&](const BalanceRow& r) { return r.smd && *r.smd >= threshold; }));
  }
};

inline BalanceReport balance_report(const Cohort& cohort, double threshold = 0.1) {
  BalanceReport report;
  report.threshold = threshold;
  for (Arm a : cohort.arms) (a == Arm::SAVR ? report.n_savr : report.n_tavr)++;
  require(report.n_savr > 0 && report.n_tavr > 0, ErrorKind::EmptyArm, "balance report needs both arms populated");

  for (std::size_t c = 0; c < cohort.num_features(); ++c) {
    std::vector<double> savr, tavr;
    for (std::size_t r = 0; r < cohort.size(); ++r) {
      if (cohort.features.is_missing(r, c)) continue;
      (cohort.arms[r] == Arm::SAVR ? savr : tavr).push_back(cohort.features(r, c));
    }
    BalanceRow row;
    row.feature = cohort.schema.columns[c].name;
    row.kind = cohort.schema.columns[c].kind;
    const auto ss = summarize(savr);
    const auto st = summarize(tavr);
    row.mean_savr = ss.mean;
    row.mean_tavr = st.mean;
    row.sd_savr = ss.sd;
    row.sd_tavr = st.sd;
    if (!savr.empty() && !tavr.empty()) row.smd = compute_smd(savr, tavr, row.kind);
    if (savr.size() >= 2 && tavr.size() >= 2) row.p_value = compute_p_value(savr, tavr, row.kind);
    report.rows.push_back(std::move(row));
  }
  std::stable_sort(report.rows.begin(), report.rows.end(), [](const BalanceRow& a, const BalanceRow& b) {
    if (a.smd.has_value() != b.smd.has_value()) return a.smd.has_value();
    return a.smd && *a.smd > *b.smd;
  });
  return report;
}

namespace detail {
inline std::string opt_number(const std::optional<double>& v) { return v ? io::format_number(*v) : "--"; }
}  // namespace detail

inline std::string balance_to_csv(const BalanceReport& report) {
  std::ostringstream out;
  out << "feature,kind,mean_savr,sd_savr,mean_tavr,sd_tavr,smd,p_value\n";
  for (const auto& r : report.rows) {
    out << r.feature << ',' << to_string(r.kind) << ',' << io::format_number(r.mean_savr) << ','
        << io::format_number(r.sd_savr) << ',' << io::format_number(r.mean_tavr) << ','
        << io::format_number(r.sd_tavr) << ',' << detail::opt_number(r.smd) << ',' << detail::opt_number(r.p_value)
        << '\n';
  }
  return out.str();
}

// Love-plot data: one line per feature in pre-match order; p_value is the
// pre-match test.
inline std::string love_plot_csv(const BalanceReport& pre, const BalanceReport& post) {
  std::ostringstream out;
  out << "feature,smd_pre,smd_post,p_value\n";
  for (const auto& r : pre.rows) {
    const BalanceRow* after = post.find(r.feature);
    out << r.feature << ',' << detail::opt_number(r.smd) << ','
        << (after ? detail::opt_number(after->smd) : std::string("--")) << ',' << detail::opt_number(r.p_value)
        << '\n';
  }
  return out.str();
}

}  // namespace rxp
