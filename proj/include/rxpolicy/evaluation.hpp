#pragma once

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "rxpolicy/cohort.hpp"
#include "rxpolicy/matching.hpp"
#include "rxpolicy/parallel.hpp"
#include "rxpolicy/policy_tree.hpp"
#include "rxpolicy/rewards.hpp"

namespace rxp {

namespace detail {
inline void check_lengths(std::size_t a, std::size_t b, std::size_t c = 0, bool three = false) {
  require(a == b && (!three || a == c), ErrorKind::InconsistentDimensions, "metric inputs differ in length");
}
}  // namespace detail

// Share of bad-outcome patients whose prescription differs from what they
// received. Indeterminate labels are ignored.
inline double sensitivity(std::span<const Arm> prescribed, std::span<const Arm> received,
                          std::span<const Label> labels) {
  detail::check_lengths(prescribed.size(), received.size(), labels.size(), true);
  std::size_t bad = 0, changed = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] != Label::Bad) continue;
    ++bad;
    changed += prescribed[i] != received[i];
  }
  require(bad > 0, ErrorKind::EmptyBadSet, "no bad-outcome patients");
  return static_cast<double>(changed) / static_cast<double>(bad);
}

// Share of good-outcome patients whose prescription matches what they
// received.
inline double specificity(std::span<const Arm> prescribed, std::span<const Arm> received,
                          std::span<const Label> labels) {
  detail::check_lengths(prescribed.size(), received.size(), labels.size(), true);
  std::size_t good = 0, kept = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] != Label::Good) continue;
    ++good;
    kept += prescribed[i] == received[i];
  }
  require(good > 0, ErrorKind::EmptyGoodSet, "no good-outcome patients");
  return static_cast<double>(kept) / static_cast<double>(good);
}

inline double concordance(std::span<const Arm> prescribed, std::span<const Arm> received) {
  detail::check_lengths(prescribed.size(), received.size());
  require(!prescribed.empty(), ErrorKind::InvalidArgument, "concordance of an empty cohort");
  std::size_t same = 0;
  for (std::size_t i = 0; i < prescribed.size(); ++i) same += prescribed[i] == received[i];
  return static_cast<double>(same) / static_cast<double>(prescribed.size());
}

inline double policy_value(const RewardsMatrix& rewards, std::span<const Arm> policy) {
  detail::check_lengths(rewards.size(), policy.size());
  require(!policy.empty(), ErrorKind::InvalidArgument, "policy value of an empty cohort");
  double v = 0.0;
  for (std::size_t i = 0; i < policy.size(); ++i) v += rewards(i, policy[i]);
  return v / static_cast<double>(policy.size());
}

inline double relative_improvement(double real_value, double policy_value) {
  require(real_value > 0.0, ErrorKind::ZeroRealValue, "real-life policy value is zero");
  return 100.0 * (real_value - policy_value) / real_value;
}

inline std::vector<Arm> row_argmin_policy(const RewardsMatrix& rewards) {
  std::vector<Arm> out(rewards.size());
  for (std::size_t i = 0; i < rewards.size(); ++i)
    out[i] = detail::cheaper_arm(rewards.gamma[i][0], rewards.gamma[i][1]);
  return out;
}

// Expected per-patient Gamma under a fair coin, averaged over `redraws`
// seeded draws.
inline std::vector<double> random_policy_values(const RewardsMatrix& rewards, std::uint64_t seed,
                                                std::size_t redraws = 1000) {
  Rng rng(derive_seed(seed, "random-baseline"));
  std::bernoulli_distribution coin(0.5);
  std::vector<double> acc(rewards.size(), 0.0);
  for (std::size_t d = 0; d < redraws; ++d)
    for (std::size_t i = 0; i < rewards.size(); ++i) acc[i] += rewards.gamma[i][coin(rng) ? 1 : 0];
  for (auto& a : acc) a /= static_cast<double>(redraws);
  return acc;
}

struct PolicyImprovements {
  double all_savr = 0.0;
  double all_tavr = 0.0;
  double random = 0.0;
  double policy = 0.0;
  double row_argmin = 0.0;  // pointwise-best arm on Gamma, the ceiling for any policy
  double real_value = 0.0;
};

inline PolicyImprovements policy_improvements(const RewardsMatrix& rewards, std::span<const Arm> received,
                                              std::span<const Arm> prescribed, std::uint64_t seed,
                                              std::size_t random_redraws = 1000) {
  detail::check_lengths(rewards.size(), received.size(), prescribed.size(), true);
  PolicyImprovements out;
  out.real_value = policy_value(rewards, received);
  const std::vector<Arm> all_s(rewards.size(), Arm::SAVR), all_t(rewards.size(), Arm::TAVR);
  out.all_savr = relative_improvement(out.real_value, policy_value(rewards, all_s));
  out.all_tavr = relative_improvement(out.real_value, policy_value(rewards, all_t));
  const auto rnd = random_policy_values(rewards, seed, random_redraws);
  double rv = 0.0;
  for (double v : rnd) rv += v;
  out.random = relative_improvement(out.real_value, rv / static_cast<double>(rnd.size()));
  out.policy = relative_improvement(out.real_value, policy_value(rewards, prescribed));
  out.row_argmin = relative_improvement(out.real_value, policy_value(rewards, row_argmin_policy(rewards)));
  return out;
}

struct LeafAnalysis {
  double improvement = 0.0;  // percent
  double observed_rate = 0.0;
  double imputed_rate = 0.0;
  std::vector<std::size_t> fallback_leaves;  // leaves with no reference patients on the prescribed arm
};

// Model-free check: a patient whose prescription matches reality keeps the
// observed outcome; otherwise they get the bad-rate of leaf-mates who
// received the prescribed arm. Indeterminate patients are ignored.
inline LeafAnalysis leaf_level_analysis(std::span<const std::size_t> leaves, std::span<const Arm> prescribed,
                                        std::span<const Arm> received, std::span<const Label> labels) {
  detail::check_lengths(leaves.size(), prescribed.size(), received.size(), true);
  detail::check_lengths(leaves.size(), labels.size());
  struct Rate {
    std::size_t bad = 0, n = 0;
  };
  std::map<std::pair<std::size_t, Arm>, Rate> rates;
  for (std::size_t i = 0; i < leaves.size(); ++i) {
    if (labels[i] == Label::Indeterminate) continue;
    auto& r = rates[{leaves[i], received[i]}];
    ++r.n;
    r.bad += labels[i] == Label::Bad;
  }
  LeafAnalysis out;
  double observed = 0.0, imputed = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < leaves.size(); ++i) {
    if (labels[i] == Label::Indeterminate) continue;
    const double y = labels[i] == Label::Bad ? 1.0 : 0.0;
    ++n;
    observed += y;
    if (prescribed[i] == received[i]) {
      imputed += y;
      continue;
    }
    auto it = rates.find({leaves[i], prescribed[i]});
    if (it == rates.end() || it->second.n == 0) {
      imputed += y;
      if (std::find(out.fallback_leaves.begin(), out.fallback_leaves.end(), leaves[i]) == out.fallback_leaves.end())
        out.fallback_leaves.push_back(leaves[i]);
      continue;
    }
    imputed += static_cast<double>(it->second.bad) / static_cast<double>(it->second.n);
  }
  std::sort(out.fallback_leaves.begin(), out.fallback_leaves.end());
  require(n > 0, ErrorKind::ZeroObservedRate, "no determinate patients for leaf analysis");
  out.observed_rate = observed / static_cast<double>(n);
  out.imputed_rate = imputed / static_cast<double>(n);
  require(out.observed_rate > 0.0, ErrorKind::ZeroObservedRate, "observed bad-outcome rate is zero");
  out.improvement = 100.0 * (out.observed_rate - out.imputed_rate) / out.observed_rate;
  return out;
}

struct ConfidenceInterval {
  double low = 0.0;
  double high = 0.0;
  std::size_t skipped = 0;
};

// Percentile bootstrap. `statistic` receives resampled patient indices and
// returns nullopt for a degenerate replicate; those are skipped and must stay
// under 1% of n_boot.
inline ConfidenceInterval bootstrap_ci(std::size_t n,
                                       const std::function<std::optional<double>(std::span<const std::size_t>)>& statistic,
                                       std::size_t n_boot, double level, std::uint64_t seed) {
  require(n_boot >= 100, ErrorKind::InvalidArgument, "n_boot must be >= 100");
  require(level > 0.0 && level < 1.0, ErrorKind::InvalidArgument, "level must be in (0,1)");
  require(n >= 1, ErrorKind::InvalidArgument, "bootstrap of an empty sample");
  std::vector<std::optional<double>> values(n_boot);
  parallel_for(n_boot, [&](std::size_t b) {
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(b)));
    std::uniform_int_distribution<std::size_t> pick(0, n - 1);
    std::vector<std::size_t> idx(n);
    for (auto& i : idx) i = pick(rng);
    values[b] = statistic(idx);
  });
  std::vector<double> kept;
  for (const auto& v : values)
    if (v && std::isfinite(*v)) kept.push_back(*v);
  ConfidenceInterval ci;
  ci.skipped = n_boot - kept.size();
  require(ci.skipped * 100 < n_boot, ErrorKind::DegenerateResample,
          std::to_string(ci.skipped) + " of " + std::to_string(n_boot) + " bootstrap replicates were degenerate");
  std::sort(kept.begin(), kept.end());
  const double alpha = (1.0 - level) / 2.0;
  ci.low = quantile_sorted(kept, alpha);
  ci.high = quantile_sorted(kept, 1.0 - alpha);
  return ci;
}

struct Estimate {
  double value = 0.0;
  double ci_low = 0.0;
  double ci_high = 0.0;
};

struct EvalOptions {
  std::size_t n_boot = 1000;
  double level = 0.95;
  std::uint64_t seed = 0;
  std::size_t random_redraws = 1000;
};

struct EvalReport {
  Estimate sensitivity, specificity, concordance;
  std::map<std::string, Estimate> baseline_improvements;  // all_savr, all_tavr, random, policy
  Estimate row_argmin_improvement;
  Estimate leaf_improvement;
  std::vector<std::size_t> leaf_fallbacks;
  std::size_t n_good = 0, n_bad = 0, n_indeterminate = 0;
  std::uint64_t seed = 0;
  std::size_t n_boot = 0;
  double level = 0.95;

  nlohmann::json to_json() const {
    auto est = [](const Estimate& e) {
      return nlohmann::json{{"estimate", detail::round12(e.value)},
                            {"ci_low", detail::round12(e.ci_low)},
                            {"ci_high", detail::round12(e.ci_high)}};
    };
    nlohmann::json base = nlohmann::json::object();
    for (const auto& [k, v] : baseline_improvements) base[k] = est(v);
    return {{"sensitivity", est(sensitivity)},
            {"specificity", est(specificity)},
            {"concordance", est(concordance)},
            {"improvement_pct", base},
            {"row_argmin_improvement_pct", est(row_argmin_improvement)},
            {"leaf_improvement_pct", est(leaf_improvement)},
            {"leaf_fallbacks", leaf_fallbacks},
            {"n_good", n_good},
            {"n_bad", n_bad},
            {"n_indeterminate", n_indeterminate},
            {"seed", seed},
            {"n_boot", n_boot},
            {"level", level}};
  }

  // metric,estimate,ci_low,ci_high in the three-panel layout.
  std::string to_csv() const {
    std::ostringstream out;
    out << "panel,metric,estimate,ci_low,ci_high\n";
    auto row = [&](const char* panel, const std::string& name, const Estimate& e) {
      out << panel << ',' << name << ',' << io::format_number(e.value) << ',' << io::format_number(e.ci_low) << ','
          << io::format_number(e.ci_high) << '\n';
    };
    row("A", "sensitivity", sensitivity);
    row("A", "specificity", specificity);
    row("A", "concordance", concordance);
    for (const char* k : {"all_savr", "all_tavr", "random", "policy"}) {
      auto it = baseline_improvements.find(k);
      if (it != baseline_improvements.end()) row("B", k, it->second);
    }
    row("B", "row_argmin", row_argmin_improvement);
    row("C", "leaf_improvement", leaf_improvement);
    return out.str();
  }
};

// Full evaluation of fixed prescriptions against observed labels and Gamma.
// Bootstrap resamples patients; the tree, leaf membership and Gamma stay
// fixed.
inline EvalReport evaluate_policy(const RewardsMatrix& rewards, std::span<const Arm> received,
                                  std::span<const Arm> prescribed, std::span<const std::size_t> leaves,
                                  std::span<const Label> labels, const EvalOptions& options) {
  const std::size_t n = received.size();
  detail::check_lengths(n, prescribed.size(), labels.size(), true);
  detail::check_lengths(n, rewards.size(), leaves.size(), true);

  EvalReport report;
  report.seed = options.seed;
  report.n_boot = options.n_boot;
  report.level = options.level;
  for (Label l : labels) {
    if (l == Label::Good) ++report.n_good;
    else if (l == Label::Bad) ++report.n_bad;
    else ++report.n_indeterminate;
  }

  const auto random_values = random_policy_values(rewards, options.seed, options.random_redraws);
  const auto argmin = row_argmin_policy(rewards);

  auto gather_arms = [](std::span<const Arm> src, std::span<const std::size_t> idx) {
    std::vector<Arm> out(idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i) out[i] = src[idx[i]];
    return out;
  };
  auto gather_labels = [&](std::span<const std::size_t> idx) {
    std::vector<Label> out(idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i) out[i] = labels[idx[i]];
    return out;
  };
  auto guarded = [](auto&& fn) -> std::optional<double> {
    try {
      return fn();
    } catch (const Error& e) {
      if (e.category() == ErrorCategory::Numerical) return std::nullopt;
      throw;
    }
  };

  std::vector<std::size_t> identity(n);
  std::iota(identity.begin(), identity.end(), std::size_t{0});

  std::uint64_t stream = 0;
  auto estimate = [&](const std::function<double(std::span<const std::size_t>)>& stat) {
    Estimate e;
    e.value = stat(identity);
    const auto ci = bootstrap_ci(
        n, [&](std::span<const std::size_t> idx) { return guarded([&] { return stat(idx); }); }, options.n_boot,
        options.level, derive_seed(options.seed, ++stream));
    e.ci_low = ci.low;
    e.ci_high = ci.high;
    return e;
  };

  report.sensitivity = estimate([&](std::span<const std::size_t> idx) {
    return sensitivity(gather_arms(prescribed, idx), gather_arms(received, idx), gather_labels(idx));
  });
  report.specificity = estimate([&](std::span<const std::size_t> idx) {
    return specificity(gather_arms(prescribed, idx), gather_arms(received, idx), gather_labels(idx));
  });
  report.concordance = estimate([&](std::span<const std::size_t> idx) {
    return concordance(gather_arms(prescribed, idx), gather_arms(received, idx));
  });

  auto improvement_of = [&](auto value_of) {
    return [&, value_of](std::span<const std::size_t> idx) {
      double real = 0.0, pol = 0.0;
      for (std::size_t i : idx) {
        real += rewards(i, received[i]);
        pol += value_of(i);
      }
      return relative_improvement(real / static_cast<double>(idx.size()), pol / static_cast<double>(idx.size()));
    };
  };
  report.baseline_improvements["all_savr"] =
      estimate(improvement_of([&](std::size_t i) { return rewards(i, Arm::SAVR); }));
  report.baseline_improvements["all_tavr"] =
      estimate(improvement_of([&](std::size_t i) { return rewards(i, Arm::TAVR); }));
  report.baseline_improvements["random"] = estimate(improvement_of([&](std::size_t i) { return random_values[i]; }));
  report.baseline_improvements["policy"] =
      estimate(improvement_of([&](std::size_t i) { return rewards(i, prescribed[i]); }));
  report.row_argmin_improvement = estimate(improvement_of([&](std::size_t i) { return rewards(i, argmin[i]); }));

  report.leaf_fallbacks = leaf_level_analysis(leaves, prescribed, received, labels).fallback_leaves;
  report.leaf_improvement = estimate([&](std::span<const std::size_t> idx) {
    std::vector<std::size_t> lv(idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i) lv[i] = leaves[idx[i]];
    return leaf_level_analysis(lv, gather_arms(prescribed, idx), gather_arms(received, idx), gather_labels(idx))
        .improvement;
  });
  return report;
}

inline EvalReport evaluate_tree(const PolicyTree& tree, const Cohort& cohort, const RewardsMatrix& rewards,
                                std::span<const Label> labels, const EvalOptions& options) {
  const auto leaves = route(tree, cohort);
  std::vector<Arm> prescribed(leaves.size());
  for (std::size_t i = 0; i < leaves.size(); ++i) prescribed[i] = tree.nodes[leaves[i]].prescription;
  return evaluate_policy(rewards, cohort.arms, prescribed, leaves, labels, options);
}

}  // namespace rxp
