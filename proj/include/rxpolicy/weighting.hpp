#pragma once

#include <algorithm>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "rxpolicy/cohort.hpp"
#include "rxpolicy/evaluation.hpp"
#include "rxpolicy/parallel.hpp"
#include "rxpolicy/policy_tree.hpp"
#include "rxpolicy/rewards.hpp"
#include "rxpolicy/survival_forest.hpp"

namespace rxp {

struct WeightVector {
  std::vector<double> weights;
  double w = 1.0;
  Arm t_star = Arm::SAVR;
};

// Upweights the outcome-atypical patients: bad outcomes on t* and good
// outcomes on the other arm get w, everyone else (indeterminate included) 1.
inline WeightVector assign_weights(std::span<const Label> labels, std::span<const Arm> arms, Arm t_star, double w) {
  require(labels.size() == arms.size(), ErrorKind::InconsistentDimensions, "labels and arms differ in length");
  require(w >= 1.0 && std::isfinite(w), ErrorKind::InvalidArgument, "weight multiplier must be >= 1");
  WeightVector out;
  out.w = w;
  out.t_star = t_star;
  out.weights.assign(labels.size(), 1.0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const bool on_best = arms[i] == t_star;
    if ((on_best && labels[i] == Label::Bad) || (!on_best && labels[i] == Label::Good)) out.weights[i] = w;
  }
  return out;
}

enum class SweepMode {
  TreeOnly,         // weights enter the tree objective; Gamma fixed
  ForestsAndTree,   // forests refit with weighted bootstrap, then the tree
};

inline std::optional<SweepMode> parse_sweep_mode(std::string_view text) {
  if (text == "tree") return SweepMode::TreeOnly;
  if (text == "forests") return SweepMode::ForestsAndTree;
  return std::nullopt;
}

inline std::vector<double> default_weight_grid() {
  std::vector<double> grid;
  for (int i = 0; i <= 10; ++i) grid.push_back(detail::round12(1.0 + 0.2 * i));
  return grid;
}

struct SweepConfig {
  std::vector<double> grid = default_weight_grid();
  SweepMode mode = SweepMode::TreeOnly;
  PolicyTreeParams tree;
  ForestParams forest;  // ForestsAndTree only
  double horizon_days = kDefaultHorizonDays;
};

struct SweepRow {
  double w = 1.0;
  double sensitivity = 0.0;
  double specificity = 0.0;
  double mean_score = 0.0;
  double non_t_star_fraction = 0.0;
  std::string tree_fingerprint;
};

struct SweepResult {
  std::vector<SweepRow> rows;
  double selected_w = 1.0;
  Arm t_star = Arm::SAVR;
  std::vector<PolicyTree> trees;  // one per grid point
  std::vector<RewardsMatrix> rewards;  // per grid point in ForestsAndTree mode, else empty

  const PolicyTree& selected_tree() const {
    for (std::size_t i = 0; i < rows.size(); ++i)
      if (rows[i].w == selected_w) return trees[i];
    return trees.front();
  }
};

// The argmax of mean(sensitivity, specificity); ties keep the smaller w.
inline double select_weight(std::span<const SweepRow> rows) {
  require(!rows.empty(), ErrorKind::InvalidArgument, "empty sweep");
  std::size_t best = 0;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const bool better = rows[i].mean_score > rows[best].mean_score ||
                        (rows[i].mean_score == rows[best].mean_score && rows[i].w < rows[best].w);
    if (better) best = i;
  }
  return rows[best].w;
}

// Retrains the policy tree for every w and scores it on the training
// cohort. t* comes from the unweighted Gamma. Every grid point uses the same
// tree and forest seeds, so w=1 reproduces the unweighted fit.
inline SweepResult weight_sweep(const Cohort& cohort, const RewardsMatrix& rewards, std::span<const Label> labels,
                                const SweepConfig& config) {
  require(!config.grid.empty(), ErrorKind::InvalidArgument, "weight grid is empty");
  for (std::size_t i = 0; i < config.grid.size(); ++i) {
    require(config.grid[i] >= 1.0, ErrorKind::InvalidArgument, "weight grid values must be >= 1");
    require(i == 0 || config.grid[i] > config.grid[i - 1], ErrorKind::InvalidArgument,
            "weight grid must be strictly ascending");
  }
  require(labels.size() == cohort.size() && rewards.size() == cohort.size(), ErrorKind::InconsistentDimensions,
          "cohort, labels and rewards differ in length");

  SweepResult result;
  result.t_star = best_uniform_arm(rewards);
  const std::size_t g = config.grid.size();
  result.rows.resize(g);
  result.trees.resize(g);
  if (config.mode == SweepMode::ForestsAndTree) result.rewards.resize(g);

  // Grid points run one after another; each fit is parallel internally.
  for (std::size_t k = 0; k < g; ++k) {
    const auto weights = assign_weights(labels, cohort.arms, result.t_star, config.grid[k]);
    const RewardsMatrix* gamma = &rewards;
    if (config.mode == SweepMode::ForestsAndTree) {
      const auto forests = fit_arm_forests(cohort, config.forest, weights.weights);
      result.rewards[k] = estimate_rewards(cohort, forests.savr, forests.tavr, config.horizon_days);
      gamma = &result.rewards[k];
    }
    result.trees[k] = fit_policy_tree(cohort, *gamma, weights.weights, config.tree);
    const auto prescribed = prescribe_all(result.trees[k], cohort);
    auto& row = result.rows[k];
    row.w = config.grid[k];
    row.sensitivity = sensitivity(prescribed, cohort.arms, labels);
    row.specificity = specificity(prescribed, cohort.arms, labels);
    row.mean_score = 0.5 * (row.sensitivity + row.specificity);
    row.non_t_star_fraction =
        static_cast<double>(std::count_if(prescribed.begin(), prescribed.end(),
                                          [&](Arm a) { return a != result.t_star; })) /
        static_cast<double>(prescribed.size());
    row.tree_fingerprint = result.trees[k].fingerprint();
  }
  result.selected_w = select_weight(result.rows);
  return result;
}

inline std::string sweep_to_csv(const SweepResult& result) {
  std::ostringstream out;
  out << "w,sensitivity,specificity,mean_score,non_t_star_fraction,tree_fingerprint\n";
  for (const auto& r : result.rows)
    out << io::format_number(r.w) << ',' << io::format_number(r.sensitivity) << ','
        << io::format_number(r.specificity) << ',' << io::format_number(r.mean_score) << ','
        << io::format_number(r.non_t_star_fraction) << ',' << r.tree_fingerprint << '\n';
  return out.str();
}

}  // namespace rxp
