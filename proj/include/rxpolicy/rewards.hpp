#pragma once

#include <array>
#include <filesystem>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "rxpolicy/cohort.hpp"
#include "rxpolicy/parallel.hpp"
#include "rxpolicy/survival_forest.hpp"

namespace rxp {

// Predicted horizon mortality per patient and arm; column 0 SAVR, 1 TAVR.
struct RewardsMatrix {
  std::vector<std::array<double, 2>> gamma;
  double horizon_days = kDefaultHorizonDays;
  std::pair<std::string, std::string> model_ids;

  std::size_t size() const { return gamma.size(); }
  double operator()(std::size_t i, Arm arm) const { return gamma[i][index(arm)]; }

  std::array<double, 2> column_sums() const {
    std::array<double, 2> s{0.0, 0.0};
    for (const auto& row : gamma) {
      s[0] += row[0];
      s[1] += row[1];
    }
    return s;
  }
};

inline RewardsMatrix estimate_rewards(const Cohort& cohort, const SurvivalForest& forest_savr,
                                      const SurvivalForest& forest_tavr, double horizon_days = kDefaultHorizonDays) {
  std::vector<std::string> names;
  for (const auto& c : cohort.schema.columns) names.push_back(c.name);
  require(forest_savr.feature_names == names && forest_tavr.feature_names == names, ErrorKind::SchemaMismatch,
          "forest features differ from the cohort schema");
  cohort.require_complete("estimate_rewards");
  RewardsMatrix rewards;
  rewards.horizon_days = horizon_days;
  rewards.model_ids = {forest_savr.fingerprint(), forest_tavr.fingerprint()};
  rewards.gamma.resize(cohort.size());
  parallel_for(cohort.size(), [&](std::size_t i) {
    const auto x = cohort.features.row(i);
    rewards.gamma[i] = {forest_savr.predict_risk(x, horizon_days), forest_tavr.predict_risk(x, horizon_days)};
  });
  return rewards;
}

struct ArmForests {
  SurvivalForest savr;
  SurvivalForest tavr;
};

// One forest per arm, each trained on that arm's patients only. Seeds derive
// from params.seed and the arm name; weights (optional) are per cohort row.
inline ArmForests fit_arm_forests(const Cohort& cohort, const ForestParams& params,
                                  std::span<const double> weights = {}) {
  require(weights.empty() || weights.size() == cohort.size(), ErrorKind::InconsistentDimensions,
          "one weight per patient");
  auto fit_arm = [&](Arm arm) {
    std::vector<std::size_t> rows;
    for (std::size_t i = 0; i < cohort.size(); ++i)
      if (cohort.arms[i] == arm) rows.push_back(i);
    require(!rows.empty(), ErrorKind::EmptyArm, std::string("no ") + std::string(to_string(arm)) + " patients");
    std::vector<double> w;
    if (!weights.empty())
      for (std::size_t r : rows) w.push_back(weights[r]);
    auto p = params;
    p.seed = derive_seed(params.seed, arm == Arm::SAVR ? "forest-savr" : "forest-tavr");
    return fit_forest(cohort.subset(rows), p, w);
  };
  return {fit_arm(Arm::SAVR), fit_arm(Arm::TAVR)};
}

// t* = argmin over arms of the column sum; ties go to SAVR.
inline Arm best_uniform_arm(const RewardsMatrix& rewards) {
  require(rewards.size() >= 1, ErrorKind::InvalidArgument, "rewards matrix is empty");
  const auto sums = rewards.column_sums();
  return sums[1] < sums[0] ? Arm::TAVR : Arm::SAVR;
}

inline std::string rewards_to_csv(const RewardsMatrix& rewards, std::span<const std::string> ids) {
  require(ids.size() == rewards.size(), ErrorKind::InconsistentDimensions, "one id per rewards row");
  std::ostringstream out;
  out << "id,risk_savr,risk_tavr\n";
  for (std::size_t i = 0; i < rewards.size(); ++i)
    out << ids[i] << ',' << io::format_number(rewards.gamma[i][0]) << ',' << io::format_number(rewards.gamma[i][1])
        << '\n';
  return out.str();
}

// Reads rewards.csv and aligns it to `ids` (every id must be present).
inline RewardsMatrix load_rewards(const std::filesystem::path& path, std::span<const std::string> ids,
                                  double horizon_days = kDefaultHorizonDays) {
  const auto table = io::read_csv(path);
  const auto id_col = table.column("id");
  const auto s_col = table.column("risk_savr");
  const auto t_col = table.column("risk_tavr");
  require(id_col && s_col && t_col, ErrorKind::MissingColumn, path.string() + ": need id,risk_savr,risk_tavr");
  std::unordered_map<std::string, std::array<double, 2>> by_id;
  for (std::size_t r = 0; r < table.rows.size(); ++r) {
    const auto s = io::parse_double(table.rows[r][*s_col]);
    const auto t = io::parse_double(table.rows[r][*t_col]);
    require(s && t && *s >= 0.0 && *s <= 1.0 && *t >= 0.0 && *t <= 1.0, ErrorKind::UnparsableCell,
            path.string() + " row " + std::to_string(r + 1) + ": risks must be numbers in [0,1]");
    by_id[table.rows[r][*id_col]] = {*s, *t};
  }
  RewardsMatrix rewards;
  rewards.horizon_days = horizon_days;
  for (const auto& id : ids) {
    auto it = by_id.find(id);
    require(it != by_id.end(), ErrorKind::InconsistentDimensions, path.string() + ": no rewards row for '" + id + "'");
    rewards.gamma.push_back(it->second);
  }
  return rewards;
}

}  // namespace rxp
