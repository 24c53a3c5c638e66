#pragma once

#include <nlohmann/json.hpp>

#include <array>
#include <cmath>
#include <filesystem>
#include <limits>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "rxpolicy/cohort.hpp"
#include "rxpolicy/io.hpp"
#include "rxpolicy/parallel.hpp"
#include "rxpolicy/policy_tree.hpp"

namespace rxp {

// Fires when x[feature] > threshold and multiplies the per-arm hazards.
struct SubgroupRule {
  std::string feature;
  double threshold = 0.0;
  double hazard_multiplier_savr = 1.0;
  double hazard_multiplier_tavr = 1.0;
};

// Feature layout: sts_risk (the frailty driving treatment choice), then
// x1..x{p_continuous-1} ~ N(0,1), then b1..b{p_binary} ~ Bernoulli(0.5).
struct SynthConfig {
  std::size_t n = 1000;
  std::size_t p_continuous = 3;
  std::size_t p_binary = 2;
  double confounding_strength = 1.0;
  std::vector<SubgroupRule> subgroup_rules;
  double base_hazard = 1e-4;  // per day
  double censor_rate = 0.0;   // per day; 0 disables random censoring
  std::uint64_t seed = 0;
  // Shared log-hazard slopes (both arms), keyed by feature name.
  std::vector<std::pair<std::string, double>> log_hazard_coefficients;
  double follow_up_days = 0.0;  // administrative censoring; 0 disables
  double horizon_days = kDefaultHorizonDays;

  static constexpr const char* kFrailtyFeature = "sts_risk";

  FeatureSchema schema() const {
    FeatureSchema s;
    s.columns.push_back({kFrailtyFeature, FeatureKind::Continuous});
    for (std::size_t j = 1; j < p_continuous; ++j) s.columns.push_back({"x" + std::to_string(j), FeatureKind::Continuous});
    for (std::size_t j = 1; j <= p_binary; ++j) s.columns.push_back({"b" + std::to_string(j), FeatureKind::Binary});
    return s;
  }

  void validate() const {
    auto bad = [](const std::string& msg) { throw Error(ErrorKind::InvalidConfig, msg); };
    if (n < 10) bad("n must be >= 10");
    if (p_continuous < 1) bad("p_continuous must be >= 1 (the frailty feature)");
    if (!(confounding_strength >= 0.0) || !std::isfinite(confounding_strength)) bad("confounding_strength must be >= 0");
    if (!(base_hazard > 0.0) || !std::isfinite(base_hazard)) bad("base_hazard must be > 0");
    if (!(censor_rate >= 0.0) || !std::isfinite(censor_rate)) bad("censor_rate must be >= 0");
    if (!(follow_up_days >= 0.0)) bad("follow_up_days must be >= 0");
    if (!(horizon_days > 0.0)) bad("horizon_days must be > 0");
    const auto s = schema();
    for (const auto& r : subgroup_rules) {
      if (!s.index_of(r.feature)) bad("subgroup rule on unknown feature '" + r.feature + "'");
      if (!(r.hazard_multiplier_savr > 0.0) || !(r.hazard_multiplier_tavr > 0.0))
        bad("hazard multipliers must be > 0");
    }
    for (const auto& [name, coef] : log_hazard_coefficients) {
      if (!s.index_of(name)) bad("log-hazard coefficient on unknown feature '" + name + "'");
      if (!std::isfinite(coef)) bad("log-hazard coefficient must be finite");
    }
  }

  nlohmann::json to_json() const {
    nlohmann::json rules = nlohmann::json::array();
    for (const auto& r : subgroup_rules)
      rules.push_back({{"feature", r.feature},
                       {"threshold", r.threshold},
                       {"hazard_multiplier_savr", r.hazard_multiplier_savr},
                       {"hazard_multiplier_tavr", r.hazard_multiplier_tavr}});
    nlohmann::json coefs = nlohmann::json::object();
    for (const auto& [name, c] : log_hazard_coefficients) coefs[name] = c;
    return {{"n", n},
            {"p_continuous", p_continuous},
            {"p_binary", p_binary},
            {"confounding_strength", confounding_strength},
            {"subgroup_rules", rules},
            {"base_hazard", base_hazard},
            {"censor_rate", censor_rate},
            {"seed", seed},
            {"log_hazard_coefficients", coefs},
            {"follow_up_days", follow_up_days},
            {"horizon_days", horizon_days}};
  }

  static SynthConfig from_json(const nlohmann::json& doc) {
    SynthConfig c;
    try {
      c.n = doc.at("n").get<std::size_t>();
      c.p_continuous = doc.value("p_continuous", c.p_continuous);
      c.p_binary = doc.value("p_binary", c.p_binary);
      c.confounding_strength = doc.value("confounding_strength", c.confounding_strength);
      c.base_hazard = doc.value("base_hazard", c.base_hazard);
      c.censor_rate = doc.value("censor_rate", c.censor_rate);
      c.seed = doc.value("seed", c.seed);
      c.follow_up_days = doc.value("follow_up_days", c.follow_up_days);
      c.horizon_days = doc.value("horizon_days", c.horizon_days);
      for (const auto& r : doc.value("subgroup_rules", nlohmann::json::array()))
        c.subgroup_rules.push_back({r.at("feature").get<std::string>(), r.at("threshold").get<double>(),
                                    r.at("hazard_multiplier_savr").get<double>(),
                                    r.at("hazard_multiplier_tavr").get<double>()});
      const auto coefs = doc.value("log_hazard_coefficients", nlohmann::json::object());
      for (const auto& [name, v] : coefs.items()) c.log_hazard_coefficients.emplace_back(name, v.get<double>());
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorKind::InvalidConfig, std::string("synthetic config: ") + e.what());
    }
    c.validate();
    return c;
  }

  static SynthConfig load(const std::filesystem::path& path) {
    try {
      return from_json(nlohmann::json::parse(io::read_text(path)));
    } catch (const nlohmann::json::parse_error& e) {
      throw Error(ErrorKind::InvalidConfig, path.string() + ": " + e.what());
    }
  }
};

struct GroundTruth {
  std::vector<std::array<double, 2>> hazards;          // per day, per arm
  std::vector<std::array<double, 2>> potential_risks;  // 1 - exp(-h * horizon)
  std::vector<Arm> true_optimal_arm;                   // argmin risk; ties go to SAVR
  std::vector<double> assignment_propensity;           // P(TAVR | x)
  double horizon_days = kDefaultHorizonDays;
};

struct SynthCohort {
  Cohort cohort;
  GroundTruth truth;
};

inline SynthCohort generate_cohort(const SynthConfig& config) {
  config.validate();
  const auto schema = config.schema();
  const std::size_t p = schema.size();
  const std::size_t n = config.n;

  struct Rule {
    std::size_t feature;
    double threshold, m_savr, m_tavr;
  };
  std::vector<Rule> rules;
  for (const auto& r : config.subgroup_rules)
    rules.push_back({*schema.index_of(r.feature), r.threshold, r.hazard_multiplier_savr, r.hazard_multiplier_tavr});
  std::vector<double> slope(p, 0.0);
  for (const auto& [name, c] : config.log_hazard_coefficients) slope[*schema.index_of(name)] += c;

  SynthCohort out;
  auto& cohort = out.cohort;
  auto& truth = out.truth;
  cohort.schema = schema;
  cohort.features = FeatureMatrix(n, p);
  cohort.arms.resize(n);
  cohort.outcomes.resize(n);
  cohort.ids.resize(n);
  truth.horizon_days = config.horizon_days;
  truth.hazards.resize(n);
  truth.potential_risks.resize(n);
  truth.true_optimal_arm.resize(n);
  truth.assignment_propensity.resize(n);

  const std::size_t width = std::to_string(n).size();
  parallel_for(n, [&](std::size_t i) {
    Rng rng(derive_seed(config.seed, static_cast<std::uint64_t>(i)));
    std::normal_distribution<double> normal(0.0, 1.0);
    std::bernoulli_distribution coin(0.5);
    std::uniform_real_distribution<double> unit(0.0, 1.0);

    std::vector<double> x(p);
    for (std::size_t j = 0; j < p; ++j) {
      x[j] = schema.columns[j].kind == FeatureKind::Continuous ? normal(rng) : (coin(rng) ? 1.0 : 0.0);
      cohort.features.set(i, j, x[j]);
    }
    const double propensity = 1.0 / (1.0 + std::exp(-config.confounding_strength * x[0]));
    const Arm arm = unit(rng) < propensity ? Arm::TAVR : Arm::SAVR;

    double lin = 0.0;
    for (std::size_t j = 0; j < p; ++j) lin += slope[j] * x[j];
    std::array<double, 2> h{config.base_hazard * std::exp(lin), config.base_hazard * std::exp(lin)};
    for (const auto& r : rules)
      if (x[r.feature] > r.threshold) {
        h[0] *= r.m_savr;
        h[1] *= r.m_tavr;
      }
    std::array<double, 2> event_time{};
    for (std::size_t a = 0; a < 2; ++a) event_time[a] = std::exponential_distribution<double>(h[a])(rng);
    double censor = std::numeric_limits<double>::infinity();
    if (config.censor_rate > 0.0) censor = std::exponential_distribution<double>(config.censor_rate)(rng);
    if (config.follow_up_days > 0.0) censor = std::min(censor, config.follow_up_days);

    const double t = event_time[index(arm)];
    cohort.arms[i] = arm;
    cohort.outcomes[i] = t <= censor ? SurvivalOutcome{t, true} : SurvivalOutcome{censor, false};
    std::string id = std::to_string(i + 1);
    cohort.ids[i] = "P" + std::string(width - id.size(), '0') + id;

    truth.hazards[i] = h;
    truth.potential_risks[i] = {-std::expm1(-h[0] * config.horizon_days), -std::expm1(-h[1] * config.horizon_days)};
    truth.true_optimal_arm[i] = detail::cheaper_arm(truth.potential_risks[i][0], truth.potential_risks[i][1]);
    truth.assignment_propensity[i] = propensity;
  });
  return out;
}

// Mean excess true risk of the tree's prescriptions over the pointwise
// optimum.
inline double policy_regret(std::span<const Arm> prescribed, const GroundTruth& truth) {
  require(prescribed.size() == truth.potential_risks.size(), ErrorKind::InconsistentDimensions,
          "one prescription per patient");
  require(!prescribed.empty(), ErrorKind::InvalidArgument, "regret of an empty cohort");
  double total = 0.0;
  for (std::size_t i = 0; i < prescribed.size(); ++i) {
    const auto& r = truth.potential_risks[i];
    total += r[index(prescribed[i])] - r[index(truth.true_optimal_arm[i])];
  }
  return total / static_cast<double>(prescribed.size());
}

inline double policy_regret(const PolicyTree& tree, const GroundTruth& truth, const Cohort& cohort) {
  return policy_regret(prescribe_all(tree, cohort), truth);
}

inline std::string truth_to_csv(const GroundTruth& truth, std::span<const std::string> ids) {
  require(ids.size() == truth.potential_risks.size(), ErrorKind::InconsistentDimensions, "one id per patient");
  std::ostringstream out;
  out << "id,propensity_tavr,hazard_savr,hazard_tavr,risk_savr,risk_tavr,optimal_arm\n";
  for (std::size_t i = 0; i < ids.size(); ++i)
    out << ids[i] << ',' << io::format_number(truth.assignment_propensity[i]) << ','
        << io::format_number(truth.hazards[i][0]) << ',' << io::format_number(truth.hazards[i][1]) << ','
        << io::format_number(truth.potential_risks[i][0]) << ',' << io::format_number(truth.potential_risks[i][1])
        << ',' << to_string(truth.true_optimal_arm[i]) << '\n';
  return out.str();
}

}  // namespace rxp
