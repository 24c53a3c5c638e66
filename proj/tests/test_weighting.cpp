#include <catch_amalgamated.hpp>

#include <algorithm>

#include "rxpolicy/synthetic.hpp"
#include "rxpolicy/weighting.hpp"
#include "support.hpp"

using namespace rxp;

namespace {

struct Fixture {
  SynthCohort gen;
  RewardsMatrix rewards;
  std::vector<Label> labels;
  ForestParams forest;
};

// TAVR is better across the board, with a subgroup where it is worse.
Fixture imbalanced(std::uint64_t seed, std::size_t n = 400) {
  SynthConfig cfg;
  cfg.n = n;
  cfg.p_continuous = 3;
  cfg.p_binary = 1;
  cfg.confounding_strength = 0.5;
  cfg.base_hazard = 2e-4;
  cfg.follow_up_days = 2500;
  cfg.seed = seed;
  cfg.subgroup_rules = {{"sts_risk", -10, 1.0, 0.7}, {"x1", 0.0, 1.0, 1.5}};
  cfg.log_hazard_coefficients = {{"sts_risk", 0.5}};
  Fixture f{generate_cohort(cfg), {}, {}, {}};
  f.forest.n_trees = 100;
  f.forest.seed = derive_seed(seed, "fit-risk");
  const auto forests = fit_arm_forests(f.gen.cohort, f.forest);
  f.rewards = estimate_rewards(f.gen.cohort, forests.savr, forests.tavr, 1825);
  f.labels = derive_labels(f.gen.cohort, 1825);
  return f;
}

SweepConfig sweep_config(std::vector<double> grid, SweepMode mode, const ForestParams& forest) {
  SweepConfig sc;
  sc.grid = std::move(grid);
  sc.mode = mode;
  sc.forest = forest;
  sc.tree.max_depth = 2;
  sc.tree.min_leaf = 20;
  sc.tree.seed = 3;
  return sc;
}

}  // namespace

TEST_CASE("the three weighting branches") {
  const std::vector<Label> labels{Label::Bad, Label::Good, Label::Good, Label::Bad, Label::Indeterminate};
  const std::vector<Arm> arms{Arm::TAVR, Arm::SAVR, Arm::TAVR, Arm::SAVR, Arm::SAVR};
  const auto wv = assign_weights(labels, arms, Arm::TAVR, 1.8);
  CHECK(wv.weights == std::vector<double>{1.8, 1.8, 1.0, 1.0, 1.0});
  CHECK(wv.w == 1.8);
  CHECK(wv.t_star == Arm::TAVR);
  CHECK_THROWS_AS(assign_weights(labels, arms, Arm::TAVR, 0.9), Error);
  const std::vector<Arm> short_arms{Arm::TAVR};
  CHECK_THROWS_AS(assign_weights(labels, short_arms, Arm::TAVR, 1.5), Error);
}

TEST_CASE("weight counts match the set sizes") {
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    Rng rng(seed);
    std::vector<Label> labels;
    std::vector<Arm> arms;
    for (int i = 0; i < 200; ++i) {
      labels.push_back(static_cast<Label>(rng() % 3));
      arms.push_back(rng() % 2 ? Arm::TAVR : Arm::SAVR);
    }
    const Arm t_star = seed % 2 ? Arm::TAVR : Arm::SAVR;
    std::size_t expected = 0;
    for (int i = 0; i < 200; ++i)
      expected += (arms[i] == t_star && labels[i] == Label::Bad) || (arms[i] != t_star && labels[i] == Label::Good);
    const auto wv = assign_weights(labels, arms, t_star, 2.5);
    CHECK(static_cast<std::size_t>(std::count(wv.weights.begin(), wv.weights.end(), 2.5)) == expected);
    CHECK(static_cast<std::size_t>(std::count(wv.weights.begin(), wv.weights.end(), 1.0)) == 200 - expected);
    const auto ones = assign_weights(labels, arms, t_star, 1.0);
    CHECK(ones.weights == std::vector<double>(200, 1.0));
  }
}

TEST_CASE("default grid brackets 1.8") {
  const auto g = default_weight_grid();
  REQUIRE(g.size() == 11);
  CHECK(g.front() == 1.0);
  CHECK(g.back() == 3.0);
  CHECK(std::find(g.begin(), g.end(), 1.8) != g.end());
  CHECK(parse_sweep_mode("tree") == SweepMode::TreeOnly);
  CHECK(parse_sweep_mode("forests") == SweepMode::ForestsAndTree);
  CHECK_FALSE(parse_sweep_mode("both").has_value());
}

TEST_CASE("selection keeps the smaller w on ties") {
  std::vector<SweepRow> rows(3);
  rows[0].w = 1.0;
  rows[0].mean_score = 0.6;
  rows[1].w = 1.4;
  rows[1].mean_score = 0.7;
  rows[2].w = 1.8;
  rows[2].mean_score = 0.7;
  CHECK(select_weight(rows) == 1.4);
  rows[2].mean_score = 0.71;
  CHECK(select_weight(rows) == 1.8);
}

TEST_CASE("singleton grid and w=1 identity") {
  const auto f = imbalanced(1);
  const auto res = weight_sweep(f.gen.cohort, f.rewards, f.labels, sweep_config({1.0}, SweepMode::TreeOnly, f.forest));
  REQUIRE(res.rows.size() == 1);
  CHECK(res.selected_w == 1.0);
  auto params = sweep_config({1.0}, SweepMode::TreeOnly, f.forest).tree;
  const std::vector<double> ones(f.gen.cohort.size(), 1.0);
  const auto plain = fit_policy_tree(f.gen.cohort, f.rewards, ones, params);
  CHECK(res.selected_tree().to_json_text() == plain.to_json_text());
  CHECK(res.t_star == best_uniform_arm(f.rewards));
  const auto row = res.rows[0];
  CHECK(row.mean_score == 0.5 * (row.sensitivity + row.specificity));
}

TEST_CASE("grid validation") {
  const auto f = imbalanced(2, 100);
  CHECK_THROWS_AS(weight_sweep(f.gen.cohort, f.rewards, f.labels, sweep_config({}, SweepMode::TreeOnly, f.forest)),
                  Error);
  CHECK_THROWS_AS(
      weight_sweep(f.gen.cohort, f.rewards, f.labels, sweep_config({0.5, 1.0}, SweepMode::TreeOnly, f.forest)), Error);
  CHECK_THROWS_AS(
      weight_sweep(f.gen.cohort, f.rewards, f.labels, sweep_config({1.4, 1.2}, SweepMode::TreeOnly, f.forest)), Error);
}

TEST_CASE("non-t* prescriptions grow with w") {
  for (SweepMode mode : {SweepMode::TreeOnly, SweepMode::ForestsAndTree}) {
    std::size_t monotone = 0;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      const auto f = imbalanced(seed);
      const auto res =
          weight_sweep(f.gen.cohort, f.rewards, f.labels, sweep_config({1.0, 1.4, 1.8, 2.2}, mode, f.forest));
      bool ok = true;
      for (std::size_t k = 1; k < res.rows.size(); ++k)
        ok = ok && res.rows[k].non_t_star_fraction >= res.rows[k - 1].non_t_star_fraction;
      monotone += ok;
      if (mode == SweepMode::ForestsAndTree) CHECK(res.rewards.size() == 4);
    }
    CHECK(monotone == 10);
  }
}

TEST_CASE("sweep is deterministic") {
  const auto f = imbalanced(4, 250);
  const auto cfg = sweep_config({1.0, 1.6, 2.2}, SweepMode::ForestsAndTree, f.forest);
  set_thread_count(1);
  const auto a = weight_sweep(f.gen.cohort, f.rewards, f.labels, cfg);
  set_thread_count(3);
  const auto b = weight_sweep(f.gen.cohort, f.rewards, f.labels, cfg);
  set_thread_count(0);
  CHECK(sweep_to_csv(a) == sweep_to_csv(b));
  CHECK(a.selected_w == b.selected_w);
  CHECK(sweep_to_csv(a).rfind("w,sensitivity,specificity,", 0) == 0);
}
