#include <catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <set>

#include "rxpolicy/policy_tree.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace rxp;
using namespace rxp::oracle;

namespace {

PolicyTreeParams params(std::size_t depth, std::size_t min_leaf, std::size_t restarts = 20, std::uint64_t seed = 1) {
  PolicyTreeParams p;
  p.max_depth = depth;
  p.min_leaf = min_leaf;
  p.n_restarts = restarts;
  p.seed = seed;
  return p;
}

std::size_t walk(const PolicyTree& t, std::span<const double> x) {
  std::size_t n = 0;
  while (t.nodes[n].feature >= 0) {
    const auto& node = t.nodes[n];
    n = x[static_cast<std::size_t>(node.feature)] <= node.threshold ? node.left : node.right;
  }
  return n;
}

Problem four_patients() {
  Problem pr{FeatureMatrix(4, 1), {}, std::vector<double>(4, 1.0)};
  for (std::size_t i = 0; i < 4; ++i) pr.x.set(i, 0, static_cast<double>(i + 1));
  pr.rewards.gamma = {{0.1, 0.9}, {0.1, 0.9}, {0.9, 0.1}, {0.9, 0.1}};
  return pr;
}

}  // namespace

TEST_CASE("depth-1 tree on four patients") {
  const auto pr = four_patients();
  const auto tree = fit_policy_tree(pr.x, pr.rewards, pr.w, params(1, 1));
  REQUIRE(tree.nodes.size() == 3);
  CHECK(tree.nodes[0].feature == 0);
  CHECK(tree.nodes[0].threshold == 2.5);
  CHECK(tree.nodes[tree.nodes[0].left].prescription == Arm::SAVR);
  CHECK(tree.nodes[tree.nodes[0].right].prescription == Arm::TAVR);
  CHECK(tree.objective_value == Catch::Approx(0.4).epsilon(1e-12));
  CHECK(exhaustive_best(pr, all_rows(4), 1, 1) == Catch::Approx(0.4).epsilon(1e-12));

  const std::vector<double> at_15{1.5}, at_25{2.5}, at_3{3.0};
  CHECK(tree.prescribe(at_15) == Arm::SAVR);
  CHECK(tree.prescribe(at_25) == Arm::SAVR);
  CHECK(tree.prescribe(at_3) == Arm::TAVR);
}

TEST_CASE("depth-0 tree prescribes the best uniform arm") {
  const auto pr = random_problem(4, 80, 3);
  const auto tree = fit_policy_tree(pr.x, pr.rewards, pr.w, params(0, 1));
  REQUIRE(tree.nodes.size() == 1);
  double c0 = 0, c1 = 0;
  for (std::size_t i = 0; i < 80; ++i) {
    c0 += pr.w[i] * pr.rewards.gamma[i][0];
    c1 += pr.w[i] * pr.rewards.gamma[i][1];
  }
  CHECK(tree.nodes[0].prescription == (c1 < c0 ? Arm::TAVR : Arm::SAVR));
  CHECK(tree.objective_value == Catch::Approx(std::min(c0, c1)).epsilon(1e-12));
  CHECK(tree.nodes[0].n_train == 80);
  const std::vector<double> any{-100.0, 0.0, 1e9};
  CHECK(tree.prescribe(any) == tree.nodes[0].prescription);
}

TEST_CASE("identical columns give the trivial optimum") {
  auto pr = random_problem(6, 60, 2);
  for (auto& row : pr.rewards.gamma) row[1] = row[0];
  const auto tree = fit_policy_tree(pr.x, pr.rewards, pr.w, params(2, 5));
  for (const auto& n : tree.nodes)
    if (n.is_leaf()) CHECK(n.prescription == Arm::SAVR);
  CHECK(tree.objective_value == Catch::Approx(leaf_cost(pr, all_rows(60))).epsilon(1e-12));
}

TEST_CASE("fitted objective equals the exhaustive optimum at small scale") {
  std::size_t cases = 0;
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    Rng rng(seed * 7 + 1);
    const std::size_t n = 10 + rng() % 70;
    const std::size_t p = 1 + rng() % 4;
    const std::size_t depth = 1 + rng() % 2;
    const std::size_t min_leaf = 1 + rng() % 6;
    const auto pr = random_problem(seed, n, p);
    const auto tree = fit_policy_tree(pr.x, pr.rewards, pr.w, params(depth, min_leaf, 20, seed));
    const double want = exhaustive_best(pr, all_rows(n), depth, min_leaf);
    CHECK(std::fabs(tree.objective_value - want) <= 1e-9);
    CHECK(tree.depth() <= depth);
    ++cases;
  }
  SECTION("N=200, p=4, depth 2") {
    const auto pr = random_problem(99, 200, 4);
    const auto tree = fit_policy_tree(pr.x, pr.rewards, pr.w, params(2, 10, 20, 3));
    CHECK(std::fabs(tree.objective_value - exhaustive_best(pr, all_rows(200), 2, 10)) <= 1e-9);
  }
  CHECK(cases == 30);
}

TEST_CASE("leaves are coherent and large enough") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto pr = random_problem(seed + 40, 300, 3);
    const auto tree = fit_policy_tree(pr.x, pr.rewards, pr.w, params(3, 15, 5, seed));
    std::map<std::size_t, std::vector<std::size_t>> members;
    for (std::size_t i = 0; i < 300; ++i) members[walk(tree, pr.x.row(i))].push_back(i);
    for (std::size_t id = 0; id < tree.nodes.size(); ++id) {
      const auto& n = tree.nodes[id];
      if (!n.is_leaf()) continue;
      const auto& rows = members[id];
      CHECK(rows.size() == n.n_train);
      CHECK(rows.size() >= 15);
      double c0 = 0, c1 = 0;
      for (auto i : rows) {
        c0 += pr.w[i] * pr.rewards.gamma[i][0];
        c1 += pr.w[i] * pr.rewards.gamma[i][1];
      }
      CHECK(n.prescription == (c1 < c0 ? Arm::TAVR : Arm::SAVR));
    }
  }
}

TEST_CASE("objective evaluation") {
  Problem pr{FeatureMatrix(2, 1), {}, {1.0, 1.0}};
  pr.x.set(0, 0, 0.0);
  pr.x.set(1, 0, 1.0);
  pr.rewards.gamma = {{0.2, 0.1}, {0.3, 0.4}};
  PolicyTree argmin;
  argmin.feature_names = {"x"};
  argmin.nodes = {PolicyNode{0, 0.5, 1, 2}, PolicyNode{}, PolicyNode{}};
  argmin.nodes[1].prescription = Arm::TAVR;
  argmin.nodes[2].prescription = Arm::SAVR;
  CHECK(objective(argmin, pr.x, pr.rewards, pr.w) == Catch::Approx(0.4).epsilon(1e-15));
  const std::vector<double> doubled{2.0, 2.0};
  CHECK(objective(argmin, pr.x, pr.rewards, doubled) == Catch::Approx(0.8).epsilon(1e-15));
  const std::vector<double> short_w{1.0};
  try {
    objective(argmin, pr.x, pr.rewards, short_w);
    FAIL("no error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::InconsistentDimensions);
  }

  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto rp = random_problem(seed + 200, 50, 2);
    Rng rng(seed);
    std::uniform_real_distribution<double> unit(0.0, 10.0);
    PolicyTree t;
    t.feature_names = {"a", "b"};
    t.nodes.resize(7);
    for (std::uint32_t id : {0u, 1u, 4u}) {
      t.nodes[id].feature = static_cast<std::int32_t>(rng() % 2);
      t.nodes[id].threshold = unit(rng) * (t.nodes[id].feature ? 0.6 : 1.0);
    }
    t.nodes[0].left = 1;
    t.nodes[0].right = 4;
    t.nodes[1].left = 2;
    t.nodes[1].right = 3;
    t.nodes[4].left = 5;
    t.nodes[4].right = 6;
    for (std::uint32_t id : {2u, 3u, 5u, 6u}) t.nodes[id].prescription = rng() % 2 ? Arm::TAVR : Arm::SAVR;
    double want = 0.0;
    for (std::size_t i = 0; i < 50; ++i) {
      // Lookup by hand-written nested conditions.
      const auto& n0 = t.nodes[0];
      const bool go_left = rp.x(i, n0.feature) <= n0.threshold;
      const auto& n1 = t.nodes[go_left ? 1 : 4];
      const bool left2 = rp.x(i, n1.feature) <= n1.threshold;
      const std::uint32_t leaf = go_left ? (left2 ? 2 : 3) : (left2 ? 5 : 6);
      want += rp.w[i] * rp.rewards.gamma[i][t.nodes[leaf].prescription == Arm::SAVR ? 0 : 1];
    }
    CHECK(objective(t, rp.x, rp.rewards, rp.w) == Catch::Approx(want).epsilon(1e-12));
  }
}

TEST_CASE("deeper fits never do worse") {
  for (std::uint64_t seed = 0; seed < 6; ++seed) {
    const auto pr = random_problem(seed + 70, 250, 4);
    double prev = std::numeric_limits<double>::infinity();
    for (std::size_t d = 0; d <= 4; ++d) {
      const auto tree = fit_policy_tree(pr.x, pr.rewards, pr.w, params(d, 10, 6, seed));
      CHECK(tree.objective_value <= prev + 1e-9);
      prev = tree.objective_value;
    }
  }
}

TEST_CASE("constant shift moves the objective by c times total weight") {
  const auto pr = random_problem(8, 150, 3);
  auto shifted = pr;
  const double c = 0.05;
  for (auto& row : shifted.rewards.gamma) row = {row[0] + c, row[1] + c};
  const auto a = fit_policy_tree(pr.x, pr.rewards, pr.w, params(2, 10, 20, 9));
  const auto b = fit_policy_tree(shifted.x, shifted.rewards, shifted.w, params(2, 10, 20, 9));
  double total_w = 0.0;
  for (double w : pr.w) total_w += w;
  CHECK(b.objective_value == Catch::Approx(a.objective_value + c * total_w).epsilon(1e-9));
  for (std::size_t i = 0; i < 150; ++i) CHECK(a.prescribe(pr.x.row(i)) == b.prescribe(pr.x.row(i)));
}

TEST_CASE("fit is deterministic and thread independent") {
  const auto pr = random_problem(12, 200, 3);
  set_thread_count(1);
  const auto a = fit_policy_tree(pr.x, pr.rewards, pr.w, params(3, 10, 8, 4));
  set_thread_count(4);
  const auto b = fit_policy_tree(pr.x, pr.rewards, pr.w, params(3, 10, 8, 4));
  set_thread_count(0);
  CHECK(a.to_json_text() == b.to_json_text());
}

TEST_CASE("json round trip and dot export") {
  const auto pr = random_problem(13, 120, 3);
  const std::vector<std::string> names{"age", "score", "lvef"};
  const auto tree = fit_policy_tree(pr.x, pr.rewards, pr.w, params(3, 8, 4, 2), names);
  const auto text = tree.to_json_text();
  const auto back = PolicyTree::from_json(nlohmann::json::parse(text));
  CHECK(back.to_json_text() == text);
  for (std::size_t i = 0; i < 120; ++i) CHECK(back.prescribe(pr.x.row(i)) == tree.prescribe(pr.x.row(i)));

  const auto dot = tree.to_dot();
  CHECK(dot.rfind("digraph", 0) == 0);
  std::size_t labelled = 0;
  for (std::size_t pos = dot.find("label=\"node "); pos != std::string::npos; pos = dot.find("label=\"node ", pos + 1))
    ++labelled;
  CHECK(labelled == tree.leaf_count());

  auto doc = nlohmann::json::parse(text);
  doc["format"] = "something else";
  CHECK_THROWS_AS(PolicyTree::from_json(doc), Error);
}

TEST_CASE("leaf table matches an independent group-by") {
  Rng rng(5);
  std::uniform_real_distribution<double> unit;
  const std::size_t n = 300;
  std::vector<std::vector<double>> rows;
  std::vector<Arm> arms;
  std::vector<SurvivalOutcome> outcomes;
  RewardsMatrix rewards;
  for (std::size_t i = 0; i < n; ++i) {
    rows.push_back({std::round(unit(rng) * 100) / 10, std::round(unit(rng) * 100) / 10});
    arms.push_back(rng() % 3 ? Arm::SAVR : Arm::TAVR);
    outcomes.push_back({unit(rng) * 3000, rng() % 2 == 0});
    rewards.gamma.push_back({unit(rng) * (rows.back()[0] > 5 ? 1.0 : 0.5), unit(rng) * 0.7});
  }
  const auto cohort = test::make_cohort(test::continuous_schema({"a", "b"}), rows, arms, outcomes);
  const auto labels = derive_labels(cohort, 1825);
  const std::vector<double> w(n, 1.0);
  const auto tree = fit_policy_tree(cohort, rewards, w, params(2, 20, 5, 1));

  std::map<std::size_t, std::array<std::array<int, 3>, 2>> g;  // leaf -> arm -> {n, bad, determinate}
  std::array<int, 2> totals{0, 0};
  for (std::size_t i = 0; i < n; ++i) {
    auto& cell = g[walk(tree, cohort.features.row(i))][arms[i] == Arm::SAVR ? 0 : 1];
    ++cell[0];
    ++totals[arms[i] == Arm::SAVR ? 0 : 1];
    if (labels[i] != Label::Indeterminate) {
      ++cell[2];
      cell[1] += labels[i] == Label::Bad;
    }
  }
  const auto summaries = leaf_summaries(tree, cohort, labels);
  REQUIRE(summaries.size() == g.size());
  for (const auto& s : summaries) {
    const auto& cell = g.at(s.node_id);
    for (std::size_t a = 0; a < 2; ++a) {
      CHECK(static_cast<int>(s.n[a]) == cell[a][0]);
      CHECK(s.pct[a] == 100.0 * cell[a][0] / totals[a]);
      if (cell[a][2] > 0)
        CHECK(*s.mortality_pct(a == 0 ? Arm::SAVR : Arm::TAVR) == 100.0 * cell[a][1] / cell[a][2]);
    }
  }

  const auto trivial = fit_policy_tree(cohort, rewards, w, params(0, 1));
  const auto table = export_tree(trivial, cohort, labels, TreeFormat::LeafTable);
  test::TempDir dir;
  io::write_text(dir / "leaf.csv", table);
  const auto parsed = io::read_csv(dir / "leaf.csv");
  REQUIRE(parsed.rows.size() == 1);
  CHECK(std::stoul(parsed.rows[0][2]) + std::stoul(parsed.rows[0][5]) == n);
}

TEST_CASE("routing needs the split features") {
  const auto pr = four_patients();
  const std::vector<std::string> names{"x"};
  const auto tree = fit_policy_tree(pr.x, pr.rewards, pr.w, params(1, 1), names);
  const auto other = test::make_cohort(test::continuous_schema({"y"}), {{1.0}}, {Arm::SAVR});
  try {
    route(tree, other);
    FAIL("no error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::MissingFeature);
  }
  auto missing = test::make_cohort(test::continuous_schema({"x"}), {{1.0}}, {Arm::SAVR});
  missing.features.set_missing(0, 0);
  CHECK_THROWS_AS(route(tree, missing), Error);
}
