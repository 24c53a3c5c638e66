#include <catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>

#include "rxpolicy/balance.hpp"
#include "rxpolicy/matching.hpp"
#include "rxpolicy/synthetic.hpp"
#include "support.hpp"

using namespace rxp;

namespace {

FeatureSchema sts_schema() { return test::continuous_schema({"sts_risk", "x", "y"}); }

Cohort random_cohort(std::uint64_t seed, std::size_t n) {
  Rng rng(seed);
  std::normal_distribution<double> normal;
  std::vector<std::vector<double>> rows;
  std::vector<Arm> arms;
  for (std::size_t i = 0; i < n; ++i) {
    rows.push_back({normal(rng), normal(rng), std::round(normal(rng) * 2.0)});
    arms.push_back(rng() % 3 == 0 ? Arm::TAVR : Arm::SAVR);
  }
  return test::make_cohort(sts_schema(), rows, arms);
}

// Greedy matching restated: scan all unmatched cross-arm pairs in a bucket for
// the smallest (distance, savr_id, tavr_id) until one arm runs out.
std::vector<std::pair<std::string, std::string>> brute_force_pairs(const Cohort& c, const RiskStrata& strata) {
  std::vector<double> sd(3, 0.0);
  for (std::size_t j = 1; j < 3; ++j) {
    double m = 0.0;
    for (std::size_t i = 0; i < c.size(); ++i) m += c.features(i, j);
    m /= static_cast<double>(c.size());
    double ss = 0.0;
    for (std::size_t i = 0; i < c.size(); ++i) ss += (c.features(i, j) - m) * (c.features(i, j) - m);
    sd[j] = std::sqrt(ss / static_cast<double>(c.size() - 1));
  }
  auto d2 = [&](std::size_t a, std::size_t b) {
    double s = 0.0;
    for (std::size_t j = 1; j < 3; ++j) {
      if (!(sd[j] > 0.0)) continue;
      const double g = (c.features(a, j) - c.features(b, j)) / sd[j];
      s += g * g;
    }
    return s;
  };
  std::vector<std::pair<std::string, std::string>> out;
  for (std::size_t b = 0; b < strata.k(); ++b) {
    std::set<std::size_t> savr, tavr;
    for (std::size_t i = 0; i < c.size(); ++i)
      if (strata.bucket_of(c.features(i, 0)) == b) (c.arms[i] == Arm::SAVR ? savr : tavr).insert(i);
    while (!savr.empty() && !tavr.empty()) {
      double best = std::numeric_limits<double>::infinity();
      std::size_t bs = 0, bt = 0;
      for (std::size_t s : savr)
        for (std::size_t t : tavr) {
          const double d = d2(s, t);
          if (d < best || (d == best && std::tie(c.ids[s], c.ids[t]) < std::tie(c.ids[bs], c.ids[bt]))) {
            best = d;
            bs = s;
            bt = t;
          }
        }
      out.emplace_back(c.ids[bs], c.ids[bt]);
      savr.erase(bs);
      tavr.erase(bt);
    }
  }
  return out;
}

}  // namespace

TEST_CASE("strata at empirical quantiles") {
  const std::vector<double> v{1, 2, 3, 4};
  const auto s = make_strata(v, 2);
  REQUIRE(s.boundaries.size() == 1);
  CHECK(s.boundaries[0] == 2.5);
  std::array<int, 2> sizes{0, 0};
  for (double x : v) ++sizes[s.bucket_of(x)];
  CHECK(sizes == std::array<int, 2>{2, 2});

  CHECK(make_strata(v, 1).boundaries.empty());
  CHECK(make_strata(v, 1).k() == 1);

  const std::vector<double> same(9, 0.3);
  const auto collapsed = make_strata(same, 3);
  CHECK(collapsed.k() == 1);
  REQUIRE(collapsed.warnings.size() == 1);
  CHECK(collapsed.warnings[0].rfind("DegenerateStrata", 0) == 0);

  try {
    make_strata(v, 5);
    FAIL("no error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::TooFewPatients);
  }
}

TEST_CASE("quantile buckets are near equal") {
  Rng rng(11);
  std::normal_distribution<double> normal;
  std::vector<double> v(1003);
  for (auto& x : v) x = normal(rng);
  const auto s = make_strata(v, 5);
  REQUIRE(s.k() == 5);
  std::vector<int> sizes(5, 0);
  for (double x : v) ++sizes[s.bucket_of(x)];
  for (int n : sizes) CHECK(std::abs(n - 200) <= 2);
}

TEST_CASE("identical pair matches at distance zero") {
  const auto c = test::make_cohort(sts_schema(), {{0.1, 1, 2}, {0.1, 1, 2}}, {Arm::SAVR, Arm::TAVR});
  const auto m = match_within_strata(c, make_strata(std::vector<double>{0.1, 0.1}, 1), {});
  REQUIRE(m.pairs.size() == 1);
  CHECK(m.pairs[0].distance == 0.0);
}

TEST_CASE("nearest TAVR is taken and the far one dropped") {
  const auto schema = test::continuous_schema({"sts_risk", "x"});
  const auto c = test::make_cohort(schema, {{0, 1}, {0, 1.1}, {0, 9}}, {Arm::SAVR, Arm::TAVR, Arm::TAVR});
  const auto m = match_within_strata(c, make_strata(c.column(0), 1), {});
  REQUIRE(m.pairs.size() == 1);
  CHECK(m.pairs[0].savr_id == "r0");
  CHECK(m.pairs[0].tavr_id == "r1");
  CHECK(m.cohort.size() == 2);
}

TEST_CASE("greedy matching agrees with a brute-force rescan") {
  for (std::uint64_t seed = 0; seed < 25; ++seed) {
    const auto c = random_cohort(seed, 40 + 3 * seed);
    const auto strata = make_strata(c.column(0), 1 + seed % 4);
    const auto m = match_within_strata(c, strata, {});
    const auto oracle = brute_force_pairs(c, strata);
    REQUIRE(m.pairs.size() == oracle.size());
    for (std::size_t i = 0; i < oracle.size(); ++i) {
      CHECK(m.pairs[i].savr_id == oracle[i].first);
      CHECK(m.pairs[i].tavr_id == oracle[i].second);
    }
    std::size_t n_s = 0, n_t = 0;
    std::set<std::string> ids(c.ids.begin(), c.ids.end());
    for (std::size_t i = 0; i < m.cohort.size(); ++i) {
      (m.cohort.arms[i] == Arm::SAVR ? n_s : n_t)++;
      CHECK(ids.count(m.cohort.ids[i]) == 1);
    }
    CHECK(n_s == n_t);
    for (const auto& p : m.pairs) {
      CHECK(c.arms[p.savr_row] == Arm::SAVR);
      CHECK(c.arms[p.tavr_row] == Arm::TAVR);
      CHECK(strata.bucket_of(c.features(p.savr_row, 0)) == p.bucket);
      CHECK(strata.bucket_of(c.features(p.tavr_row, 0)) == p.bucket);
    }
  }
}

TEST_CASE("first pair is the global minimum for small buckets") {
  for (std::uint64_t seed = 100; seed < 140; ++seed) {
    Rng rng(seed);
    const std::size_t ns = 1 + rng() % 10, nt = 1 + rng() % 10;
    std::normal_distribution<double> normal;
    std::vector<std::vector<double>> rows;
    std::vector<Arm> arms;
    for (std::size_t i = 0; i < ns + nt; ++i) {
      rows.push_back({0.0, normal(rng), normal(rng)});
      arms.push_back(i < ns ? Arm::SAVR : Arm::TAVR);
    }
    const auto c = test::make_cohort(sts_schema(), rows, arms);
    const auto m = match_within_strata(c, make_strata(c.column(0), 1), {});
    REQUIRE(m.pairs.size() == std::min(ns, nt));
    double best = std::numeric_limits<double>::infinity();
    for (const auto& p : m.pairs) best = std::min(best, p.distance);
    CHECK(m.pairs.front().distance == best);
  }
}

TEST_CASE("empty bucket arm is recorded, not fatal") {
  const auto c = test::make_cohort(sts_schema(), {{0, 1, 1}, {0.1, 2, 2}, {5, 3, 3}, {6, 4, 4}},
                                   {Arm::SAVR, Arm::TAVR, Arm::SAVR, Arm::SAVR});
  const auto strata = make_strata(c.column(0), 2);
  const auto m = match_within_strata(c, strata, {});
  CHECK(m.pairs.size() == 1);
  CHECK(m.empty_buckets == std::vector<std::size_t>{1});
}

TEST_CASE("prognostic weight adds risk-score proximity") {
  const auto schema = test::continuous_schema({"sts_risk", "x"});
  const auto c = test::make_cohort(schema, {{0, 0}, {0, 0.1}, {0, -0.1}}, {Arm::SAVR, Arm::TAVR, Arm::TAVR});
  const std::vector<std::array<double, 2>> risk{{0.5, 0.5}, {0.9, 0.9}, {0.5, 0.5}};
  MatchOptions plain;
  const auto a = match_within_strata(c, make_strata(c.column(0), 1), plain);
  // Equal covariate distance: lexicographic tie-break picks r1.
  CHECK(a.pairs[0].tavr_id == "r1");
  MatchOptions prog;
  prog.prognostic_weight = 1.0;
  const auto b = match_within_strata(c, make_strata(c.column(0), 1), prog, risk);
  CHECK(b.pairs[0].tavr_id == "r2");
  CHECK_THROWS_AS(match_within_strata(c, make_strata(c.column(0), 1), prog), Error);
}

TEST_CASE("matching a confounded synthetic cohort improves balance") {
  SynthConfig cfg;
  cfg.n = 600;
  cfg.confounding_strength = 2.0;
  cfg.seed = 5;
  const auto gen = generate_cohort(cfg);
  const auto pre = balance_report(gen.cohort);
  CHECK(pre.find("sts_risk")->smd.value() > 0.1);
  const auto m = match_within_strata(gen.cohort, make_strata(gen.cohort.column(0), 5), {});
  const auto post = balance_report(m.cohort);
  CHECK(post.rows.size() == pre.rows.size());
  CHECK(post.max_smd() < pre.max_smd());
  // Deterministic under repetition.
  const auto again = match_within_strata(gen.cohort, make_strata(gen.cohort.column(0), 5), {});
  CHECK(pairs_to_csv(again.pairs) == pairs_to_csv(m.pairs));
}
