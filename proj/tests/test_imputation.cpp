#include <catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>

#include "rxpolicy/imputation.hpp"
#include "support.hpp"

using namespace rxp;

namespace {

FeatureSchema mixed_schema() {
  FeatureSchema s;
  s.columns = {{"a", FeatureKind::Continuous}, {"b", FeatureKind::Continuous}, {"flag", FeatureKind::Binary}};
  return s;
}

// Random cohort with roughly `missing_rate` of cells blanked.
Cohort random_cohort(std::uint64_t seed, std::size_t n, double missing_rate) {
  Rng rng(seed);
  std::normal_distribution<double> normal;
  std::uniform_real_distribution<double> unit;
  Cohort c;
  c.schema = mixed_schema();
  c.features = FeatureMatrix(n, 3);
  for (std::size_t r = 0; r < n; ++r) {
    c.features.set(r, 0, std::round(normal(rng) * 4.0) / 2.0);  // coarse grid, so distance ties happen
    c.features.set(r, 1, 10.0 + 3.0 * normal(rng));
    c.features.set(r, 2, unit(rng) < 0.4 ? 1.0 : 0.0);
    for (std::size_t j = 0; j < 3; ++j)
      if (unit(rng) < missing_rate) c.features.set_missing(r, j);
    c.arms.push_back(r % 2 ? Arm::TAVR : Arm::SAVR);
    c.outcomes.push_back({10.0, false});
    c.ids.push_back(std::to_string(r));
  }
  return c;
}

// Independent O(N^2) neighbour scan written directly from the definition.
double brute_force_fill(const Cohort& train, std::size_t k, const Cohort& target, std::size_t r, std::size_t col) {
  const std::size_t p = train.num_features();
  std::vector<double> mean(p), sd(p);
  for (std::size_t c = 0; c < p; ++c) {
    std::vector<double> v;
    for (std::size_t i = 0; i < train.size(); ++i)
      if (!train.features.is_missing(i, c)) v.push_back(train.features(i, c));
    double s = 0.0;
    for (double x : v) s += x;
    mean[c] = s / static_cast<double>(v.size());
    double ss = 0.0;
    for (double x : v) ss += (x - mean[c]) * (x - mean[c]);
    sd[c] = v.size() > 1 ? std::sqrt(ss / static_cast<double>(v.size() - 1)) : 0.0;
  }
  std::vector<std::size_t> refs;
  for (std::size_t i = 0; i < train.size(); ++i)
    if (train.features.row_complete(i)) refs.push_back(i);
  std::size_t usable = 0, used = 0;
  for (std::size_t c = 0; c < p; ++c) {
    usable += sd[c] > 0.0;
    used += sd[c] > 0.0 && !target.features.is_missing(r, c);
  }
  std::vector<std::pair<double, std::size_t>> d;
  for (std::size_t j = 0; j < refs.size(); ++j) {
    double s = 0.0;
    for (std::size_t c = 0; c < p; ++c) {
      if (!(sd[c] > 0.0) || target.features.is_missing(r, c)) continue;
      const double g = (target.features(r, c) - train.features(refs[j], c)) / sd[c];
      s += g * g;
    }
    d.emplace_back(s * (used ? static_cast<double>(usable) / static_cast<double>(used) : 1.0), j);
  }
  std::stable_sort(d.begin(), d.end(), [](const auto& x, const auto& y) { return x.first < y.first; });
  const std::size_t kk = std::min(k, d.size());
  if (train.schema.columns[col].kind == FeatureKind::Binary) {
    std::size_t ones = 0;
    for (std::size_t j = 0; j < kk; ++j) ones += train.features(refs[d[j].second], col) == 1.0;
    return 2 * ones >= kk ? 1.0 : 0.0;
  }
  double s = 0.0;
  for (std::size_t j = 0; j < kk; ++j) s += train.features(refs[d[j].second], col);
  return s / static_cast<double>(kk);
}

}  // namespace

TEST_CASE("fit keeps every complete row as a reference") {
  auto c = random_cohort(1, 14, 0.0);
  for (std::size_t r = 10; r < 14; ++r) c.features.set_missing(r, 1);
  const auto model = fit_imputer(c, 3);
  CHECK(model.reference_rows.size() == 10);
  CHECK(model.k == 3);
}

TEST_CASE("column statistics use sample std") {
  const auto c = test::make_cohort(test::continuous_schema({"v"}), {{1}, {2}, {3}}, {Arm::SAVR, Arm::TAVR, Arm::SAVR});
  const auto model = fit_imputer(c, 1);
  CHECK(model.column_means[0] == 2.0);
  CHECK(model.column_stds[0] == 1.0);
}

TEST_CASE("fit preconditions") {
  const auto c = random_cohort(2, 20, 0.0);
  CHECK_THROWS_AS(fit_imputer(c, 0), Error);
  auto sparse = random_cohort(3, 6, 0.0);
  for (std::size_t r = 0; r < 4; ++r) sparse.features.set_missing(r, 0);
  try {
    fit_imputer(sparse, 3);
    FAIL("no error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::InsufficientCompleteRows);
  }
}

TEST_CASE("k=1 copies the zero-distance reference") {
  const auto schema = test::continuous_schema({"a", "b", "c"});
  auto train = test::make_cohort(schema, {{1, 2, 3}, {4, 5, 6}, {7, 8, 10}}, {Arm::SAVR, Arm::TAVR, Arm::SAVR});
  auto target = test::make_cohort(schema, {{4, 5, 0}}, {Arm::SAVR});
  target.features.set_missing(0, 2);
  const auto out = impute(fit_imputer(train, 1), target);
  CHECK(out.features(0, 2) == 6.0);
  CHECK(out.features(0, 0) == 4.0);
}

TEST_CASE("k=2 with equidistant neighbours averages them") {
  const auto schema = test::continuous_schema({"x", "y"});
  auto train = test::make_cohort(schema, {{-1, 10}, {1, 20}, {5, 99}}, {Arm::SAVR, Arm::TAVR, Arm::SAVR});
  auto target = test::make_cohort(schema, {{0, 0}}, {Arm::TAVR});
  target.features.set_missing(0, 1);
  const auto model = fit_imputer(train, 2);
  const auto out = impute(model, target);
  CHECK(out.features(0, 1) == 15.0);
  CHECK(out.features(0, 1) == brute_force_fill(train, 2, target, 0, 1));
}

TEST_CASE("no missing cells is an identity") {
  const auto c = random_cohort(4, 40, 0.0);
  const auto out = impute(fit_imputer(c, 5), c);
  CHECK(out.features == c.features);
  CHECK(out.ids == c.ids);
}

TEST_CASE("binary majority ties go to 1") {
  FeatureSchema s;
  s.columns = {{"x", FeatureKind::Continuous}, {"f", FeatureKind::Binary}};
  auto train = test::make_cohort(s, {{0, 0}, {0.5, 1}, {-0.5, 0}, {1, 1}, {9, 0}}, std::vector<Arm>(5, Arm::SAVR));
  auto target = test::make_cohort(s, {{0.75, 0}}, {Arm::SAVR});
  target.features.set_missing(0, 1);
  // Two nearest are x=0.5 (f=1) and x=1 (f=1); widen to four: {0.5,1,0,-0.5} -> 2 ones, 2 zeros.
  CHECK(impute(fit_imputer(train, 4), target).features(0, 1) == 1.0);
  CHECK(impute(fit_imputer(train, 2), target).features(0, 1) == 1.0);
}

TEST_CASE("schema mismatch is rejected") {
  const auto c = random_cohort(5, 20, 0.0);
  auto other = c;
  other.schema.columns[0].name = "renamed";
  try {
    impute(fit_imputer(c, 3), other);
    FAIL("no error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::SchemaMismatch);
  }
}

TEST_CASE("imputation matches a brute-force neighbour scan") {
  for (std::uint64_t seed = 10; seed < 30; ++seed) {
    const auto train = random_cohort(seed, 60 + seed * 7, 0.15);
    const auto target = random_cohort(seed + 1000, 50, 0.3);
    for (std::size_t k : {1u, 3u, 5u}) {
      const auto model = fit_imputer(train, k);
      const auto out = impute(model, target);
      for (std::size_t r = 0; r < target.size(); ++r)
        for (std::size_t c = 0; c < 3; ++c) {
          if (target.features.is_missing(r, c)) {
            CHECK(out.features(r, c) == brute_force_fill(train, k, target, r, c));
            if (c == 2) CHECK((out.features(r, c) == 0.0 || out.features(r, c) == 1.0));
          } else {
            CHECK(out.features(r, c) == target.features(r, c));
          }
        }
      CHECK(out.complete());
      CHECK(impute(model, out).features == out.features);
    }
  }
}

TEST_CASE("imputer json round trip") {
  const auto c = random_cohort(6, 30, 0.1);
  const auto model = fit_imputer(c, 4);
  test::TempDir dir;
  model.save(dir / "imp.json");
  const auto back = ImputationModel::load(dir / "imp.json");
  CHECK(back.k == 4);
  CHECK(impute(back, c).features == impute(model, c).features);
}
