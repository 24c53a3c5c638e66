#pragma once

#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "rxpolicy/cohort.hpp"

namespace rxp::test {

// Scratch directory removed on destruction.
class TempDir {
 public:
  TempDir() {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() /
            ("rxpolicy-test-" + std::to_string(rd()) + std::to_string(rd()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline FeatureSchema continuous_schema(const std::vector<std::string>& names) {
  FeatureSchema s;
  for (const auto& n : names) s.columns.push_back({n, FeatureKind::Continuous});
  return s;
}

// Complete cohort from row vectors; ids are "r0", "r1", ...
inline Cohort make_cohort(const FeatureSchema& schema, const std::vector<std::vector<double>>& rows,
                          const std::vector<Arm>& arms, const std::vector<SurvivalOutcome>& outcomes = {}) {
  Cohort c;
  c.schema = schema;
  c.features = FeatureMatrix(rows.size(), schema.size());
  for (std::size_t r = 0; r < rows.size(); ++r)
    for (std::size_t j = 0; j < schema.size(); ++j) c.features.set(r, j, rows[r][j]);
  c.arms = arms;
  c.outcomes = outcomes.empty() ? std::vector<SurvivalOutcome>(rows.size(), SurvivalOutcome{100.0, false}) : outcomes;
  for (std::size_t r = 0; r < rows.size(); ++r) c.ids.push_back("r" + std::to_string(r));
  return c;
}

}  // namespace rxp::test
