#pragma once

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>
#include <vector>

#include "rxpolicy/cohort.hpp"
#include "rxpolicy/parallel.hpp"

namespace rxp {

// KNN imputer fitted on a training cohort. Reference rows are the training
// complete cases, kept in raw units so a k=1 fill copies values exactly.
struct ImputationModel {
  std::size_t k = 5;
  FeatureSchema schema;
  std::vector<double> column_means;
  std::vector<double> column_stds;  // 0 marks a column excluded from distances
  std::vector<std::vector<double>> reference_rows;

  nlohmann::json to_json() const {
    return {{"format", "rxpolicy.imputer"},
            {"version", 1},
            {"k", k},
            {"schema", schema.to_json()},
            {"column_means", column_means},
            {"column_stds", column_stds},
            {"reference_rows", reference_rows}};
  }

  static ImputationModel from_json(const nlohmann::json& doc) {
    ImputationModel m;
    try {
      require(doc.at("format") == "rxpolicy.imputer" && doc.at("version") == 1, ErrorKind::InvalidConfig,
              "not an rxpolicy imputer v1 document");
      m.k = doc.at("k").get<std::size_t>();
      m.schema = FeatureSchema::from_json(doc.at("schema"));
      m.column_means = doc.at("column_means").get<std::vector<double>>();
      m.column_stds = doc.at("column_stds").get<std::vector<double>>();
      m.reference_rows = doc.at("reference_rows").get<std::vector<std::vector<double>>>();
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorKind::InvalidConfig, std::string("malformed imputer: ") + e.what());
    }
    return m;
  }

  void save(const std::filesystem::path& path) const { io::write_text(path, to_json().dump(1) + "\n"); }
  static ImputationModel load(const std::filesystem::path& path) {
    return from_json(nlohmann::json::parse(io::read_text(path)));
  }
};

inline ImputationModel fit_imputer(const Cohort& train, std::size_t k = 5) {
  require(k >= 1, ErrorKind::InvalidArgument, "knn k must be >= 1");
  const std::size_t p = train.num_features();
  ImputationModel model;
  model.k = k;
  model.schema = train.schema;
  model.column_means.assign(p, 0.0);
  model.column_stds.assign(p, 0.0);

  // Standardization uses every observed cell, not only complete cases.
  for (std::size_t c = 0; c < p; ++c) {
    double sum = 0.0;
    std::size_t n = 0;
    for (std::size_t r = 0; r < train.size(); ++r)
      if (!train.features.is_missing(r, c)) {
        sum += train.features(r, c);
        ++n;
      }
    if (n == 0) continue;
    const double mean = sum / static_cast<double>(n);
    double ss = 0.0;
    for (std::size_t r = 0; r < train.size(); ++r)
      if (!train.features.is_missing(r, c)) ss += (train.features(r, c) - mean) * (train.features(r, c) - mean);
    model.column_means[c] = mean;
    model.column_stds[c] = n > 1 ? std::sqrt(ss / static_cast<double>(n - 1)) : 0.0;
  }

  for (std::size_t r = 0; r < train.size(); ++r) {
    if (!train.features.row_complete(r)) continue;
    auto row = train.features.row(r);
    model.reference_rows.emplace_back(row.begin(), row.end());
  }
  require(model.reference_rows.size() >= k, ErrorKind::InsufficientCompleteRows,
          std::to_string(model.reference_rows.size()) + " complete rows, need at least k=" + std::to_string(k));
  return model;
}

namespace detail {

struct Neighbor {
  double distance_sq;
  std::size_t index;
};

// k nearest reference rows over the features observed in `target_row`;
// ties go to the lower reference index.
inline std::vector<Neighbor> nearest_references(const ImputationModel& model, const FeatureMatrix& target,
                                                std::size_t target_row) {
  const std::size_t p = model.schema.size();
  std::vector<std::size_t> used;
  for (std::size_t c = 0; c < p; ++c)
    if (!target.is_missing(target_row, c) && model.column_stds[c] > 0.0) used.push_back(c);
  std::size_t usable = 0;
  for (std::size_t c = 0; c < p; ++c) usable += model.column_stds[c] > 0.0;
  const double rescale = used.empty() ? 1.0 : static_cast<double>(usable) / static_cast<double>(used.size());

  std::vector<Neighbor> all(model.reference_rows.size());
  for (std::size_t i = 0; i < model.reference_rows.size(); ++i) {
    const auto& ref = model.reference_rows[i];
    double d = 0.0;
    for (std::size_t c : used) {
      const double gap = (target(target_row, c) - ref[c]) / model.column_stds[c];
      d += gap * gap;
    }
    all[i] = {d * rescale, i};
  }
  const std::size_t k = std::min(model.k, all.size());
  std::partial_sort(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(k), all.end(),
                    [](const Neighbor& a, const Neighbor& b) {
                      return a.distance_sq != b.distance_sq ? a.distance_sq < b.distance_sq : a.index < b.index;
                    });
  all.resize(k);
  return all;
}

}  // namespace detail

inline Cohort impute(const ImputationModel& model, const Cohort& target) {
  require(target.schema.columns == model.schema.columns, ErrorKind::SchemaMismatch,
          "target cohort features differ from the imputer's training schema");
  Cohort out = target;
  const std::size_t p = model.schema.size();
  std::vector<std::size_t> incomplete;
  for (std::size_t r = 0; r < target.size(); ++r)
    if (!target.features.row_complete(r)) incomplete.push_back(r);

  // Each row's fill depends only on that row, so the schedule cannot matter.
  std::vector<std::vector<std::pair<std::size_t, double>>> fills(incomplete.size());
  parallel_for(incomplete.size(), [&](std::size_t j) {
    const std::size_t r = incomplete[j];
    const auto neighbors = detail::nearest_references(model, target.features, r);
    for (std::size_t c = 0; c < p; ++c) {
      if (!target.features.is_missing(r, c)) continue;
      double value = 0.0;
      if (model.schema.columns[c].kind == FeatureKind::Binary) {
        std::size_t ones = 0;
        for (const auto& nb : neighbors) ones += model.reference_rows[nb.index][c] == 1.0;
        value = 2 * ones >= neighbors.size() ? 1.0 : 0.0;
      } else {
        for (const auto& nb : neighbors) value += model.reference_rows[nb.index][c];
        value /= static_cast<double>(neighbors.size());
      }
      fills[j].emplace_back(c, value);
    }
  });
  for (std::size_t j = 0; j < incomplete.size(); ++j)
    for (const auto& [c, v] : fills[j]) out.features.set(incomplete[j], c, v);
  return out;
}

}  // namespace rxp
