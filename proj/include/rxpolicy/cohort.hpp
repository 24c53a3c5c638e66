#pragma once

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "rxpolicy/error.hpp"
#include "rxpolicy/io.hpp"

namespace rxp {

enum class FeatureKind { Continuous, Binary };

inline std::string_view to_string(FeatureKind kind) {
  return kind == FeatureKind::Binary ? "binary" : "continuous";
}

struct FeatureColumn {
  std::string name;
  FeatureKind kind = FeatureKind::Continuous;

  bool operator==(const FeatureColumn&) const = default;
};

struct FeatureSchema {
  std::vector<FeatureColumn> columns;
  std::string treatment_column = "treatment";
  std::string time_column = "time";
  std::string event_column = "event";
  std::string id_column = "id";

  bool operator==(const FeatureSchema&) const = default;

  std::size_t size() const { return columns.size(); }

  std::optional<std::size_t> index_of(std::string_view name) const {
    for (std::size_t i = 0; i < columns.size(); ++i)
      if (columns[i].name == name) return i;
    return std::nullopt;
  }

  std::size_t require_index(std::string_view name) const {
    auto idx = index_of(name);
    require(idx.has_value(), ErrorKind::MissingFeature, "feature '" + std::string(name) + "' not in schema");
    return *idx;
  }

  void validate() const {
    std::set<std::string> seen;
    for (const auto& c : columns) {
      require(!c.name.empty(), ErrorKind::InvalidConfig, "schema feature with empty name");
      require(seen.insert(c.name).second, ErrorKind::InvalidConfig, "duplicate feature column '" + c.name + "'");
    }
    for (const auto* special : {&treatment_column, &time_column, &event_column, &id_column}) {
      require(!seen.count(*special), ErrorKind::InvalidConfig,
              "column '" + *special + "' cannot be both a feature and a treatment/time/event/id column");
    }
  }

  nlohmann::json to_json() const {
    nlohmann::json features = nlohmann::json::array();
    for (const auto& c : columns)
      features.push_back({{"name", c.name}, {"kind", std::string(to_string(c.kind))}});
    return {{"features", features},
            {"treatment", treatment_column},
            {"time", time_column},
            {"event", event_column},
            {"id", id_column}};
  }

  static FeatureSchema from_json(const nlohmann::json& doc) {
    FeatureSchema schema;
    try {
      for (const auto& f : doc.at("features")) {
        const auto kind = f.at("kind").get<std::string>();
        require(kind == "continuous" || kind == "binary", ErrorKind::InvalidConfig,
                "feature kind must be 'continuous' or 'binary', got '" + kind + "'");
        schema.columns.push_back(
            {f.at("name").get<std::string>(), kind == "binary" ? FeatureKind::Binary : FeatureKind::Continuous});
      }
      schema.treatment_column = doc.value("treatment", schema.treatment_column);
      schema.time_column = doc.value("time", schema.time_column);
      schema.event_column = doc.value("event", schema.event_column);
      schema.id_column = doc.value("id", schema.id_column);
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorKind::InvalidConfig, std::string("malformed schema: ") + e.what());
    }
    schema.validate();
    return schema;
  }

  static FeatureSchema load(const std::filesystem::path& path) {
    try {
      return from_json(nlohmann::json::parse(io::read_text(path)));
    } catch (const nlohmann::json::parse_error& e) {
      throw Error(ErrorKind::InvalidConfig, path.string() + ": " + e.what());
    }
  }
};

// Fixed encoding: SAVR=0, TAVR=1. Rewards-matrix columns follow it.
enum class Arm : std::uint8_t { SAVR = 0, TAVR = 1 };

inline constexpr std::array<Arm, 2> kArms{Arm::SAVR, Arm::TAVR};

constexpr std::size_t index(Arm arm) { return static_cast<std::size_t>(arm); }
constexpr Arm other(Arm arm) { return arm == Arm::SAVR ? Arm::TAVR : Arm::SAVR; }
constexpr std::string_view to_string(Arm arm) { return arm == Arm::SAVR ? "SAVR" : "TAVR"; }

inline std::optional<Arm> parse_arm(std::string_view text) {
  std::string upper;
  for (char c : text)
    if (!std::isspace(static_cast<unsigned char>(c))) upper.push_back(static_cast<char>(std::toupper(c)));
  if (upper == "SAVR") return Arm::SAVR;
  if (upper == "TAVR") return Arm::TAVR;
  return std::nullopt;
}

struct SurvivalOutcome {
  double time_days = 0.0;
  bool event = false;  // true: death observed at time_days; false: censored there

  bool operator==(const SurvivalOutcome&) const = default;
};

enum class Label { Good, Bad, Indeterminate };

constexpr std::string_view to_string(Label label) {
  switch (label) {
    case Label::Good: return "good";
    case Label::Bad: return "bad";
    case Label::Indeterminate: return "indeterminate";
  }
  return "?";
}

constexpr double kDefaultHorizonDays = 1825.0;

// Row-major N x p matrix with an explicit observed mask.
class FeatureMatrix {
 public:
  FeatureMatrix() = default;
  FeatureMatrix(std::size_t rows, std::size_t cols)
      : rows_(rows), cols_(cols), values_(rows * cols, 0.0), observed_(rows * cols, 1) {}

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }

  double operator()(std::size_t r, std::size_t c) const { return values_[r * cols_ + c]; }
  bool is_missing(std::size_t r, std::size_t c) const { return observed_[r * cols_ + c] == 0; }

  std::optional<double> cell(std::size_t r, std::size_t c) const {
    if (is_missing(r, c)) return std::nullopt;
    return values_[r * cols_ + c];
  }

  void set(std::size_t r, std::size_t c, double v) {
    values_[r * cols_ + c] = v;
    observed_[r * cols_ + c] = 1;
  }
  void set_missing(std::size_t r, std::size_t c) {
    values_[r * cols_ + c] = 0.0;
    observed_[r * cols_ + c] = 0;
  }

  std::span<const double> row(std::size_t r) const { return {values_.data() + r * cols_, cols_}; }

  bool row_complete(std::size_t r) const {
    return std::all_of(observed_.begin() + static_cast<std::ptrdiff_t>(r * cols_),
                       observed_.begin() + static_cast<std::ptrdiff_t>((r + 1) * cols_),
                       [](std::uint8_t o) { return o != 0; });
  }

  std::size_t missing_count() const {
    return static_cast<std::size_t>(std::count(observed_.begin(), observed_.end(), std::uint8_t{0}));
  }

  void append_row(const FeatureMatrix& other, std::size_t r) {
    values_.insert(values_.end(), other.values_.begin() + static_cast<std::ptrdiff_t>(r * other.cols_),
                   other.values_.begin() + static_cast<std::ptrdiff_t>((r + 1) * other.cols_));
    observed_.insert(observed_.end(), other.observed_.begin() + static_cast<std::ptrdiff_t>(r * other.cols_),
                     other.observed_.begin() + static_cast<std::ptrdiff_t>((r + 1) * other.cols_));
    ++rows_;
  }

  void set_cols(std::size_t cols) {
    if (rows_ == 0) cols_ = cols;
  }

  bool operator==(const FeatureMatrix&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> values_;
  std::vector<std::uint8_t> observed_;
};

struct Cohort {
  FeatureSchema schema;
  FeatureMatrix features;
  std::vector<Arm> arms;
  std::vector<SurvivalOutcome> outcomes;
  std::vector<std::string> ids;

  std::size_t size() const { return arms.size(); }
  std::size_t num_features() const { return schema.size(); }

  bool complete() const { return features.missing_count() == 0; }

  void require_complete(std::string_view stage) const {
    for (std::size_t r = 0; r < size(); ++r) {
      if (features.row_complete(r)) continue;
      for (std::size_t c = 0; c < num_features(); ++c)
        require(!features.is_missing(r, c), ErrorKind::MissingValues,
                std::string(stage) + ": patient '" + ids[r] + "' has missing '" + schema.columns[c].name +
                    "' (impute first)");
    }
  }

  void validate() const {
    schema.validate();
    const std::size_t n = size();
    require(outcomes.size() == n && ids.size() == n && features.rows() == n, ErrorKind::InconsistentDimensions,
            "cohort row counts differ");
    require(features.cols() == schema.size() || n == 0, ErrorKind::InconsistentDimensions,
            "feature matrix width does not match schema");
    for (std::size_t r = 0; r < n; ++r) {
      require(outcomes[r].time_days >= 0.0, ErrorKind::UnparsableCell,
              "patient '" + ids[r] + "': negative follow-up time");
      for (std::size_t c = 0; c < schema.size(); ++c) {
        if (schema.columns[c].kind != FeatureKind::Binary || features.is_missing(r, c)) continue;
        const double v = features(r, c);
        require(v == 0.0 || v == 1.0, ErrorKind::UnparsableCell,
                "patient '" + ids[r] + "': binary feature '" + schema.columns[c].name + "' must be 0 or 1");
      }
    }
  }

  Cohort subset(std::span<const std::size_t> rows) const {
    Cohort out;
    out.schema = schema;
    out.features = FeatureMatrix(0, schema.size());
    for (std::size_t r : rows) {
      out.features.append_row(features, r);
      out.arms.push_back(arms[r]);
      out.outcomes.push_back(outcomes[r]);
      out.ids.push_back(ids[r]);
    }
    return out;
  }

  std::vector<double> column(std::size_t c) const {
    std::vector<double> out(size());
    for (std::size_t r = 0; r < size(); ++r) out[r] = features(r, c);
    return out;
  }
};

inline Label derive_label(const SurvivalOutcome& outcome, double horizon_days) {
  if (outcome.event && outcome.time_days <= horizon_days) return Label::Bad;
  if (outcome.time_days >= horizon_days) return Label::Good;
  return Label::Indeterminate;
}

inline std::vector<Label> derive_labels(const Cohort& cohort, double horizon_days = kDefaultHorizonDays) {
  require(horizon_days > 0.0, ErrorKind::InvalidArgument, "horizon_days must be positive");
  std::vector<Label> labels;
  labels.reserve(cohort.size());
  for (const auto& o : cohort.outcomes) labels.push_back(derive_label(o, horizon_days));
  return labels;
}

// Order-preserving partition: (SAVR rows, TAVR rows).
inline std::pair<Cohort, Cohort> split_by_arm(const Cohort& cohort) {
  std::vector<std::size_t> savr, tavr;
  for (std::size_t i = 0; i < cohort.size(); ++i) (cohort.arms[i] == Arm::SAVR ? savr : tavr).push_back(i);
  return {cohort.subset(savr), cohort.subset(tavr)};
}

namespace detail {

inline std::string cell_context(std::size_t row, std::string_view column) {
  return "row " + std::to_string(row + 1) + ", column '" + std::string(column) + "'";
}

}  // namespace detail

inline Cohort parse_cohort(const io::CsvTable& table, const FeatureSchema& schema) {
  schema.validate();
  auto need = [&](const std::string& name) {
    auto idx = table.column(name);
    require(idx.has_value(), ErrorKind::MissingColumn, "column '" + name + "' not found in header");
    return *idx;
  };
  std::vector<std::size_t> feature_cols;
  for (const auto& c : schema.columns) feature_cols.push_back(need(c.name));
  const std::size_t treat_col = need(schema.treatment_column);
  const std::size_t time_col = need(schema.time_column);
  const std::size_t event_col = need(schema.event_column);
  const auto id_col = table.column(schema.id_column);

  Cohort cohort;
  cohort.schema = schema;
  cohort.features = FeatureMatrix(table.rows.size(), schema.size());
  for (std::size_t r = 0; r < table.rows.size(); ++r) {
    const auto& row = table.rows[r];
    for (std::size_t c = 0; c < schema.size(); ++c) {
      const std::string& text = row[feature_cols[c]];
      if (text.find_first_not_of(" \t") == std::string::npos || text == "NA") {
        cohort.features.set_missing(r, c);
        continue;
      }
      auto value = io::parse_double(text);
      require(value.has_value(), ErrorKind::UnparsableCell,
              detail::cell_context(r, schema.columns[c].name) + ": cannot parse '" + text + "'");
      if (schema.columns[c].kind == FeatureKind::Binary)
        require(*value == 0.0 || *value == 1.0, ErrorKind::UnparsableCell,
                detail::cell_context(r, schema.columns[c].name) + ": binary cell must be 0 or 1");
      cohort.features.set(r, c, *value);
    }
    auto arm = parse_arm(row[treat_col]);
    require(arm.has_value(), ErrorKind::UnknownTreatment,
            detail::cell_context(r, schema.treatment_column) + ": '" + row[treat_col] + "'");
    cohort.arms.push_back(*arm);

    auto time = io::parse_double(row[time_col]);
    require(time.has_value() && *time >= 0.0, ErrorKind::UnparsableCell,
            detail::cell_context(r, schema.time_column) + ": need a time >= 0, got '" + row[time_col] + "'");
    auto event = io::parse_double(row[event_col]);
    require(event.has_value() && (*event == 0.0 || *event == 1.0), ErrorKind::UnparsableCell,
            detail::cell_context(r, schema.event_column) + ": need 0 or 1, got '" + row[event_col] + "'");
    cohort.outcomes.push_back({*time, *event == 1.0});
    cohort.ids.push_back(id_col ? row[*id_col] : std::to_string(r + 1));
  }
  return cohort;
}

inline Cohort load_cohort(const std::filesystem::path& path, const FeatureSchema& schema) {
  try {
    return parse_cohort(io::read_csv(path), schema);
  } catch (const Error& e) {
    throw Error(e.kind(), path.string() + ": " + std::string(e.what()).substr(to_string(e.kind()).size() + 2));
  }
}

// Columns: id, features..., treatment, time, event.
inline std::string cohort_to_csv(const Cohort& cohort) {
  std::ostringstream out;
  const auto& s = cohort.schema;
  out << s.id_column;
  for (const auto& c : s.columns) out << ',' << c.name;
  out << ',' << s.treatment_column << ',' << s.time_column << ',' << s.event_column << '\n';
  for (std::size_t r = 0; r < cohort.size(); ++r) {
    out << cohort.ids[r];
    for (std::size_t c = 0; c < s.size(); ++c) {
      out << ',';
      if (!cohort.features.is_missing(r, c)) out << io::format_number(cohort.features(r, c));
    }
    out << ',' << to_string(cohort.arms[r]) << ',' << io::format_number(cohort.outcomes[r].time_days) << ','
        << (cohort.outcomes[r].event ? 1 : 0) << '\n';
  }
  return out.str();
}

inline void write_cohort(const std::filesystem::path& path, const Cohort& cohort) {
  io::write_text(path, cohort_to_csv(cohort));
}

}  // namespace rxp
