#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "rxpolicy/cohort.hpp"
#include "rxpolicy/parallel.hpp"

namespace rxp {

// Nelson-Aalen cumulative hazard, stored at event times only.
struct HazardCurve {
  std::vector<double> times;
  std::vector<double> cumulative_hazard;

  // Step function: value at the last event time <= t, 0 before the first.
  double at(double t) const {
    auto it = std::upper_bound(times.begin(), times.end(), t);
    if (it == times.begin()) return 0.0;
    return cumulative_hazard[static_cast<std::size_t>(it - times.begin()) - 1];
  }

  double survival(double t) const { return std::exp(-at(t)); }
};

// H(t) = sum over event times t_j <= t of d_j / n_j. `rows` may repeat
// (bootstrap multiplicity).
inline HazardCurve nelson_aalen(std::span<const SurvivalOutcome> outcomes, std::span<const std::size_t> rows) {
  std::vector<std::size_t> order(rows.begin(), rows.end());
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return outcomes[a].time_days < outcomes[b].time_days; });
  HazardCurve curve;
  double hazard = 0.0;
  std::size_t i = 0;
  const std::size_t n = order.size();
  while (i < n) {
    const double t = outcomes[order[i]].time_days;
    std::size_t deaths = 0, j = i;
    for (; j < n && outcomes[order[j]].time_days == t; ++j) deaths += outcomes[order[j]].event;
    if (deaths > 0) {
      hazard += static_cast<double>(deaths) / static_cast<double>(n - i);
      curve.times.push_back(t);
      curve.cumulative_hazard.push_back(hazard);
    }
    i = j;
  }
  return curve;
}

inline HazardCurve nelson_aalen(std::span<const SurvivalOutcome> outcomes) {
  std::vector<std::size_t> rows(outcomes.size());
  std::iota(rows.begin(), rows.end(), std::size_t{0});
  return nelson_aalen(outcomes, rows);
}

struct LogRankSplit {
  std::size_t feature = 0;
  double threshold = 0.0;
  double statistic = 0.0;  // chi-square form: (O - E)^2 / V for the left child
};

// Exhaustive log-rank search over `features` for the node holding `rows`.
// Thresholds are midpoints of consecutive distinct values; both children must
// keep >= min_leaf rows; zero-variance candidates are skipped. Earlier
// features and smaller thresholds win ties.
inline std::optional<LogRankSplit> best_logrank_split(const FeatureMatrix& x, std::span<const SurvivalOutcome> y,
                                                      std::span<const std::size_t> rows,
                                                      std::span<const std::size_t> features, std::size_t min_leaf) {
  const std::size_t m = rows.size();
  if (m < 2 * std::max<std::size_t>(min_leaf, 1)) return std::nullopt;

  std::vector<double> event_times;
  for (std::size_t r : rows)
    if (y[r].event) event_times.push_back(y[r].time_days);
  std::sort(event_times.begin(), event_times.end());
  event_times.erase(std::unique(event_times.begin(), event_times.end()), event_times.end());
  const std::size_t nt = event_times.size();
  if (nt == 0) return std::nullopt;

  // at_risk_count[i]: number of event times <= time_i (rows are at risk at
  // event-time indices below it). A death sits at index at_risk_count - 1.
  std::vector<std::size_t> at_risk_count(m);
  std::vector<double> n_total(nt, 0.0), d_total(nt, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    const auto& o = y[rows[i]];
    at_risk_count[i] = static_cast<std::size_t>(
        std::upper_bound(event_times.begin(), event_times.end(), o.time_days) - event_times.begin());
    if (o.event) d_total[at_risk_count[i] - 1] += 1.0;
  }
  {
    std::vector<double> cnt(nt + 1, 0.0);
    for (std::size_t i = 0; i < m; ++i) cnt[at_risk_count[i]] += 1.0;
    double suffix = 0.0;
    for (std::size_t j = nt; j-- > 0;) {
      suffix += cnt[j + 1];
      n_total[j] = suffix;
    }
  }
  std::vector<double> expected_rate(nt), variance_factor(nt);
  for (std::size_t j = 0; j < nt; ++j) {
    expected_rate[j] = d_total[j] / n_total[j];
    variance_factor[j] =
        n_total[j] > 1.0 ? d_total[j] * (n_total[j] - d_total[j]) / (n_total[j] - 1.0) : 0.0;
  }

  std::optional<LogRankSplit> best;
  std::vector<std::size_t> order(m);
  std::vector<double> cnt_left(nt + 1), deaths_left(nt);
  for (std::size_t f : features) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return x(rows[a], f) < x(rows[b], f); });
    std::fill(cnt_left.begin(), cnt_left.end(), 0.0);
    std::fill(deaths_left.begin(), deaths_left.end(), 0.0);
    for (std::size_t pos = 0; pos + 1 < m; ++pos) {
      const std::size_t i = order[pos];
      cnt_left[at_risk_count[i]] += 1.0;
      if (y[rows[i]].event) deaths_left[at_risk_count[i] - 1] += 1.0;
      const double here = x(rows[i], f);
      const double next = x(rows[order[pos + 1]], f);
      if (!(here < next)) continue;
      const std::size_t n_left = pos + 1;
      if (n_left < min_leaf || m - n_left < min_leaf) continue;

      double observed_minus_expected = 0.0, variance = 0.0, at_risk_left = 0.0;
      for (std::size_t j = nt; j-- > 0;) {
        at_risk_left += cnt_left[j + 1];
        observed_minus_expected += deaths_left[j] - at_risk_left * expected_rate[j];
        const double frac = at_risk_left / n_total[j];
        variance += frac * (1.0 - frac) * variance_factor[j];
      }
      if (!(variance > 1e-12)) continue;
      const double stat = observed_minus_expected * observed_minus_expected / variance;
      if (!best || stat > best->statistic) best = LogRankSplit{f, 0.5 * (here + next), stat};
    }
  }
  return best;
}

struct ForestParams {
  static constexpr std::size_t kUnlimitedDepth = std::numeric_limits<std::size_t>::max();

  std::size_t n_trees = 500;
  std::size_t mtry = 0;  // 0: ceil(sqrt(p))
  std::size_t max_depth = kUnlimitedDepth;
  std::size_t min_leaf = 10;
  std::uint64_t seed = 0;
};

struct SurvivalNode {
  std::int32_t feature = -1;  // -1: leaf
  double threshold = 0.0;
  std::uint32_t left = 0;
  std::uint32_t right = 0;
  std::uint32_t leaf = 0;  // index into SurvivalTree::leaves
};

struct SurvivalTree {
  std::vector<SurvivalNode> nodes;
  std::vector<HazardCurve> leaves;
  std::vector<std::uint32_t> oob_rows;

  const HazardCurve& leaf_for(std::span<const double> x) const {
    std::uint32_t n = 0;
    while (nodes[n].feature >= 0)
      n = x[static_cast<std::size_t>(nodes[n].feature)] <= nodes[n].threshold ? nodes[n].left : nodes[n].right;
    return leaves[nodes[n].leaf];
  }
};

class SurvivalForest {
 public:
  std::vector<std::string> feature_names;
  ForestParams params;
  std::size_t n_train = 0;
  std::vector<SurvivalTree> trees;

  double cumulative_hazard(std::span<const double> x, double horizon_days) const {
    double h = 0.0;
    for (const auto& t : trees) h += t.leaf_for(x).at(horizon_days);
    return h / static_cast<double>(trees.size());
  }

  double predict_risk(std::span<const double> x, double horizon_days) const {
    return std::clamp(1.0 - std::exp(-cumulative_hazard(x, horizon_days)), 0.0, 1.0);
  }

  std::string serialize() const;
  static SurvivalForest deserialize(std::string_view bytes);

  void save(const std::filesystem::path& path) const { io::write_text(path, serialize()); }
  static SurvivalForest load(const std::filesystem::path& path) { return deserialize(io::read_text(path)); }

  std::string fingerprint() const { return io::sha256_hex(serialize()).substr(0, 16); }
};

namespace detail {

inline SurvivalTree grow_survival_tree(const Cohort& cohort, const ForestParams& params, std::size_t tree_index,
                                       std::span<const double> cumulative_weights) {
  Rng rng(derive_seed(params.seed, static_cast<std::uint64_t>(tree_index)));
  const std::size_t n = cohort.size();
  const std::size_t p = cohort.num_features();

  std::vector<std::size_t> sample(n);
  std::vector<bool> in_bag(n, false);
  std::uniform_real_distribution<double> unit(0.0, cumulative_weights.back());
  for (auto& s : sample) {
    const double u = unit(rng);
    s = std::min<std::size_t>(
        static_cast<std::size_t>(std::upper_bound(cumulative_weights.begin(), cumulative_weights.end(), u) -
                                 cumulative_weights.begin()),
        n - 1);
    in_bag[s] = true;
  }

  SurvivalTree tree;
  for (std::size_t i = 0; i < n; ++i)
    if (!in_bag[i]) tree.oob_rows.push_back(static_cast<std::uint32_t>(i));

  std::vector<std::size_t> feature_pool(p);
  std::iota(feature_pool.begin(), feature_pool.end(), std::size_t{0});

  struct Pending {
    std::uint32_t node;
    std::vector<std::size_t> rows;
    std::size_t depth;
  };
  std::vector<Pending> stack;
  tree.nodes.push_back({});
  stack.push_back({0, std::move(sample), 0});
  while (!stack.empty()) {
    Pending work = std::move(stack.back());
    stack.pop_back();
    std::optional<LogRankSplit> split;
    if (work.depth < params.max_depth) {
      for (std::size_t i = 0; i < params.mtry; ++i) {
        std::uniform_int_distribution<std::size_t> pick(i, p - 1);
        std::swap(feature_pool[i], feature_pool[pick(rng)]);
      }
      split = best_logrank_split(cohort.features, cohort.outcomes, work.rows,
                                 std::span(feature_pool).first(params.mtry), params.min_leaf);
    }
    if (!split) {
      tree.nodes[work.node].leaf = static_cast<std::uint32_t>(tree.leaves.size());
      tree.leaves.push_back(nelson_aalen(cohort.outcomes, work.rows));
      continue;
    }
    std::vector<std::size_t> left, right;
    for (std::size_t r : work.rows) (cohort.features(r, split->feature) <= split->threshold ? left : right).push_back(r);
    const auto left_id = static_cast<std::uint32_t>(tree.nodes.size());
    tree.nodes.push_back({});
    tree.nodes.push_back({});
    auto& node = tree.nodes[work.node];
    node.feature = static_cast<std::int32_t>(split->feature);
    node.threshold = split->threshold;
    node.left = left_id;
    node.right = left_id + 1;
    stack.push_back({left_id + 1, std::move(right), work.depth + 1});
    stack.push_back({left_id, std::move(left), work.depth + 1});
  }
  return tree;
}

}  // namespace detail

// One tree per bootstrap sample (size N, with replacement; draw probability
// proportional to sample_weights when given). Tree t draws from
// derive_seed(seed, t), so the forest does not depend on the thread schedule.
inline SurvivalForest fit_forest(const Cohort& cohort, ForestParams params,
                                 std::span<const double> sample_weights = {}) {
  cohort.require_complete("fit_forest");
  const std::size_t p = cohort.num_features();
  require(p >= 1, ErrorKind::InvalidArgument, "survival forest needs at least one feature");
  require(params.n_trees >= 1, ErrorKind::InvalidArgument, "n_trees must be >= 1");
  require(params.min_leaf >= 1, ErrorKind::InvalidArgument, "min_leaf must be >= 1");
  if (params.mtry == 0) params.mtry = static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(p))));
  require(params.mtry <= p, ErrorKind::InvalidArgument, "mtry must be <= number of features");
  require(cohort.size() >= 2 * params.min_leaf, ErrorKind::TooFewRows,
          std::to_string(cohort.size()) + " rows, need at least 2*min_leaf=" + std::to_string(2 * params.min_leaf));
  require(std::any_of(cohort.outcomes.begin(), cohort.outcomes.end(), [](const auto& o) { return o.event; }),
          ErrorKind::NoEvents, "every patient is censored");

  std::vector<double> cumulative(cohort.size());
  double total = 0.0;
  for (std::size_t i = 0; i < cohort.size(); ++i) {
    const double w = sample_weights.empty() ? 1.0 : sample_weights[i];
    require(w >= 0.0 && std::isfinite(w), ErrorKind::InvalidArgument, "sample weights must be finite and >= 0");
    total += w;
    cumulative[i] = total;
  }
  require(sample_weights.empty() || sample_weights.size() == cohort.size(), ErrorKind::InconsistentDimensions,
          "one sample weight per row");
  require(total > 0.0, ErrorKind::InvalidArgument, "sample weights sum to zero");

  SurvivalForest forest;
  for (const auto& c : cohort.schema.columns) forest.feature_names.push_back(c.name);
  forest.params = params;
  forest.n_train = cohort.size();
  forest.trees.resize(params.n_trees);
  parallel_for(params.n_trees,
               [&](std::size_t t) { forest.trees[t] = detail::grow_survival_tree(cohort, params, t, cumulative); });
  return forest;
}

// Harrell's C: pairs with time_i < time_j and an observed event for i;
// concordant when risk_i > risk_j, risk ties count one half.
inline double harrell_c(std::span<const double> risk, std::span<const SurvivalOutcome> outcomes) {
  require(risk.size() == outcomes.size(), ErrorKind::InconsistentDimensions, "one risk per outcome");
  double concordant = 0.0;
  std::size_t comparable = 0;
  for (std::size_t i = 0; i < risk.size(); ++i) {
    if (!outcomes[i].event) continue;
    for (std::size_t j = 0; j < risk.size(); ++j) {
      if (!(outcomes[i].time_days < outcomes[j].time_days)) continue;
      ++comparable;
      if (risk[i] > risk[j])
        concordant += 1.0;
      else if (risk[i] == risk[j])
        concordant += 0.5;
    }
  }
  require(comparable > 0, ErrorKind::NoComparablePairs, "no comparable pairs for concordance");
  return concordant / static_cast<double>(comparable);
}

// Out-of-bag risk at the horizon for each training row.
inline std::vector<double> oob_risks(const SurvivalForest& forest, const Cohort& train, double horizon_days) {
  require(train.size() == forest.n_train, ErrorKind::InconsistentDimensions,
          "OOB predictions need the forest's own training cohort");
  std::vector<double> hazard(train.size(), 0.0);
  std::vector<std::size_t> count(train.size(), 0);
  for (const auto& tree : forest.trees)
    for (std::uint32_t r : tree.oob_rows) {
      hazard[r] += tree.leaf_for(train.features.row(r)).at(horizon_days);
      ++count[r];
    }
  std::vector<double> risk(train.size());
  for (std::size_t r = 0; r < train.size(); ++r) {
    require(count[r] > 0, ErrorKind::NoOutOfBagTrees,
            "patient '" + train.ids[r] + "' is in-bag for every tree; refit with another seed or more trees");
    risk[r] = 1.0 - std::exp(-hazard[r] / static_cast<double>(count[r]));
  }
  return risk;
}

inline double oob_concordance(const SurvivalForest& forest, const Cohort& train, double horizon_days) {
  const auto risk = oob_risks(forest, train, horizon_days);
  return harrell_c(risk, train.outcomes);
}

// --- binary format "RXSF" v1 (little-endian) ---

namespace detail {

class ByteWriter {
 public:
  template <typename T>
  void put(T value) {
    static_assert(std::is_trivially_copyable_v<T>);
    const auto* p = reinterpret_cast<const char*>(&value);
    bytes_.append(p, sizeof(T));
  }
  void put_string(const std::string& s) {
    put<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
    bytes_ += s;
  }
  template <typename T>
  void put_vector(const std::vector<T>& v) {
    put<std::uint64_t>(v.size());
    for (const auto& x : v) put<T>(x);
  }
  std::string take() { return std::move(bytes_); }

 private:
  std::string bytes_;
};

class ByteReader {
 public:
  explicit ByteReader(std::string_view bytes) : bytes_(bytes) {}
  template <typename T>
  T get() {
    require(pos_ + sizeof(T) <= bytes_.size(), ErrorKind::InvalidConfig, "truncated forest file");
    T value;
    std::memcpy(&value, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return value;
  }
  std::string get_string() {
    const auto n = get<std::uint32_t>();
    require(pos_ + n <= bytes_.size(), ErrorKind::InvalidConfig, "truncated forest file");
    std::string s(bytes_.substr(pos_, n));
    pos_ += n;
    return s;
  }
  template <typename T>
  std::vector<T> get_vector() {
    const auto n = get<std::uint64_t>();
    require(n <= (bytes_.size() - pos_) / sizeof(T), ErrorKind::InvalidConfig, "truncated forest file");
    std::vector<T> v(n);
    for (auto& x : v) x = get<T>();
    return v;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

inline constexpr char kForestMagic[4] = {'R', 'X', 'S', 'F'};
inline constexpr std::uint32_t kForestVersion = 1;

}  // namespace detail

inline std::string SurvivalForest::serialize() const {
  detail::ByteWriter w;
  for (char c : detail::kForestMagic) w.put<char>(c);
  w.put<std::uint32_t>(detail::kForestVersion);
  w.put<std::uint64_t>(feature_names.size());
  for (const auto& name : feature_names) w.put_string(name);
  w.put<std::uint64_t>(params.n_trees);
  w.put<std::uint64_t>(params.mtry);
  w.put<std::uint64_t>(params.max_depth);
  w.put<std::uint64_t>(params.min_leaf);
  w.put<std::uint64_t>(params.seed);
  w.put<std::uint64_t>(n_train);
  w.put<std::uint64_t>(trees.size());
  for (const auto& t : trees) {
    w.put<std::uint64_t>(t.nodes.size());
    for (const auto& n : t.nodes) {
      w.put<std::int32_t>(n.feature);
      w.put<double>(n.threshold);
      w.put<std::uint32_t>(n.left);
      w.put<std::uint32_t>(n.right);
      w.put<std::uint32_t>(n.leaf);
    }
    w.put<std::uint64_t>(t.leaves.size());
    for (const auto& leaf : t.leaves) {
      w.put_vector(leaf.times);
      w.put_vector(leaf.cumulative_hazard);
    }
    w.put_vector(t.oob_rows);
  }
  return w.take();
}

inline SurvivalForest SurvivalForest::deserialize(std::string_view bytes) {
  detail::ByteReader r(bytes);
  for (char c : detail::kForestMagic)
    require(r.get<char>() == c, ErrorKind::InvalidConfig, "not an rxpolicy survival forest file");
  const auto version = r.get<std::uint32_t>();
  require(version == detail::kForestVersion, ErrorKind::InvalidConfig,
          "unsupported forest format version " + std::to_string(version));
  SurvivalForest f;
  const auto p = r.get<std::uint64_t>();
  for (std::uint64_t i = 0; i < p; ++i) f.feature_names.push_back(r.get_string());
  f.params.n_trees = r.get<std::uint64_t>();
  f.params.mtry = r.get<std::uint64_t>();
  f.params.max_depth = r.get<std::uint64_t>();
  f.params.min_leaf = r.get<std::uint64_t>();
  f.params.seed = r.get<std::uint64_t>();
  f.n_train = r.get<std::uint64_t>();
  f.trees.resize(r.get<std::uint64_t>());
  for (auto& t : f.trees) {
    t.nodes.resize(r.get<std::uint64_t>());
    for (auto& n : t.nodes) {
      n.feature = r.get<std::int32_t>();
      n.threshold = r.get<double>();
      n.left = r.get<std::uint32_t>();
      n.right = r.get<std::uint32_t>();
      n.leaf = r.get<std::uint32_t>();
    }
    t.leaves.resize(r.get<std::uint64_t>());
    for (auto& leaf : t.leaves) {
      leaf.times = r.get_vector<double>();
      leaf.cumulative_hazard = r.get_vector<double>();
    }
    t.oob_rows = r.get_vector<std::uint32_t>();
  }
  require(r.done(), ErrorKind::InvalidConfig, "trailing bytes in forest file");
  require(!f.trees.empty(), ErrorKind::InvalidConfig, "forest file holds no trees");
  return f;
}

}  // namespace rxp
