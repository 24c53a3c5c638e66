#pragma once

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <map>
#include <memory>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "rxpolicy/cohort.hpp"
#include "rxpolicy/parallel.hpp"
#include "rxpolicy/rewards.hpp"

namespace rxp {

struct PolicyNode {
  std::int32_t feature = -1;  // -1: leaf
  double threshold = 0.0;     // x <= threshold goes left
  std::uint32_t left = 0;
  std::uint32_t right = 0;
  Arm prescription = Arm::SAVR;
  std::size_t n_train = 0;

  bool is_leaf() const { return feature < 0; }
};

struct PolicyTreeParams {
  std::size_t max_depth = 3;
  std::size_t min_leaf = 20;
  std::size_t n_restarts = 20;
  std::uint64_t seed = 0;
};

// Axis-aligned prescription tree. Nodes are stored in preorder; node 0 is
// the root and node ids in exports are these indices.
struct PolicyTree {
  std::vector<std::string> feature_names;
  std::vector<PolicyNode> nodes;
  std::size_t max_depth = 0;
  std::size_t min_leaf = 1;
  double objective_value = 0.0;

  std::size_t leaf_of(std::span<const double> x) const {
    std::size_t n = 0;
    while (!nodes[n].is_leaf())
      n = x[static_cast<std::size_t>(nodes[n].feature)] <= nodes[n].threshold ? nodes[n].left : nodes[n].right;
    return n;
  }

  Arm prescribe(std::span<const double> x) const {
    require(x.size() == feature_names.size(), ErrorKind::InconsistentDimensions,
            "feature vector has " + std::to_string(x.size()) + " entries, tree expects " +
                std::to_string(feature_names.size()));
    return nodes[leaf_of(x)].prescription;
  }

  std::size_t depth() const {
    std::vector<std::size_t> d(nodes.size(), 0);
    std::size_t deepest = 0;
    for (std::size_t i = 0; i < nodes.size(); ++i) {
      deepest = std::max(deepest, d[i]);
      if (!nodes[i].is_leaf()) d[nodes[i].left] = d[nodes[i].right] = d[i] + 1;
    }
    return deepest;
  }

  std::size_t leaf_count() const {
    return static_cast<std::size_t>(
        std::count_if(nodes.begin(), nodes.end(), [](const PolicyNode& n) { return n.is_leaf(); }));
  }

  nlohmann::json to_json() const;
  static PolicyTree from_json(const nlohmann::json& doc);
  std::string to_json_text() const { return to_json().dump(2) + "\n"; }
  std::string to_dot() const;
  std::string fingerprint() const { return io::sha256_hex(to_json_text()).substr(0, 16); }

  void save(const std::filesystem::path& path) const { io::write_text(path, to_json_text()); }
  static PolicyTree load(const std::filesystem::path& path) {
    try {
      return from_json(nlohmann::json::parse(io::read_text(path)));
    } catch (const nlohmann::json::parse_error& e) {
      throw Error(ErrorKind::InvalidConfig, path.string() + ": " + e.what());
    }
  }
};

namespace detail {

inline double round12(double v) { return std::stod(io::format_number(v)); }

inline Arm cheaper_arm(double cost_savr, double cost_tavr) { return cost_tavr < cost_savr ? Arm::TAVR : Arm::SAVR; }

struct SearchNode {
  std::int32_t feature = -1;
  double threshold = 0.0;
  std::unique_ptr<SearchNode> left, right;

  bool is_leaf() const { return feature < 0; }

  std::unique_ptr<SearchNode> clone() const {
    auto c = std::make_unique<SearchNode>();
    c->feature = feature;
    c->threshold = threshold;
    if (left) c->left = left->clone();
    if (right) c->right = right->clone();
    return c;
  }

  std::size_t depth() const { return is_leaf() ? 0 : 1 + std::max(left->depth(), right->depth()); }
};

// Best single split (or none) of one row set, swept feature by feature over
// rows presented in ascending feature order.
struct SplitSweep {
  double total0 = 0.0, total1 = 0.0;
  std::size_t total_n = 0;
  double pre0 = 0.0, pre1 = 0.0;
  std::size_t n = 0;
  double last_value = 0.0;
  double best_cost = 0.0;
  std::int32_t best_feature = -1;
  double best_threshold = 0.0;
  double tolerance = 0.0;

  void init(double t0, double t1, std::size_t count) {
    total0 = t0;
    total1 = t1;
    total_n = count;
    best_cost = std::min(t0, t1);
    best_feature = -1;
    tolerance = 1e-12 * (1.0 + std::fabs(best_cost));
  }
  void start_feature() {
    pre0 = pre1 = 0.0;
    n = 0;
  }
  void push(double value, double c0, double c1, std::size_t min_leaf, std::int32_t feature) {
    if (n > 0 && value > last_value && n >= min_leaf && total_n - n >= min_leaf) {
      const double cost = std::min(pre0, pre1) + std::min(total0 - pre0, total1 - pre1);
      if (cost < best_cost - tolerance) {
        best_cost = cost;
        best_feature = feature;
        best_threshold = 0.5 * (last_value + value);
      }
    }
    pre0 += c0;
    pre1 += c1;
    ++n;
    last_value = value;
  }
};

class PolicySearch {
 public:
  PolicySearch(const FeatureMatrix& x, const RewardsMatrix& rewards, std::span<const double> weights,
               std::size_t min_leaf)
      : n_(x.rows()), p_(x.cols()), min_leaf_(min_leaf), columns_(p_, std::vector<double>(n_)), cost0_(n_),
        cost1_(n_), order_(p_), side_(n_, 0) {
    for (std::size_t i = 0; i < n_; ++i) {
      for (std::size_t f = 0; f < p_; ++f) columns_[f][i] = x(i, f);
      cost0_[i] = weights[i] * rewards.gamma[i][0];
      cost1_[i] = weights[i] * rewards.gamma[i][1];
    }
    for (std::size_t f = 0; f < p_; ++f) {
      order_[f].resize(n_);
      std::iota(order_[f].begin(), order_[f].end(), std::size_t{0});
      std::stable_sort(order_[f].begin(), order_[f].end(),
                       [&](std::size_t a, std::size_t b) { return columns_[f][a] < columns_[f][b]; });
    }
  }

  std::vector<std::size_t> all_rows() const {
    std::vector<std::size_t> rows(n_);
    std::iota(rows.begin(), rows.end(), std::size_t{0});
    return rows;
  }

  std::pair<double, double> sums(std::span<const std::size_t> rows) const {
    double s0 = 0.0, s1 = 0.0;
    for (std::size_t r : rows) {
      s0 += cost0_[r];
      s1 += cost1_[r];
    }
    return {s0, s1};
  }

  double leaf_cost(std::span<const std::size_t> rows) const {
    auto [s0, s1] = sums(rows);
    return std::min(s0, s1);
  }

  // Cost of a fixed structure on `rows`; nullopt when some non-root leaf
  // would hold fewer than min_leaf rows.
  std::optional<double> evaluate(const SearchNode& node, std::span<const std::size_t> rows, bool is_root) const {
    if (node.is_leaf()) {
      if (!is_root && rows.size() < min_leaf_) return std::nullopt;
      return leaf_cost(rows);
    }
    std::vector<std::size_t> left, right;
    split_rows(node, rows, left, right);
    auto l = evaluate(*node.left, left, false);
    if (!l) return std::nullopt;
    auto r = evaluate(*node.right, right, false);
    if (!r) return std::nullopt;
    return *l + *r;
  }

  void split_rows(const SearchNode& node, std::span<const std::size_t> rows, std::vector<std::size_t>& left,
                  std::vector<std::size_t>& right) const {
    const auto& col = columns_[static_cast<std::size_t>(node.feature)];
    for (std::size_t r : rows) (col[r] <= node.threshold ? left : right).push_back(r);
  }

  // Rows of a set, per feature, in ascending feature order.
  std::vector<std::vector<std::size_t>> sorted_orders(std::span<const std::size_t> rows) const {
    std::vector<std::uint8_t> member(n_, 0);
    for (std::size_t r : rows) member[r] = 1;
    std::vector<std::vector<std::size_t>> orders(p_);
    for (std::size_t f = 0; f < p_; ++f) {
      orders[f].reserve(rows.size());
      for (std::size_t r : order_[f])
        if (member[r]) orders[f].push_back(r);
    }
    return orders;
  }

  SplitSweep best_single_split(const std::vector<std::vector<std::size_t>>& orders,
                               std::span<const std::size_t> features) const {
    SplitSweep sweep;
    const auto& rows = orders[0];
    auto [s0, s1] = sums(rows);
    sweep.init(s0, s1, rows.size());
    for (std::size_t f : features) {
      sweep.start_feature();
      for (std::size_t r : orders[f])
        sweep.push(columns_[f][r], cost0_[r], cost1_[r], min_leaf_, static_cast<std::int32_t>(f));
    }
    return sweep;
  }

  // Greedy top-down growth on the immediate child-leaf cost. With an RNG,
  // each node only considers a random half of the features.
  std::unique_ptr<SearchNode> grow_greedy(std::span<const std::size_t> rows, std::size_t depth_left,
                                          Rng* rng) const {
    auto node = std::make_unique<SearchNode>();
    if (depth_left == 0 || rows.size() < 2 * min_leaf_ || rows.empty()) return node;
    std::vector<std::size_t> features(p_);
    std::iota(features.begin(), features.end(), std::size_t{0});
    if (rng && p_ > 1) {
      std::shuffle(features.begin(), features.end(), *rng);
      features.resize((p_ + 1) / 2);
      std::sort(features.begin(), features.end());
    }
    const auto orders = sorted_orders(rows);
    const auto sweep = best_single_split(orders, features);
    if (sweep.best_feature < 0) return node;
    node->feature = sweep.best_feature;
    node->threshold = sweep.best_threshold;
    std::vector<std::size_t> left, right;
    split_rows(*node, rows, left, right);
    node->left = grow_greedy(left, depth_left - 1, rng);
    node->right = grow_greedy(right, depth_left - 1, rng);
    return node;
  }

  // Re-optimizes the split at `slot` (holding `rows`, with `depth_left` levels
  // available below it). Children are solved exactly when they may be at most
  // one level deep; deeper children keep their current structure. Returns
  // true on a strict improvement.
  bool reoptimize(std::unique_ptr<SearchNode>& slot, std::span<const std::size_t> rows, std::size_t depth_left,
                  bool is_root) const {
    if (depth_left == 0) return false;
    const auto current = evaluate(*slot, rows, is_root);
    const double current_cost = current.value_or(std::numeric_limits<double>::infinity());
    const double tolerance = 1e-12 * (1.0 + std::fabs(std::isfinite(current_cost) ? current_cost : 0.0));

    enum class Move { None, Leaf, Split, PromoteLeft, PromoteRight };
    Move move = Move::None;
    double best = current_cost - tolerance;
    std::int32_t best_feature = -1;
    double best_threshold = 0.0;

    const double as_leaf = leaf_cost(rows);
    if (as_leaf < best) {
      best = as_leaf;
      move = Move::Leaf;
    }
    const SearchNode& node = *slot;
    const bool keep_children = depth_left >= 3 && !node.is_leaf();
    if (keep_children) {
      if (auto c = evaluate(*node.left, rows, is_root); c && *c < best) {
        best = *c;
        move = Move::PromoteLeft;
      }
      if (auto c = evaluate(*node.right, rows, is_root); c && *c < best) {
        best = *c;
        move = Move::PromoteRight;
      }
    }

    if (rows.size() >= 2 * min_leaf_) {
      const auto orders = sorted_orders(rows);
      auto [t0, t1] = sums(rows);
      std::vector<std::size_t> all_features(p_);
      std::iota(all_features.begin(), all_features.end(), std::size_t{0});
      for (std::size_t f = 0; f < p_; ++f) {
        const auto& ord = orders[f];
        for (std::size_t r : ord) side_[r] = 1;
        double l0 = 0.0, l1 = 0.0;
        for (std::size_t pos = 0; pos + 1 < ord.size(); ++pos) {
          const std::size_t r = ord[pos];
          side_[r] = 0;
          l0 += cost0_[r];
          l1 += cost1_[r];
          const double here = columns_[f][r];
          const double next = columns_[f][ord[pos + 1]];
          const std::size_t n_left = pos + 1;
          if (!(here < next) || n_left < min_leaf_ || ord.size() - n_left < min_leaf_) continue;
          double cost;
          if (depth_left == 1) {
            cost = std::min(l0, l1) + std::min(t0 - l0, t1 - l1);
          } else if (!keep_children) {
            auto [left_sweep, right_sweep] = two_sided_sweeps(orders, l0, l1, n_left, t0 - l0, t1 - l1,
                                                              ord.size() - n_left, all_features);
            cost = left_sweep.best_cost + right_sweep.best_cost;
          } else {
            const std::span<const std::size_t> left_rows(ord.data(), n_left);
            const std::span<const std::size_t> right_rows(ord.data() + n_left, ord.size() - n_left);
            auto cl = evaluate(*node.left, left_rows, false);
            if (!cl) continue;
            auto cr = evaluate(*node.right, right_rows, false);
            if (!cr) continue;
            cost = *cl + *cr;
          }
          if (cost < best) {
            best = cost;
            move = Move::Split;
            best_feature = static_cast<std::int32_t>(f);
            best_threshold = 0.5 * (here + next);
          }
        }
      }
    }

    switch (move) {
      case Move::None:
        return false;
      case Move::Leaf:
        slot = std::make_unique<SearchNode>();
        return true;
      case Move::PromoteLeft: {
        auto child = std::move(slot->left);
        slot = std::move(child);
        return true;
      }
      case Move::PromoteRight: {
        auto child = std::move(slot->right);
        slot = std::move(child);
        return true;
      }
      case Move::Split:
        break;
    }
    slot->feature = best_feature;
    slot->threshold = best_threshold;
    if (!keep_children) {
      std::vector<std::size_t> left, right;
      split_rows(*slot, rows, left, right);
      slot->left = depth_left >= 2 ? exact_depth1(left) : std::make_unique<SearchNode>();
      slot->right = depth_left >= 2 ? exact_depth1(right) : std::make_unique<SearchNode>();
    }
    return true;
  }

  // Coordinate descent to a fixed point: visit every node top-down and
  // re-optimize its split given the rest of the tree.
  void local_search(std::unique_ptr<SearchNode>& root, std::size_t max_depth) const {
    const auto rows = all_rows();
    for (int pass = 0; pass < 100; ++pass) {
      if (!visit(root, rows, max_depth, true)) break;
    }
  }

  std::unique_ptr<SearchNode> exact_depth1(std::span<const std::size_t> rows) const {
    auto node = std::make_unique<SearchNode>();
    if (rows.size() < 2 * min_leaf_) return node;
    std::vector<std::size_t> features(p_);
    std::iota(features.begin(), features.end(), std::size_t{0});
    const auto sweep = best_single_split(sorted_orders(rows), features);
    if (sweep.best_feature < 0) return node;
    node->feature = sweep.best_feature;
    node->threshold = sweep.best_threshold;
    node->left = std::make_unique<SearchNode>();
    node->right = std::make_unique<SearchNode>();
    return node;
  }

  std::size_t num_features() const { return p_; }
  const std::vector<double>& column(std::size_t f) const { return columns_[f]; }
  double cost(std::size_t row, Arm arm) const { return arm == Arm::SAVR ? cost0_[row] : cost1_[row]; }

 private:
  bool visit(std::unique_ptr<SearchNode>& slot, std::span<const std::size_t> rows, std::size_t depth_left,
             bool is_root) const {
    bool improved = reoptimize(slot, rows, depth_left, is_root);
    if (!slot->is_leaf() && depth_left > 0) {
      std::vector<std::size_t> left, right;
      split_rows(*slot, rows, left, right);
      improved |= visit(slot->left, left, depth_left - 1, false);
      improved |= visit(slot->right, right, depth_left - 1, false);
    }
    return improved;
  }

  // Best depth-1 subtrees of both sides of a candidate split in one pass per
  // feature; side_ marks membership (0 left, 1 right).
  std::pair<SplitSweep, SplitSweep> two_sided_sweeps(const std::vector<std::vector<std::size_t>>& orders, double l0,
                                                     double l1, std::size_t nl, double r0, double r1, std::size_t nr,
                                                     std::span<const std::size_t> features) const {
    SplitSweep sides[2];
    sides[0].init(l0, l1, nl);
    sides[1].init(r0, r1, nr);
    const bool left_splittable = nl >= 2 * min_leaf_;
    const bool right_splittable = nr >= 2 * min_leaf_;
    if (!left_splittable && !right_splittable) return {sides[0], sides[1]};
    for (std::size_t f : features) {
      sides[0].start_feature();
      sides[1].start_feature();
      const auto& col = columns_[f];
      const auto fid = static_cast<std::int32_t>(f);
      for (std::size_t r : orders[f]) {
        const std::uint8_t s = side_[r];
        if (s == 0 ? left_splittable : right_splittable) sides[s].push(col[r], cost0_[r], cost1_[r], min_leaf_, fid);
      }
    }
    return {sides[0], sides[1]};
  }

  std::size_t n_, p_, min_leaf_;
  std::vector<std::vector<double>> columns_;
  std::vector<double> cost0_, cost1_;
  std::vector<std::vector<std::size_t>> order_;
  mutable std::vector<std::uint8_t> side_;
};

inline void flatten(const SearchNode& node, const PolicySearch& search, std::span<const std::size_t> rows,
                    PolicyTree& tree) {
  const auto id = static_cast<std::uint32_t>(tree.nodes.size());
  tree.nodes.emplace_back();
  if (node.is_leaf()) {
    double s0 = 0.0, s1 = 0.0;
    for (std::size_t r : rows) {
      s0 += search.cost(r, Arm::SAVR);
      s1 += search.cost(r, Arm::TAVR);
    }
    tree.nodes[id].prescription = cheaper_arm(s0, s1);
    tree.nodes[id].n_train = rows.size();
    return;
  }
  tree.nodes[id].feature = node.feature;
  tree.nodes[id].threshold = node.threshold;
  tree.nodes[id].n_train = rows.size();
  std::vector<std::size_t> left, right;
  search.split_rows(node, rows, left, right);
  tree.nodes[id].left = static_cast<std::uint32_t>(tree.nodes.size());
  flatten(*node.left, search, left, tree);
  tree.nodes[id].right = static_cast<std::uint32_t>(tree.nodes.size());
  flatten(*node.right, search, right, tree);
}

inline void check_policy_inputs(const FeatureMatrix& x, const RewardsMatrix& rewards,
                                std::span<const double> weights) {
  require(rewards.size() == x.rows() && weights.size() == x.rows(), ErrorKind::InconsistentDimensions,
          "features (" + std::to_string(x.rows()) + "), rewards (" + std::to_string(rewards.size()) +
              ") and weights (" + std::to_string(weights.size()) + ") must have equal length");
  require(x.missing_count() == 0, ErrorKind::MissingValues, "policy tree features must be complete");
  for (double w : weights)
    require(std::isfinite(w) && w >= 0.0, ErrorKind::InvalidArgument, "weights must be finite and >= 0");
}

}  // namespace detail

// Sum_i w_i * Gamma[i, tree(x_i)].
inline double objective(const PolicyTree& tree, const FeatureMatrix& x, const RewardsMatrix& rewards,
                        std::span<const double> weights) {
  detail::check_policy_inputs(x, rewards, weights);
  double total = 0.0;
  for (std::size_t i = 0; i < x.rows(); ++i) total += weights[i] * rewards(i, tree.prescribe(x.row(i)));
  return total;
}

// Fits a depth-bounded tree minimizing sum_i w_i * Gamma[i, tree(x_i)].
// Starts: the greedy tree, (depth >= 3) the depth-1-shallower fit, and
// n_restarts-1 randomized greedy trees; each is improved by local search and
// the lowest objective wins (earlier start on ties). With depth <= 2 the
// local search solves the root exactly, so restarts are skipped.
inline PolicyTree fit_policy_tree(const FeatureMatrix& x, const RewardsMatrix& rewards,
                                  std::span<const double> weights, const PolicyTreeParams& params,
                                  std::span<const std::string> feature_names = {}) {
  detail::check_policy_inputs(x, rewards, weights);
  require(params.min_leaf >= 1, ErrorKind::InvalidArgument, "min_leaf must be >= 1");
  require(feature_names.empty() || feature_names.size() == x.cols(), ErrorKind::InconsistentDimensions,
          "one name per feature column");

  detail::PolicySearch search(x, rewards, weights, params.min_leaf);
  const auto rows = search.all_rows();

  std::vector<std::unique_ptr<detail::SearchNode>> starts;
  starts.push_back(search.grow_greedy(rows, params.max_depth, nullptr));
  if (params.max_depth >= 3) {
    auto shallower_params = params;
    shallower_params.max_depth = params.max_depth - 1;
    const auto shallower = fit_policy_tree(x, rewards, weights, shallower_params, feature_names);
    // Rebuild the search form of the shallower tree.
    std::function<std::unique_ptr<detail::SearchNode>(std::size_t)> rebuild = [&](std::size_t id) {
      auto node = std::make_unique<detail::SearchNode>();
      const auto& src = shallower.nodes[id];
      if (!src.is_leaf()) {
        node->feature = src.feature;
        node->threshold = src.threshold;
        node->left = rebuild(src.left);
        node->right = rebuild(src.right);
      }
      return node;
    };
    starts.push_back(rebuild(0));
  }
  if (params.max_depth >= 3) {
    for (std::size_t k = 1; k < params.n_restarts; ++k) {
      Rng rng(derive_seed(params.seed, static_cast<std::uint64_t>(k)));
      starts.push_back(search.grow_greedy(rows, params.max_depth, &rng));
    }
  }

  std::vector<double> costs(starts.size());
  parallel_for(starts.size(), [&](std::size_t s) {
    // PolicySearch keeps a scratch buffer; each worker gets its own copy.
    const detail::PolicySearch local = search;
    local.local_search(starts[s], params.max_depth);
    costs[s] = local.evaluate(*starts[s], rows, true).value_or(std::numeric_limits<double>::infinity());
  });
  std::size_t winner = 0;
  for (std::size_t s = 1; s < starts.size(); ++s)
    if (costs[s] < costs[winner] - 1e-12 * (1.0 + std::fabs(costs[winner]))) winner = s;

  // Thresholds are stored at 12 significant digits so that exported and
  // in-memory trees route identically.
  std::function<void(detail::SearchNode&)> round_thresholds = [&](detail::SearchNode& node) {
    if (node.is_leaf()) return;
    node.threshold = detail::round12(node.threshold);
    round_thresholds(*node.left);
    round_thresholds(*node.right);
  };
  round_thresholds(*starts[winner]);

  PolicyTree tree;
  tree.max_depth = params.max_depth;
  tree.min_leaf = params.min_leaf;
  if (feature_names.empty()) {
    for (std::size_t f = 0; f < x.cols(); ++f) tree.feature_names.push_back("x" + std::to_string(f));
  } else {
    tree.feature_names.assign(feature_names.begin(), feature_names.end());
  }
  detail::flatten(*starts[winner], search, rows, tree);
  tree.objective_value = objective(tree, x, rewards, weights);
  return tree;
}

inline PolicyTree fit_policy_tree(const Cohort& cohort, const RewardsMatrix& rewards, std::span<const double> weights,
                                  const PolicyTreeParams& params) {
  std::vector<std::string> names;
  for (const auto& c : cohort.schema.columns) names.push_back(c.name);
  return fit_policy_tree(cohort.features, rewards, weights, params, names);
}

// Column indices in `schema` for each tree feature; MissingFeature if a
// feature the tree splits on is absent.
inline std::vector<std::size_t> map_tree_features(const PolicyTree& tree, const FeatureSchema& schema) {
  std::vector<bool> used(tree.feature_names.size(), false);
  for (const auto& n : tree.nodes)
    if (!n.is_leaf()) used[static_cast<std::size_t>(n.feature)] = true;
  std::vector<std::size_t> map(tree.feature_names.size(), 0);
  for (std::size_t f = 0; f < tree.feature_names.size(); ++f) {
    auto idx = schema.index_of(tree.feature_names[f]);
    require(idx.has_value() || !used[f], ErrorKind::MissingFeature,
            "tree splits on '" + tree.feature_names[f] + "', which the cohort does not have");
    map[f] = idx.value_or(0);
  }
  return map;
}

// Leaf node id for every patient of a cohort, matching features by name.
inline std::vector<std::size_t> route(const PolicyTree& tree, const Cohort& cohort) {
  const auto map = map_tree_features(tree, cohort.schema);
  std::vector<std::size_t> leaves(cohort.size());
  std::vector<double> x(tree.feature_names.size());
  for (std::size_t i = 0; i < cohort.size(); ++i) {
    for (std::size_t f = 0; f < x.size(); ++f) x[f] = cohort.features(i, map[f]);
    std::size_t n = 0;
    while (!tree.nodes[n].is_leaf()) {
      const auto& node = tree.nodes[n];
      const std::size_t col = map[static_cast<std::size_t>(node.feature)];
      require(!cohort.features.is_missing(i, col), ErrorKind::MissingFeature,
              "patient '" + cohort.ids[i] + "' is missing '" + tree.feature_names[static_cast<std::size_t>(node.feature)] +
                  "'");
      n = x[static_cast<std::size_t>(node.feature)] <= node.threshold ? node.left : node.right;
    }
    leaves[i] = n;
  }
  return leaves;
}

inline std::vector<Arm> prescribe_all(const PolicyTree& tree, const Cohort& cohort) {
  const auto leaves = route(tree, cohort);
  std::vector<Arm> out(leaves.size());
  for (std::size_t i = 0; i < leaves.size(); ++i) out[i] = tree.nodes[leaves[i]].prescription;
  return out;
}

inline nlohmann::json PolicyTree::to_json() const {
  nlohmann::json jnodes = nlohmann::json::array();
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    const auto& n = nodes[i];
    if (n.is_leaf()) {
      jnodes.push_back({{"id", i}, {"prescription", std::string(to_string(n.prescription))}, {"n_train", n.n_train}});
    } else {
      jnodes.push_back({{"id", i},
                        {"feature", feature_names[static_cast<std::size_t>(n.feature)]},
                        {"threshold", detail::round12(n.threshold)},
                        {"left", n.left},
                        {"right", n.right},
                        {"n_train", n.n_train}});
    }
  }
  return {{"format", "rxpolicy.policy_tree"},
          {"version", 1},
          {"features", feature_names},
          {"max_depth", max_depth},
          {"min_leaf", min_leaf},
          {"objective_value", detail::round12(objective_value)},
          {"nodes", jnodes}};
}

inline PolicyTree PolicyTree::from_json(const nlohmann::json& doc) {
  PolicyTree tree;
  try {
    require(doc.at("format") == "rxpolicy.policy_tree" && doc.at("version") == 1, ErrorKind::InvalidConfig,
            "not an rxpolicy policy tree v1 document");
    tree.feature_names = doc.at("features").get<std::vector<std::string>>();
    tree.max_depth = doc.at("max_depth").get<std::size_t>();
    tree.min_leaf = doc.at("min_leaf").get<std::size_t>();
    tree.objective_value = doc.at("objective_value").get<double>();
    const auto& jnodes = doc.at("nodes");
    tree.nodes.resize(jnodes.size());
    for (const auto& jn : jnodes) {
      const auto id = jn.at("id").get<std::size_t>();
      require(id < tree.nodes.size(), ErrorKind::InvalidConfig, "node id out of range");
      auto& n = tree.nodes[id];
      n.n_train = jn.at("n_train").get<std::size_t>();
      if (jn.contains("prescription")) {
        auto arm = parse_arm(jn.at("prescription").get<std::string>());
        require(arm.has_value(), ErrorKind::InvalidConfig, "bad prescription in node " + std::to_string(id));
        n.prescription = *arm;
      } else {
        const auto name = jn.at("feature").get<std::string>();
        auto it = std::find(tree.feature_names.begin(), tree.feature_names.end(), name);
        require(it != tree.feature_names.end(), ErrorKind::InvalidConfig, "unknown split feature '" + name + "'");
        n.feature = static_cast<std::int32_t>(it - tree.feature_names.begin());
        n.threshold = jn.at("threshold").get<double>();
        n.left = jn.at("left").get<std::uint32_t>();
        n.right = jn.at("right").get<std::uint32_t>();
        require(n.left < tree.nodes.size() && n.right < tree.nodes.size() && n.left > id && n.right > id,
                ErrorKind::InvalidConfig, "bad child ids in node " + std::to_string(id));
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::InvalidConfig, std::string("malformed policy tree: ") + e.what());
  }
  require(!tree.nodes.empty(), ErrorKind::InvalidConfig, "policy tree has no nodes");
  return tree;
}

inline std::string PolicyTree::to_dot() const {
  std::ostringstream out;
  out << "digraph PolicyTree {\n  node [fontname=\"Helvetica\"];\n";
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    const auto& n = nodes[i];
    if (n.is_leaf()) {
      out << "  n" << i << " [shape=box, label=\"node " << i << "\\n" << to_string(n.prescription)
          << "\\nn=" << n.n_train << "\"];\n";
    } else {
      out << "  n" << i << " [shape=ellipse, label=\"" << feature_names[static_cast<std::size_t>(n.feature)]
          << " <= " << io::format_number(n.threshold) << "\"];\n";
      out << "  n" << i << " -> n" << n.left << " [label=\"yes\"];\n";
      out << "  n" << i << " -> n" << n.right << " [label=\"no\"];\n";
    }
  }
  out << "}\n";
  return out.str();
}

struct LeafSummary {
  std::size_t node_id = 0;
  Arm prescribed = Arm::SAVR;
  std::array<std::size_t, 2> n{0, 0};         // patients per received arm
  std::array<double, 2> pct{0.0, 0.0};        // share of that arm's cohort patients, %
  std::array<std::size_t, 2> bad{0, 0};       // observed deaths by the horizon
  std::array<std::size_t, 2> determinate{0, 0};

  std::optional<double> mortality_pct(Arm arm) const {
    if (determinate[index(arm)] == 0) return std::nullopt;
    return 100.0 * static_cast<double>(bad[index(arm)]) / static_cast<double>(determinate[index(arm)]);
  }
};

// Per-leaf counts and observed mortality by received arm; indeterminate
// labels are left out of the mortality denominators.
inline std::vector<LeafSummary> leaf_summaries(const PolicyTree& tree, const Cohort& cohort,
                                               std::span<const Label> labels) {
  require(labels.size() == cohort.size(), ErrorKind::InconsistentDimensions, "one label per patient");
  const auto leaves = route(tree, cohort);
  std::map<std::size_t, LeafSummary> by_leaf;
  for (std::size_t i = 0; i < tree.nodes.size(); ++i)
    if (tree.nodes[i].is_leaf()) by_leaf[i] = LeafSummary{i, tree.nodes[i].prescription};
  std::array<std::size_t, 2> arm_totals{0, 0};
  for (std::size_t i = 0; i < cohort.size(); ++i) {
    auto& s = by_leaf[leaves[i]];
    const std::size_t a = index(cohort.arms[i]);
    ++arm_totals[a];
    ++s.n[a];
    if (labels[i] != Label::Indeterminate) {
      ++s.determinate[a];
      s.bad[a] += labels[i] == Label::Bad;
    }
  }
  std::vector<LeafSummary> out;
  for (auto& [id, s] : by_leaf) {
    for (std::size_t a = 0; a < 2; ++a)
      s.pct[a] = arm_totals[a] ? 100.0 * static_cast<double>(s.n[a]) / static_cast<double>(arm_totals[a]) : 0.0;
    out.push_back(s);
  }
  return out;
}

enum class TreeFormat { Json, Dot, LeafTable };

inline std::string export_tree(const PolicyTree& tree, const Cohort& cohort, std::span<const Label> labels,
                               TreeFormat format) {
  switch (format) {
    case TreeFormat::Json: return tree.to_json_text();
    case TreeFormat::Dot: return tree.to_dot();
    case TreeFormat::LeafTable: break;
  }
  std::ostringstream out;
  out << "node_id,prescribed,n_savr,pct_savr,mort_savr,n_tavr,pct_tavr,mort_tavr\n";
  auto mort = [](const std::optional<double>& v) { return v ? io::format_number(*v) : std::string(); };
  for (const auto& s : leaf_summaries(tree, cohort, labels)) {
    out << s.node_id << ',' << to_string(s.prescribed) << ',' << s.n[0] << ',' << io::format_number(s.pct[0]) << ','
        << mort(s.mortality_pct(Arm::SAVR)) << ',' << s.n[1] << ',' << io::format_number(s.pct[1]) << ','
        << mort(s.mortality_pct(Arm::TAVR)) << '\n';
  }
  return out.str();
}

}  // namespace rxp
