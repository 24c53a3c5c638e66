#pragma once

#include <boost/version.hpp>
#include <nlohmann/json.hpp>
#include <openssl/opensslv.h>

#include <chrono>
#include <filesystem>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "rxpolicy/balance.hpp"
#include "rxpolicy/cohort.hpp"
#include "rxpolicy/evaluation.hpp"
#include "rxpolicy/imputation.hpp"
#include "rxpolicy/io.hpp"
#include "rxpolicy/matching.hpp"
#include "rxpolicy/policy_tree.hpp"
#include "rxpolicy/rewards.hpp"
#include "rxpolicy/survival_forest.hpp"
#include "rxpolicy/synthetic.hpp"
#include "rxpolicy/weighting.hpp"

namespace rxp::pipeline {

inline constexpr const char* kVersion = "1.0.0";

namespace fs = std::filesystem;

// Run-wide settings. Thread count is deliberately absent: it never changes
// an artifact.
struct Options {
  std::uint64_t seed = 0;
  double horizon_days = kDefaultHorizonDays;
  std::size_t buckets = 5;
  std::size_t knn_k = 5;
  std::string sts_feature = SynthConfig::kFrailtyFeature;
  std::vector<double> weight_grid = default_weight_grid();
  SweepMode sweep_mode = SweepMode::TreeOnly;
  std::size_t depth = 3;
  std::size_t min_leaf = 20;
  std::size_t restarts = 20;
  std::size_t n_trees = 500;
  std::size_t forest_min_leaf = 10;
  std::size_t mtry = 0;
  std::size_t n_boot = 1000;
  double level = 0.95;

  // Per-stage streams, all derived from the single run seed.
  std::uint64_t forest_seed() const { return derive_seed(seed, "fit-risk"); }
  std::uint64_t tree_seed() const { return derive_seed(seed, "tree"); }
  std::uint64_t eval_seed() const { return derive_seed(seed, "evaluate"); }

  ForestParams forest_params() const {
    ForestParams p;
    p.n_trees = n_trees;
    p.min_leaf = forest_min_leaf;
    p.mtry = mtry;
    p.seed = forest_seed();
    return p;
  }

  PolicyTreeParams tree_params() const {
    PolicyTreeParams p;
    p.max_depth = depth;
    p.min_leaf = min_leaf;
    p.n_restarts = restarts;
    p.seed = tree_seed();
    return p;
  }

  EvalOptions eval_options() const {
    EvalOptions e;
    e.n_boot = n_boot;
    e.level = level;
    e.seed = eval_seed();
    return e;
  }

  nlohmann::json to_json() const {
    return {{"seed", seed},
            {"horizon_days", horizon_days},
            {"buckets", buckets},
            {"knn_k", knn_k},
            {"sts_feature", sts_feature},
            {"weight_grid", weight_grid},
            {"sweep_mode", sweep_mode == SweepMode::TreeOnly ? "tree" : "forests"},
            {"depth", depth},
            {"min_leaf", min_leaf},
            {"restarts", restarts},
            {"n_trees", n_trees},
            {"forest_min_leaf", forest_min_leaf},
            {"mtry", mtry},
            {"n_boot", n_boot},
            {"level", level}};
  }

  static Options from_json(const nlohmann::json& doc) {
    Options o;
    try {
      o.seed = doc.value("seed", o.seed);
      o.horizon_days = doc.value("horizon_days", o.horizon_days);
      o.buckets = doc.value("buckets", o.buckets);
      o.knn_k = doc.value("knn_k", o.knn_k);
      o.sts_feature = doc.value("sts_feature", o.sts_feature);
      o.weight_grid = doc.value("weight_grid", o.weight_grid);
      const auto mode = parse_sweep_mode(doc.value("sweep_mode", std::string("tree")));
      require(mode.has_value(), ErrorKind::InvalidConfig, "sweep_mode must be 'tree' or 'forests'");
      o.sweep_mode = *mode;
      o.depth = doc.value("depth", o.depth);
      o.min_leaf = doc.value("min_leaf", o.min_leaf);
      o.restarts = doc.value("restarts", o.restarts);
      o.n_trees = doc.value("n_trees", o.n_trees);
      o.forest_min_leaf = doc.value("forest_min_leaf", o.forest_min_leaf);
      o.mtry = doc.value("mtry", o.mtry);
      o.n_boot = doc.value("n_boot", o.n_boot);
      o.level = doc.value("level", o.level);
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorKind::InvalidConfig, std::string("run options: ") + e.what());
    }
    return o;
  }
};

struct Artifact {
  std::string path;  // relative to the output directory
  std::string sha256;
};

struct StageRecord {
  std::string name;
  std::vector<Artifact> outputs;
  std::vector<std::string> warnings;
  double seconds = 0.0;
  nlohmann::json summary = nlohmann::json::object();
};

// Any Error escaping a stage is re-raised with the stage name in front.
template <typename Fn>
StageRecord run_stage(const std::string& name, Fn&& fn) {
  const auto start = std::chrono::steady_clock::now();
  StageRecord record;
  record.name = name;
  try {
    fn(record);
  } catch (const Error& e) {
    throw Error(e.kind(), "stage " + name + ": " + std::string(e.what()).substr(to_string(e.kind()).size() + 2));
  }
  record.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return record;
}

inline void emit(StageRecord& record, const fs::path& out_dir, const std::string& rel, std::string_view text) {
  io::write_text(out_dir / rel, text);
  record.outputs.push_back({rel, io::sha256_hex(text)});
}

inline Cohort read_cohort(const fs::path& cohort_csv, const fs::path& schema_json) {
  return load_cohort(cohort_csv, FeatureSchema::load(schema_json));
}

inline std::string schema_text(const FeatureSchema& schema) { return schema.to_json().dump(2) + "\n"; }

// Normalizes a raw CSV against the schema: cohort.csv + schema.json.
inline StageRecord ingest(const fs::path& input, const fs::path& schema_path, const fs::path& out_dir) {
  return run_stage("ingest", [&](StageRecord& r) {
    const auto schema = FeatureSchema::load(schema_path);
    const auto cohort = load_cohort(input, schema);
    cohort.validate();
    emit(r, out_dir, "cohort.csv", cohort_to_csv(cohort));
    emit(r, out_dir, "schema.json", schema_text(schema));
    std::size_t tavr = 0;
    for (Arm a : cohort.arms) tavr += a == Arm::TAVR;
    r.summary = {{"n", cohort.size()},
                 {"n_savr", cohort.size() - tavr},
                 {"n_tavr", tavr},
                 {"missing_cells", cohort.features.missing_count()}};
  });
}

inline StageRecord synth(const SynthConfig& config, const fs::path& out_dir) {
  return run_stage("synth", [&](StageRecord& r) {
    const auto generated = generate_cohort(config);
    emit(r, out_dir, "cohort.csv", cohort_to_csv(generated.cohort));
    emit(r, out_dir, "schema.json", schema_text(generated.cohort.schema));
    emit(r, out_dir, "truth.csv", truth_to_csv(generated.truth, generated.cohort.ids));
    emit(r, out_dir, "synth_config.json", config.to_json().dump(2) + "\n");
    std::size_t tavr = 0;
    for (Arm a : generated.cohort.arms) tavr += a == Arm::TAVR;
    r.summary = {{"n", config.n}, {"n_tavr", tavr}};
  });
}

// Fits the KNN imputer on `cohort_csv` (or loads `imputer_path`) and fills
// every missing cell.
inline StageRecord impute(const fs::path& cohort_csv, const fs::path& schema_path, std::size_t k,
                          const fs::path& out_dir, const std::optional<fs::path>& imputer_path = std::nullopt) {
  return run_stage("impute", [&](StageRecord& r) {
    const auto cohort = read_cohort(cohort_csv, schema_path);
    ImputationModel model;
    if (imputer_path) {
      model = ImputationModel::load(*imputer_path);
    } else {
      model = fit_imputer(cohort, k);
      emit(r, out_dir, "imputer.json", model.to_json().dump(1) + "\n");
    }
    const auto filled = impute(model, cohort);
    emit(r, out_dir, "imputed.csv", cohort_to_csv(filled));
    r.summary = {{"imputed_cells", cohort.features.missing_count()}};
  });
}

inline StageRecord balance(const fs::path& cohort_csv, const fs::path& schema_path, const fs::path& out_dir,
                           const std::string& output = "balance.csv") {
  return run_stage("balance", [&](StageRecord& r) {
    const auto report = balance_report(read_cohort(cohort_csv, schema_path));
    emit(r, out_dir, output, balance_to_csv(report));
    r.summary = {{"max_smd", report.max_smd()}, {"above_threshold", report.count_above_threshold()}};
  });
}

// Risk strata, greedy within-bucket matching and the before/after balance
// tables.
inline StageRecord match(const fs::path& cohort_csv, const fs::path& schema_path, const Options& options,
                         const fs::path& out_dir) {
  return run_stage("match", [&](StageRecord& r) {
    const auto cohort = read_cohort(cohort_csv, schema_path);
    const std::size_t sts = cohort.schema.require_index(options.sts_feature);
    cohort.require_complete("match");
    const auto strata = make_strata(cohort.column(sts), options.buckets);
    MatchOptions mo;
    mo.sts_feature = options.sts_feature;
    const auto matched = match_within_strata(cohort, strata, mo);
    r.warnings = strata.warnings;
    for (std::size_t b : matched.empty_buckets)
      r.warnings.push_back("EmptyBucket: bucket " + std::to_string(b) + " has an empty arm");
    const auto pre = balance_report(cohort);
    const auto post = balance_report(matched.cohort);
    emit(r, out_dir, "strata.json", strata.to_json().dump(2) + "\n");
    emit(r, out_dir, "pairs.csv", pairs_to_csv(matched.pairs));
    emit(r, out_dir, "matched.csv", cohort_to_csv(matched.cohort));
    emit(r, out_dir, "balance_pre.csv", balance_to_csv(pre));
    emit(r, out_dir, "balance_post.csv", balance_to_csv(post));
    emit(r, out_dir, "love_plot.csv", love_plot_csv(pre, post));
    r.summary = {{"pairs", matched.pairs.size()}, {"max_smd_pre", pre.max_smd()}, {"max_smd_post", post.max_smd()}};
  });
}

inline StageRecord fit_risk(const fs::path& cohort_csv, const fs::path& schema_path, const Options& options,
                            const fs::path& out_dir) {
  return run_stage("fit-risk", [&](StageRecord& r) {
    const auto cohort = read_cohort(cohort_csv, schema_path);
    const auto forests = fit_arm_forests(cohort, options.forest_params());
    emit(r, out_dir, "forest_savr.rxsf", forests.savr.serialize());
    emit(r, out_dir, "forest_tavr.rxsf", forests.tavr.serialize());
    nlohmann::json metrics = nlohmann::json::object();
    for (Arm arm : kArms) {
      const auto& forest = arm == Arm::SAVR ? forests.savr : forests.tavr;
      std::vector<std::size_t> rows;
      for (std::size_t i = 0; i < cohort.size(); ++i)
        if (cohort.arms[i] == arm) rows.push_back(i);
      const auto train = cohort.subset(rows);
      nlohmann::json m = {{"fingerprint", forest.fingerprint()}, {"n_train", train.size()}};
      try {
        m["oob_c_index"] = detail::round12(oob_concordance(forest, train, options.horizon_days));
      } catch (const Error& e) {
        m["oob_c_index"] = nullptr;
        r.warnings.push_back(std::string(to_string(arm)) + " OOB concordance unavailable: " + e.what());
      }
      metrics[std::string(to_string(arm))] = m;
    }
    emit(r, out_dir, "forest_metrics.json", metrics.dump(2) + "\n");
    r.summary = metrics;
  });
}

inline StageRecord rewards(const fs::path& cohort_csv, const fs::path& schema_path, const fs::path& forest_savr,
                           const fs::path& forest_tavr, const Options& options, const fs::path& out_dir) {
  return run_stage("rewards", [&](StageRecord& r) {
    const auto cohort = read_cohort(cohort_csv, schema_path);
    const auto fs_ = SurvivalForest::load(forest_savr);
    const auto ft = SurvivalForest::load(forest_tavr);
    const auto gamma = estimate_rewards(cohort, fs_, ft, options.horizon_days);
    emit(r, out_dir, "rewards.csv", rewards_to_csv(gamma, cohort.ids));
    const auto sums = gamma.column_sums();
    r.summary = {{"mean_risk_savr", detail::round12(sums[0] / static_cast<double>(gamma.size()))},
                 {"mean_risk_tavr", detail::round12(sums[1] / static_cast<double>(gamma.size()))},
                 {"t_star", to_string(best_uniform_arm(gamma))}};
  });
}

inline SweepConfig sweep_config(const Options& options) {
  SweepConfig c;
  c.grid = options.weight_grid;
  c.mode = options.sweep_mode;
  c.tree = options.tree_params();
  c.forest = options.forest_params();
  c.horizon_days = options.horizon_days;
  return c;
}

inline StageRecord sweep(const fs::path& cohort_csv, const fs::path& schema_path, const fs::path& rewards_csv,
                         const Options& options, const fs::path& out_dir) {
  return run_stage("sweep", [&](StageRecord& r) {
    const auto cohort = read_cohort(cohort_csv, schema_path);
    const auto gamma = load_rewards(rewards_csv, cohort.ids, options.horizon_days);
    const auto labels = derive_labels(cohort, options.horizon_days);
    const auto result = weight_sweep(cohort, gamma, labels, sweep_config(options));
    emit(r, out_dir, "sweep.csv", sweep_to_csv(result));
    r.summary = {{"selected_w", result.selected_w}, {"t_star", to_string(result.t_star)}};
    emit(r, out_dir, "sweep.json", r.summary.dump(2) + "\n");
  });
}

// Reads the selected weight back from sweep.json.
inline double selected_weight(const fs::path& sweep_json) {
  try {
    return nlohmann::json::parse(io::read_text(sweep_json)).at("selected_w").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::InvalidConfig, sweep_json.string() + ": " + e.what());
  }
}

inline StageRecord tree(const fs::path& cohort_csv, const fs::path& schema_path, const fs::path& rewards_csv,
                        double w, const Options& options, const fs::path& out_dir) {
  return run_stage("tree", [&](StageRecord& r) {
    const auto cohort = read_cohort(cohort_csv, schema_path);
    const auto gamma = load_rewards(rewards_csv, cohort.ids, options.horizon_days);
    const auto labels = derive_labels(cohort, options.horizon_days);
    const auto weights = assign_weights(labels, cohort.arms, best_uniform_arm(gamma), w);
    const auto fitted = fit_policy_tree(cohort, gamma, weights.weights, options.tree_params());
    emit(r, out_dir, "tree.json", export_tree(fitted, cohort, labels, TreeFormat::Json));
    emit(r, out_dir, "tree.dot", export_tree(fitted, cohort, labels, TreeFormat::Dot));
    emit(r, out_dir, "leaf_table.csv", export_tree(fitted, cohort, labels, TreeFormat::LeafTable));
    r.summary = {{"w", w},
                 {"t_star", to_string(weights.t_star)},
                 {"objective", fitted.objective_value},
                 {"leaves", fitted.leaf_count()},
                 {"fingerprint", fitted.fingerprint()}};
  });
}

// Scores a saved tree on any complete cohort. Gamma comes from a rewards CSV
// aligned by id.
inline StageRecord evaluate(const fs::path& tree_json, const fs::path& cohort_csv, const fs::path& schema_path,
                            const fs::path& rewards_csv, const Options& options, const fs::path& out_dir) {
  return run_stage("evaluate", [&](StageRecord& r) {
    const auto fitted = PolicyTree::load(tree_json);
    const auto cohort = read_cohort(cohort_csv, schema_path);
    const auto gamma = load_rewards(rewards_csv, cohort.ids, options.horizon_days);
    const auto labels = derive_labels(cohort, options.horizon_days);
    const auto report = evaluate_tree(fitted, cohort, gamma, labels, options.eval_options());
    for (std::size_t leaf : report.leaf_fallbacks)
      r.warnings.push_back("EmptyReferenceGroup: leaf " + std::to_string(leaf) +
                           " has no reference patients on its prescribed arm; observed outcomes kept");
    emit(r, out_dir, "eval.json", report.to_json().dump(2) + "\n");
    emit(r, out_dir, "eval.csv", report.to_csv());
    r.summary = report.to_json();
  });
}

// Scores a saved tree on a new cohort without refitting anything: fills
// missing cells with the saved imputer when needed, predicts Gamma with the
// saved forests, then evaluates.
inline std::vector<StageRecord> evaluate_external(const fs::path& tree_json, const fs::path& cohort_csv,
                                                  const fs::path& schema_path, const fs::path& forest_savr,
                                                  const fs::path& forest_tavr,
                                                  const std::optional<fs::path>& imputer_path, const Options& options,
                                                  const fs::path& out_dir) {
  std::vector<StageRecord> stages;
  fs::path cohort = cohort_csv;
  if (!read_cohort(cohort_csv, schema_path).complete()) {
    require(imputer_path.has_value(), ErrorKind::MissingValues,
            cohort_csv.string() + " has missing cells and no imputer was given");
    stages.push_back(impute(cohort_csv, schema_path, options.knn_k, out_dir, imputer_path));
    cohort = out_dir / "imputed.csv";
  }
  stages.push_back(rewards(cohort, schema_path, forest_savr, forest_tavr, options, out_dir));
  stages.push_back(evaluate(tree_json, cohort, schema_path, out_dir / "rewards.csv", options, out_dir));
  return stages;
}

// Synthetic runs only: how the fitted tree fares against the generator's
// potential outcomes, over the full generated cohort.
inline StageRecord truth_check(const fs::path& tree_json, const fs::path& cohort_csv, const fs::path& schema_path,
                               const SynthConfig& config, const fs::path& out_dir) {
  return run_stage("truth-check", [&](StageRecord& r) {
    const auto fitted = PolicyTree::load(tree_json);
    const auto cohort = read_cohort(cohort_csv, schema_path);
    const auto truth = generate_cohort(config).truth;
    require(truth.potential_risks.size() == cohort.size(), ErrorKind::InconsistentDimensions,
            "cohort does not come from this synthetic config");
    const auto prescribed = prescribe_all(fitted, cohort);
    std::size_t agree = 0;
    for (std::size_t i = 0; i < prescribed.size(); ++i) agree += prescribed[i] == truth.true_optimal_arm[i];
    r.summary = {{"policy_regret", detail::round12(policy_regret(prescribed, truth))},
                 {"optimal_agreement", detail::round12(static_cast<double>(agree) / static_cast<double>(cohort.size()))},
                 {"n", cohort.size()}};
    emit(r, out_dir, "truth_check.json", r.summary.dump(2) + "\n");
  });
}

struct Manifest {
  Options options;
  std::string source_kind;  // "csv" or "synthetic"
  nlohmann::json source = nlohmann::json::object();
  std::vector<std::pair<std::string, std::string>> input_digests;
  std::vector<StageRecord> stages;

  std::string config_hash() const {
    return io::sha256_hex(nlohmann::json{{"options", options.to_json()}, {"source", source}}.dump());
  }

  static nlohmann::json versions() {
    return {{"rxpolicy", kVersion},
            {"compiler", std::string("gcc ") + __VERSION__},
            {"cxx_standard", __cplusplus},
            {"boost", BOOST_LIB_VERSION},
            {"nlohmann_json", std::to_string(NLOHMANN_JSON_VERSION_MAJOR) + "." +
                                  std::to_string(NLOHMANN_JSON_VERSION_MINOR) + "." +
                                  std::to_string(NLOHMANN_JSON_VERSION_PATCH)},
            {"openssl", OPENSSL_VERSION_TEXT}};
  }

  nlohmann::json to_json() const {
    nlohmann::json inputs = nlohmann::json::object();
    for (const auto& [p, d] : input_digests) inputs[p] = d;
    nlohmann::json outputs = nlohmann::json::array();
    nlohmann::json timings = nlohmann::json::object();
    for (const auto& s : stages) {
      nlohmann::json files = nlohmann::json::array();
      for (const auto& a : s.outputs) files.push_back({{"path", a.path}, {"sha256", a.sha256}});
      outputs.push_back({{"stage", s.name}, {"files", files}, {"warnings", s.warnings}, {"summary", s.summary}});
      timings[s.name] = s.seconds;
    }
    return {{"format", "rxpolicy.manifest"},
            {"version", 1},
            {"config", {{"options", options.to_json()}, {"source", source}}},
            {"config_hash", config_hash()},
            {"seed", options.seed},
            {"stage_seeds",
             {{"fit-risk", options.forest_seed()}, {"tree", options.tree_seed()}, {"evaluate", options.eval_seed()}}},
            {"input_file_digests", inputs},
            {"versions", versions()},
            {"stage_outputs", outputs},
            {"stage_timings", timings}};
  }
};

struct Source {
  std::optional<fs::path> input;   // raw cohort CSV
  std::optional<fs::path> schema;  // required with input
  std::optional<SynthConfig> synth;
  std::optional<fs::path> synth_path;
};

// Chains every stage through files in out_dir: ingest|synth -> impute ->
// match -> fit-risk -> rewards -> sweep -> tree -> evaluate. manifest.json is
// written last.
inline Manifest run(const Source& source, const Options& options, const fs::path& out_dir) {
  Manifest m;
  m.options = options;
  const fs::path cohort = out_dir / "cohort.csv";
  const fs::path schema = out_dir / "schema.json";
  auto record = [&](StageRecord s) { m.stages.push_back(std::move(s)); };

  if (source.synth) {
    m.source_kind = "synthetic";
    m.source = {{"kind", "synthetic"}, {"config", source.synth->to_json()}};
    if (source.synth_path) m.input_digests.emplace_back(source.synth_path->filename().string(), io::file_digest(*source.synth_path));
    record(synth(*source.synth, out_dir));
  } else {
    require(source.input && source.schema, ErrorKind::InvalidArgument, "pipeline needs --input and --schema or --synth-config");
    m.source_kind = "csv";
    m.input_digests.emplace_back(source.input->filename().string(), io::file_digest(*source.input));
    m.input_digests.emplace_back(source.schema->filename().string(), io::file_digest(*source.schema));
    m.source = {{"kind", "csv"},
                {"input_sha256", m.input_digests[0].second},
                {"schema_sha256", m.input_digests[1].second}};
    record(ingest(*source.input, *source.schema, out_dir));
  }
  record(impute(cohort, schema, options.knn_k, out_dir));
  record(match(out_dir / "imputed.csv", schema, options, out_dir));
  const fs::path matched = out_dir / "matched.csv";
  record(fit_risk(matched, schema, options, out_dir));
  record(rewards(matched, schema, out_dir / "forest_savr.rxsf", out_dir / "forest_tavr.rxsf", options, out_dir));
  record(sweep(matched, schema, out_dir / "rewards.csv", options, out_dir));
  record(tree(matched, schema, out_dir / "rewards.csv", selected_weight(out_dir / "sweep.json"), options, out_dir));
  record(evaluate(out_dir / "tree.json", matched, schema, out_dir / "rewards.csv", options, out_dir));
  if (source.synth) record(truth_check(out_dir / "tree.json", cohort, schema, *source.synth, out_dir));
  io::write_text(out_dir / "manifest.json", m.to_json().dump(2) + "\n");
  return m;
}

// Reruns a manifest's configuration into out_dir.
inline Manifest replay(const fs::path& manifest_path, const fs::path& out_dir,
                       const std::optional<fs::path>& input = std::nullopt,
                       const std::optional<fs::path>& schema = std::nullopt) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(io::read_text(manifest_path));
  } catch (const nlohmann::json::parse_error& e) {
    throw Error(ErrorKind::InvalidConfig, manifest_path.string() + ": " + e.what());
  }
  require(doc.value("format", "") == "rxpolicy.manifest", ErrorKind::InvalidConfig, "not an rxpolicy manifest");
  const auto& config = doc.at("config");
  const auto options = Options::from_json(config.at("options"));
  Source source;
  if (config.at("source").at("kind") == "synthetic") {
    source.synth = SynthConfig::from_json(config.at("source").at("config"));
  } else {
    require(input && schema, ErrorKind::InvalidArgument, "replaying a CSV run needs --input and --schema");
    require(io::file_digest(*input) == config.at("source").at("input_sha256") &&
                io::file_digest(*schema) == config.at("source").at("schema_sha256"),
            ErrorKind::SchemaMismatch, "input files differ from the recorded digests");
    source.input = input;
    source.schema = schema;
  }
  return run(source, options, out_dir);
}

}  // namespace rxp::pipeline
