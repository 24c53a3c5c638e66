// rxpolicy: command-line front end for the treatment-policy pipeline.

#include <boost/algorithm/string.hpp>
#include <boost/program_options.hpp>

#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "rxpolicy/rxpolicy.hpp"

namespace po = boost::program_options;
namespace fs = std::filesystem;
namespace pl = rxp::pipeline;

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitData = 3;
constexpr int kExitNumerical = 4;

const char* kSubcommands =
    "ingest, impute, balance, match, fit-risk, rewards, sweep, tree, evaluate, synth, pipeline";

int exit_code(rxp::ErrorCategory c) {
  switch (c) {
    case rxp::ErrorCategory::Usage: return kExitUsage;
    case rxp::ErrorCategory::Data: return kExitData;
    case rxp::ErrorCategory::Numerical: return kExitNumerical;
  }
  return kExitData;
}

std::string_view category_name(rxp::ErrorCategory c) {
  switch (c) {
    case rxp::ErrorCategory::Usage: return "usage";
    case rxp::ErrorCategory::Data: return "data";
    case rxp::ErrorCategory::Numerical: return "numerical";
  }
  return "data";
}

// One JSON object on stderr per failure.
void report_error(std::string_view kind, std::string_view category, std::string message) {
  nlohmann::json line = {{"error", {{"kind", kind}, {"category", category}}}};
  if (message.rfind("stage ", 0) == 0) {
    const auto colon = message.find(": ");
    if (colon != std::string::npos) {
      line["error"]["stage"] = message.substr(6, colon - 6);
      message = message.substr(colon + 2);
    }
  }
  line["error"]["message"] = message;
  std::cerr << line.dump() << '\n';
}

// "1,1.4,1.8" or "start:stop:step".
std::vector<double> parse_grid(const std::string& text) {
  std::vector<double> grid;
  auto number = [&](const std::string& s) {
    const auto v = rxp::io::parse_double(s);
    rxp::require(v.has_value(), rxp::ErrorKind::InvalidArgument, "bad number '" + s + "' in weight grid");
    return *v;
  };
  if (text.find(':') != std::string::npos) {
    std::vector<std::string> parts;
    boost::split(parts, text, boost::is_any_of(":"));
    rxp::require(parts.size() == 3, rxp::ErrorKind::InvalidArgument, "range grid must be start:stop:step");
    const double start = number(parts[0]), stop = number(parts[1]), step = number(parts[2]);
    rxp::require(step > 0 && stop >= start, rxp::ErrorKind::InvalidArgument, "range grid needs step > 0, stop >= start");
    for (std::size_t i = 0;; ++i) {
      const double w = rxp::detail::round12(start + step * static_cast<double>(i));
      if (w > stop + 1e-9) break;
      grid.push_back(w);
    }
  } else {
    std::vector<std::string> parts;
    boost::split(parts, text, boost::is_any_of(","));
    for (const auto& p : parts) grid.push_back(number(p));
  }
  return grid;
}

po::options_description common_options() {
  po::options_description d("Common options");
  d.add_options()
      ("help,h", "show help")
      ("out-dir", po::value<std::string>()->default_value("."), "directory for artifacts")
      ("seed", po::value<std::uint64_t>()->default_value(0), "run seed; every stage seed derives from it")
      ("horizon-days", po::value<double>()->default_value(rxp::kDefaultHorizonDays), "outcome horizon in days")
      ("threads", po::value<unsigned>()->default_value(0), "worker threads (0 = all cores)");
  return d;
}

po::options_description input_options() {
  po::options_description d("Input");
  d.add_options()
      ("input", po::value<std::string>(), "raw cohort CSV")
      ("cohort", po::value<std::string>(), "normalized cohort CSV")
      ("schema", po::value<std::string>(), "feature schema JSON");
  return d;
}

po::options_description model_options() {
  const pl::Options def;
  po::options_description d("Model options");
  d.add_options()
      ("buckets", po::value<std::size_t>()->default_value(def.buckets), "risk strata for matching")
      ("sts-feature", po::value<std::string>()->default_value(def.sts_feature), "stratification feature")
      ("knn-k", po::value<std::size_t>()->default_value(def.knn_k), "neighbours for imputation")
      ("n-trees", po::value<std::size_t>()->default_value(def.n_trees), "trees per survival forest")
      ("forest-min-leaf", po::value<std::size_t>()->default_value(def.forest_min_leaf), "survival forest leaf size")
      ("mtry", po::value<std::size_t>()->default_value(def.mtry), "features tried per split (0 = ceil(sqrt(p)))")
      ("weight", po::value<double>(), "single sample weight w (same as a one-point grid)")
      ("weight-grid", po::value<std::string>(), "weight grid: 1,1.4,1.8 or 1:3:0.2 (default 1:3:0.2)")
      ("sweep-mode", po::value<std::string>()->default_value("tree"), "tree | forests")
      ("depth", po::value<std::size_t>()->default_value(def.depth), "policy tree depth")
      ("min-leaf", po::value<std::size_t>()->default_value(def.min_leaf), "policy tree leaf size")
      ("restarts", po::value<std::size_t>()->default_value(def.restarts), "policy tree restarts")
      ("boot", po::value<std::size_t>()->default_value(def.n_boot), "bootstrap replicates")
      ("level", po::value<double>()->default_value(def.level), "confidence level");
  return d;
}

pl::Options options_from(const po::variables_map& vm) {
  pl::Options o;
  o.seed = vm["seed"].as<std::uint64_t>();
  o.horizon_days = vm["horizon-days"].as<double>();
  rxp::require(o.horizon_days > 0, rxp::ErrorKind::InvalidArgument, "--horizon-days must be > 0");
  if (!vm.count("buckets")) return o;
  o.buckets = vm["buckets"].as<std::size_t>();
  o.sts_feature = vm["sts-feature"].as<std::string>();
  o.knn_k = vm["knn-k"].as<std::size_t>();
  o.n_trees = vm["n-trees"].as<std::size_t>();
  o.forest_min_leaf = vm["forest-min-leaf"].as<std::size_t>();
  o.mtry = vm["mtry"].as<std::size_t>();
  rxp::require(!(vm.count("weight") && vm.count("weight-grid")), rxp::ErrorKind::InvalidArgument,
               "--weight and --weight-grid are exclusive");
  if (vm.count("weight")) o.weight_grid = {vm["weight"].as<double>()};
  if (vm.count("weight-grid")) o.weight_grid = parse_grid(vm["weight-grid"].as<std::string>());
  const auto mode = rxp::parse_sweep_mode(vm["sweep-mode"].as<std::string>());
  rxp::require(mode.has_value(), rxp::ErrorKind::InvalidArgument, "--sweep-mode must be 'tree' or 'forests'");
  o.sweep_mode = *mode;
  o.depth = vm["depth"].as<std::size_t>();
  o.min_leaf = vm["min-leaf"].as<std::size_t>();
  o.restarts = vm["restarts"].as<std::size_t>();
  o.n_boot = vm["boot"].as<std::size_t>();
  o.level = vm["level"].as<double>();
  rxp::require(o.n_trees >= 1, rxp::ErrorKind::InvalidArgument, "--n-trees must be >= 1");
  rxp::require(o.knn_k >= 1, rxp::ErrorKind::InvalidArgument, "--knn-k must be >= 1");
  rxp::require(o.buckets >= 1, rxp::ErrorKind::InvalidArgument, "--buckets must be >= 1");
  return o;
}

std::string need(const po::variables_map& vm, const std::string& key) {
  rxp::require(vm.count(key) > 0, rxp::ErrorKind::InvalidArgument, "missing required option --" + key);
  return vm[key].as<std::string>();
}

std::optional<fs::path> maybe(const po::variables_map& vm, const std::string& key) {
  if (!vm.count(key)) return std::nullopt;
  return fs::path(vm[key].as<std::string>());
}

// --cohort, falling back to --input.
fs::path cohort_arg(const po::variables_map& vm) {
  if (vm.count("cohort")) return vm["cohort"].as<std::string>();
  return need(vm, "input");
}

void print_record(const pl::StageRecord& r) {
  nlohmann::json files = nlohmann::json::array();
  for (const auto& a : r.outputs) files.push_back({{"path", a.path}, {"sha256", a.sha256}});
  nlohmann::json line = {{"stage", r.name}, {"files", files}, {"summary", r.summary}};
  if (!r.warnings.empty()) line["warnings"] = r.warnings;
  std::cout << line.dump() << '\n';
}

struct Command {
  const char* summary;
  po::options_description options;
  std::function<void(const po::variables_map&, const fs::path&)> run;
};

std::map<std::string, Command> commands() {
  std::map<std::string, Command> c;

  po::options_description none("Stage options");
  po::options_description imputer("Stage options");
  imputer.add_options()("imputer", po::value<std::string>(), "saved imputer JSON (skips fitting)");
  po::options_description balance_opts("Stage options");
  balance_opts.add_options()("output", po::value<std::string>()->default_value("balance.csv"), "output file name");
  po::options_description forests("Stage options");
  forests.add_options()
      ("forest-savr", po::value<std::string>(), "SAVR survival forest")
      ("forest-tavr", po::value<std::string>(), "TAVR survival forest");
  po::options_description rewards_opt("Stage options");
  rewards_opt.add_options()("rewards", po::value<std::string>(), "rewards CSV (id,risk_savr,risk_tavr)");
  po::options_description tree_opts("Stage options");
  tree_opts.add_options()
      ("rewards", po::value<std::string>(), "rewards CSV (id,risk_savr,risk_tavr)")
      ("sweep", po::value<std::string>(), "sweep.json whose selected_w is used");
  po::options_description eval_opts("Stage options");
  eval_opts.add_options()
      ("tree", po::value<std::string>(), "policy tree JSON")
      ("rewards", po::value<std::string>(), "rewards CSV; without it Gamma is predicted from the saved forests")
      ("forest-savr", po::value<std::string>(), "SAVR forest (default: next to the tree)")
      ("forest-tavr", po::value<std::string>(), "TAVR forest (default: next to the tree)")
      ("imputer", po::value<std::string>(), "imputer for incomplete cohorts (default: next to the tree, if present)");
  po::options_description synth_opts("Stage options");
  synth_opts.add_options()("synth-config", po::value<std::string>(), "synthetic cohort config JSON");
  po::options_description pipeline_opts("Stage options");
  pipeline_opts.add_options()
      ("synth-config", po::value<std::string>(), "generate the cohort from this config instead of --input")
      ("replay", po::value<std::string>(), "rerun the configuration recorded in a manifest");

  c.emplace("ingest", Command{"normalize a raw CSV against a schema", none, [](const auto& vm, const fs::path& out) {
              print_record(pl::ingest(need(vm, "input"), need(vm, "schema"), out));
            }});
  c.emplace("impute", Command{"fill missing cells by k-nearest neighbours", imputer,
                              [](const auto& vm, const fs::path& out) {
                                const auto o = options_from(vm);
                                print_record(pl::impute(cohort_arg(vm), need(vm, "schema"), o.knn_k, out,
                                                        maybe(vm, "imputer")));
                              }});
  c.emplace("balance", Command{"covariate balance table", balance_opts, [](const auto& vm, const fs::path& out) {
              print_record(pl::balance(cohort_arg(vm), need(vm, "schema"), out, vm["output"].template as<std::string>()));
            }});
  c.emplace("match", Command{"risk-stratified greedy matching", none, [](const auto& vm, const fs::path& out) {
              print_record(pl::match(cohort_arg(vm), need(vm, "schema"), options_from(vm), out));
            }});
  c.emplace("fit-risk", Command{"per-arm random survival forests", none, [](const auto& vm, const fs::path& out) {
              print_record(pl::fit_risk(cohort_arg(vm), need(vm, "schema"), options_from(vm), out));
            }});
  c.emplace("rewards", Command{"counterfactual risk matrix", forests, [](const auto& vm, const fs::path& out) {
              print_record(pl::rewards(cohort_arg(vm), need(vm, "schema"), need(vm, "forest-savr"),
                                       need(vm, "forest-tavr"), options_from(vm), out));
            }});
  c.emplace("sweep", Command{"retrain the tree over a weight grid", rewards_opt,
                             [](const auto& vm, const fs::path& out) {
                               print_record(pl::sweep(cohort_arg(vm), need(vm, "schema"), need(vm, "rewards"),
                                                      options_from(vm), out));
                             }});
  c.emplace("tree", Command{"fit the prescription tree", tree_opts, [](const auto& vm, const fs::path& out) {
              const auto o = options_from(vm);
              rxp::require(!(vm.count("sweep") && vm.count("weight")), rxp::ErrorKind::InvalidArgument,
                           "--sweep and --weight are exclusive");
              rxp::require(!vm.count("weight-grid"), rxp::ErrorKind::InvalidArgument,
                           "tree takes one --weight; use sweep for a grid");
              const double w = vm.count("sweep") ? pl::selected_weight(need(vm, "sweep"))
                                                 : (vm.count("weight") ? vm["weight"].template as<double>() : 1.0);
              print_record(pl::tree(cohort_arg(vm), need(vm, "schema"), need(vm, "rewards"), w, o, out));
            }});
  c.emplace("evaluate", Command{"score a saved tree", eval_opts, [](const auto& vm, const fs::path& out) {
              const auto o = options_from(vm);
              const fs::path tree = need(vm, "tree");
              const fs::path dir = tree.parent_path().empty() ? fs::path(".") : tree.parent_path();
              const fs::path schema = vm.count("schema") ? fs::path(need(vm, "schema")) : dir / "schema.json";
              if (vm.count("rewards")) {
                print_record(pl::evaluate(tree, cohort_arg(vm), schema, need(vm, "rewards"), o, out));
                return;
              }
              const fs::path fsavr = vm.count("forest-savr") ? fs::path(need(vm, "forest-savr")) : dir / "forest_savr.rxsf";
              const fs::path ftavr = vm.count("forest-tavr") ? fs::path(need(vm, "forest-tavr")) : dir / "forest_tavr.rxsf";
              auto imp = maybe(vm, "imputer");
              if (!imp && fs::exists(dir / "imputer.json")) imp = dir / "imputer.json";
              for (const auto& r : pl::evaluate_external(tree, cohort_arg(vm), schema, fsavr, ftavr, imp, o, out))
                print_record(r);
            }});
  c.emplace("synth", Command{"generate a synthetic cohort with ground truth", synth_opts,
                             [](const auto& vm, const fs::path& out) {
                               auto cfg = rxp::SynthConfig::load(need(vm, "synth-config"));
                               if (!vm["seed"].defaulted()) cfg.seed = vm["seed"].template as<std::uint64_t>();
                               print_record(pl::synth(cfg, out));
                             }});
  c.emplace("pipeline", Command{"run every stage and write manifest.json", pipeline_opts,
                                [](const auto& vm, const fs::path& out) {
                                  pl::Manifest m;
                                  if (vm.count("replay")) {
                                    m = pl::replay(need(vm, "replay"), out, maybe(vm, "input"), maybe(vm, "schema"));
                                  } else {
                                    pl::Source src;
                                    if (vm.count("synth-config")) {
                                      src.synth_path = need(vm, "synth-config");
                                      src.synth = rxp::SynthConfig::load(*src.synth_path);
                                      if (!vm["seed"].defaulted()) src.synth->seed = vm["seed"].template as<std::uint64_t>();
                                    } else {
                                      src.input = need(vm, "input");
                                      src.schema = need(vm, "schema");
                                    }
                                    m = pl::run(src, options_from(vm), out);
                                  }
                                  for (const auto& s : m.stages) print_record(s);
                                }});
  return c;
}

void print_usage(std::ostream& out) {
  out << "usage: rxpolicy <subcommand> [options]\n"
      << "subcommands: " << kSubcommands << "\n"
      << "run 'rxpolicy <subcommand> --help' for its options\n";
}

}  // namespace

int main(int argc, char** argv) {
  if (argc < 2 || std::string(argv[1]) == "--help" || std::string(argv[1]) == "-h") {
    print_usage(argc < 2 ? std::cerr : std::cout);
    return argc < 2 ? kExitUsage : 0;
  }
  const std::string sub = argv[1];
  auto table = commands();
  auto it = table.find(sub);
  if (it == table.end()) {
    report_error("InvalidArgument", "usage", "unknown subcommand '" + sub + "'; expected one of: " + kSubcommands);
    return kExitUsage;
  }
  auto& cmd = it->second;

  po::options_description all("rxpolicy " + sub + ": " + cmd.summary);
  all.add(common_options()).add(input_options()).add(cmd.options);
  const bool modelled = sub != "ingest" && sub != "synth" && sub != "balance";
  if (modelled) all.add(model_options());

  po::variables_map vm;
  try {
    po::store(po::command_line_parser(argc - 1, argv + 1).options(all).run(), vm);
    po::notify(vm);
  } catch (const po::error& e) {
    report_error("InvalidArgument", "usage", e.what());
    return kExitUsage;
  }
  if (vm.count("help")) {
    std::cout << all << '\n';
    return 0;
  }

  try {
    rxp::set_thread_count(vm["threads"].as<unsigned>());
    const fs::path out = vm["out-dir"].as<std::string>();
    fs::create_directories(out);
    cmd.run(vm, out);
  } catch (const rxp::Error& e) {
    const std::string what = e.what();
    report_error(rxp::to_string(e.kind()), category_name(e.category()), what.substr(rxp::to_string(e.kind()).size() + 2));
    return exit_code(e.category());
  } catch (const fs::filesystem_error& e) {
    report_error("Io", "data", e.what());
    return kExitData;
  } catch (const std::exception& e) {
    report_error("Internal", "data", e.what());
    return kExitData;
  }
  return 0;
}
