#include "commands.hpp"

#include "ensa/bench.hpp"
#include "ensa/config.hpp"
#include "ensa/data.hpp"
#include "ensa/train.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>

namespace ensa::cli {

namespace fs = std::filesystem;

namespace {

struct Common {
  std::string config;
  std::string out = ".";
  std::optional<std::uint64_t> seed;
  std::vector<std::string> overrides;
  int threads = 1;
  std::string data;
  std::string params;
  std::optional<Index> node;
};

RunConfig resolve_config(const Common& c, const std::string& fallback_config = "") {
  RunConfig cfg;
  const std::string path = !c.config.empty() ? c.config : fallback_config;
  if (!path.empty()) cfg = load_config(path);
  if (c.seed) apply_setting(cfg, "seed", std::to_string(*c.seed));
  for (const std::string& o : c.overrides) apply_override(cfg, o);
  sync_model_io(cfg);
  return cfg;
}

Dataset load_any(const fs::path& path) {
  if (path.extension() == ".csv") return {load_csv(path)};
  return load_dataset(path);
}

void match_io(RunConfig& cfg, const Dataset& data) {
  if (data.empty()) throw ValueError("dataset is empty");
  cfg.model.in_features = data.front().feature_dim();
  cfg.model.out_features = data.front().target_dim();
}

std::pair<Dataset, Dataset> synthetic_split(const RunConfig& cfg) {
  Dataset all = generate(cfg.data.spec, cfg.data.train_count + cfg.data.val_count);
  Dataset val(all.begin() + cfg.data.train_count, all.end());
  all.resize(static_cast<std::size_t>(cfg.data.train_count));
  return {std::move(all), std::move(val)};
}

// --data may be a directory written by `gen`, a binary dataset or a CSV cloud.
Dataset data_for(const Common& c, const RunConfig& cfg, bool validation) {
  if (c.data.empty()) {
    auto [train, val] = synthetic_split(cfg);
    return validation ? val : train;
  }
  const fs::path p(c.data);
  if (fs::is_directory(p)) return load_dataset(p / (validation ? "val.epcd" : "train.epcd"));
  return load_any(p);
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot open '" + path.string() + "' for writing");
  os << text;
}

int cmd_gen(const Common& c, std::ostream& out) {
  const RunConfig cfg = resolve_config(c);
  fs::create_directories(c.out);
  auto [train, val] = synthetic_split(cfg);
  save_dataset(fs::path(c.out) / "train.epcd", train);
  save_dataset(fs::path(c.out) / "val.epcd", val);
  write_text(fs::path(c.out) / "config.txt", dump_config(cfg));
  out << "wrote " << train.size() << " train and " << val.size() << " val clouds ("
      << task_name(cfg.data.spec.task) << ", n=" << cfg.data.spec.n << ") to " << c.out << '\n';
  return 0;
}

int cmd_train(const Common& c, std::ostream& out) {
  RunConfig cfg = resolve_config(c);
  const Dataset train_set = data_for(c, cfg, false);
  match_io(cfg, train_set);
  Dataset val_set;
  if (c.data.empty() || fs::is_directory(c.data)) val_set = data_for(c, cfg, true);

  NsaModel model(cfg.model);
  out << std::setprecision(10);
  if (!val_set.empty()) out << "initial_val_mse " << evaluate_mse(model, val_set) << '\n';
  const TrainReport report = train(model, train_set, cfg.train);

  fs::create_directories(c.out);
  write_report_csv(fs::path(c.out) / "report.csv", report);
  model.params().save(fs::path(c.out) / "params.ensa");
  write_text(fs::path(c.out) / "config.txt", dump_config(cfg));
  if (!report.steps.empty()) out << "final_train_loss " << report.steps.back().loss << '\n';
  if (!val_set.empty()) out << "final_val_mse " << evaluate_mse(model, val_set) << '\n';
  out << "steps_per_sec " << report.mean_steps_per_sec() << '\n';
  return 0;
}

// A config.txt next to the parameter file describes the model that wrote it.
std::string sibling_config(const Common& c) {
  if (c.params.empty()) return "";
  const fs::path p = fs::path(c.params).parent_path() / "config.txt";
  return fs::exists(p) ? p.string() : "";
}

NsaModel load_model(const Common& c, const RunConfig& cfg) {
  if (c.params.empty()) return NsaModel(cfg.model);
  return NsaModel(cfg.model, ParamStore::load(c.params));
}

int cmd_eval(const Common& c, std::ostream& out) {
  RunConfig cfg = resolve_config(c, sibling_config(c));
  const Dataset data = data_for(c, cfg, true);
  match_io(cfg, data);
  NsaModel model = load_model(c, cfg);
  out << std::setprecision(10) << "mse " << evaluate_mse(model, data) << '\n';
  return 0;
}

int cmd_bench(const Common& c, std::ostream& out) {
  RunConfig cfg = resolve_config(c);
  fs::create_directories(c.out);

  ScalingOptions so;
  so.sizes = cfg.bench.sizes;
  so.repeats = cfg.bench.repeats;
  so.dense = cfg.bench.dense;
  so.seed = cfg.model.seed;
  const ScalingReport scaling = scaling_sweep(cfg.model, so);

  SyntheticTaskSpec spec = cfg.data.spec;
  const Dataset data = generate(spec, 4);
  match_io(cfg, data);
  std::vector<std::pair<Index, ThroughputReport>> rows;
  for (const Index h : {cfg.model.hidden, 2 * cfg.model.hidden}) {
    NsaConfig mc = cfg.model;
    mc.hidden = h;
    rows.emplace_back(h, measure_throughput(NsaModel(mc), data, cfg.bench.throughput_steps));
  }
  const std::vector<AccessEntry> access = access_pattern_fixture(cfg.model.seed);

  FigureData figures;
  figures.scaling = &scaling;
  figures.access = &access;
  export_figures_data(c.out, figures);
  {
    std::ofstream os(fs::path(c.out) / "throughput.csv");
    write_throughput_csv(os, rows);
  }
  out << std::setprecision(4) << "time_slope " << scaling.time_slope << '\n'
      << "count_slope " << scaling.count_slope << '\n'
      << "analytic_count_slope " << scaling.analytic_slope << '\n';
  if (so.dense) {
    out << "dense_time_slope " << scaling.dense_time_slope << '\n'
        << "dense_count_slope " << scaling.dense_count_slope << '\n';
  }
  for (const auto& [h, r] : rows) {
    out << "hidden " << h << ": " << r.steps_per_sec << " steps/s, peak " << r.peak_bytes
        << " bytes\n";
  }
  return 0;
}

int cmd_influence(const Common& c, std::ostream& out) {
  RunConfig cfg = resolve_config(c, sibling_config(c));
  const Dataset data = data_for(c, cfg, true);
  match_io(cfg, data);
  NsaModel model = load_model(c, cfg);
  const Index node = c.node.value_or(cfg.influence_node);
  const InfluenceMap map = influence(model, data.front(), node);
  FigureData figures;
  figures.cloud = &data.front();
  figures.influence = &map;
  export_figures_data(c.out, figures);
  out << "influenced " << map.influenced << " of " << map.influence.size() << " nodes (target "
      << node << ")\n";
  return 0;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Native sparse attention over ball-tree partitioned point clouds"};
  app.name(args.empty() ? "ensa" : args.front());
  app.require_subcommand(1, 1);
  Common c;
  app.add_option("--config", c.config, "Config file of key = value lines");
  app.add_option("--out", c.out, "Output directory")->capture_default_str();
  app.add_option("--seed", c.seed, "Seed for model, data and training (same as --set seed=N)");
  app.add_option("--set", c.overrides, "Override a config key, e.g. --set model.depth=2 (repeatable)")
      ->allow_extra_args(false);
  app.add_option("--threads", c.threads, "Worker threads for attention kernels")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();

  auto* gen = app.add_subcommand("gen", "Write synthetic train.epcd and val.epcd");
  auto* trn = app.add_subcommand("train", "Train a model; writes report.csv, params.ensa, config.txt");
  trn->add_option("--data", c.data, "Dataset directory from gen, .epcd file or .csv cloud");
  auto* ev = app.add_subcommand("eval", "Print the mean MSE of a parameter file on a dataset");
  ev->add_option("--params", c.params, "Parameter file written by train")->required();
  ev->add_option("--data", c.data, "Dataset directory from gen, .epcd file or .csv cloud");
  auto* bn = app.add_subcommand("bench", "Write scaling.csv, throughput.csv, access_pattern.csv");
  auto* inf = app.add_subcommand("influence", "Write influence.csv for one target node");
  inf->add_option("--params", c.params, "Parameter file (random initialisation when absent)");
  inf->add_option("--data", c.data, "Dataset directory, .epcd file or .csv cloud (first cloud used)");
  inf->add_option("--node", c.node, "Target node (default: influence.node from the config)");
  auto* st = app.add_subcommand("selftest", "Run gradient checks and oracle comparisons");
  for (CLI::App* sub : {gen, trn, ev, bn, inf, st}) sub->fallthrough();

  std::vector<char*> argv;
  std::vector<std::string> storage(args);
  if (storage.empty()) storage.emplace_back("ensa");
  for (std::string& s : storage) argv.push_back(s.data());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 2;
  }

  try {
    set_num_threads(c.threads);
    if (*gen) return cmd_gen(c, out);
    if (*trn) return cmd_train(c, out);
    if (*ev) return cmd_eval(c, out);
    if (*bn) return cmd_bench(c, out);
    if (*inf) return cmd_influence(c, out);
    if (*st) {
      const bool ok = selftest(out);
      out << (ok ? "selftest passed\n" : "selftest FAILED\n");
      return ok ? 0 : 1;
    }
  } catch (const ConfigError& e) {
    err << "usage error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
  return 2;
}

int run(int argc, char** argv) {
  return run(std::vector<std::string>(argv, argv + argc), std::cout, std::cerr);
}

}  // namespace ensa::cli
