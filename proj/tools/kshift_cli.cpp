// Command-line front end: dataset builds, training, evaluation and experiment runs.
#include <chrono>
#include <cstdlib>
#include <ctime>
#include <iomanip>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>
#include <torch/torch.h>

#include "kshift/checkpoint.hpp"
#include "kshift/dataset_io.hpp"
#include "kshift/evaluate.hpp"
#include "kshift/experiment.hpp"
#include "kshift/stats.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace kshift;

namespace {

constexpr const char* kOutputRootVar = "KSHIFT_OUTPUT_ROOT";

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string data;
  std::vector<std::size_t> folds;
};

fs::path output_root() {
  const char* env = std::getenv(kOutputRootVar);
  return env && *env ? fs::path(env) : fs::path("runs");
}

std::string utc_stamp(const char* fmt) {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  std::ostringstream ss;
  ss << std::put_time(&tm, fmt);
  return ss.str();
}

fs::path make_run_dir(const std::string& command) {
  const fs::path base = output_root() / (utc_stamp("%Y%m%d-%H%M%S") + "_" + command);
  fs::path dir = base;
  for (int i = 1; fs::exists(dir); ++i) dir = base.string() + "_" + std::to_string(i);
  fs::create_directories(dir);
  return dir;
}

class Run {
 public:
  Run(std::string command, std::vector<std::string> argv) : command_(std::move(command)), dir_(make_run_dir(command_)) {
    manifest_ = {{"command", command_}, {"argv", std::move(argv)}, {"created_utc", utc_stamp("%Y-%m-%dT%H:%M:%SZ")}};
    std::clog << "run directory: " << dir_.string() << '\n';
  }

  const fs::path& dir() const { return dir_; }
  json& manifest() { return manifest_; }

  /// Records every output file with its digest, so each table cell maps to its checkpoint.
  void finish(const std::string& status) {
    json files = json::array();
    std::vector<fs::path> paths;
    for (const auto& e : fs::recursive_directory_iterator(dir_)) {
      if (e.is_regular_file() && e.path().filename() != "manifest.json") paths.push_back(e.path());
    }
    std::sort(paths.begin(), paths.end());
    for (const auto& p : paths) {
      files.push_back({{"path", fs::relative(p, dir_).string()}, {"fnv1a", io::file_hash(p)}});
    }
    manifest_["outputs"] = files;
    manifest_["status"] = status;
    io::write_text(dir_ / "manifest.json", manifest_.dump(2));
  }

 private:
  std::string command_;
  fs::path dir_;
  json manifest_;
};

expcli::ExperimentConfig load_config(const Common& o) {
  expcli::ExperimentConfig c = o.config.empty() ? expcli::ExperimentConfig{} : expcli::load_experiment_config(o.config);
  if (o.seed) c.seed = *o.seed;
  if (!o.data.empty()) c.dataset_dir = o.data;
  if (!o.folds.empty()) c.folds_to_run = o.folds;
  c.validate();
  return c;
}

/// Loads the configured dataset directory or builds one into the run directory.
datagen::Datasets obtain_datasets(expcli::ExperimentConfig& c, Run& run) {
  datagen::Datasets ds;
  json info;
  if (c.dataset_dir) {
    ds = io::load_datasets(*c.dataset_dir);
    const auto meta = io::load_dataset_meta(*c.dataset_dir);
    c.dataset = meta.config;
    info = {{"dir", fs::absolute(*c.dataset_dir).string()}, {"seed", meta.seed}};
  } else {
    std::clog << "building datasets (seed " << c.seed << ")\n";
    ds = datagen::build_datasets(c.dataset, c.seed);
    io::save_datasets(ds, c.dataset, c.seed, run.dir() / "data");
    info = {{"dir", "data"}, {"seed", c.seed}};
  }
  info["hash"] = io::dataset_hash(ds);
  run.manifest()["dataset"] = info;
  run.manifest()["config"] = expcli::to_json(c);
  return ds;
}

void add_common(CLI::App* sub, Common& o, bool with_folds) {
  sub->add_option("--config", o.config, "Experiment config (JSON)")->check(CLI::ExistingFile);
  sub->add_option("--seed", o.seed, "Global seed (overrides the config)");
  sub->add_option("--data", o.data, "Dataset directory written by gen-data")->check(CLI::ExistingDirectory);
  if (with_folds) sub->add_option("--folds", o.folds, "Run only these folds");
}

int cmd_gen_data(const Common& o, const std::string& out, Run& run) {
  auto c = load_config(o);
  const fs::path dir = out.empty() ? run.dir() / "data" : fs::path(out);
  const auto ds = datagen::build_datasets(c.dataset, c.seed);
  io::save_datasets(ds, c.dataset, c.seed, dir);
  run.manifest()["config"] = expcli::to_json(c);
  run.manifest()["dataset"] = {{"dir", fs::absolute(dir).string()}, {"seed", c.seed}, {"hash", io::dataset_hash(ds)}};
  std::cout << "datasets written to " << dir.string() << " (hash " << io::dataset_hash(ds) << ")\n";
  return 0;
}

int cmd_train(const Common& o, const std::string& method, const std::string& out, Run& run) {
  auto c = load_config(o);
  auto ds = obtain_datasets(c, run);
  adapt::TrainConfig t = c.train;
  t.method = adapt::method_from_string(method);
  for (const auto& e : c.methods) {
    if (e.name == method) t = e.config;
  }
  t.seed = c.seed;
  std::vector<datagen::LabeledVolume> labeled = ds.source;
  auto result = adapt::train(t, {labeled, ds.paired_train.volumes});
  const fs::path dir = out.empty() ? run.dir() / "checkpoint" : fs::path(out);
  adapt::save_checkpoint(result.model, dir);
  io::write_text(dir / "train_log.csv", adapt::log_csv(result.log));
  run.manifest()["checkpoint"] = {{"dir", fs::absolute(dir).string()}, {"fnv1a", io::file_hash(dir / "params.bin")}};
  std::cout << "checkpoint written to " << dir.string() << '\n';
  return 0;
}

int cmd_evaluate(const Common& o, const std::string& checkpoint, Run& run) {
  auto c = load_config(o);
  auto ds = obtain_datasets(c, run);
  auto model = adapt::load_checkpoint(checkpoint);
  std::vector<double> target;
  for (const auto& v : ds.target_test) target.push_back(metrics::volume_dice(model, v));
  const auto cons = metrics::consistency_dice(model, ds.paired_test.volumes, ds.families);
  const json out{{"checkpoint", fs::absolute(checkpoint).string()},
                 {"checkpoint_fnv1a", io::file_hash(fs::path(checkpoint) / "params.bin")},
                 {"target_dice", metrics::mean(target)},
                 {"target_per_volume", target},
                 {"consistency", metrics::to_json(cons)}};
  io::write_text(run.dir() / "evaluation.json", out.dump(2));
  std::cout << std::fixed << std::setprecision(4) << "target Dice " << metrics::mean(target) << ", consistency "
            << cons.mean << '\n';
  return 0;
}

void print_table(const std::string& csv) { std::cout << csv; }

int cmd_compare(const Common& o, Run& run) {
  auto c = load_config(o);
  auto ds = obtain_datasets(c, run);
  const auto r = expcli::run_comparison(c, ds, run.dir());
  print_table(io::read_text(run.dir() / "comparison.csv"));
  for (const auto& p : r.p_values) {
    std::cout << p.a << " < " << p.b << " [" << p.metric << ", " << p.setup << "]: ";
    if (p.p) {
      std::cout << "p = " << *p.p << '\n';
    } else {
      std::cout << "n/a (" << p.note << ")\n";
    }
  }
  return r.errors.empty() ? 0 : 2;
}

int cmd_sweep(const Common& o, Run& run) {
  auto c = load_config(o);
  auto ds = obtain_datasets(c, run);
  const auto r = expcli::run_tradeoff_sweep(c, ds, run.dir());
  print_table(expcli::sweep_csv(r));
  for (const auto& [m, w] : r.selected) std::cout << "selected weight for " << adapt::to_string(m) << ": " << w << '\n';
  return 0;
}

int cmd_ablate(const Common& o, Run& run) {
  auto c = load_config(o);
  auto ds = obtain_datasets(c, run);
  const auto r = expcli::run_generalization_ablation(c, ds, run.dir());
  print_table(expcli::ablation_csv(r));
  return 0;
}

/// Rebuilds the comparison table from the per-method reports of an earlier run.
int cmd_report(const std::string& source, Run& run) {
  std::vector<metrics::MetricsReport> reports;
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(fs::path(source) / "reports")) {
    if (e.path().extension() == ".json") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  for (const auto& f : files) reports.push_back(metrics::report_from_json(json::parse(io::read_text(f))));
  const std::string csv = metrics::comparison_csv(reports);
  io::write_text(run.dir() / "table.csv", csv);
  run.manifest()["source_run"] = fs::absolute(source).string();
  print_table(csv);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  at::set_num_threads(1);
  CLI::App app{"Kernel-shift segmentation experiments. Outputs go under $" + std::string(kOutputRootVar) +
               " (default ./runs)."};
  app.require_subcommand(1);
  Common o;
  std::string method, out, checkpoint, source;

  auto* gen = app.add_subcommand("gen-data", "Generate the synthetic datasets");
  add_common(gen, o, false);
  gen->add_option("--out", out, "Dataset directory (default: <run>/data)");

  auto* train = app.add_subcommand("train", "Train one model on all source volumes");
  add_common(train, o, false);
  train->add_option("--method", method, "Method name")->required();
  train->add_option("--out", out, "Checkpoint directory (default: <run>/checkpoint)");

  auto* eval = app.add_subcommand("evaluate", "Score a checkpoint on the target and paired test sets");
  add_common(eval, o, false);
  eval->add_option("--checkpoint", checkpoint, "Checkpoint directory")->required()->check(CLI::ExistingDirectory);

  auto* compare = app.add_subcommand("compare", "Cross-validate every configured method");
  add_common(compare, o, true);
  auto* sweep = app.add_subcommand("sweep", "Trade-off sweep over the weight grids");
  add_common(sweep, o, true);
  auto* ablate = app.add_subcommand("ablate", "Kernel-pair generalization ablation");
  add_common(ablate, o, true);

  auto* report = app.add_subcommand("report", "Rebuild the comparison table of an earlier run");
  report->add_option("--run", source, "Run directory containing reports/")->required()->check(CLI::ExistingDirectory);

  CLI11_PARSE(app, argc, argv);

  const std::string name = app.get_subcommands().front()->get_name();
  Run run(name, std::vector<std::string>(argv, argv + argc));
  try {
    int rc = 0;
    if (name == "gen-data") rc = cmd_gen_data(o, out, run);
    if (name == "train") rc = cmd_train(o, method, out, run);
    if (name == "evaluate") rc = cmd_evaluate(o, checkpoint, run);
    if (name == "compare") rc = cmd_compare(o, run);
    if (name == "sweep") rc = cmd_sweep(o, run);
    if (name == "ablate") rc = cmd_ablate(o, run);
    if (name == "report") rc = cmd_report(source, run);
    run.finish(rc == 0 ? "ok" : "partial");
    return rc;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    run.finish(std::string("failed: ") + e.what());
    return 1;
  }
}
