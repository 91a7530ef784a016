#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "kshift/datagen.hpp"
#include "kshift/evaluate.hpp"
#include "kshift/train.hpp"

namespace kshift::expcli {

namespace fs = std::filesystem;

struct MethodEntry {
  std::string name;  // row label; defaults to the method name
  adapt::TrainConfig config;
};

struct SweepConfig {
  std::vector<adapt::Method> methods{adapt::Method::pcons, adapt::Method::fcons_dec};
  std::vector<double> alpha_grid = default_alpha_grid();
  std::vector<double> lambda_grid = default_lambda_grid();
  std::vector<std::size_t> folds_to_run;  // empty: all folds

  /// Ten values log-spaced from 3^-10 to 1.
  static std::vector<double> default_alpha_grid();
  static std::vector<double> default_lambda_grid();
};

struct AblationConfig {
  std::vector<std::string> methods{"baseline", "fcons_enc", "pcons"};
  std::vector<std::size_t> train_families{0, 1};  // indices into the dataset's families
  bool lesion_free_pairs = false;
  std::vector<std::size_t> folds_to_run;
};

struct ExperimentConfig {
  datagen::DatasetConfig dataset;
  std::optional<fs::path> dataset_dir;  // load instead of generating
  std::uint64_t seed = 0;
  std::size_t k = 5;
  std::vector<std::size_t> folds_to_run;
  adapt::TrainConfig train;  // defaults shared by every method entry
  std::vector<MethodEntry> methods;
  std::vector<std::pair<std::string, std::string>> wilcoxon_pairs{{"baseline", "fcons_enc"}, {"fbpaug", "fcons_enc"}};
  SweepConfig sweep;
  AblationConfig ablation;
  bool save_checkpoints = true;

  void validate() const;
};

/// Keys missing from the file keep their defaults. A `methods` entry is an object whose keys
/// override `train` (plus an optional `name`) or a bare method name.
ExperimentConfig experiment_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const ExperimentConfig& c);
ExperimentConfig load_experiment_config(const fs::path& path);

/// The config's methods, or every method with default weights when none are listed.
std::vector<MethodEntry> method_entries(const ExperimentConfig& c);

metrics::CrossValOptions cv_options(const ExperimentConfig& c, const std::vector<std::size_t>& folds,
                                    std::optional<fs::path> checkpoint_root);

struct PValue {
  std::string a, b;
  std::string metric;  // target_dice or consistency
  std::string setup;   // fold_mean (n = folds) or per_image (n = volumes or pairs, averaged over folds)
  std::optional<double> p;
  std::string note;
};

/// One-sided tests that `a` scores lower than `b` in both setups, for target Dice and consistency.
std::vector<PValue> compare_reports(const metrics::MetricsReport& a, const metrics::MetricsReport& b);

struct ComparisonResult {
  std::vector<metrics::MetricsReport> reports;
  std::map<std::string, std::string> errors;  // row name -> failure
  std::vector<PValue> p_values;
};

/// Cross-validates every configured method; writes comparison.csv, comparison.json and
/// reports/<name>.json (plus checkpoints/<name>/fold_<f>) under `out`.
ComparisonResult run_comparison(const ExperimentConfig& c, const datagen::Datasets& ds, const fs::path& out);

struct SweepPoint {
  adapt::Method method = adapt::Method::pcons;
  double weight = 0.0;  // alpha, or lambda for DANN
  std::optional<metrics::MetricsReport> report;
  std::string error;
};

struct SweepResult {
  std::vector<SweepPoint> points;
  std::map<adapt::Method, double> selected;  // weight chosen by the selection rule
};

/// Largest weight whose source-val Dice is within one pooled std (root mean fold variance
/// over the grid) of the smallest weight's score. Points must share a method.
std::optional<double> select_weight(const std::vector<SweepPoint>& points);

/// Trains every sweep method at every grid point; writes sweep.csv, sweep.json and one
/// tradeoff_<method>.svg per method.
SweepResult run_tradeoff_sweep(const ExperimentConfig& c, const datagen::Datasets& ds, const fs::path& out);

struct AblationRow {
  std::string name;
  std::optional<metrics::MetricsReport> report;
  std::string error;
};

struct AblationResult {
  std::vector<std::string> families;
  std::vector<bool> seen;
  bool lesion_free_pairs = false;
  std::vector<AblationRow> rows;
};

/// Training pairs restricted to `families`, optionally drawn from a lesion-free build.
std::vector<datagen::PairedVolume> ablation_pairs(const ExperimentConfig& c, const datagen::Datasets& ds);

/// Trains the ablation methods on a subset of kernel-pair families and scores consistency on
/// every family; writes ablation.csv (with seen/unseen flags) and ablation.json.
AblationResult run_generalization_ablation(const ExperimentConfig& c, const datagen::Datasets& ds,
                                           const fs::path& out);

std::string sweep_csv(const SweepResult& r);
std::string ablation_csv(const AblationResult& r);

}  // namespace kshift::expcli
