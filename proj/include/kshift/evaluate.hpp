#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "kshift/datagen.hpp"
#include "kshift/train.hpp"

namespace kshift::metrics {

/// Binarized predictions (sigmoid >= 0.5) for each image.
std::vector<Mask2D> predict_masks(adapt::Model& model, std::span<const Image2D> images);

/// Volume-level Dice of the model's prediction against the volume's lesion masks.
double volume_dice(adapt::Model& model, const datagen::LabeledVolume& volume);

struct PairConsistency {
  std::string id;
  std::size_t family = 0;
  double dice = 0.0;
};

struct ConsistencyScores {
  std::vector<std::string> families;
  std::vector<std::size_t> family_sizes;
  std::vector<std::optional<double>> per_family;  // empty families have no score
  double mean = 0.0;    // unweighted over non-empty families
  double pooled = 0.0;  // over pairs
  std::vector<PairConsistency> pairs;
};

/// Per-family means and their unweighted mean from per-pair scores.
ConsistencyScores summarize_consistency(std::vector<PairConsistency> pairs,
                                        std::span<const datagen::KernelPairFamily> families);

/// Dice between the binarized predictions on the two images of each pair.
ConsistencyScores consistency_dice(adapt::Model& model, std::span<const datagen::PairedVolume> paired,
                                   std::span<const datagen::KernelPairFamily> families);

/// Dice against the hidden lesion masks on the smooth and the sharp image of each pair.
struct PairedSegmentation {
  std::vector<double> smooth;
  std::vector<double> sharp;
};
PairedSegmentation paired_segmentation_dice(adapt::Model& model, const datagen::PairedSet& paired);

struct FoldResult {
  std::size_t fold = 0;
  std::uint64_t train_seed = 0;
  double source_val_dice = 0.0;
  double target_dice = 0.0;
  std::vector<double> source_val_per_volume;
  std::vector<double> target_per_volume;
  ConsistencyScores consistency;
  PairedSegmentation paired_segmentation;
  std::string checkpoint;  // relative to the report's directory, empty when not saved
  std::string checkpoint_hash;
};

struct Summary {
  double mean = 0.0;
  double std = 0.0;
};

struct MetricsReport {
  std::string name;
  adapt::TrainConfig config;
  std::vector<std::string> families;
  std::size_t k = 0;
  std::vector<FoldResult> folds;

  Summary source_val() const;
  Summary target() const;
  Summary consistency() const;
  Summary pooled_consistency() const;
  /// Over folds; nullopt when some fold had no pairs of that family.
  std::optional<Summary> family_consistency(std::size_t family) const;
  /// Per-volume paired Dice averaged over folds.
  PairedSegmentation mean_paired_segmentation() const;
};

struct CrossValOptions {
  std::size_t k = 5;
  std::uint64_t seed = 0;
  std::vector<std::size_t> folds_to_run;  // empty: all folds
  std::optional<std::filesystem::path> checkpoint_root;
  std::optional<datagen::FoldSplit> split;  // default: split_folds(n, k, seed)
};

/// Seed used to train fold `f`; shared across methods so fold results pair up.
std::uint64_t fold_seed(std::uint64_t seed, std::size_t fold);

/// k-fold cross-validation over the source volumes. Every fold trains on the remaining
/// source folds plus `paired_train` (default: ds.paired_train) and scores the held-out fold,
/// the target test set and consistency on ds.paired_test. Volumes are ordered by id within
/// each fold, so results do not depend on the order of ds.source.
MetricsReport cross_validate(const adapt::TrainConfig& config, const datagen::Datasets& ds,
                             const CrossValOptions& options,
                             std::optional<std::span<const datagen::PairedVolume>> paired_train = std::nullopt);

nlohmann::json to_json(const ConsistencyScores& c);
nlohmann::json to_json(const MetricsReport& r);
MetricsReport report_from_json(const nlohmann::json& j);

/// Rows are reports; columns are source Dice, target Dice, per-family consistency and mean,
/// each as mean and std over folds.
std::string comparison_csv(std::span<const MetricsReport> reports);

}  // namespace kshift::metrics
