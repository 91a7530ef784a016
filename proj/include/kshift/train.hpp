#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "kshift/datagen.hpp"
#include "kshift/recon.hpp"
#include "kshift/segnet.hpp"

namespace kshift::adapt {

enum class Method { baseline, fbpaug, dann_enc, dann_dec, fcons_enc, fcons_dec, pcons };

std::string to_string(Method m);
Method method_from_string(const std::string& s);
const std::vector<Method>& all_methods();

bool needs_pairs(Method m);
bool uses_discriminator(Method m);
/// Taps a method regularizes or feeds to the discriminator.
std::optional<segnet::SiteFilter> adapted_sites(Method m);

struct TrainConfig {
  Method method = Method::baseline;
  double lambda = 1e-2;  // adversarial weight (DANN)
  double alpha = 1.0;    // consistency weight (F-/P-Consistency)
  int iterations = 3000;
  int batch_labeled = 32;
  int batch_pairs = 16;
  double lr = 1e-4;
  double lr_decay = 0.2;
  std::vector<int> lr_milestones = scaled_milestones(3000);
  std::uint64_t seed = 0;
  recon::AugmentOptions augment{{10.0, 40.0}, {1.0, 4.0}, 0.1, 180};
  segnet::UNetConfig net;
  int aggregate_channels = 32;

  /// lr decay points at every 6/25 of the run.
  static std::vector<int> scaled_milestones(int iterations);
  double learning_rate(int iteration) const;
  void validate() const;
};

struct LabeledBatch {
  torch::Tensor images;  // N x 1 x H x W, float
  torch::Tensor masks;   // N x 1 x H x W, 0/1
};

struct PairBatch {
  torch::Tensor smooth;  // N x 1 x H x W
  torch::Tensor sharp;
};

/// Everything a trainer may see. Paired volumes expose images only.
struct TrainData {
  std::span<const datagen::LabeledVolume> labeled;
  std::span<const datagen::PairedVolume> paired;
};

torch::Tensor to_tensor(const Image2D& img);
torch::Tensor to_tensor(const Mask2D& mask);
Image2D to_image(const torch::Tensor& t, double spacing_mm = 1.75);

/// Draws a volume uniformly, then a slice uniformly within it. Labeled draws, pair draws and
/// augmentation use independent streams derived from the seed.
class BatchSampler {
 public:
  BatchSampler(const TrainData& data, std::uint64_t seed);

  LabeledBatch labeled(int n);
  PairBatch pairs(int n);
  /// FBPAug hook: each slice independently re-reconstructed with probability opts.prob.
  LabeledBatch augment(const LabeledBatch& batch, const recon::AugmentOptions& opts);

  std::string state() const;

 private:
  TrainData data_;
  std::mt19937_64 labeled_rng_, pair_rng_, augment_rng_;
};

LabeledBatch fbpaug_train_hook(const LabeledBatch& batch, const recon::AugmentOptions& opts, std::mt19937_64& rng);

/// Segmentation network plus, for DANN, the feature aggregator and discriminator.
struct Model {
  segnet::UNet net{nullptr};
  segnet::FeatureAggregator aggregator{nullptr};
  segnet::Discriminator discriminator{nullptr};
  TrainConfig config;
  int iteration = 0;
  std::string rng_state;

  static Model create(const TrainConfig& config);
  std::vector<torch::Tensor> trunk_parameters() const;
  std::vector<torch::Tensor> discriminator_parameters() const;
  void to(torch::Dtype dtype);
  void train(bool on = true);
};

struct Objective {
  torch::Tensor backward_target;  // differentiate this; gradient reversal supplies the sign
  torch::Tensor seg_loss;
  torch::Tensor adapt_loss;       // domain loss, consistency loss, or zero
  double weight = 0.0;            // lambda_t or alpha

  /// Value of the trunk objective L_s - lambda L_d (DANN) or L_s + alpha L_c.
  double trunk_value(Method m) const;
};

/// DANN objective: both images of every pair pass through the trunk; the selected taps go
/// through gradient reversal, aggregation and the discriminator.
Objective adversarial_objective(Model& model, const LabeledBatch& labeled, const PairBatch& pairs,
                                double lambda, segnet::SiteFilter sites);

/// Objective of `method` on one batch; `pairs` may be null for methods without paired data.
Objective compute_objective(Model& model, Method method, const LabeledBatch& labeled, const PairBatch* pairs,
                            double weight);

struct LogRow {
  int iteration = 0;
  double seg_loss = 0;
  double adapt_loss = 0;
  double lr = 0;
  double weight = 0;
};

struct TrainResult {
  Model model;
  std::vector<LogRow> log;
};

TrainResult train(const TrainConfig& config, const TrainData& data);

std::string log_csv(const std::vector<LogRow>& log);

/// Eval-mode logits for a stack of images, processed in chunks.
torch::Tensor predict_logits(Model& model, const torch::Tensor& images, int chunk = 32);

}  // namespace kshift::adapt
