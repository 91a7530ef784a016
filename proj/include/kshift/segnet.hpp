#pragma once

#include <string>
#include <vector>

#include <torch/torch.h>

namespace kshift::segnet {

struct UNetConfig {
  int depth = 4;
  int base_width = 16;
  int blocks_per_stage = 2;
  int in_channels = 1;

  bool operator==(const UNetConfig&) const = default;
};

enum class SiteKind { encoder, decoder, output };

/// Where a feature map was taken. `stage` is the resolution level (0 = full resolution).
struct Site {
  SiteKind kind = SiteKind::encoder;
  int stage = 0;

  std::string label() const;
  bool operator==(const Site&) const = default;
};

struct Tap {
  Site site;
  torch::Tensor features;  // N x C x H x W
};

/// Feature maps in the order they are computed, shallow to deep.
using TapSet = std::vector<Tap>;

enum class SiteFilter { encoder, decoder, output };

TapSet select(const TapSet& taps, SiteFilter filter);

/// Pre-activation residual block: BN-ReLU-conv3x3-BN-ReLU-conv3x3 plus a 1x1 projection on
/// the shortcut when the channel count changes.
class ResidualBlockImpl : public torch::nn::Module {
 public:
  ResidualBlockImpl(int in_channels, int out_channels);
  torch::Tensor forward(const torch::Tensor& x);

  /// Zeroes the weights of the residual branch so the block reduces to its shortcut.
  void zero_residual_branch();
  bool has_projection() const { return !projection_.is_empty(); }

 private:
  torch::nn::BatchNorm2d bn1_{nullptr}, bn2_{nullptr};
  torch::nn::Conv2d conv1_{nullptr}, conv2_{nullptr};
  torch::nn::Conv2d projection_{nullptr};
};
TORCH_MODULE(ResidualBlock);

struct UNetOutput {
  torch::Tensor logits;  // N x 1 x H x W, pre-sigmoid
  TapSet taps;
};

/// 2D U-Net built from residual blocks: max-pool downsampling, bilinear upsampling and
/// concatenated skips. Channel width doubles per stage.
class UNetImpl : public torch::nn::Module {
 public:
  explicit UNetImpl(UNetConfig config = {});

  UNetOutput forward(const torch::Tensor& x);
  torch::Tensor logits(const torch::Tensor& x) { return forward(x).logits; }

  const UNetConfig& config() const { return config_; }
  int stage_width(int stage) const { return config_.base_width << stage; }

  /// Encoder parameters (feature extractor) and decoder plus head parameters.
  std::vector<torch::Tensor> encoder_parameters() const;
  std::vector<torch::Tensor> decoder_parameters() const;

  std::vector<ResidualBlock> blocks() const;

 private:
  UNetConfig config_;
  std::vector<torch::nn::Sequential> encoder_;
  std::vector<torch::nn::Sequential> decoder_;  // decoder_[k] produces resolution level k
  torch::nn::Conv2d head_{nullptr};
};
TORCH_MODULE(UNet);

/// Shape of every tap for an input of the given spatial size, without running the network.
std::vector<std::vector<int64_t>> tap_shapes(const UNetConfig& config, int64_t batch, int64_t height,
                                             int64_t width);

/// Projects each selected tap to a common channel count with a learned 1x1 convolution,
/// resizes it bilinearly to the coarsest selected tap and concatenates along channels.
class FeatureAggregatorImpl : public torch::nn::Module {
 public:
  FeatureAggregatorImpl(std::vector<int> tap_channels, int common_channels = 32);
  torch::Tensor forward(const TapSet& taps);
  int output_channels() const { return common_channels_ * static_cast<int>(projections_.size()); }

 private:
  int common_channels_;
  std::vector<torch::nn::Conv2d> projections_;
};
TORCH_MODULE(FeatureAggregator);

/// Three stride-2 convolutions (64/128/128) each followed by leaky ReLU and 2x2 average
/// pooling, global average pooling, then 128 -> 64 -> 1 fully connected layers.
/// One logit per item; sigmoid(logit) is the probability of the sharp domain.
class DiscriminatorImpl : public torch::nn::Module {
 public:
  explicit DiscriminatorImpl(int in_channels);
  torch::Tensor forward(const torch::Tensor& x);

 private:
  std::vector<torch::nn::Conv2d> convs_;
  torch::nn::Linear fc1_{nullptr}, fc2_{nullptr};
};
TORCH_MODULE(Discriminator);

/// Identity on the forward pass; scales the incoming gradient by -lambda on the backward pass.
torch::Tensor grad_reverse(const torch::Tensor& x, double lambda);

/// Channel counts of the taps matching `filter`, in tap order.
std::vector<int> tap_channels(const UNetConfig& config, SiteFilter filter);

}  // namespace kshift::segnet
