#include "kshift/segnet.hpp"

#include <algorithm>

#include "kshift/errors.hpp"

namespace kshift::segnet {

namespace F = torch::nn::functional;

std::string Site::label() const {
  switch (kind) {
    case SiteKind::encoder: return "encoder_" + std::to_string(stage);
    case SiteKind::decoder: return "decoder_" + std::to_string(stage);
    case SiteKind::output: return "output";
  }
  return "?";
}

TapSet select(const TapSet& taps, SiteFilter filter) {
  const SiteKind want = filter == SiteFilter::encoder   ? SiteKind::encoder
                        : filter == SiteFilter::decoder ? SiteKind::decoder
                                                        : SiteKind::output;
  TapSet out;
  for (const auto& t : taps) {
    if (t.site.kind == want) out.push_back(t);
  }
  return out;
}

ResidualBlockImpl::ResidualBlockImpl(int in_channels, int out_channels) {
  bn1_ = register_module("bn1", torch::nn::BatchNorm2d(in_channels));
  conv1_ = register_module(
      "conv1", torch::nn::Conv2d(torch::nn::Conv2dOptions(in_channels, out_channels, 3).padding(1).bias(false)));
  bn2_ = register_module("bn2", torch::nn::BatchNorm2d(out_channels));
  conv2_ = register_module(
      "conv2", torch::nn::Conv2d(torch::nn::Conv2dOptions(out_channels, out_channels, 3).padding(1).bias(false)));
  if (in_channels != out_channels) {
    projection_ = register_module(
        "projection", torch::nn::Conv2d(torch::nn::Conv2dOptions(in_channels, out_channels, 1).bias(false)));
  }
}

torch::Tensor ResidualBlockImpl::forward(const torch::Tensor& x) {
  auto h = conv1_(torch::relu(bn1_(x)));
  h = conv2_(torch::relu(bn2_(h)));
  return (projection_ ? projection_(x) : x) + h;
}

void ResidualBlockImpl::zero_residual_branch() {
  torch::NoGradGuard guard;
  conv1_->weight.zero_();
  conv2_->weight.zero_();
}

UNetImpl::UNetImpl(UNetConfig config) : config_(config) {
  if (config_.depth < 1 || config_.base_width < 1 || config_.blocks_per_stage < 1 || config_.in_channels < 1) {
    throw ConfigError("invalid U-Net configuration");
  }
  for (int k = 0; k <= config_.depth; ++k) {
    torch::nn::Sequential stage;
    if (k > 0) stage->push_back(torch::nn::MaxPool2d(torch::nn::MaxPool2dOptions(2)));
    int in = k == 0 ? config_.in_channels : stage_width(k - 1);
    for (int b = 0; b < config_.blocks_per_stage; ++b) {
      stage->push_back(ResidualBlock(in, stage_width(k)));
      in = stage_width(k);
    }
    encoder_.push_back(register_module("encoder" + std::to_string(k), stage));
  }
  decoder_.resize(static_cast<std::size_t>(config_.depth));
  for (int k = config_.depth - 1; k >= 0; --k) {
    torch::nn::Sequential stage;
    int in = stage_width(k + 1) + stage_width(k);
    for (int b = 0; b < config_.blocks_per_stage; ++b) {
      stage->push_back(ResidualBlock(in, stage_width(k)));
      in = stage_width(k);
    }
    decoder_[static_cast<std::size_t>(k)] = register_module("decoder" + std::to_string(k), stage);
  }
  head_ = register_module("head", torch::nn::Conv2d(torch::nn::Conv2dOptions(stage_width(0), 1, 1)));
}

UNetOutput UNetImpl::forward(const torch::Tensor& x) {
  if (x.dim() != 4 || x.size(1) != config_.in_channels) {
    throw InvalidInput("U-Net expects an N x C x H x W batch with C = in_channels");
  }
  const int64_t factor = int64_t{1} << config_.depth;
  if (x.size(2) % factor != 0 || x.size(3) % factor != 0) {
    throw InvalidInput("U-Net input size must be divisible by 2^depth");
  }

  UNetOutput out;
  std::vector<torch::Tensor> skips;
  torch::Tensor h = x;
  for (int k = 0; k <= config_.depth; ++k) {
    h = encoder_[static_cast<std::size_t>(k)]->forward(h);
    skips.push_back(h);
    out.taps.push_back({{SiteKind::encoder, k}, h});
  }
  for (int k = config_.depth - 1; k >= 0; --k) {
    const auto& skip = skips[static_cast<std::size_t>(k)];
    auto up = F::interpolate(h, F::InterpolateFuncOptions()
                                    .size(std::vector<int64_t>{skip.size(2), skip.size(3)})
                                    .mode(torch::kBilinear)
                                    .align_corners(false));
    h = decoder_[static_cast<std::size_t>(k)]->forward(torch::cat({up, skip}, 1));
    out.taps.push_back({{SiteKind::decoder, k}, h});
  }
  out.logits = head_(h);
  out.taps.push_back({{SiteKind::output, 0}, out.logits});
  return out;
}

std::vector<torch::Tensor> UNetImpl::encoder_parameters() const {
  std::vector<torch::Tensor> out;
  for (const auto& s : encoder_) {
    for (const auto& p : s->parameters()) out.push_back(p);
  }
  return out;
}

std::vector<torch::Tensor> UNetImpl::decoder_parameters() const {
  std::vector<torch::Tensor> out;
  for (const auto& s : decoder_) {
    for (const auto& p : s->parameters()) out.push_back(p);
  }
  for (const auto& p : head_->parameters()) out.push_back(p);
  return out;
}

std::vector<ResidualBlock> UNetImpl::blocks() const {
  std::vector<ResidualBlock> out;
  auto collect = [&](const torch::nn::Sequential& s) {
    for (const auto& m : s->children()) {
      if (auto b = std::dynamic_pointer_cast<ResidualBlockImpl>(m)) out.emplace_back(b);
    }
  };
  for (const auto& s : encoder_) collect(s);
  for (const auto& s : decoder_) collect(s);
  return out;
}

std::vector<std::vector<int64_t>> tap_shapes(const UNetConfig& config, int64_t batch, int64_t height,
                                             int64_t width) {
  std::vector<std::vector<int64_t>> out;
  auto width_of = [&](int k) { return static_cast<int64_t>(config.base_width) << k; };
  for (int k = 0; k <= config.depth; ++k) out.push_back({batch, width_of(k), height >> k, width >> k});
  for (int k = config.depth - 1; k >= 0; --k) out.push_back({batch, width_of(k), height >> k, width >> k});
  out.push_back({batch, 1, height, width});
  return out;
}

std::vector<int> tap_channels(const UNetConfig& config, SiteFilter filter) {
  std::vector<int> out;
  switch (filter) {
    case SiteFilter::encoder:
      for (int k = 0; k <= config.depth; ++k) out.push_back(config.base_width << k);
      break;
    case SiteFilter::decoder:
      for (int k = config.depth - 1; k >= 0; --k) out.push_back(config.base_width << k);
      break;
    case SiteFilter::output: out.push_back(1); break;
  }
  return out;
}

FeatureAggregatorImpl::FeatureAggregatorImpl(std::vector<int> tap_channels, int common_channels)
    : common_channels_(common_channels) {
  if (tap_channels.empty()) throw ConfigError("feature aggregation needs at least one tap");
  for (std::size_t i = 0; i < tap_channels.size(); ++i) {
    projections_.push_back(register_module(
        "proj" + std::to_string(i),
        torch::nn::Conv2d(torch::nn::Conv2dOptions(tap_channels[i], common_channels_, 1))));
  }
}

torch::Tensor FeatureAggregatorImpl::forward(const TapSet& taps) {
  if (taps.empty()) throw ConfigError("feature aggregation received no taps");
  if (taps.size() != projections_.size()) throw InvalidInput("tap count differs from aggregator configuration");
  auto coarsest = std::min_element(taps.begin(), taps.end(), [](const Tap& a, const Tap& b) {
    return a.features.size(2) * a.features.size(3) < b.features.size(2) * b.features.size(3);
  });
  const std::vector<int64_t> ref{coarsest->features.size(2), coarsest->features.size(3)};
  std::vector<torch::Tensor> parts;
  for (std::size_t i = 0; i < taps.size(); ++i) {
    auto p = projections_[i](taps[i].features);
    if (p.size(2) != ref[0] || p.size(3) != ref[1]) {
      p = F::interpolate(p, F::InterpolateFuncOptions().size(ref).mode(torch::kBilinear).align_corners(false));
    }
    parts.push_back(p);
  }
  return torch::cat(parts, 1);
}

DiscriminatorImpl::DiscriminatorImpl(int in_channels) {
  const int widths[] = {64, 128, 128};
  int in = in_channels;
  for (int i = 0; i < 3; ++i) {
    convs_.push_back(register_module(
        "conv" + std::to_string(i),
        torch::nn::Conv2d(torch::nn::Conv2dOptions(in, widths[i], 3).stride(2).padding(1))));
    in = widths[i];
  }
  fc1_ = register_module("fc1", torch::nn::Linear(128, 64));
  fc2_ = register_module("fc2", torch::nn::Linear(64, 1));
}

torch::Tensor DiscriminatorImpl::forward(const torch::Tensor& x) {
  if (x.dim() != 4) throw InvalidInput("discriminator expects an N x C x H x W tensor");
  auto h = x;
  for (auto& conv : convs_) {
    h = F::leaky_relu(conv(h), F::LeakyReLUFuncOptions().negative_slope(0.2));
    // Pooling stops once the map is a single pixel.
    if (h.size(2) >= 2 && h.size(3) >= 2) h = F::avg_pool2d(h, F::AvgPool2dFuncOptions(2));
  }
  h = h.mean({2, 3});
  h = F::leaky_relu(fc1_(h), F::LeakyReLUFuncOptions().negative_slope(0.2));
  return fc2_(h).squeeze(1);
}

namespace {

struct GradReverseFn : public torch::autograd::Function<GradReverseFn> {
  static torch::Tensor forward(torch::autograd::AutogradContext* ctx, const torch::Tensor& x, double lambda) {
    ctx->saved_data["lambda"] = lambda;
    return x.view_as(x);
  }

  static torch::autograd::variable_list backward(torch::autograd::AutogradContext* ctx,
                                                 torch::autograd::variable_list grads) {
    const double lambda = ctx->saved_data["lambda"].toDouble();
    return {grads[0] * -lambda, torch::Tensor()};
  }
};

}  // namespace

torch::Tensor grad_reverse(const torch::Tensor& x, double lambda) {
  if (!(lambda >= 0.0)) throw InvalidInput("gradient reversal weight must be non-negative");
  return GradReverseFn::apply(x, lambda);
}

}  // namespace kshift::segnet
