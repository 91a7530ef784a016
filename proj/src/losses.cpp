#include "kshift/losses.hpp"

#include <cmath>
#include <iostream>

#include "kshift/errors.hpp"

namespace kshift::adapt {

namespace F = torch::nn::functional;

torch::Tensor segmentation_loss(const torch::Tensor& logits, const torch::Tensor& target) {
  if (!logits.sizes().equals(target.sizes())) throw InvalidInput("segmentation loss: shape mismatch");
  if (!torch::logical_or(target == 0, target == 1).all().item<bool>()) {
    throw InvalidInput("segmentation loss: target must be binary");
  }
  return F::binary_cross_entropy_with_logits(logits, target.to(logits.dtype()));
}

torch::Tensor domain_loss(const torch::Tensor& logits, const torch::Tensor& labels) {
  if (!labels.defined() || labels.numel() != logits.numel()) {
    throw InvalidInput("domain loss: every item needs a domain label");
  }
  return segmentation_loss(logits, labels.reshape(logits.sizes()).to(logits.dtype()));
}

torch::Tensor f_consistency_loss(const std::vector<torch::Tensor>& maps_a, const std::vector<torch::Tensor>& maps_b) {
  if (maps_a.empty() || maps_a.size() != maps_b.size()) {
    throw InvalidInput("consistency loss: tap sets differ in size or are empty");
  }
  torch::Tensor total;
  for (std::size_t i = 0; i < maps_a.size(); ++i) {
    if (!maps_a[i].sizes().equals(maps_b[i].sizes())) throw InvalidInput("consistency loss: tap shape mismatch");
    auto mse = (maps_a[i] - maps_b[i]).pow(2).mean();
    total = total.defined() ? total + mse : mse;
  }
  return total / static_cast<double>(maps_a.size());
}

torch::Tensor f_consistency_loss(const segnet::TapSet& taps_a, const segnet::TapSet& taps_b,
                                 segnet::SiteFilter filter) {
  const auto a = segnet::select(taps_a, filter);
  const auto b = segnet::select(taps_b, filter);
  std::vector<torch::Tensor> ma, mb;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (i < b.size() && !(a[i].site == b[i].site)) throw InvalidInput("consistency loss: tap sites differ");
    ma.push_back(a[i].features);
  }
  for (const auto& t : b) mb.push_back(t.features);
  return f_consistency_loss(ma, mb);
}

torch::Tensor p_consistency_loss(const torch::Tensor& probs_a, const torch::Tensor& probs_b, double eps) {
  if (!probs_a.sizes().equals(probs_b.sizes())) throw InvalidInput("dice loss: shape mismatch");
  auto in_unit = [](const torch::Tensor& t) { return torch::logical_and(t >= 0, t <= 1).all().item<bool>(); };
  if (!in_unit(probs_a) || !in_unit(probs_b)) throw InvalidInput("dice loss: probabilities outside [0, 1]");
  auto a = probs_a.dim() >= 2 ? probs_a.flatten(1) : probs_a.reshape({1, -1});
  auto b = probs_b.dim() >= 2 ? probs_b.flatten(1) : probs_b.reshape({1, -1});
  auto overlap = (a * b).sum(1);
  auto total = a.sum(1) + b.sum(1);
  return (1.0 - (2.0 * overlap + eps) / (total + eps)).mean();
}

double lambda_schedule(double progress, double lambda_max) {
  if (!(progress >= 0.0 && progress <= 1.0)) {
    std::clog << "warning: lambda schedule progress " << progress << " clamped to [0, 1]\n";
    progress = std::isnan(progress) ? 0.0 : std::clamp(progress, 0.0, 1.0);
  }
  return lambda_max * (2.0 / (1.0 + std::exp(-10.0 * progress)) - 1.0);
}

}  // namespace kshift::adapt
