#pragma once

#include <torch/torch.h>

#include "kshift/segnet.hpp"

namespace kshift::adapt {

/// Mean binary cross-entropy between logits and a binary target of the same shape.
torch::Tensor segmentation_loss(const torch::Tensor& logits, const torch::Tensor& target);

/// Binary cross-entropy of per-item domain logits against labels (0 = smooth, 1 = sharp).
torch::Tensor domain_loss(const torch::Tensor& logits, const torch::Tensor& labels);

/// Mean over the selected sites of the per-site mean squared error between paired maps.
torch::Tensor f_consistency_loss(const segnet::TapSet& taps_a, const segnet::TapSet& taps_b,
                                 segnet::SiteFilter filter);

/// Per-site form used when the caller has already picked the maps.
torch::Tensor f_consistency_loss(const std::vector<torch::Tensor>& maps_a,
                                 const std::vector<torch::Tensor>& maps_b);

/// Soft Dice loss 1 - (2 sum(p q) + eps) / (sum(p) + sum(q) + eps), computed per item
/// (first dimension of tensors with two or more dimensions) and averaged.
torch::Tensor p_consistency_loss(const torch::Tensor& probs_a, const torch::Tensor& probs_b, double eps = 1.0);

/// Gradient-reversal weight ramp lambda_max * (2 / (1 + exp(-10 p)) - 1). Progress outside
/// [0, 1] is clamped with a warning.
double lambda_schedule(double progress, double lambda_max);

}  // namespace kshift::adapt
