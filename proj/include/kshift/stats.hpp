#pragma once

#include <span>
#include <vector>

#include "kshift/image.hpp"

namespace kshift::metrics {

/// 2|A n B| / (|A| + |B|) pooled over all slices; two empty masks score 1.
double dice(std::span<const Mask2D> pred, std::span<const Mask2D> truth);
double dice(const Mask2D& pred, const Mask2D& truth);

enum class Alternative {
  less,    // sample_a tends to be smaller than sample_b
  greater  // sample_a tends to be larger than sample_b
};

/// Ranked non-zero paired differences a - b, with midranks for ties.
struct SignedRanks {
  std::vector<double> ranks;
  std::vector<bool> positive;
  std::vector<std::size_t> tie_sizes;

  double w_plus() const;
};

SignedRanks signed_ranks(std::span<const double> a, std::span<const double> b);

/// Exact null distribution by enumerating all 2^n sign assignments.
double wilcoxon_exact(const SignedRanks& sr, Alternative alt);
/// Normal approximation with tie and continuity corrections.
double wilcoxon_normal(const SignedRanks& sr, Alternative alt);

/// One-sided Wilcoxon signed-rank test. Zero differences are dropped; exact enumeration is
/// used for up to `exact_limit` remaining pairs, the normal approximation otherwise.
double wilcoxon_one_sided(std::span<const double> a, std::span<const double> b,
                          Alternative alt = Alternative::less, std::size_t exact_limit = 12);

double mean(std::span<const double> v);
/// Population standard deviation.
double stddev(std::span<const double> v);

}  // namespace kshift::metrics
