#include "kshift/stats.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>

#include "kshift/errors.hpp"

namespace kshift::metrics {

double dice(std::span<const Mask2D> pred, std::span<const Mask2D> truth) {
  if (pred.size() != truth.size()) throw InvalidInput("dice: slice counts differ");
  std::size_t inter = 0, sum = 0;
  for (std::size_t s = 0; s < pred.size(); ++s) {
    const auto& p = pred[s];
    const auto& t = truth[s];
    if (p.rows != t.rows || p.cols != t.cols) throw InvalidInput("dice: mask shapes differ");
    for (std::size_t i = 0; i < p.data.size(); ++i) {
      const bool a = p.data[i] != 0;
      const bool b = t.data[i] != 0;
      inter += a && b;
      sum += static_cast<std::size_t>(a) + static_cast<std::size_t>(b);
    }
  }
  if (sum == 0) return 1.0;
  return 2.0 * static_cast<double>(inter) / static_cast<double>(sum);
}

double dice(const Mask2D& pred, const Mask2D& truth) {
  return dice(std::span<const Mask2D>(&pred, 1), std::span<const Mask2D>(&truth, 1));
}

double SignedRanks::w_plus() const {
  double w = 0.0;
  for (std::size_t i = 0; i < ranks.size(); ++i) {
    if (positive[i]) w += ranks[i];
  }
  return w;
}

SignedRanks signed_ranks(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw InvalidInput("wilcoxon: samples differ in length");
  std::vector<double> diffs;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    if (!std::isfinite(d)) throw InvalidInput("wilcoxon: non-finite sample");
    if (d != 0.0) diffs.push_back(d);
  }
  if (diffs.empty()) throw UndefinedTest("wilcoxon: all differences are zero");

  std::vector<std::size_t> order(diffs.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::size_t i, std::size_t j) { return std::abs(diffs[i]) < std::abs(diffs[j]); });

  SignedRanks sr;
  sr.ranks.resize(diffs.size());
  sr.positive.resize(diffs.size());
  for (std::size_t i = 0; i < diffs.size(); ++i) sr.positive[i] = diffs[i] > 0.0;
  std::size_t pos = 0;
  while (pos < order.size()) {
    std::size_t end = pos + 1;
    while (end < order.size() && std::abs(diffs[order[end]]) == std::abs(diffs[order[pos]])) ++end;
    const double midrank = 0.5 * static_cast<double>(pos + 1 + end);
    for (std::size_t k = pos; k < end; ++k) sr.ranks[order[k]] = midrank;
    if (end - pos > 1) sr.tie_sizes.push_back(end - pos);
    pos = end;
  }
  return sr;
}

double wilcoxon_exact(const SignedRanks& sr, Alternative alt) {
  const std::size_t n = sr.ranks.size();
  if (n > 24) throw InvalidInput("wilcoxon: exact enumeration limited to 24 pairs");
  const double observed = sr.w_plus();
  const double tol = 1e-9;
  const std::uint64_t total = std::uint64_t{1} << n;
  std::uint64_t hits = 0;
  for (std::uint64_t mask = 0; mask < total; ++mask) {
    double w = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      if (mask >> i & 1U) w += sr.ranks[i];
    }
    const bool extreme = alt == Alternative::less ? w <= observed + tol : w >= observed - tol;
    hits += extreme;
  }
  return static_cast<double>(hits) / static_cast<double>(total);
}

double wilcoxon_normal(const SignedRanks& sr, Alternative alt) {
  const auto n = static_cast<double>(sr.ranks.size());
  const double mu = n * (n + 1.0) / 4.0;
  double var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0;
  for (auto t : sr.tie_sizes) {
    const auto tt = static_cast<double>(t);
    var -= (tt * tt * tt - tt) / 48.0;
  }
  if (!(var > 0.0)) throw UndefinedTest("wilcoxon: degenerate null variance");
  const double sd = std::sqrt(var);
  const double w = sr.w_plus();
  if (alt == Alternative::less) {
    const double z = (w - mu + 0.5) / sd;
    return 0.5 * std::erfc(-z / std::sqrt(2.0));
  }
  const double z = (w - mu - 0.5) / sd;
  return 0.5 * std::erfc(z / std::sqrt(2.0));
}

double wilcoxon_one_sided(std::span<const double> a, std::span<const double> b, Alternative alt,
                          std::size_t exact_limit) {
  if (a.size() != b.size()) throw InvalidInput("wilcoxon: samples differ in length");
  if (a.size() < 5) throw InvalidInput("wilcoxon: need at least 5 pairs");
  const SignedRanks sr = signed_ranks(a, b);
  const double p = sr.ranks.size() <= exact_limit ? wilcoxon_exact(sr, alt) : wilcoxon_normal(sr, alt);
  return std::clamp(p, 0.0, 1.0);
}

double mean(std::span<const double> v) {
  if (v.empty()) return 0.0;
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

double stddev(std::span<const double> v) {
  if (v.empty()) return 0.0;
  const double m = mean(v);
  double acc = 0.0;
  for (double x : v) acc += (x - m) * (x - m);
  return std::sqrt(acc / static_cast<double>(v.size()));
}

}  // namespace kshift::metrics
