#pragma once

#include <cstddef>
#include <random>
#include <span>
#include <vector>

#include "kshift/image.hpp"

namespace kshift::recon {

/// Parallel-beam projections, one row per angle.
struct Sinogram {
  std::size_t n_angles = 0;
  std::size_t n_detectors = 0;
  std::vector<double> angles;  // radians, strictly increasing in [0, pi)
  double detector_spacing = 1.0;
  std::vector<double> data;    // n_angles x n_detectors, row-major

  double& operator()(std::size_t a, std::size_t d) { return data[a * n_detectors + d]; }
  double operator()(std::size_t a, std::size_t d) const { return data[a * n_detectors + d]; }
  std::span<const double> projection(std::size_t a) const {
    return {data.data() + a * n_detectors, n_detectors};
  }

  /// Throws InvalidInput if the angle list or data violate the sinogram invariants.
  void validate() const;
};

/// Reconstruction kernel W(nu) = nu * (1 + a * nu^b). a = 0 is the plain ramp.
struct KernelSpec {
  double a = 0.0;
  double b = 1.0;

  void validate() const;
  bool operator==(const KernelSpec&) const = default;
};

struct Range {
  double lo = 0.0;
  double hi = 0.0;
};

/// Detector count covering the diagonal of a side x side grid.
std::size_t detector_count(std::size_t side);

/// Line integrals of `image` along parallel rays at n_angles evenly spaced angles in [0, pi).
/// Pixels are splatted onto the detector with linear weights, so every projection carries
/// exactly the image mass.
Sinogram radon(const Image2D& image, std::size_t n_angles);

double kernel_response(const KernelSpec& spec, double nu);
std::vector<double> kernel_response(const KernelSpec& spec, std::span<const double> nus);

/// Filtered backprojection onto a side x side grid with pixel size equal to the detector spacing.
Image2D reconstruct(const Sinogram& sino, const KernelSpec& spec, std::size_t side);

struct AugmentOptions {
  Range a_range{10.0, 40.0};
  Range b_range{1.0, 4.0};
  double prob = 0.1;
  std::size_t n_angles = 180;

  void validate() const;
};

/// FBPAug: with probability opts.prob re-reconstruct the image through a randomly drawn
/// kernel, otherwise return it untouched. Always consumes the same number of draws from `rng`.
Image2D fbp_augment(const Image2D& image, const AugmentOptions& opts, std::mt19937_64& rng);

/// Sum of squared spectral magnitudes over radial frequencies at or above
/// `band_start` (normalized so that 1 is the Nyquist frequency along an axis).
double high_frequency_energy(const Image2D& image, double band_start = 0.75);

}  // namespace kshift::recon
