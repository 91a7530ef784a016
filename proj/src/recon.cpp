#include "kshift/recon.hpp"

#include <fftw3.h>

#include <algorithm>
#include <cmath>
#include <memory>
#include <mutex>
#include <numbers>
#include <string>

#include "kshift/errors.hpp"

namespace kshift {

bool all_finite(std::span<const double> values) {
  return std::all_of(values.begin(), values.end(), [](double v) { return std::isfinite(v); });
}

}  // namespace kshift

namespace kshift::recon {
namespace {

// FFTW planning touches global state; execution on distinct buffers does not.
std::mutex& plan_mutex() {
  static std::mutex m;
  return m;
}

struct FftwFree {
  void operator()(void* p) const { fftw_free(p); }
};
template <typename T>
using FftwBuffer = std::unique_ptr<T[], FftwFree>;

template <typename T>
FftwBuffer<T> fftw_alloc(std::size_t n) {
  return FftwBuffer<T>(static_cast<T*>(fftw_malloc(sizeof(T) * n)));
}

struct PlanDeleter {
  void operator()(fftw_plan p) const {
    std::lock_guard lock(plan_mutex());
    fftw_destroy_plan(p);
  }
};
using Plan = std::unique_ptr<std::remove_pointer_t<fftw_plan>, PlanDeleter>;

std::size_t next_pow2(std::size_t n) {
  std::size_t p = 1;
  while (p < n) p <<= 1;
  return p;
}

void check_range(const Range& r, const char* name) {
  if (!(r.lo <= r.hi) || !std::isfinite(r.lo) || !std::isfinite(r.hi)) {
    throw ConfigError(std::string("empty or non-finite ") + name + " range");
  }
}

}  // namespace

void Sinogram::validate() const {
  if (n_angles < 1) throw InvalidInput("sinogram needs at least one angle");
  if (angles.size() != n_angles) throw InvalidInput("angle list length differs from n_angles");
  if (data.size() != n_angles * n_detectors) throw InvalidInput("sinogram data has wrong size");
  for (std::size_t i = 0; i < n_angles; ++i) {
    if (!(angles[i] >= 0.0 && angles[i] < std::numbers::pi)) {
      throw InvalidInput("sinogram angle outside [0, pi)");
    }
    if (i > 0 && !(angles[i] > angles[i - 1])) {
      throw InvalidInput("sinogram angles must be strictly increasing");
    }
  }
  if (!(detector_spacing > 0.0)) throw InvalidInput("detector spacing must be positive");
  if (!all_finite(data)) throw InvalidInput("sinogram contains non-finite values");
}

void KernelSpec::validate() const {
  if (!std::isfinite(a) || !std::isfinite(b) || a < 0.0) {
    throw InvalidInput("kernel amplitude a must be finite and non-negative");
  }
  if (a > 0.0 && !(b > 0.0)) throw InvalidInput("kernel exponent b must be positive when a > 0");
}

void AugmentOptions::validate() const {
  check_range(a_range, "a");
  check_range(b_range, "b");
  if (a_range.lo < 0.0) throw ConfigError("a range must lie in [0, inf)");
  if (a_range.hi > 0.0 && !(b_range.lo > 0.0)) throw ConfigError("b range must be positive");
  if (!(prob >= 0.0 && prob <= 1.0)) throw ConfigError("augmentation probability outside [0, 1]");
  if (n_angles < 1) throw ConfigError("augmentation needs at least one angle");
}

std::size_t detector_count(std::size_t side) {
  return static_cast<std::size_t>(std::ceil(std::numbers::sqrt2 * static_cast<double>(side)));
}

Sinogram radon(const Image2D& image, std::size_t n_angles) {
  if (image.empty() || !image.square()) throw InvalidInput("radon requires a non-empty square image");
  if (!all_finite(image.data)) throw InvalidInput("radon input contains non-finite values");
  if (n_angles < 1) throw InvalidInput("radon requires at least one angle");

  const std::size_t n = image.rows;
  Sinogram sino;
  sino.n_angles = n_angles;
  sino.n_detectors = detector_count(n);
  sino.detector_spacing = image.spacing_mm;
  sino.angles.resize(n_angles);
  sino.data.assign(n_angles * sino.n_detectors, 0.0);
  for (std::size_t i = 0; i < n_angles; ++i) {
    sino.angles[i] = std::numbers::pi * static_cast<double>(i) / static_cast<double>(n_angles);
  }

  // Coordinates in pixel units; spacing only scales the mass.
  const double centre = 0.5 * static_cast<double>(n - 1);
  const double det_centre = 0.5 * static_cast<double>(sino.n_detectors - 1);
  // pixel_area / detector_spacing with detector_spacing == pixel size
  const double mass_scale = image.spacing_mm;

  std::vector<double> xs(n), ys(n);
  for (std::size_t k = 0; k < n; ++k) {
    xs[k] = static_cast<double>(k) - centre;
    ys[k] = centre - static_cast<double>(k);
  }

  for (std::size_t a = 0; a < n_angles; ++a) {
    const double c = std::cos(sino.angles[a]);
    const double s = std::sin(sino.angles[a]);
    double* row = sino.data.data() + a * sino.n_detectors;
    for (std::size_t r = 0; r < n; ++r) {
      const double ys_r = ys[r] * s + det_centre;
      for (std::size_t col = 0; col < n; ++col) {
        const double v = image(r, col);
        if (v == 0.0) continue;
        const double u = xs[col] * c + ys_r;
        const double base = std::floor(u);
        const auto j = static_cast<std::size_t>(base);
        const double w = u - base;
        const double m = v * mass_scale;
        row[j] += m * (1.0 - w);
        if (w > 0.0) row[j + 1] += m * w;
      }
    }
  }
  return sino;
}

double kernel_response(const KernelSpec& spec, double nu) {
  if (!(nu >= 0.0 && nu <= 1.0)) throw InvalidInput("normalized frequency outside [0, 1]");
  if (spec.a == 0.0) return nu;
  return nu * (1.0 + spec.a * std::pow(nu, spec.b));
}

std::vector<double> kernel_response(const KernelSpec& spec, std::span<const double> nus) {
  spec.validate();
  std::vector<double> out;
  out.reserve(nus.size());
  for (double nu : nus) out.push_back(kernel_response(spec, nu));
  return out;
}

Image2D reconstruct(const Sinogram& sino, const KernelSpec& spec, std::size_t side) {
  sino.validate();
  spec.validate();
  if (side == 0 || sino.n_detectors != detector_count(side)) {
    throw InvalidInput("detector count does not match the diagonal of the target grid");
  }

  const std::size_t nd = sino.n_detectors;
  const std::size_t len = next_pow2(2 * nd);
  const std::size_t bins = len / 2 + 1;

  // Ramp in cycles per unit length is nu / (2 * spacing); 1/len undoes the unnormalized FFT pair.
  std::vector<double> filter(bins);
  for (std::size_t k = 0; k < bins; ++k) {
    const double nu = static_cast<double>(k) / static_cast<double>(len / 2);
    filter[k] = kernel_response(spec, std::min(nu, 1.0)) /
                (2.0 * sino.detector_spacing * static_cast<double>(len));
  }

  auto real = fftw_alloc<double>(len);
  auto spec_buf = fftw_alloc<fftw_complex>(bins);
  Plan forward, backward;
  {
    std::lock_guard lock(plan_mutex());
    forward.reset(fftw_plan_dft_r2c_1d(static_cast<int>(len), real.get(), spec_buf.get(), FFTW_ESTIMATE));
    backward.reset(fftw_plan_dft_c2r_1d(static_cast<int>(len), spec_buf.get(), real.get(), FFTW_ESTIMATE));
  }

  std::vector<double> filtered(sino.n_angles * nd);
  for (std::size_t a = 0; a < sino.n_angles; ++a) {
    auto proj = sino.projection(a);
    std::copy(proj.begin(), proj.end(), real.get());
    std::fill(real.get() + nd, real.get() + len, 0.0);
    fftw_execute(forward.get());
    for (std::size_t k = 0; k < bins; ++k) {
      spec_buf[k][0] *= filter[k];
      spec_buf[k][1] *= filter[k];
    }
    fftw_execute(backward.get());
    std::copy(real.get(), real.get() + nd, filtered.begin() + static_cast<std::ptrdiff_t>(a * nd));
  }

  Image2D out(side, side, sino.detector_spacing, 0.0);
  const double centre = 0.5 * static_cast<double>(side - 1);
  const double det_centre = 0.5 * static_cast<double>(nd - 1);
  const double weight = std::numbers::pi / static_cast<double>(sino.n_angles);
  for (std::size_t a = 0; a < sino.n_angles; ++a) {
    const double c = std::cos(sino.angles[a]);
    const double s = std::sin(sino.angles[a]);
    const double* q = filtered.data() + a * nd;
    for (std::size_t r = 0; r < side; ++r) {
      const double y = centre - static_cast<double>(r);
      const double ys = y * s + det_centre;
      double* row = out.data.data() + r * side;
      for (std::size_t col = 0; col < side; ++col) {
        const double u = (static_cast<double>(col) - centre) * c + ys;
        const double base = std::floor(u);
        const auto j = static_cast<std::size_t>(base);
        const double w = u - base;
        double v = q[j] * (1.0 - w);
        if (w > 0.0) v += q[j + 1] * w;
        row[col] += v;
      }
    }
  }
  for (double& v : out.data) v *= weight;
  return out;
}

Image2D fbp_augment(const Image2D& image, const AugmentOptions& opts, std::mt19937_64& rng) {
  opts.validate();
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double coin = unit(rng);
  const double ua = unit(rng);
  const double ub = unit(rng);
  if (!(coin < opts.prob)) return image;

  KernelSpec kernel{opts.a_range.lo + ua * (opts.a_range.hi - opts.a_range.lo),
                    opts.b_range.lo + ub * (opts.b_range.hi - opts.b_range.lo)};
  return reconstruct(radon(image, opts.n_angles), kernel, image.rows);
}

double high_frequency_energy(const Image2D& image, double band_start) {
  if (image.empty()) throw InvalidInput("empty image");
  const std::size_t rows = image.rows;
  const std::size_t cols = image.cols;
  const std::size_t half = cols / 2 + 1;

  auto in = fftw_alloc<double>(rows * cols);
  auto out = fftw_alloc<fftw_complex>(rows * half);
  Plan plan;
  {
    std::lock_guard lock(plan_mutex());
    plan.reset(fftw_plan_dft_r2c_2d(static_cast<int>(rows), static_cast<int>(cols), in.get(),
                                    out.get(), FFTW_ESTIMATE));
  }
  std::copy(image.data.begin(), image.data.end(), in.get());
  fftw_execute(plan.get());

  double energy = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    const double fy = static_cast<double>(r <= rows / 2 ? r : rows - r) / static_cast<double>(rows);
    for (std::size_t c = 0; c < half; ++c) {
      const double fx = static_cast<double>(c) / static_cast<double>(cols);
      const double radius = std::hypot(fx, fy) / 0.5;
      if (radius < band_start) continue;
      const auto& z = out[r * half + c];
      // Interior half-spectrum bins stand in for their conjugate twins.
      const bool twin = c != 0 && !(cols % 2 == 0 && c == cols / 2);
      energy += (twin ? 2.0 : 1.0) * (z[0] * z[0] + z[1] * z[1]);
    }
  }
  return energy;
}

}  // namespace kshift::recon
