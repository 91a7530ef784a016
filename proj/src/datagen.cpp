#include "kshift/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <tuple>

#include "kshift/errors.hpp"

namespace kshift::datagen {
namespace {

constexpr double kAirHu = -1000.0;
constexpr double kBodyHu = 0.0;
constexpr double kLungHu = -800.0;

// Projections act on attenuation, which is affine in HU with air at zero.
recon::Sinogram project_hu(const Image2D& hu, std::size_t n_angles) {
  Image2D mu = hu;
  for (double& v : mu.data) v -= kAirHu;
  return recon::radon(mu, n_angles);
}

Image2D reconstruct_hu(const recon::Sinogram& sino, const KernelSpec& kernel, std::size_t side) {
  Image2D img = recon::reconstruct(sino, kernel, side);
  for (double& v : img.data) v += kAirHu;
  img.intensity = Intensity::hounsfield;
  return img;
}

double uniform(std::mt19937_64& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

// 1 inside radius `inner`, 0 beyond 1, cosine taper between.
double taper(double d, double inner) {
  if (d <= inner) return 1.0;
  if (d >= 1.0) return 0.0;
  return 0.5 * (1.0 + std::cos(std::numbers::pi * (d - inner) / (1.0 - inner)));
}

double bilinear(const Image2D& img, double r, double c) {
  r = std::clamp(r, 0.0, static_cast<double>(img.rows - 1));
  c = std::clamp(c, 0.0, static_cast<double>(img.cols - 1));
  const auto r0 = static_cast<std::size_t>(std::floor(r));
  const auto c0 = static_cast<std::size_t>(std::floor(c));
  const std::size_t r1 = std::min(r0 + 1, img.rows - 1);
  const std::size_t c1 = std::min(c0 + 1, img.cols - 1);
  const double wr = r - static_cast<double>(r0);
  const double wc = c - static_cast<double>(c0);
  return (1 - wr) * ((1 - wc) * img(r0, c0) + wc * img(r0, c1)) +
         wr * ((1 - wc) * img(r1, c0) + wc * img(r1, c1));
}

}  // namespace

const char* to_string(DomainTag tag) { return tag == DomainTag::smooth ? "smooth" : "sharp"; }

DomainTag domain_from_string(const std::string& s) {
  if (s == "smooth") return DomainTag::smooth;
  if (s == "sharp") return DomainTag::sharp;
  throw InvalidInput("unknown domain tag: " + s);
}

std::mt19937_64 stream_rng(std::uint64_t seed, std::uint64_t stream, std::uint64_t index) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(index),
                    static_cast<std::uint32_t>(index >> 32)};
  return std::mt19937_64(seq);
}

void PhantomConfig::validate() const {
  if (size < 64) throw ConfigError("phantom grid size must be at least 64");
  if (!(spacing_mm > 0.0)) throw ConfigError("phantom spacing must be positive");
  if (lesion_count_min < 0 || lesion_count_max < lesion_count_min) {
    throw ConfigError("invalid lesion count range");
  }
  if (!(lesion_hu_min <= lesion_hu_max)) throw ConfigError("invalid lesion intensity range");
  if (!(noise_sigma_hu >= 0.0)) throw ConfigError("noise sigma must be non-negative");
}

BodyLayout draw_layout(std::mt19937_64& rng, const PhantomConfig& config) {
  config.validate();
  BodyLayout l;
  l.body_rx = uniform(rng, 0.40, 0.46);
  l.body_ry = uniform(rng, 0.30, 0.36);
  const double offset = uniform(rng, 0.17, 0.21);
  l.lung_cx[0] = -offset;
  l.lung_cx[1] = offset;
  l.lung_cy = uniform(rng, -0.02, 0.04);
  l.lung_rx = uniform(rng, 0.11, 0.14);
  l.lung_ry = uniform(rng, 0.18, 0.24);
  return l;
}

Phantom generate_slice(const BodyLayout& layout, std::mt19937_64& rng, const PhantomConfig& config) {
  config.validate();
  const std::size_t n = config.size;
  const double scale = static_cast<double>(n);
  const double centre = 0.5 * static_cast<double>(n - 1);

  Phantom p{Image2D(n, n, config.spacing_mm, kAirHu), Mask2D(n, n), Mask2D(n, n)};
  p.hu.intensity = Intensity::hounsfield;

  const double lung_hu = kLungHu + uniform(rng, -30.0, 30.0);
  auto coords = [&](std::size_t r, std::size_t c) {
    return std::pair{(static_cast<double>(c) - centre) / scale, (centre - static_cast<double>(r)) / scale};
  };

  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t c = 0; c < n; ++c) {
      auto [x, y] = coords(r, c);
      if (std::pow(x / layout.body_rx, 2) + std::pow(y / layout.body_ry, 2) <= 1.0) p.hu(r, c) = kBodyHu;
      for (double cx : layout.lung_cx) {
        if (std::pow((x - cx) / layout.lung_rx, 2) + std::pow((y - layout.lung_cy) / layout.lung_ry, 2) <= 1.0) {
          p.hu(r, c) = lung_hu;
          p.lung(r, c) = 1;
        }
      }
    }
  }

  const int count = std::uniform_int_distribution<int>(config.lesion_count_min, config.lesion_count_max)(rng);
  for (int i = 0; i < count; ++i) {
    const double cx0 = layout.lung_cx[std::uniform_int_distribution<int>(0, 1)(rng)];
    // Centre drawn in polar form inside a shrunken copy of the lung ellipse.
    const double rho = 0.65 * std::sqrt(uniform(rng, 0.0, 1.0));
    const double phi = uniform(rng, 0.0, 2.0 * std::numbers::pi);
    const double lx = cx0 + rho * layout.lung_rx * std::cos(phi);
    const double ly = layout.lung_cy + rho * layout.lung_ry * std::sin(phi);
    const double ra = uniform(rng, 0.035, 0.075);
    const double rb = uniform(rng, 0.035, 0.075);
    const double theta = uniform(rng, 0.0, std::numbers::pi);
    const double target_hu = uniform(rng, config.lesion_hu_min, config.lesion_hu_max);
    const double ct = std::cos(theta), st = std::sin(theta);

    for (std::size_t r = 0; r < n; ++r) {
      for (std::size_t c = 0; c < n; ++c) {
        if (!p.lung(r, c)) continue;
        auto [x, y] = coords(r, c);
        const double u = ((x - lx) * ct + (y - ly) * st) / ra;
        const double v = (-(x - lx) * st + (y - ly) * ct) / rb;
        const double w = taper(std::sqrt(u * u + v * v), 0.6);
        if (w <= 0.0) continue;
        p.hu(r, c) = std::max(p.hu(r, c), lung_hu + (target_hu - lung_hu) * w);
        if (w >= 0.5) p.lesion(r, c) = 1;
      }
    }
  }

  if (config.noise_sigma_hu > 0.0) {
    std::normal_distribution<double> noise(0.0, config.noise_sigma_hu);
    Image2D raw(n, n);
    for (double& v : raw.data) v = noise(rng);
    // [1 2 1] / 4 separable blur gives the noise a fine texture.
    Image2D tmp(n, n);
    for (std::size_t r = 0; r < n; ++r) {
      for (std::size_t c = 0; c < n; ++c) {
        const double left = raw(r, c == 0 ? 0 : c - 1);
        const double right = raw(r, c + 1 == n ? c : c + 1);
        tmp(r, c) = 0.25 * left + 0.5 * raw(r, c) + 0.25 * right;
      }
    }
    for (std::size_t r = 0; r < n; ++r) {
      for (std::size_t c = 0; c < n; ++c) {
        const double up = tmp(r == 0 ? 0 : r - 1, c);
        const double down = tmp(r + 1 == n ? r : r + 1, c);
        // 1.6 restores roughly the requested standard deviation after blurring.
        p.hu(r, c) += 1.6 * (0.25 * up + 0.5 * tmp(r, c) + 0.25 * down);
      }
    }
  }
  return p;
}

Phantom generate_phantom(std::mt19937_64& rng, const PhantomConfig& config) {
  const BodyLayout layout = draw_layout(rng, config);
  return generate_slice(layout, rng, config);
}

std::optional<Box> bounding_box(const Mask2D& mask) {
  Box b{mask.rows, 0, mask.cols, 0};
  bool any = false;
  for (std::size_t r = 0; r < mask.rows; ++r) {
    for (std::size_t c = 0; c < mask.cols; ++c) {
      if (!mask(r, c)) continue;
      any = true;
      b.r0 = std::min(b.r0, r);
      b.r1 = std::max(b.r1, r + 1);
      b.c0 = std::min(b.c0, c);
      b.c1 = std::max(b.c1, c + 1);
    }
  }
  if (!any) return std::nullopt;
  return b;
}

Image2D preprocess(const Image2D& image, const PreprocessOptions& opts, const Mask2D* lung) {
  if (!(image.spacing_mm > 0.0) || !(opts.target_spacing_mm > 0.0)) {
    throw InvalidInput("pixel spacing must be positive");
  }
  if (image.empty()) throw InvalidInput("cannot preprocess an empty image");
  if (!all_finite(image.data)) throw InvalidInput("image contains non-finite values");
  if (lung && (lung->rows != image.rows || lung->cols != image.cols)) {
    throw InvalidInput("lung mask grid differs from image grid");
  }

  Image2D out = image;
  Mask2D mask = lung ? *lung : Mask2D{};
  const double ratio = image.spacing_mm / opts.target_spacing_mm;
  if (std::abs(ratio - 1.0) > 1e-9) {
    const auto rows = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(image.rows * ratio)));
    const auto cols = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(image.cols * ratio)));
    out = Image2D(rows, cols, opts.target_spacing_mm);
    out.intensity = image.intensity;
    Mask2D resized(rows, cols);
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t c = 0; c < cols; ++c) {
        // Align pixel centres of both grids.
        const double sr = (static_cast<double>(r) + 0.5) / ratio - 0.5;
        const double sc = (static_cast<double>(c) + 0.5) / ratio - 0.5;
        out(r, c) = bilinear(image, sr, sc);
        if (lung) {
          const auto nr = std::min(image.rows - 1, static_cast<std::size_t>(std::max(0.0, std::round(sr))));
          const auto nc = std::min(image.cols - 1, static_cast<std::size_t>(std::max(0.0, std::round(sc))));
          resized(r, c) = (*lung)(nr, nc);
        }
      }
    }
    if (lung) mask = std::move(resized);
  }

  if (out.intensity != Intensity::normalized) {
    const double span = opts.hu_max - opts.hu_min;
    for (double& v : out.data) v = (std::clamp(v, opts.hu_min, opts.hu_max) - opts.hu_min) / span;
    out.intensity = Intensity::normalized;
  }

  if (lung) {
    if (auto box = bounding_box(mask)) {
      Image2D cropped(box->r1 - box->r0, box->c1 - box->c0, out.spacing_mm);
      cropped.intensity = out.intensity;
      for (std::size_t r = box->r0; r < box->r1; ++r) {
        for (std::size_t c = box->c0; c < box->c1; ++c) cropped(r - box->r0, c - box->c0) = out(r, c);
      }
      out = std::move(cropped);
    }
  }
  return out;
}

PairedSample synthesize_domain_pair(const Phantom& phantom, const KernelSpec& smooth,
                                    const KernelSpec& sharp, std::size_t n_angles,
                                    const PreprocessOptions& opts) {
  smooth.validate();
  sharp.validate();
  if (!(smooth.a < sharp.a) && !(smooth == sharp)) {
    throw ConfigError("smooth kernel must have a smaller sharpness amplitude than the sharp kernel");
  }
  const auto sino = project_hu(phantom.hu, n_angles);
  auto rec = [&](const KernelSpec& k) { return preprocess(reconstruct_hu(sino, k, phantom.hu.rows), opts); };
  PairedSample s;
  s.image_smooth = rec(smooth);
  s.image_sharp = smooth == sharp ? s.image_smooth : rec(sharp);
  s.kernel_smooth = smooth;
  s.kernel_sharp = sharp;
  s.lesion_mask_hidden = phantom.lesion;
  return s;
}

std::vector<KernelPairFamily> DatasetConfig::default_families() {
  const KernelSpec ramp{0.0, 1.0};
  return {{"R0/S15", ramp, {15.0, 1.0}},
          {"R0/S25", ramp, {25.0, 2.0}},
          {"R0/S35", ramp, {35.0, 3.0}},
          {"R0/S40", ramp, {40.0, 4.0}}};
}

void DatasetConfig::validate() const {
  phantom.validate();
  if (source_volumes < 1 || target_volumes < 1) throw ConfigError("need at least one source and target volume");
  if (slices_per_volume < 1 || slices_per_pair < 1) throw ConfigError("volumes need at least one slice");
  if (families.empty()) throw ConfigError("at least one kernel-pair family is required");
  if (pairs_per_family < 2) throw ConfigError("each kernel-pair family needs at least 2 pairs");
  if (!(paired_test_fraction > 0.0 && paired_test_fraction < 1.0)) {
    throw ConfigError("paired test fraction must lie in (0, 1)");
  }
  if (n_angles < 1) throw ConfigError("n_angles must be positive");
  for (const auto& f : families) {
    f.smooth.validate();
    f.sharp.validate();
    if (!(f.smooth.a < f.sharp.a)) throw ConfigError("family " + f.name + ": smooth.a must be below sharp.a");
  }
  if (paired_lesion_count) {
    auto [lo, hi] = *paired_lesion_count;
    if (lo < 0 || hi < lo) throw ConfigError("invalid paired lesion count range");
  }
}

std::vector<std::size_t> stratified_test_indices(std::span<const std::size_t> families,
                                                 double test_fraction, std::uint64_t seed) {
  std::size_t n_families = 0;
  for (auto f : families) n_families = std::max(n_families, f + 1);
  std::vector<std::size_t> test;
  for (std::size_t f = 0; f < n_families; ++f) {
    std::vector<std::size_t> members;
    for (std::size_t i = 0; i < families.size(); ++i) {
      if (families[i] == f) members.push_back(i);
    }
    if (members.empty()) continue;
    if (members.size() < 2) throw ConfigError("kernel-pair family with fewer than 2 pairs");
    auto rng = stream_rng(seed, 4, f);
    std::shuffle(members.begin(), members.end(), rng);
    auto n_test = static_cast<std::size_t>(std::lround(test_fraction * static_cast<double>(members.size())));
    n_test = std::clamp<std::size_t>(n_test, 1, members.size() - 1);
    test.insert(test.end(), members.begin(), members.begin() + static_cast<std::ptrdiff_t>(n_test));
  }
  std::sort(test.begin(), test.end());
  return test;
}

namespace {

LabeledVolume labeled_volume(const DatasetConfig& config, std::mt19937_64 rng, std::string id,
                             DomainTag domain, const KernelSpec& kernel) {
  LabeledVolume vol{std::move(id), domain, kernel, {}};
  const BodyLayout layout = draw_layout(rng, config.phantom);
  for (std::size_t s = 0; s < config.slices_per_volume; ++s) {
    Phantom ph = generate_slice(layout, rng, config.phantom);
    const Image2D img = reconstruct_hu(project_hu(ph.hu, config.n_angles), kernel, ph.hu.rows);
    vol.slices.push_back({preprocess(img), std::move(ph.lesion), std::move(ph.lung)});
  }
  return vol;
}

}  // namespace

std::pair<PairedSet, PairedSet> build_paired(const DatasetConfig& config, std::uint64_t seed) {
  config.validate();
  PhantomConfig pair_phantom = config.phantom;
  if (config.paired_lesion_count) {
    pair_phantom.lesion_count_min = config.paired_lesion_count->first;
    pair_phantom.lesion_count_max = config.paired_lesion_count->second;
  }

  PairedSet all;
  std::vector<std::size_t> family_of;
  for (std::size_t f = 0; f < config.families.size(); ++f) {
    const auto& fam = config.families[f];
    for (std::size_t j = 0; j < config.pairs_per_family; ++j) {
      const std::size_t index = f * config.pairs_per_family + j;
      auto rng = stream_rng(seed, 3, index);
      PairedVolume vol{"pair" + std::to_string(index), f, fam.smooth, fam.sharp, {}, {}};
      std::vector<Mask2D> hidden;
      const BodyLayout layout = draw_layout(rng, pair_phantom);
      for (std::size_t s = 0; s < config.slices_per_pair; ++s) {
        const Phantom ph = generate_slice(layout, rng, pair_phantom);
        PairedSample sample = synthesize_domain_pair(ph, fam.smooth, fam.sharp, config.n_angles);
        vol.smooth.push_back(std::move(sample.image_smooth));
        vol.sharp.push_back(std::move(sample.image_sharp));
        hidden.push_back(std::move(*sample.lesion_mask_hidden));
      }
      all.volumes.push_back(std::move(vol));
      all.hidden_lesions.push_back(std::move(hidden));
      family_of.push_back(f);
    }
  }

  std::pair<PairedSet, PairedSet> split;
  const auto test = stratified_test_indices(family_of, config.paired_test_fraction, seed);
  for (std::size_t i = 0; i < all.volumes.size(); ++i) {
    PairedSet& dst = std::binary_search(test.begin(), test.end(), i) ? split.second : split.first;
    dst.volumes.push_back(std::move(all.volumes[i]));
    dst.hidden_lesions.push_back(std::move(all.hidden_lesions[i]));
  }
  return split;
}

Datasets build_datasets(const DatasetConfig& config, std::uint64_t seed) {
  config.validate();
  Datasets ds;
  ds.families = config.families;

  for (std::size_t i = 0; i < config.source_volumes; ++i) {
    ds.source.push_back(labeled_volume(config, stream_rng(seed, 1, i), "src" + std::to_string(i),
                                       DomainTag::smooth, config.source_kernel));
  }
  for (std::size_t i = 0; i < config.target_volumes; ++i) {
    const auto& fam = config.families[i % config.families.size()];
    ds.target_test.push_back(labeled_volume(config, stream_rng(seed, 2, i), "tgt" + std::to_string(i),
                                            DomainTag::sharp, fam.sharp));
  }

  std::tie(ds.paired_train, ds.paired_test) = build_paired(config, seed);
  return ds;
}

std::vector<std::size_t> FoldSplit::fold(std::size_t f) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < assignments.size(); ++i) {
    if (assignments[i] == f) out.push_back(i);
  }
  return out;
}

std::vector<std::size_t> FoldSplit::complement(std::size_t f) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < assignments.size(); ++i) {
    if (assignments[i] != f) out.push_back(i);
  }
  return out;
}

FoldSplit split_folds(std::size_t dataset_size, std::size_t k, std::uint64_t seed) {
  if (k <= 1) throw ConfigError("fold count must exceed 1");
  if (dataset_size < k) throw ConfigError("dataset smaller than fold count");
  std::vector<std::size_t> order(dataset_size);
  for (std::size_t i = 0; i < dataset_size; ++i) order[i] = i;
  auto rng = stream_rng(seed, 5);
  std::shuffle(order.begin(), order.end(), rng);
  FoldSplit split{k, std::vector<std::size_t>(dataset_size), seed};
  for (std::size_t pos = 0; pos < dataset_size; ++pos) split.assignments[order[pos]] = pos % k;
  return split;
}

}  // namespace kshift::datagen
