#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "kshift/image.hpp"
#include "kshift/recon.hpp"

namespace kshift::datagen {

using recon::KernelSpec;

enum class DomainTag { smooth, sharp };

const char* to_string(DomainTag tag);
DomainTag domain_from_string(const std::string& s);

struct PhantomConfig {
  std::size_t size = 128;
  double spacing_mm = 1.75;
  int lesion_count_min = 1;
  int lesion_count_max = 4;
  double lesion_hu_min = -600.0;
  double lesion_hu_max = -300.0;
  double noise_sigma_hu = 10.0;

  void validate() const;
};

/// Body and lung ellipses shared by every slice of one synthetic volume.
struct BodyLayout {
  double body_rx = 0, body_ry = 0;
  double lung_cx[2] = {0, 0};
  double lung_cy = 0;
  double lung_rx = 0, lung_ry = 0;
};

struct Phantom {
  Image2D hu;
  Mask2D lesion;
  Mask2D lung;
};

BodyLayout draw_layout(std::mt19937_64& rng, const PhantomConfig& config);
Phantom generate_slice(const BodyLayout& layout, std::mt19937_64& rng, const PhantomConfig& config);

/// One phantom slice with a freshly drawn layout.
Phantom generate_phantom(std::mt19937_64& rng, const PhantomConfig& config);

struct PreprocessOptions {
  double target_spacing_mm = 1.75;
  double hu_min = -1000.0;
  double hu_max = 300.0;
};

/// Resample to the target spacing, clip HU and scale to [0, 1], optionally crop to the
/// bounding box of `lung`. Normalized input skips the intensity mapping, which makes the
/// operation idempotent.
Image2D preprocess(const Image2D& image, const PreprocessOptions& opts = {},
                   const Mask2D* lung = nullptr);

/// Bounding box of the non-zero mask pixels as [r0, r1) x [c0, c1).
struct Box {
  std::size_t r0 = 0, r1 = 0, c0 = 0, c1 = 0;
};
std::optional<Box> bounding_box(const Mask2D& mask);

struct LabeledSlice {
  Image2D image;  // normalized to [0, 1]
  Mask2D lesion;
  Mask2D lung;
};

struct LabeledVolume {
  std::string id;
  DomainTag domain = DomainTag::smooth;
  KernelSpec kernel;
  std::vector<LabeledSlice> slices;
};

/// One slice reconstructed twice from the same sinogram.
struct PairedSample {
  Image2D image_smooth;
  Image2D image_sharp;
  KernelSpec kernel_smooth;
  KernelSpec kernel_sharp;
  std::optional<Mask2D> lesion_mask_hidden;
};

PairedSample synthesize_domain_pair(const Phantom& phantom, const KernelSpec& smooth,
                                    const KernelSpec& sharp, std::size_t n_angles = 180,
                                    const PreprocessOptions& opts = {});

/// Trainer-facing paired volume: images and kernels only.
struct PairedVolume {
  std::string id;
  std::size_t family = 0;
  KernelSpec kernel_smooth;
  KernelSpec kernel_sharp;
  std::vector<Image2D> smooth;
  std::vector<Image2D> sharp;
};

struct KernelPairFamily {
  std::string name;
  KernelSpec smooth;
  KernelSpec sharp;
};

/// Paired volumes plus the lesion masks that only evaluation may read.
struct PairedSet {
  std::vector<PairedVolume> volumes;
  std::vector<std::vector<Mask2D>> hidden_lesions;  // parallel to volumes
};

struct DatasetConfig {
  PhantomConfig phantom;
  std::size_t source_volumes = 50;
  std::size_t target_volumes = 20;
  std::size_t slices_per_volume = 8;
  std::size_t pairs_per_family = 20;
  std::size_t slices_per_pair = 8;
  double paired_test_fraction = 0.3;
  std::size_t n_angles = 180;
  KernelSpec source_kernel{0.0, 1.0};
  std::vector<KernelPairFamily> families = default_families();
  /// Overrides the lesion count of paired phantoms, e.g. {0, 0} for lesion-free pairs.
  std::optional<std::pair<int, int>> paired_lesion_count;

  static std::vector<KernelPairFamily> default_families();
  void validate() const;
};

struct Datasets {
  std::vector<LabeledVolume> source;       // smooth kernel, labeled
  std::vector<LabeledVolume> target_test;  // sharp kernels, labeled
  PairedSet paired_train;
  PairedSet paired_test;
  std::vector<KernelPairFamily> families;
};

/// Generates every dataset from `seed`; each volume depends only on (seed, role, index).
Datasets build_datasets(const DatasetConfig& config, std::uint64_t seed);
/// The (train, test) paired sets of build_datasets alone.
std::pair<PairedSet, PairedSet> build_paired(const DatasetConfig& config, std::uint64_t seed);

/// Stratified train/test split of per-family pair indices; returns the test indices.
std::vector<std::size_t> stratified_test_indices(std::span<const std::size_t> families,
                                                 double test_fraction, std::uint64_t seed);

struct FoldSplit {
  std::size_t k = 0;
  std::vector<std::size_t> assignments;  // sample index -> fold
  std::uint64_t seed = 0;

  std::vector<std::size_t> fold(std::size_t f) const;
  std::vector<std::size_t> complement(std::size_t f) const;
};

FoldSplit split_folds(std::size_t dataset_size, std::size_t k, std::uint64_t seed);

/// Deterministic generator for (seed, stream, index) triples.
std::mt19937_64 stream_rng(std::uint64_t seed, std::uint64_t stream, std::uint64_t index = 0);

}  // namespace kshift::datagen
