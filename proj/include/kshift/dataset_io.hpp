#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "kshift/datagen.hpp"

namespace kshift::io {

namespace fs = std::filesystem;
using nlohmann::json;

/// Raw little-endian float32 arrays.
void write_f32(const fs::path& path, std::span<const float> values);
std::vector<float> read_f32(const fs::path& path, std::size_t expected_count);

json to_json(const recon::KernelSpec& k);
recon::KernelSpec kernel_from_json(const json& j);
json to_json(const datagen::DatasetConfig& c);
/// Missing keys keep their defaults.
datagen::DatasetConfig dataset_config_from_json(const json& j);

/// Writes one directory per dataset (source, target_test, paired_train, paired_test), each
/// with a manifest.json and raw float32 sample files, plus a top-level datasets.json.
void save_datasets(const datagen::Datasets& ds, const datagen::DatasetConfig& config,
                   std::uint64_t seed, const fs::path& dir);
datagen::Datasets load_datasets(const fs::path& dir);

/// Contents of datasets.json.
struct DatasetMeta {
  datagen::DatasetConfig config;
  std::uint64_t seed = 0;
  std::string hash;
};
DatasetMeta load_dataset_meta(const fs::path& dir);

/// FNV-1a digest of all image and mask content, hex encoded.
std::string dataset_hash(const datagen::Datasets& ds);
/// FNV-1a digest of raw bytes, hex encoded.
std::string content_hash(std::string_view bytes);
std::string file_hash(const fs::path& path);

std::string read_text(const fs::path& path);
void write_text(const fs::path& path, const std::string& text);

}  // namespace kshift::io
