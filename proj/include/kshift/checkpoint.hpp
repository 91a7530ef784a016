#pragma once

#include <filesystem>

#include <json.hpp>

#include "kshift/train.hpp"

namespace kshift::adapt {

nlohmann::json to_json(const TrainConfig& c);
/// Missing keys keep the defaults; `lr_milestones` defaults to the scaled schedule of `iterations`.
TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig base = {});

/// Writes params.bin (float32 tensors back to back, little-endian) and manifest.json
/// (architecture, training config, iteration, RNG state, tensor table).
void save_checkpoint(const Model& model, const std::filesystem::path& dir);
Model load_checkpoint(const std::filesystem::path& dir);

}  // namespace kshift::adapt
