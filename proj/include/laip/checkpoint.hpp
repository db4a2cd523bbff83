#pragma once

#include <filesystem>
#include <map>
#include <string>

#include <json.hpp>

#include "laip/model.hpp"

// Checkpoint layout (a directory):
//   manifest.json  {"format": "laip-checkpoint", "version": 1, "dtype": "float64",
//                   "byte_order": "little", "model_config": {...},
//                   "tensors": [{"name", "shape", "offset", "count"}...],
//                   "blob": "tensors.bin"}
//   tensors.bin    every tensor's elements as little-endian IEEE-754 float64,
//                  back to back at the listed byte offsets.
namespace laip::model {

inline constexpr int kCheckpointVersion = 1;

nlohmann::json config_to_json(const ModelConfig& config);
// Unknown keys are rejected; missing keys keep their defaults.
ModelConfig config_from_json(const nlohmann::json& j);

struct Checkpoint {
  ModelConfig config;
  Params params;
  MomentumState momentum;
};

void save_checkpoint(const std::filesystem::path& dir, const ModelConfig& config, Params& params,
                     MomentumState& momentum);
Checkpoint load_checkpoint(const std::filesystem::path& dir);

// Raw named-tensor I/O underneath the checkpoint format.
void write_tensor_bundle(const std::filesystem::path& dir, const std::map<std::string, Tensor>& tensors,
                         nlohmann::json extra);
std::map<std::string, Tensor> read_tensor_bundle(const std::filesystem::path& dir, nlohmann::json* manifest_out);

}  // namespace laip::model
