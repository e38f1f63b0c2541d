#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "tdu/adamw.hpp"
#include "tdu/model.hpp"

namespace tdu {

// Optimizer and data-order state needed to resume training mid-run. The
// AdamW moments are stored in parameter-traversal order.
struct TrainerState {
  long long step = 0;
  std::uint64_t seed = 0;
  std::vector<AdamWState<float>> states;
};

struct LoadedCheckpoint {
  ModelConfig config;
  ModelParams<float> params;
  std::optional<TrainerState> trainer;
};

// File layout: a 4-byte little-endian manifest length, a JSON manifest
// (format version, config, ordered parameter names and shapes, trainer
// metadata), then every tensor as raw little-endian 32-bit floats in manifest
// order. Saving what load_checkpoint returned reproduces the file byte for
// byte.
void save_checkpoint(const std::string& path, const ModelConfig& config,
                     const ModelParams<float>& params,
                     const TrainerState* trainer = nullptr);

LoadedCheckpoint load_checkpoint(const std::string& path);

}  // namespace tdu
