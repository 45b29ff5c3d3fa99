#pragma once

#include <cstdint>
#include <optional>
#include <string>

#include <nlohmann/json.hpp>

#include "fgl/model.hpp"
#include "fgl/training.hpp"

namespace fgl {

inline constexpr char kCheckpointMagic[4] = {'F', 'G', 'L', '1'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  TransformerConfig config;
  nlohmann::json plan;  // TrainPlan as JSON, null when not produced by training
  std::size_t epoch = 0;
  std::uint64_t step = 0;
  std::string vocab_checksum;
  std::string rng_state;
  nlohmann::json metrics;  // metric snapshot, usually the MetricRow of `epoch`
  std::optional<TrainState> train_state;
  ModelParameters<float> params;
  std::optional<OptimizerState<float>> optimizer;
};

/// Layout: magic, u32 version, u64 metadata length + JSON, u64 tensor count,
/// tensor records (u64 name length + name, u32 rank, u64 dims, f32 data),
/// then a u64 FNV-1a hash of everything before it. All little-endian.
std::string serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint parse_checkpoint(const std::string& bytes, const std::string& source = "checkpoint");

/// Writes through a temporary file and renames, so readers never see a
/// partial checkpoint.
void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

/// Throws unless the checkpoint was trained with this vocabulary.
void require_vocab(const Checkpoint& ckpt, const std::string& vocab_checksum);

}  // namespace fgl
