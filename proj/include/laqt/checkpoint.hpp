#pragma once

// Binary checkpoints. Layout, all little-endian:
//   "LAQT", u32 version
//   str mixer kind, str agent kind, u64 config hash, u64 env steps,
//   str architecture (key=value lines)
//   u64 count, then per parameter: u32 name length, name bytes, u32 rank,
//   rank x u64 dims, numel x f64 values
// where str is a u32 length followed by the bytes.

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "laqt/tensor.hpp"
#include "laqt/trainer.hpp"

namespace laqt {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointMeta {
  std::string mixer_kind;
  std::string agent_kind;
  std::uint64_t config_hash = 0;
  std::uint64_t env_steps = 0;
  /// Network shapes plus the population they were built for.
  std::string architecture;
};

struct ParamRecord {
  std::string name;
  Shape shape;
  std::vector<double> values;
};

struct Checkpoint {
  CheckpointMeta meta;
  std::vector<ParamRecord> params;
};

std::string encode_checkpoint(const Checkpoint& ckpt);
/// Throws FormatError on truncation, bad magic, or an unknown version.
Checkpoint decode_checkpoint(const std::string& bytes);
void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

/// Online network parameters plus metadata.
Checkpoint capture_checkpoint(Learner& learner, const TrainConfig& config);

struct Architecture {
  AgentConfig agent;
  MixerConfig mixer;
  std::size_t n_allies = 0;
  std::size_t n_enemies = 0;
};
std::string encode_architecture(const Architecture& arch);
Architecture decode_architecture(const std::string& text);

/// Rebuilds networks from the checkpoint's own architecture and loads the
/// values; optimizer state starts fresh at config.lr. Throws
/// IncompatibleError on name or shape conflicts.
std::unique_ptr<Learner> restore_learner(const Checkpoint& ckpt, const TrainConfig& config);

/// Loads values into existing networks by name (IncompatibleError on mismatch).
void load_params(const Checkpoint& ckpt, Networks& nets);

}  // namespace laqt
