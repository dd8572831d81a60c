#pragma once

#include <filesystem>
#include <stdexcept>

#include <json.hpp>

#include "mcl/model.hpp"

namespace mcl::nn {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Binary layout (all integers and floats little-endian):
///   8 bytes  magic "MCLCKPT\0"
///   u32      format version (1)
///   u32      model kind (0 = lm, 1 = translator)
///   i32 x 6  n_layers d_model n_heads d_hidden max_len vocab_size
///   f64      dropout
///   u32      slot count, then per slot: u32 name length, name bytes,
///            u64 rows, u64 cols, u64 offset
///   u64      parameter count, then that many f64 values
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  ModelKind kind = ModelKind::Translator;
  ModelConfig config;
  ParamVector params;
};

void save_checkpoint(const std::filesystem::path& path, ModelKind kind, const ModelConfig& config,
                     const ParamVector& params);

Checkpoint load_checkpoint(const std::filesystem::path& path);

/// `<path>.json` next to a checkpoint: seed, step, loss history and any extra fields.
void save_sidecar(const std::filesystem::path& checkpoint_path, const nlohmann::json& metadata);
nlohmann::json load_sidecar(const std::filesystem::path& checkpoint_path);

}  // namespace mcl::nn
