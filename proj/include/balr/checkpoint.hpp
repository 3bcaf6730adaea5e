#pragma once

// Binary model snapshot: magic "BALRCKPT", u32 version, the model config as
// text, then every named tensor (f64, little-endian) with its trainable flag.

#include <cstdint>
#include <string>
#include <vector>

#include "balr/harness.hpp"

namespace balr {

inline constexpr std::uint32_t kCheckpointVersion = 1;

std::vector<std::uint8_t> serialize_model(const Model& model);
/// Rebuilds the architecture from the stored config and copies every tensor
/// in. Throws FormatError on a bad header, truncation, or a name/shape mismatch.
Model deserialize_model(const std::vector<std::uint8_t>& bytes);

void save_checkpoint(const Model& model, const std::string& path);
Model load_checkpoint(const std::string& path);

/// Copies tensor values from src into dst (same architecture), leaving
/// autograd flags alone. Used to restore the best validation snapshot.
void copy_parameters(const Model& src, Model& dst);

}  // namespace balr
