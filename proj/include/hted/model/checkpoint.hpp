#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "hted/model/transformer.hpp"

namespace hted::model {

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Binary checkpoint bytes: "HTED", u32 version, u32-length config JSON, then
/// tensors (u32 name length, name, u32 rank, u64 dims, f32 data), all little-endian.
std::string serialize_checkpoint(const TransformerModel& model);
TransformerModel deserialize_checkpoint(std::string_view bytes);

void save_checkpoint(const TransformerModel& model, const std::filesystem::path& path);
/// FormatError on bad magic or truncation, UnsupportedVersionError on version mismatch.
TransformerModel load_checkpoint(const std::filesystem::path& path);

}  // namespace hted::model
