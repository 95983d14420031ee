#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>

#include "partforge/encoders.hpp"
#include "partforge/objective.hpp"

namespace partforge {

inline constexpr std::uint32_t kCheckpointVersion = 1;

// Binary layout: "PFCKPT" magic, u32 version, u32 metadata count with
// length-prefixed key/value strings, u32 tensor count with name/rows/cols
// entries, then every tensor as little-endian float32 in column-major order.
// Model dimensions travel in the metadata as dims.*.
struct Checkpoint {
  ModelParams params;
  std::optional<AdamState> adam;
  std::map<std::string, std::string> meta;
};

void save_checkpoint(const std::filesystem::path& path, const ModelParams& params,
                     const AdamState* adam, std::map<std::string, std::string> meta);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// vocab.txt next to the checkpoint file.
std::filesystem::path vocab_path_for(const std::filesystem::path& checkpoint);

}  // namespace partforge
