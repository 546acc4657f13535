#pragma once

// Binary parameter archive:
//   "MOEDTCKP" | u32 version | u64 header length | JSON header | payload
// The payload is every tensor's little-endian float32 values back to back,
// in name order. The header lists name, shape, offset, length, component and
// trainable flag per tensor plus an FNV-1a hash of the payload.

#include <cstdint>
#include <filesystem>
#include <string>

#include "moedt/error.hpp"
#include "moedt/params.hpp"

namespace moedt {

struct CheckpointVersionError : Error {
  using Error::Error;
};
struct CheckpointTruncatedError : Error {
  using Error::Error;
};
struct CheckpointHashError : Error {
  using Error::Error;
};

constexpr uint32_t kCheckpointVersion = 1;

struct CheckpointMeta {
  std::string config_hash;
  std::string stage;  // "init", "1", "2", "3", ...
  int64_t step = 0;
};

struct Checkpoint {
  ParamSet<float> params;
  CheckpointMeta meta;
};

std::string encode_checkpoint(const ParamSet<float>& params, const CheckpointMeta& meta);
Checkpoint decode_checkpoint(const std::string& bytes);

void save_checkpoint(const ParamSet<float>& params, const CheckpointMeta& meta,
                     const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace moedt
