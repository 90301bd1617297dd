#pragma once

#include "mixunlearn/tensor.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <string>
#include <vector>

namespace mixunlearn {

// Binary container shared by classifiers and mix generators:
//
//   "MXUNCKPT"           8-byte magic
//   u32 version          currently 1
//   u32 n, n bytes       JSON metadata (architecture descriptor, "kind")
//   u32 count            number of tensors
//   per tensor: u32 rank, rank x u64 dims, numel x f64 (little-endian)
//
// Doubles are written verbatim, so save/load round trips are bit-exact.

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  nlohmann::json meta;
  std::vector<Tensor> tensors;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

} // namespace mixunlearn
