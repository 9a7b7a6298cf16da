#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "evcc/layers.hpp"

namespace evcc {

/// On-disk layout, every integer little-endian:
///   "EVCC" | u32 version | u64 step | u64 config digest | u32 tensor count
///   per tensor: u32 name length | name bytes | u8 dtype (1 = f32, 2 = f64)
///               | u8 rank | rank x u64 dims | payload (numel scalars)
///   u64 FNV-1a of every preceding byte
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointTensor {
  std::string name;
  Shape shape;
  std::variant<std::vector<float>, std::vector<double>> values;
};

struct Checkpoint {
  std::uint64_t step = 0;
  std::uint64_t config_digest = 0;
  std::vector<CheckpointTensor> tensors;

  const CheckpointTensor* find(std::string_view name) const;
};

std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t seed = 0xcbf29ce484222325ULL);

std::string encode_checkpoint(const Checkpoint& ckpt);
/// Throws FormatError on bad magic, version, truncation or checksum mismatch.
Checkpoint decode_checkpoint(std::string_view bytes);

void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

template <typename S>
void append_tensors(Checkpoint& ckpt, const std::vector<NamedTensor<S>>& tensors);

/// Copies checkpoint payloads into the store. Every store entry must be
/// present with the same shape; checkpoint names not in the store and not
/// accepted by `extra_prefix` are listed in the thrown FormatError.
template <typename S>
void restore_parameters(const Checkpoint& ckpt, ParameterStore<S>& store, std::string_view extra_prefix = {});

/// Tensors whose name starts with `prefix`, converted to S.
template <typename S>
std::vector<NamedTensor<S>> tensors_with_prefix(const Checkpoint& ckpt, std::string_view prefix);

}  // namespace evcc
