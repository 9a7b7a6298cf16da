#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "evcc/rng.hpp"
#include "evcc/tensor.hpp"

namespace evcc {

/// Images stored channel-major [N, 3, H, W] in float, labels in [0, n_classes).
struct Dataset {
  Index image_size = 0;
  Index n_classes = 0;
  std::vector<float> pixels;
  std::vector<int> labels;

  Index size() const { return static_cast<Index>(labels.size()); }
  Index image_numel() const { return 3 * image_size * image_size; }
  std::span<const float> image(Index i) const {
    return {pixels.data() + i * image_numel(), static_cast<std::size_t>(image_numel())};
  }
};

struct Batch {
  Index image_size = 0;
  std::vector<float> pixels;
  std::vector<int> labels;

  Index size() const { return static_cast<Index>(labels.size()); }
  std::span<float> image(Index i) {
    const Index n = 3 * image_size * image_size;
    return {pixels.data() + i * n, static_cast<std::size_t>(n)};
  }
  template <typename S>
  Tensor<S> images() const;
};

Batch make_batch(const Dataset& data, std::span<const Index> indices);

/// Class k carries (a) a Gaussian blob at a class-specific position on a ring
/// around the image centre and (b) an oriented sinusoidal grating with
/// class-specific angle and random phase. Each cue scales with its strength;
/// Gaussian pixel noise is added on top of a 0.5 background.
struct SyntheticTaskConfig {
  Index n_classes = 4;
  Index image_size = 32;
  Index samples_per_class = 500;
  double global_cue_strength = 1.0;
  double local_cue_strength = 1.0;
  double noise_std = 0.1;
  std::uint64_t seed = 0;

  void validate() const;
};

enum class Split { kTrain, kTest };

/// Deterministic in (config, split); samples are interleaved by class.
Dataset generate_synthetic(const SyntheticTaskConfig& config, Split split = Split::kTrain);

/// CIFAR-100 binary layout: per record one coarse label byte, one fine label
/// byte, then 3072 pixel bytes (R, G, B planes of 32x32). Only the fine label
/// is kept. Pixels are scaled to [0, 1]. take_n <= 0 loads everything.
Dataset load_cifar_binary(const std::string& path, Index take_n = 0);
inline constexpr Index kCifarRecordBytes = 3074;

struct ChannelStats {
  std::array<double, 3> mean{};
  std::array<double, 3> stddev{1.0, 1.0, 1.0};
};
ChannelStats channel_stats(const Dataset& data);
/// Subtracts the mean and divides by the standard deviation per channel.
void standardize_channels(Dataset& data, const ChannelStats& stats);
/// Per-channel standardization with statistics computed over `data`.
void standardize_channels(Dataset& data);

/// Mirror one [3, H, W] image left to right.
void flip_horizontal(std::span<float> image, Index size);
/// Translate by (dy, dx) with zero fill, equivalent to a crop of the zero-padded image.
void shift_with_zero_fill(std::span<float> image, Index size, Index dy, Index dx);
/// Random horizontal flip (p = 0.5) then a random crop from 4-pixel zero padding, per sample.
void augment(Batch& batch, Rng& rng, Index pad = 4);

}  // namespace evcc
