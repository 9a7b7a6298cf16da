#include "evcc/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>

#include "evcc/errors.hpp"

namespace evcc {

template <typename S>
Tensor<S> Batch::images() const {
  std::vector<S> v(pixels.begin(), pixels.end());
  return Tensor<S>(Shape{size(), 3, image_size, image_size}, std::move(v));
}

template Tensor<float> Batch::images() const;
template Tensor<double> Batch::images() const;

Batch make_batch(const Dataset& data, std::span<const Index> indices) {
  Batch b;
  b.image_size = data.image_size;
  b.pixels.reserve(indices.size() * static_cast<std::size_t>(data.image_numel()));
  for (Index i : indices) {
    if (i < 0 || i >= data.size()) throw ArgumentError("make_batch: index out of range");
    auto img = data.image(i);
    b.pixels.insert(b.pixels.end(), img.begin(), img.end());
    b.labels.push_back(data.labels[static_cast<std::size_t>(i)]);
  }
  return b;
}

void SyntheticTaskConfig::validate() const {
  if (n_classes < 2) throw ConfigError("data.n_classes must be >= 2");
  if (image_size < 8) throw ConfigError("data.image_size must be >= 8");
  if (samples_per_class < 1) throw ConfigError("data.samples_per_class must be >= 1");
  if (global_cue_strength < 0 || global_cue_strength > 1 || local_cue_strength < 0 || local_cue_strength > 1)
    throw ConfigError("cue strengths must lie in [0, 1]");
  if (noise_std < 0) throw ConfigError("data.noise_std must be >= 0");
}

Dataset generate_synthetic(const SyntheticTaskConfig& config, Split split) {
  config.validate();
  constexpr double kPi = std::numbers::pi;
  const Index n = config.n_classes * config.samples_per_class, h = config.image_size;
  const double centre = (static_cast<double>(h) - 1.0) / 2.0;
  const double ring = 0.3 * static_cast<double>(h);
  const double sigma = static_cast<double>(h) / 8.0;
  const double jitter = static_cast<double>(h) / 16.0;
  const double period = 4.0;
  const std::uint64_t split_seed = config.seed * 2 + (split == Split::kTest ? 1 : 0);

  Dataset d;
  d.image_size = h;
  d.n_classes = config.n_classes;
  d.pixels.resize(static_cast<std::size_t>(n * 3 * h * h));
  d.labels.resize(static_cast<std::size_t>(n));
  std::vector<double> plane(static_cast<std::size_t>(h * h));
  for (Index i = 0; i < n; ++i) {
    const int label = static_cast<int>(i % config.n_classes);
    d.labels[static_cast<std::size_t>(i)] = label;
    Rng rng(split_seed, static_cast<std::uint64_t>(i) + 1);
    const double angle = 2.0 * kPi * label / static_cast<double>(config.n_classes);
    const double cy = centre + ring * std::sin(angle) + rng.uniform(-jitter, jitter);
    const double cx = centre + ring * std::cos(angle) + rng.uniform(-jitter, jitter);
    const double theta = kPi * label / static_cast<double>(config.n_classes);
    const double ky = std::sin(theta) * 2.0 * kPi / period, kx = std::cos(theta) * 2.0 * kPi / period;
    const double phase = rng.uniform(0.0, 2.0 * kPi);
    for (Index y = 0; y < h; ++y)
      for (Index x = 0; x < h; ++x) {
        const double dy = static_cast<double>(y) - cy, dx = static_cast<double>(x) - cx;
        const double blob = std::exp(-(dy * dy + dx * dx) / (2.0 * sigma * sigma));
        const double grating = std::sin(ky * static_cast<double>(y) + kx * static_cast<double>(x) + phase);
        plane[y * h + x] = 0.5 + 0.5 * config.global_cue_strength * blob + 0.25 * config.local_cue_strength * grating;
      }
    float* out = d.pixels.data() + i * 3 * h * h;
    for (Index c = 0; c < 3; ++c)
      for (Index p = 0; p < h * h; ++p)
        out[c * h * h + p] = static_cast<float>(plane[p] + config.noise_std * rng.normal());
  }
  return d;
}

Dataset load_cifar_binary(const std::string& path, Index take_n) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open CIFAR file: " + path);
  in.seekg(0, std::ios::end);
  const auto bytes = static_cast<Index>(in.tellg());
  in.seekg(0, std::ios::beg);
  if (bytes % kCifarRecordBytes != 0) {
    const Index offset = (bytes / kCifarRecordBytes) * kCifarRecordBytes;
    throw FormatError(path + ": truncated record at byte offset " + std::to_string(offset) + " (file size " +
                      std::to_string(bytes) + " is not a multiple of " + std::to_string(kCifarRecordBytes) + ")");
  }
  Index records = bytes / kCifarRecordBytes;
  if (take_n > 0 && take_n < records) records = take_n;

  Dataset d;
  d.image_size = 32;
  d.n_classes = 100;
  d.pixels.resize(static_cast<std::size_t>(records * 3072));
  d.labels.resize(static_cast<std::size_t>(records));
  std::vector<unsigned char> rec(kCifarRecordBytes);
  for (Index r = 0; r < records; ++r) {
    if (!in.read(reinterpret_cast<char*>(rec.data()), kCifarRecordBytes))
      throw FormatError(path + ": read failed at byte offset " + std::to_string(r * kCifarRecordBytes));
    const int fine = rec[1];
    if (fine >= d.n_classes)
      throw FormatError(path + ": fine label " + std::to_string(fine) + " out of range at byte offset " +
                        std::to_string(r * kCifarRecordBytes + 1));
    d.labels[static_cast<std::size_t>(r)] = fine;
    float* out = d.pixels.data() + r * 3072;
    for (Index p = 0; p < 3072; ++p) out[p] = static_cast<float>(rec[2 + p]) / 255.0f;
  }
  return d;
}

ChannelStats channel_stats(const Dataset& data) {
  ChannelStats stats;
  const Index plane = data.image_size * data.image_size;
  if (data.size() == 0) return stats;
  for (Index c = 0; c < 3; ++c) {
    double mean = 0, sq = 0;
    for (Index i = 0; i < data.size(); ++i) {
      const float* p = data.pixels.data() + (i * 3 + c) * plane;
      for (Index j = 0; j < plane; ++j) {
        mean += p[j];
        sq += static_cast<double>(p[j]) * p[j];
      }
    }
    const double count = static_cast<double>(data.size() * plane);
    mean /= count;
    stats.mean[static_cast<std::size_t>(c)] = mean;
    stats.stddev[static_cast<std::size_t>(c)] = std::sqrt(std::max(sq / count - mean * mean, 1e-12));
  }
  return stats;
}

void standardize_channels(Dataset& data, const ChannelStats& stats) {
  const Index plane = data.image_size * data.image_size;
  for (Index c = 0; c < 3; ++c) {
    const double mean = stats.mean[static_cast<std::size_t>(c)], stddev = stats.stddev[static_cast<std::size_t>(c)];
    for (Index i = 0; i < data.size(); ++i) {
      float* p = data.pixels.data() + (i * 3 + c) * plane;
      for (Index j = 0; j < plane; ++j) p[j] = static_cast<float>((p[j] - mean) / stddev);
    }
  }
}

void standardize_channels(Dataset& data) { standardize_channels(data, channel_stats(data)); }

void flip_horizontal(std::span<float> image, Index size) {
  for (Index row = 0; row < 3 * size; ++row) {
    float* r = image.data() + row * size;
    for (Index x = 0; x < size / 2; ++x) std::swap(r[x], r[size - 1 - x]);
  }
}

void shift_with_zero_fill(std::span<float> image, Index size, Index dy, Index dx) {
  if (dy == 0 && dx == 0) return;
  std::vector<float> src(image.begin(), image.end());
  for (Index c = 0; c < 3; ++c)
    for (Index y = 0; y < size; ++y)
      for (Index x = 0; x < size; ++x) {
        const Index sy = y - dy, sx = x - dx;
        const bool inside = sy >= 0 && sy < size && sx >= 0 && sx < size;
        image[(c * size + y) * size + x] = inside ? src[(c * size + sy) * size + sx] : 0.0f;
      }
}

void augment(Batch& batch, Rng& rng, Index pad) {
  for (Index i = 0; i < batch.size(); ++i) {
    auto img = batch.image(i);
    if (rng.bernoulli(0.5)) flip_horizontal(img, batch.image_size);
    const auto span = static_cast<std::uint64_t>(2 * pad + 1);
    const Index dy = static_cast<Index>(rng.below(span)) - pad;
    const Index dx = static_cast<Index>(rng.below(span)) - pad;
    shift_with_zero_fill(img, batch.image_size, dy, dx);
  }
}

}  // namespace evcc
