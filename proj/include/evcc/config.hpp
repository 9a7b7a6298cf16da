#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "evcc/data.hpp"
#include "evcc/model.hpp"
#include "evcc/optim.hpp"

namespace evcc {

enum class DataSource { kSynthetic, kCifar };

struct DataConfig {
  DataSource source = DataSource::kSynthetic;
  SyntheticTaskConfig synthetic;
  Index test_samples_per_class = 100;
  std::string train_path;  // CIFAR binary files
  std::string test_path;
  Index take_n = 0;
  bool standardize = false;
  bool augment = false;

  Index n_classes() const { return source == DataSource::kCifar ? 100 : synthetic.n_classes; }
};

struct TrainConfig {
  OptimConfig optim;
  Index steps = 600;
  Index batch_size = 16;
  /// Evaluate every this many steps (0: only after the last step).
  Index eval_every = 0;
  /// Cap on training samples used by evaluation passes (0: all).
  Index eval_train_samples = 0;
  Index eval_batch_size = 50;
  Index checkpoint_every = 0;
  /// Stop early after this many steps while keeping the schedule of `steps` (0: run to the end).
  Index stop_after = 0;
};

struct GradCheckConfig {
  Index batch = 2;
  double tolerance = 1e-4;
  double step = 1e-5;
  Index max_per_tensor = 6;
};

enum class SweepKnob { kNone, kLambda, kFusionDepth, kPruneR };

struct SweepSpec {
  SweepKnob knob = SweepKnob::kNone;
  std::vector<double> values;
  Index repeats = 1;
};

struct RunConfig {
  ModelConfig model;
  DataConfig data;
  TrainConfig train;
  GradCheckConfig gradcheck;
  SweepSpec sweep;
  std::uint64_t seed = 0;
  std::string out_dir = "runs/default";

  /// Applies `key=value`. Throws ConfigError for unknown keys or bad values.
  void set(std::string_view key, std::string_view value);
  std::string get(std::string_view key) const;
  /// Every key in canonical order, one `key=value` per line.
  std::string to_text() const;
  /// Model config with derived fields filled in and validated.
  ModelConfig resolved_model() const;
  void validate() const;

  static std::vector<std::string> keys();
};

/// Parses flat `key=value` lines over the defaults. `#` starts a comment.
RunConfig parse_config(std::string_view text);
RunConfig load_config(const std::string& path);

std::string knob_name(SweepKnob knob);

}  // namespace evcc
