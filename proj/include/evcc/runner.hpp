#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "evcc/checkpoint.hpp"
#include "evcc/config.hpp"
#include "evcc/flops.hpp"
#include "evcc/metrics.hpp"

namespace evcc {

struct DataSplits {
  Dataset train;
  Dataset test;
};

/// Synthetic data is generated at the model resolution; CIFAR files are read
/// and optionally standardized with training statistics. Throws FormatError.
DataSplits load_data(const RunConfig& config);

std::uint64_t config_digest(const ModelConfig& model);

/// Forward-only pass over the first `max_samples` samples (0: all) in order.
template <typename S>
MetricsRecord evaluate(const EvccModel<S>& model, const Dataset& data, Index max_samples, Index batch_size);

/// Sample indices of training step `step`: consecutive slices of per-epoch
/// permutations, so the sequence depends only on (seed, step).
std::vector<Index> batch_indices(std::uint64_t seed, Index dataset_size, Index batch_size, Index step);

/// Training diverged; `record` describes the step at which it happened.
class TrainingAborted : public NumericError {
 public:
  TrainingAborted(const std::string& what, MetricsRecord record) : NumericError(what), record(std::move(record)) {}
  MetricsRecord record;
};

struct TrainOptions {
  /// Continue from this checkpoint (its step counter and optimizer state).
  std::string resume_from;
  /// Progress lines (metrics records and warnings) are echoed here when set.
  std::ostream* log = nullptr;
  /// Write config.txt, metrics.log and checkpoint.bin into config.out_dir.
  bool write_outputs = true;
};

struct TrainResult {
  std::vector<MetricsRecord> records;
  MetricsRecord final_train;
  MetricsRecord final_test;
  Index steps_done = 0;
  Checkpoint checkpoint;
  std::vector<std::string> warnings;
};

TrainResult run_train(const RunConfig& config, const TrainOptions& options = {});

/// Loads a checkpoint into a model built from `config` and evaluates one split.
/// A config digest mismatch adds a warning; parameters are never modified.
MetricsRecord run_eval(const RunConfig& config, const std::string& checkpoint_path, Split split,
                       std::vector<std::string>* warnings = nullptr);

struct GradCheckGroup {
  std::string group;
  Index tensors = 0;
  Index checked = 0;
  double max_rel_error = 0.0;
  std::string worst_tensor;
  bool skipped = false;
  bool passed = true;
};

struct GradCheckRun {
  std::vector<GradCheckGroup> groups;
  GradCheckReport detail;
  bool passed() const;
  double max_rel_error() const;
  std::string text() const;
};

/// Full multitask loss in double precision on the first gradcheck.batch
/// training samples; results are aggregated per parameter group.
GradCheckRun run_gradcheck(const RunConfig& config);

struct SweepCell {
  double value = 0.0;
  Index repeat = 0;
  std::uint64_t seed = 0;
  bool ok = false;
  std::string error;
  MetricsRecord train, test;
  Macs cross_attention_macs = 0;
  Macs total_macs = 0;
};

struct SweepResult {
  SweepKnob knob = SweepKnob::kNone;
  std::vector<SweepCell> cells;
  std::string table() const;
  std::string records() const;
};

/// Each (value, repeat) cell trains in its own subdirectory of out_dir with
/// seed config.seed + repeat, then evaluates the saved checkpoint on the test
/// split. Up to `threads` cells run concurrently; failures are recorded.
SweepResult run_sweep(const RunConfig& config, Index threads, std::ostream* log = nullptr);

/// Applies one sweep knob value to a config.
void apply_knob(RunConfig& config, SweepKnob knob, double value);

}  // namespace evcc
