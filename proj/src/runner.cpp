#include "evcc/runner.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <numeric>
#include <ostream>
#include <sstream>
#include <thread>

#include "evcc/errors.hpp"

namespace evcc {

namespace fs = std::filesystem;

DataSplits load_data(const RunConfig& config) {
  const auto model = config.resolved_model();
  DataSplits d;
  if (config.data.source == DataSource::kSynthetic) {
    auto task = config.data.synthetic;
    task.image_size = model.branches.image_size;
    d.train = generate_synthetic(task, Split::kTrain);
    task.samples_per_class = config.data.test_samples_per_class;
    d.test = generate_synthetic(task, Split::kTest);
  } else {
    d.train = load_cifar_binary(config.data.train_path, config.data.take_n);
    if (!config.data.test_path.empty()) d.test = load_cifar_binary(config.data.test_path, config.data.take_n);
    if (config.data.standardize) {
      const auto stats = channel_stats(d.train);
      standardize_channels(d.train, stats);
      standardize_channels(d.test, stats);
    }
  }
  if (d.train.size() == 0) throw FormatError("training split is empty");
  return d;
}

std::uint64_t config_digest(const ModelConfig& model) { return fnv1a64(model.architecture()); }

template <typename S>
MetricsRecord evaluate(const EvccModel<S>& model, const Dataset& data, Index max_samples, Index batch_size) {
  NoGradGuard no_grad;
  MetricsRecord r;
  const Index n = max_samples > 0 ? std::min(max_samples, data.size()) : data.size();
  r.samples = n;
  double correct = 0;
  for (Index start = 0; start < n; start += batch_size) {
    const Index count = std::min(batch_size, n - start);
    std::vector<Index> idx(static_cast<std::size_t>(count));
    std::iota(idx.begin(), idx.end(), start);
    const Batch batch = make_batch(data, idx);
    const auto out = model.forward(batch.images<S>());
    const auto loss = model.loss(out, batch.labels);
    const double w = static_cast<double>(count);
    r.loss += w * static_cast<double>(loss.total.item());
    r.main += w * static_cast<double>(loss.main_ce.item());
    for (std::size_t i = 0; i < 3; ++i)
      if (loss.aux_ce[i].defined()) r.aux[i] += w * static_cast<double>(loss.aux_ce[i].item());
    correct += w * accuracy(out.main_logits, batch.labels);
    if (out.routing.pi_final.defined()) {
      const auto pf = out.routing.pi_final.data();
      const auto conf = out.routing.conf.data();
      for (Index b = 0; b < count; ++b) {
        r.conf += static_cast<double>(conf[static_cast<std::size_t>(b)]);
        for (Index i = 0; i < 3; ++i) r.pi[static_cast<std::size_t>(i)] += static_cast<double>(pf[static_cast<std::size_t>(b * 3 + i)]);
      }
    }
  }
  if (n > 0) {
    const double inv = 1.0 / static_cast<double>(n);
    r.loss *= inv;
    r.main *= inv;
    for (auto& a : r.aux) a *= inv;
    r.accuracy = correct * inv;
    r.conf *= inv;
    for (auto& p : r.pi) p *= inv;
  }
  std::tie(r.gamma_v, r.gamma_c) = model.gammas();
  return r;
}

template MetricsRecord evaluate(const EvccModel<float>&, const Dataset&, Index, Index);
template MetricsRecord evaluate(const EvccModel<double>&, const Dataset&, Index, Index);

namespace {

constexpr std::uint64_t kShuffleStream = 0x5348'0000'0000ULL;
constexpr std::uint64_t kAugmentStream = 0x4155'0000'0000ULL;

std::vector<Index> epoch_permutation(std::uint64_t seed, Index n, Index epoch) {
  std::vector<Index> perm(static_cast<std::size_t>(n));
  std::iota(perm.begin(), perm.end(), Index{0});
  Rng rng(seed, kShuffleStream + static_cast<std::uint64_t>(epoch));
  rng.shuffle(std::span<Index>(perm));
  return perm;
}

/// Caches the permutation of the epoch currently being consumed.
class BatchSchedule {
 public:
  BatchSchedule(std::uint64_t seed, Index n, Index batch) : seed_(seed), n_(n), batch_(batch) {}

  std::vector<Index> indices(Index step) {
    std::vector<Index> out;
    out.reserve(static_cast<std::size_t>(batch_));
    for (Index q = step * batch_; q < (step + 1) * batch_; ++q) {
      const Index epoch = q / n_;
      if (epoch != epoch_) {
        perm_ = epoch_permutation(seed_, n_, epoch);
        epoch_ = epoch;
      }
      out.push_back(perm_[static_cast<std::size_t>(q % n_)]);
    }
    return out;
  }

 private:
  std::uint64_t seed_;
  Index n_, batch_;
  Index epoch_ = -1;
  std::vector<Index> perm_;
};

class RunLog {
 public:
  RunLog(const RunConfig& config, const TrainOptions& options, bool append) : options_(options) {
    if (!options.write_outputs) return;
    fs::create_directories(config.out_dir);
    std::ofstream(fs::path(config.out_dir) / "config.txt") << config.to_text();
    file_.open(fs::path(config.out_dir) / "metrics.log", append ? std::ios::app : std::ios::trunc);
    if (!file_) throw ConfigError("cannot write metrics log in " + config.out_dir);
  }
  void record(const MetricsRecord& r) {
    const auto line = r.to_line();
    if (file_.is_open()) file_ << line << "\n" << std::flush;
    if (options_.log) *options_.log << line << "\n" << std::flush;
  }
  void warn(const std::string& msg) {
    if (options_.log) *options_.log << "warning: " << msg << "\n" << std::flush;
  }

 private:
  const TrainOptions& options_;
  std::ofstream file_;
};

Checkpoint make_checkpoint(const EvccModel<float>& model, const Optimizer<float>& optim, Index step) {
  Checkpoint ckpt;
  ckpt.step = static_cast<std::uint64_t>(step);
  ckpt.config_digest = config_digest(model.config());
  append_tensors(ckpt, model.parameters().entries());
  append_tensors(ckpt, optim.state(model.parameters()));
  return ckpt;
}

std::string digest_warning(std::uint64_t stored, std::uint64_t expected) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "checkpoint config digest %016llx differs from the configured model %016llx",
                static_cast<unsigned long long>(stored), static_cast<unsigned long long>(expected));
  return buf;
}

}  // namespace

std::vector<Index> batch_indices(std::uint64_t seed, Index dataset_size, Index batch_size, Index step) {
  BatchSchedule schedule(seed, dataset_size, batch_size);
  return schedule.indices(step);
}

TrainResult run_train(const RunConfig& config, const TrainOptions& options) {
  config.validate();
  const auto model_config = config.resolved_model();
  const DataSplits data = load_data(config);
  if (data.train.n_classes != model_config.n_classes)
    throw ConfigError("dataset has " + std::to_string(data.train.n_classes) + " classes, model expects " +
                      std::to_string(model_config.n_classes));

  EvccModel<float> model(model_config, config.seed);
  Optimizer<float> optim(config.train.optim);
  TrainResult result;
  Index start = 0;
  if (!options.resume_from.empty()) {
    const auto ckpt = load_checkpoint(options.resume_from);
    if (ckpt.config_digest != config_digest(model_config))
      result.warnings.push_back(digest_warning(ckpt.config_digest, config_digest(model_config)));
    restore_parameters(ckpt, model.parameters(), "adam.");
    start = static_cast<Index>(ckpt.step);
    optim.load_state(model.parameters(), tensors_with_prefix<float>(ckpt, "adam."), start);
  }

  RunLog log(config, options, start > 0);
  for (const auto& w : result.warnings) log.warn(w);

  const Index total = config.train.steps;
  const Index stop = config.train.stop_after > 0 ? std::min(config.train.stop_after, total) : total;
  const std::string ckpt_path = (fs::path(config.out_dir) / "checkpoint.bin").string();

  auto evaluation = [&](Index step) {
    auto train = evaluate(model, data.train, config.train.eval_train_samples, config.train.eval_batch_size);
    train.step = step;
    train.split = "train";
    train.lr = cosine_lr(std::min(step, std::max<Index>(total - 1, 0)), total, config.train.optim);
    log.record(train);
    result.records.push_back(train);
    result.final_train = train;
    if (data.test.size() > 0) {
      auto test = evaluate(model, data.test, 0, config.train.eval_batch_size);
      test.step = step;
      test.split = "test";
      test.lr = train.lr;
      log.record(test);
      result.records.push_back(test);
      result.final_test = test;
    }
  };

  BatchSchedule schedule(config.seed, data.train.size(), config.train.batch_size);
  for (Index step = start; step < stop; ++step) {
    const auto idx = schedule.indices(step);
    Batch batch = make_batch(data.train, idx);
    if (config.data.augment) {
      Rng aug(config.seed, kAugmentStream + static_cast<std::uint64_t>(step));
      augment(batch, aug);
    }
    const double lr = cosine_lr(step, total, config.train.optim);
    auto abort = [&](const std::string& why, double loss_value) {
      MetricsRecord r;
      r.step = step;
      r.split = "abort";
      r.samples = batch.size();
      r.loss = loss_value;
      r.lr = lr;
      std::tie(r.gamma_v, r.gamma_c) = model.gammas();
      log.record(r);
      throw TrainingAborted("training aborted at step " + std::to_string(step) + ": " + why, r);
    };
    try {
      const auto out = model.forward(batch.images<float>());
      const auto loss = model.loss(out, batch.labels);
      const double value = static_cast<double>(loss.total.item());
      if (!std::isfinite(value)) abort("non-finite loss", value);
      backward(loss.total);
    } catch (const NumericError& e) {
      if (dynamic_cast<const TrainingAborted*>(&e)) throw;
      abort(e.what(), std::nan(""));
    }
    optim.step(model.parameters(), lr);
    model.parameters().zero_grad();

    const Index done = step + 1;
    if (config.train.eval_every > 0 && done % config.train.eval_every == 0 && done < stop) evaluation(done);
    if (options.write_outputs && config.train.checkpoint_every > 0 && done % config.train.checkpoint_every == 0 &&
        done < stop)
      save_checkpoint(make_checkpoint(model, optim, done), ckpt_path);
  }
  const Index final_step = std::max(start, stop);
  evaluation(final_step);
  result.steps_done = final_step;
  result.checkpoint = make_checkpoint(model, optim, final_step);
  if (options.write_outputs) save_checkpoint(result.checkpoint, ckpt_path);
  return result;
}

MetricsRecord run_eval(const RunConfig& config, const std::string& checkpoint_path, Split split,
                       std::vector<std::string>* warnings) {
  config.validate();
  const auto model_config = config.resolved_model();
  const auto ckpt = load_checkpoint(checkpoint_path);
  EvccModel<float> model(model_config, config.seed);
  if (ckpt.config_digest != config_digest(model_config) && warnings)
    warnings->push_back(digest_warning(ckpt.config_digest, config_digest(model_config)));
  restore_parameters(ckpt, model.parameters(), "adam.");
  const DataSplits data = load_data(config);
  const Dataset& d = split == Split::kTrain ? data.train : data.test;
  if (d.size() == 0) throw FormatError("evaluation split is empty");
  auto r = evaluate(model, d, split == Split::kTrain ? config.train.eval_train_samples : 0,
                    config.train.eval_batch_size);
  r.step = static_cast<std::int64_t>(ckpt.step);
  r.split = split == Split::kTrain ? "train" : "test";
  return r;
}

bool GradCheckRun::passed() const {
  return std::all_of(groups.begin(), groups.end(), [](const auto& g) { return g.passed; });
}

double GradCheckRun::max_rel_error() const {
  double m = 0;
  for (const auto& g : groups) m = std::max(m, g.max_rel_error);
  return m;
}

std::string GradCheckRun::text() const {
  std::ostringstream os;
  char line[256];
  std::snprintf(line, sizeof line, "%-22s %7s %8s %12s  %-6s %s\n", "group", "tensors", "checked", "max_rel_err",
                "status", "worst tensor");
  os << line;
  for (const auto& g : groups) {
    const char* status = g.skipped ? "skip" : (g.passed ? "pass" : "FAIL");
    std::snprintf(line, sizeof line, "%-22s %7lld %8lld %12.3e  %-6s %s\n", g.group.c_str(),
                  static_cast<long long>(g.tensors), static_cast<long long>(g.checked), g.max_rel_error, status,
                  g.worst_tensor.c_str());
    os << line;
  }
  std::snprintf(line, sizeof line, "gradcheck %s max_rel_error=%.3e\n", passed() ? "passed" : "FAILED",
                max_rel_error());
  os << line;
  return os.str();
}

GradCheckRun run_gradcheck(const RunConfig& config) {
  config.validate();
  const auto model_config = config.resolved_model();
  RunConfig small = config;
  if (small.data.source == DataSource::kSynthetic) {
    const Index classes = small.data.synthetic.n_classes;
    small.data.synthetic.samples_per_class = (config.gradcheck.batch + classes - 1) / classes;
  }
  const DataSplits data = load_data(small);
  if (data.train.size() < config.gradcheck.batch) throw FormatError("not enough samples for the gradcheck batch");
  std::vector<Index> idx(static_cast<std::size_t>(config.gradcheck.batch));
  std::iota(idx.begin(), idx.end(), Index{0});
  const Batch batch = make_batch(data.train, idx);
  const auto images = batch.images<double>();

  EvccModel<double> model(model_config, config.seed);
  auto loss_fn = [&] { return model.loss(model.forward(images), batch.labels).total; };
  GradCheckOptions options;
  options.step = config.gradcheck.step;
  options.tolerance = config.gradcheck.tolerance;
  options.max_per_tensor = config.gradcheck.max_per_tensor;
  options.seed = config.seed;

  GradCheckRun run;
  run.detail = grad_check(loss_fn, std::span<NamedTensor<double>>(model.parameters().entries()), options);
  std::map<std::string, std::size_t> position;
  for (const auto& e : run.detail.entries) {
    auto [it, inserted] = position.try_emplace(e.group, run.groups.size());
    if (inserted) {
      run.groups.push_back({});
      run.groups.back().group = e.group;
      run.groups.back().skipped = true;
    }
    auto& g = run.groups[it->second];
    ++g.tensors;
    if (e.skipped) continue;
    g.skipped = false;
    g.checked += e.checked;
    g.passed = g.passed && e.passed;
    if (e.max_rel_error >= g.max_rel_error) {
      g.max_rel_error = e.max_rel_error;
      g.worst_tensor = e.name;
    }
  }
  return run;
}

void apply_knob(RunConfig& config, SweepKnob knob, double value) {
  switch (knob) {
    case SweepKnob::kLambda: config.model.lambda = value; break;
    case SweepKnob::kFusionDepth: config.model.fusion.depth = static_cast<Index>(std::llround(value)); break;
    case SweepKnob::kPruneR: config.model.prune.r = static_cast<Index>(std::llround(value)); break;
    case SweepKnob::kNone: throw ConfigError("sweep.knob is not set");
  }
}

SweepResult run_sweep(const RunConfig& config, Index threads, std::ostream* log) {
  if (config.sweep.knob == SweepKnob::kNone) throw ConfigError("sweep.knob is not set");
  if (config.sweep.values.empty()) throw ConfigError("sweep.values is empty");
  SweepResult result;
  result.knob = config.sweep.knob;
  for (double v : config.sweep.values)
    for (Index rep = 0; rep < config.sweep.repeats; ++rep) {
      SweepCell c;
      c.value = v;
      c.repeat = rep;
      c.seed = config.seed + static_cast<std::uint64_t>(rep);
      result.cells.push_back(c);
    }

  std::mutex log_mutex;
  auto run_cell = [&](SweepCell& cell) {
    try {
      RunConfig c = config;
      apply_knob(c, config.sweep.knob, cell.value);
      c.seed = cell.seed;
      c.out_dir = (fs::path(config.out_dir) /
                   (knob_name(config.sweep.knob) + "=" + format_double(cell.value) + "_rep" + std::to_string(cell.repeat)))
                      .string();
      const auto report = model_flop_report(c.resolved_model());
      cell.cross_attention_macs = report.fusion_total;
      cell.total_macs = report.total;
      TrainOptions options;
      const auto trained = run_train(c, options);
      cell.train = trained.final_train;
      cell.test = run_eval(c, (fs::path(c.out_dir) / "checkpoint.bin").string(), Split::kTest);
      cell.ok = true;
    } catch (const std::exception& e) {
      cell.ok = false;
      cell.error = e.what();
    }
    if (log) {
      std::lock_guard lock(log_mutex);
      *log << "cell " << knob_name(config.sweep.knob) << "=" << format_double(cell.value) << " rep=" << cell.repeat
           << (cell.ok ? " done" : " failed: " + cell.error) << "\n"
           << std::flush;
    }
  };

  const Index workers = std::max<Index>(1, std::min<Index>(threads, static_cast<Index>(result.cells.size())));
  if (workers == 1) {
    for (auto& cell : result.cells) run_cell(cell);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (Index w = 0; w < workers; ++w)
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < result.cells.size(); i = next++) run_cell(result.cells[i]);
      });
    for (auto& t : pool) t.join();
  }
  return result;
}

std::string SweepResult::table() const {
  std::ostringstream os;
  char line[256];
  std::snprintf(line, sizeof line, "%-14s %4s %6s %-6s %9s %9s %14s %14s\n", knob_name(knob).c_str(), "rep", "seed",
                "status", "train_acc", "test_acc", "xattn_MACs", "total_MACs");
  os << line;
  for (const auto& c : cells) {
    std::snprintf(line, sizeof line, "%-14s %4lld %6llu %-6s %9.4f %9.4f %14lld %14lld\n",
                  format_double(c.value).c_str(), static_cast<long long>(c.repeat),
                  static_cast<unsigned long long>(c.seed), c.ok ? "ok" : "failed", c.train.accuracy, c.test.accuracy,
                  static_cast<long long>(c.cross_attention_macs), static_cast<long long>(c.total_macs));
    os << line;
  }
  return os.str();
}

std::string SweepResult::records() const {
  std::ostringstream os;
  for (const auto& c : cells) {
    os << "sweep_cell knob=" << knob_name(knob) << " value=" << format_double(c.value) << " repeat=" << c.repeat
       << " seed=" << c.seed << " status=" << (c.ok ? "ok" : "failed") << " train_acc=" << format_double(c.train.accuracy)
       << " test_acc=" << format_double(c.test.accuracy) << " test_loss=" << format_double(c.test.loss)
       << " xattn_macs=" << c.cross_attention_macs << " total_macs=" << c.total_macs;
    if (!c.ok) os << " error=\"" << c.error << "\"";
    os << "\n";
  }
  return os.str();
}

}  // namespace evcc
