// evcc: train, eval, gradcheck, flops and sweep a toy EVCC model.
//
// Exit status: 0 success, 1 unexpected error, 2 config error, 3 data or file
// format error, 4 training aborted on a non-finite loss, 5 gradcheck failure.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>

#include "evcc/autograd.hpp"
#include "evcc/errors.hpp"
#include "evcc/flops.hpp"
#include "evcc/runner.hpp"
#include "evcc/runtime.hpp"

namespace {

enum Exit { kOk = 0, kGeneric = 1, kConfig = 2, kData = 3, kNan = 4, kGradcheck = 5 };

struct Common {
  std::string config_path;
  std::uint64_t seed = 0;
  bool seed_set = false;
  std::string out;
  evcc::Index take_n = -1;
  std::vector<std::string> overrides;

  void attach(CLI::App* app) {
    app->add_option("--config", config_path, "Config file of key=value lines");
    app->add_option("--seed", seed, "Run seed (overrides run.seed)")->each([this](const std::string&) { seed_set = true; });
    app->add_option("--out", out, "Output directory (overrides run.out)");
    app->add_option("--take-n", take_n, "Cap on CIFAR records loaded per split");
    app->add_option("--set", overrides, "Extra key=value override, repeatable");
  }

  evcc::RunConfig resolve() const {
    evcc::RunConfig c = config_path.empty() ? evcc::RunConfig{} : evcc::load_config(config_path);
    for (const auto& kv : overrides) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw evcc::ConfigError("--set expects key=value, got '" + kv + "'");
      c.set(kv.substr(0, eq), kv.substr(eq + 1));
    }
    if (seed_set) c.seed = seed;
    if (!out.empty()) c.out_dir = out;
    if (take_n >= 0) c.data.take_n = take_n;
    c.validate();
    return c;
  }
};

int cmd_train(const Common& common, const std::string& resume) {
  const auto config = common.resolve();
  evcc::TrainOptions options;
  options.resume_from = resume;
  options.log = &std::cout;
  const auto result = evcc::run_train(config, options);
  for (const auto& w : result.warnings) std::cerr << "warning: " << w << "\n";
  std::cout << "checkpoint=" << (std::filesystem::path(config.out_dir) / "checkpoint.bin").string()
            << " steps=" << result.steps_done << "\n";
  return kOk;
}

int cmd_eval(const Common& common, const std::string& checkpoint, const std::string& split) {
  const auto config = common.resolve();
  if (split != "train" && split != "test") throw evcc::ConfigError("--split must be train or test");
  std::vector<std::string> warnings;
  const auto record =
      evcc::run_eval(config, checkpoint, split == "train" ? evcc::Split::kTrain : evcc::Split::kTest, &warnings);
  for (const auto& w : warnings) std::cerr << "warning: " << w << "\n";
  std::cout << record.to_line() << "\n";
  return kOk;
}

int cmd_gradcheck(const Common& common, const std::string& corrupt) {
  const auto config = common.resolve();
  if (!corrupt.empty()) evcc::fault_injection::set_backward_fault(corrupt);
  const auto run = evcc::run_gradcheck(config);
  std::cout << run.text();
  return run.passed() ? kOk : kGradcheck;
}

int cmd_flops(const Common& common, bool records_only) {
  const auto config = common.resolve();
  const auto report = evcc::model_flop_report(config.resolved_model());
  if (!records_only) std::cout << report.table() << "\n";
  std::cout << report.records();
  return kOk;
}

int cmd_sweep(const Common& common) {
  const auto config = common.resolve();
  const auto result = evcc::run_sweep(config, evcc::thread_cap(), &std::cerr);
  std::cout << result.table() << "\n" << result.records();
  std::filesystem::create_directories(config.out_dir);
  std::ofstream(std::filesystem::path(config.out_dir) / "sweep.log") << result.records();
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  evcc::tune_allocator();
  CLI::App app{"Toy EVCC multi-branch fusion: training, evaluation, gradient and FLOP checks"};
  app.require_subcommand(1);

  Common train_opts, eval_opts, grad_opts, flops_opts, sweep_opts;
  std::string resume, checkpoint, split = "test", corrupt;
  bool records_only = false, force_double = false;

  auto* train = app.add_subcommand("train", "Train and write metrics.log, config.txt and checkpoint.bin");
  train_opts.attach(train);
  train->add_option("--resume", resume, "Continue from a checkpoint");

  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on one split");
  eval_opts.attach(eval);
  eval->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
  eval->add_option("--split", split, "train or test");

  auto* grad = app.add_subcommand("gradcheck", "Finite-difference check of the full loss, per parameter group");
  grad_opts.attach(grad);
  grad->add_flag("--double", force_double, "Double precision (always used; accepted for explicitness)");
  grad->add_option("--corrupt-backward", corrupt, "Scale the backward rule of one op (negative control)");

  auto* flops = app.add_subcommand("flops", "Analytical MAC/FLOP report");
  flops_opts.attach(flops);
  flops->add_flag("--records", records_only, "Only the key=value records");

  auto* sweep = app.add_subcommand("sweep", "Train one cell per sweep.values entry and repeat");
  sweep_opts.attach(sweep);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kOk : kConfig;
  }

  try {
    if (*train) return cmd_train(train_opts, resume);
    if (*eval) return cmd_eval(eval_opts, checkpoint, split);
    if (*grad) return cmd_gradcheck(grad_opts, corrupt);
    if (*flops) return cmd_flops(flops_opts, records_only);
    if (*sweep) return cmd_sweep(sweep_opts);
  } catch (const evcc::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const evcc::FormatError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kData;
  } catch (const evcc::TrainingAborted& e) {
    std::cerr << "aborted: " << e.what() << "\n" << e.record.to_line() << "\n";
    return kNan;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kGeneric;
  }
  return kGeneric;
}
