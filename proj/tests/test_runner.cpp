#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "evcc/autograd.hpp"
#include "evcc/errors.hpp"
#include "evcc/runner.hpp"
#include "test_util.hpp"

using namespace evcc;
namespace fs = std::filesystem;

namespace {

std::string out_dir(const std::string& name) {
  const auto dir = fs::temp_directory_path() / "evcc_test_runner" / name;
  fs::remove_all(dir);
  return dir.string();
}

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

std::vector<MetricsRecord> read_log(const std::string& dir) {
  std::vector<MetricsRecord> out;
  std::ifstream in(fs::path(dir) / "metrics.log");
  for (std::string line; std::getline(in, line);) out.push_back(MetricsRecord::parse(line));
  return out;
}

std::vector<float> values_of(const Checkpoint& c, const std::string& name) {
  const auto* t = c.find(name);
  if (!t) return {};
  return std::get<std::vector<float>>(t->values);
}

}  // namespace

TEST(BatchSchedule, EachEpochIsAPermutation) {
  const Index n = 10, batch = 5;
  for (Index epoch = 0; epoch < 3; ++epoch) {
    std::multiset<Index> seen;
    for (Index s = 0; s < n / batch; ++s)
      for (Index i : batch_indices(9, n, batch, epoch * (n / batch) + s)) seen.insert(i);
    ASSERT_EQ(seen.size(), 10u);
    for (Index i = 0; i < n; ++i) EXPECT_EQ(seen.count(i), 1u);
  }
  EXPECT_EQ(batch_indices(9, n, batch, 3), batch_indices(9, n, batch, 3));
  EXPECT_NE(batch_indices(9, n, batch, 0), batch_indices(10, n, batch, 0));
  // Batches straddling an epoch boundary take the tail of one epoch and the head of the next.
  EXPECT_EQ(batch_indices(9, 7, 4, 1).size(), 4u);
}

TEST(Train, ZeroStepsLogsInitialEvaluationOnly) {
  auto c = test::tiny_config();
  c.train.steps = 0;
  c.out_dir = out_dir("zero_steps");
  const auto r = run_train(c);
  EXPECT_EQ(r.steps_done, 0);
  const auto log = read_log(c.out_dir);
  ASSERT_EQ(log.size(), 2u);
  EXPECT_EQ(log[0].step, 0);
  EXPECT_EQ(log[0].split, "train");
  EXPECT_EQ(log[1].split, "test");
  EXPECT_EQ(log[0].samples, 32);
  EXPECT_EQ(log[1].samples, 16);
  EXPECT_TRUE(fs::exists(fs::path(c.out_dir) / "checkpoint.bin"));
  EXPECT_EQ(parse_config(slurp(fs::path(c.out_dir) / "config.txt")).to_text(), c.to_text());
}

TEST(Train, IdenticalSeedsGiveIdenticalLogs) {
  auto c = test::tiny_config();
  c.train.eval_every = 2;
  c.data.augment = true;
  c.out_dir = out_dir("det_a");
  run_train(c);
  const auto a_log = slurp(fs::path(c.out_dir) / "metrics.log");
  const auto a_ckpt = slurp(fs::path(c.out_dir) / "checkpoint.bin");
  c.out_dir = out_dir("det_b");
  run_train(c);
  EXPECT_EQ(slurp(fs::path(c.out_dir) / "metrics.log"), a_log);
  EXPECT_EQ(slurp(fs::path(c.out_dir) / "checkpoint.bin"), a_ckpt);
  c.seed = 1;
  c.out_dir = out_dir("det_c");
  run_train(c);
  EXPECT_NE(slurp(fs::path(c.out_dir) / "metrics.log"), a_log);
}

class ResumeTest : public ::testing::TestWithParam<OptimizerKind> {};

TEST_P(ResumeTest, InterruptedRunMatchesUninterrupted) {
  auto c = test::tiny_config();
  c.train.optim.kind = GetParam();
  c.train.optim.lr = GetParam() == OptimizerKind::kAdam ? 1e-3 : 0.05;
  c.train.steps = 8;
  c.data.augment = true;
  c.out_dir = out_dir("resume_full");
  const auto full = run_train(c);

  c.out_dir = out_dir("resume_part");
  c.train.stop_after = 3;
  const auto part = run_train(c);
  EXPECT_EQ(part.steps_done, 3);
  c.train.stop_after = 0;
  TrainOptions options;
  const auto ckpt = (fs::path(c.out_dir) / "checkpoint.bin").string();
  const auto saved = slurp(ckpt);
  fs::copy_file(ckpt, fs::path(c.out_dir) / "step3.bin");
  options.resume_from = (fs::path(c.out_dir) / "step3.bin").string();
  const auto resumed = run_train(c, options);
  EXPECT_TRUE(resumed.warnings.empty());
  EXPECT_EQ(resumed.steps_done, 8);
  EXPECT_EQ(encode_checkpoint(resumed.checkpoint), encode_checkpoint(full.checkpoint));
  EXPECT_EQ(resumed.final_train.to_line(), full.final_train.to_line());
  EXPECT_EQ(resumed.final_test.to_line(), full.final_test.to_line());
  // The log of the resumed run continues the partial one.
  const auto log = read_log(c.out_dir);
  ASSERT_EQ(log.size(), 4u);
  EXPECT_EQ(log[0].step, 3);
  EXPECT_EQ(log[3].step, 8);
  EXPECT_NE(saved, slurp(ckpt));
}

INSTANTIATE_TEST_SUITE_P(Optimizers, ResumeTest, ::testing::Values(OptimizerKind::kSgd, OptimizerKind::kAdam));

TEST(Train, FrozenStagesStayBitIdentical) {
  auto c = test::tiny_config();
  c.model.branches.frozen_vit_blocks = 1;
  c.model.branches.frozen_conv_stages = 1;
  c.out_dir = out_dir("frozen");
  EvccModel<float> initial(c.resolved_model(), c.seed);
  const auto r = run_train(c);
  Index frozen = 0, moved = 0;
  bool froze_vit_block = false;
  for (const auto& e : initial.parameters().entries()) {
    const std::vector<float> before(e.tensor.data().begin(), e.tensor.data().end());
    const auto after = values_of(r.checkpoint, e.name);
    if (!e.trainable) {
      ++frozen;
      froze_vit_block |= e.group == "vit.block0";
      EXPECT_TRUE(test::bit_equal(before, after)) << e.name;
    } else if (!test::bit_equal(before, after)) {
      ++moved;
    }
  }
  EXPECT_GT(frozen, 0);
  EXPECT_GT(moved, 0);
  EXPECT_TRUE(froze_vit_block);
}

TEST(Eval, RepeatableAndMatchesFinalTrainRecord) {
  auto c = test::tiny_config();
  c.out_dir = out_dir("eval");
  const auto r = run_train(c);
  const auto ckpt = (fs::path(c.out_dir) / "checkpoint.bin").string();
  const auto a = run_eval(c, ckpt, Split::kTest), b = run_eval(c, ckpt, Split::kTest);
  EXPECT_EQ(a.to_line(), b.to_line());
  EXPECT_EQ(a.loss, r.final_test.loss);
  EXPECT_EQ(a.accuracy, r.final_test.accuracy);
  const auto t = run_eval(c, ckpt, Split::kTrain);
  EXPECT_EQ(t.accuracy, r.final_train.accuracy);
  EXPECT_EQ(t.loss, r.final_train.loss);
  EXPECT_EQ(t.step, 6);
}

TEST(Eval, DigestMismatchWarnsAndShapeMismatchFails) {
  auto c = test::tiny_config();
  c.train.steps = 1;
  c.out_dir = out_dir("digest");
  run_train(c);
  const auto ckpt = (fs::path(c.out_dir) / "checkpoint.bin").string();
  std::vector<std::string> warnings;
  run_eval(c, ckpt, Split::kTest, &warnings);
  EXPECT_TRUE(warnings.empty());
  auto other = c;
  other.model.fusion.heads = 4;  // same parameter shapes, different architecture
  run_eval(other, ckpt, Split::kTest, &warnings);
  ASSERT_EQ(warnings.size(), 1u);
  EXPECT_NE(warnings[0].find("digest"), std::string::npos);
  auto wider = c;
  wider.model.branches.d = 32;
  EXPECT_THROW(run_eval(wider, ckpt, Split::kTest), FormatError);
}

TEST(Train, DivergenceAbortsWithRecord) {
  auto c = test::tiny_config();
  c.train.optim.lr = 1e30;
  c.out_dir = out_dir("diverge");
  try {
    run_train(c);
    FAIL() << "expected TrainingAborted";
  } catch (const TrainingAborted& e) {
    EXPECT_EQ(e.record.split, "abort");
    const auto log = read_log(c.out_dir);
    ASSERT_FALSE(log.empty());
    EXPECT_EQ(log.back().split, "abort");
    EXPECT_EQ(log.back().step, e.record.step);
  }
}

TEST(Train, CifarFilesFeedTheModel) {
  const auto dir = fs::path(out_dir("cifar"));
  fs::create_directories(dir);
  auto write = [&](const std::string& name, int records) {
    std::ofstream out(dir / name, std::ios::binary);
    for (int r = 0; r < records; ++r) {
      out.put(0);
      out.put(static_cast<char>(r % 100));
      for (int p = 0; p < 3072; ++p) out.put(static_cast<char>((p + 13 * r) % 256));
    }
  };
  write("train.bin", 12);
  write("test.bin", 5);
  auto c = test::tiny_config();
  c.set("data.source", "cifar");
  c.set("data.train_path", (dir / "train.bin").string());
  c.set("data.test_path", (dir / "test.bin").string());
  c.set("data.standardize", "true");
  c.set("data.augment", "true");
  c.set("model.image_size", "32");
  c.data.take_n = 10;
  c.train.steps = 2;
  c.out_dir = (dir / "run").string();
  const auto r = run_train(c);
  EXPECT_EQ(r.final_train.samples, 10);
  EXPECT_EQ(r.final_test.samples, 5);
  EXPECT_EQ(r.checkpoint.find("heads.main.weight")->shape[1], 100);

  c.set("data.train_path", (dir / "nope.bin").string());
  EXPECT_THROW(run_train(c), FormatError);
}

TEST(GradCheck, TinyModelPassesAndReportsGroups) {
  auto c = test::tiny_config();
  c.model.branches.frozen_conv_stages = 1;
  const auto run = run_gradcheck(c);
  EXPECT_TRUE(run.passed()) << run.text();
  EXPECT_LT(run.max_rel_error(), 1e-4);
  bool saw_skip = false, saw_fusion = false;
  for (const auto& g : run.groups) {
    if (g.group == "conv.stage0") {
      EXPECT_TRUE(g.skipped);
      saw_skip = true;
    }
    if (g.group.rfind("fusion", 0) == 0) {
      EXPECT_GT(g.checked, 0);
      saw_fusion = true;
    }
  }
  EXPECT_TRUE(saw_skip) << run.text();
  EXPECT_TRUE(saw_fusion) << run.text();
  EXPECT_NE(run.text().find("gradcheck passed"), std::string::npos);
}

TEST(GradCheck, CorruptedBackwardNamesTheAffectedGroups) {
  auto c = test::tiny_config();
  fault_injection::set_backward_fault("depthwise_conv3x3", 1.5);
  const auto run = run_gradcheck(c);
  fault_injection::set_backward_fault("");
  EXPECT_FALSE(run.passed());
  bool downstream_ok = false;
  for (const auto& g : run.groups) {
    if (!g.passed) {
      const bool upstream = g.group.rfind("conv.", 0) == 0 || g.group.rfind("hybrid.", 0) == 0;
      EXPECT_TRUE(upstream) << g.group;
    }
    if (g.group.rfind("fusion", 0) == 0 && g.passed) downstream_ok = true;
  }
  EXPECT_TRUE(downstream_ok) << run.text();
  EXPECT_NE(run.text().find("FAIL"), std::string::npos);
}

TEST(Sweep, PruneRatioCellsAreLoggedAndFlopsShrink) {
  auto c = test::tiny_config();
  c.train.steps = 2;
  c.set("sweep.knob", "prune.r");
  c.set("sweep.values", "1,2,4");
  c.out_dir = out_dir("sweep_r");
  std::ostringstream log;
  const auto result = run_sweep(c, 2, &log);
  ASSERT_EQ(result.cells.size(), 3u);
  for (const auto& cell : result.cells) {
    EXPECT_TRUE(cell.ok) << cell.error;
    EXPECT_EQ(cell.test.samples, 16);
  }
  EXPECT_GT(result.cells[0].cross_attention_macs, result.cells[1].cross_attention_macs);
  EXPECT_GE(result.cells[1].cross_attention_macs, result.cells[2].cross_attention_macs);
  EXPECT_TRUE(fs::exists(fs::path(c.out_dir) / "prune.r=4_rep0" / "metrics.log"));
  std::istringstream lines(result.records());
  Index n = 0;
  for (std::string line; std::getline(lines, line); ++n) EXPECT_EQ(line.rfind("sweep_cell knob=prune.r", 0), 0u);
  EXPECT_EQ(n, 3);
}

TEST(Sweep, RepeatsUseDistinctSeedsAndFailuresAreRecorded) {
  auto c = test::tiny_config();
  c.train.steps = 1;
  c.set("sweep.knob", "fusion.depth");
  c.set("sweep.values", "0,-1");
  c.set("sweep.repeats", "2");
  c.out_dir = out_dir("sweep_fail");
  const auto result = run_sweep(c, 1);
  ASSERT_EQ(result.cells.size(), 4u);
  EXPECT_TRUE(result.cells[0].ok) << result.cells[0].error;
  EXPECT_NE(result.cells[0].seed, result.cells[1].seed);
  EXPECT_FALSE(result.cells[2].ok);
  EXPECT_FALSE(result.cells[2].error.empty());
  EXPECT_NE(result.records().find("status=failed"), std::string::npos);
  EXPECT_NE(result.table().find("failed"), std::string::npos);

  auto lambda = test::tiny_config();
  lambda.train.steps = 1;
  lambda.set("sweep.knob", "loss.lambda");
  lambda.set("sweep.values", "0,0.1,0.5");
  lambda.out_dir = out_dir("sweep_lambda");
  const auto lr = run_sweep(lambda, 3);
  for (const auto& cell : lr.cells) EXPECT_TRUE(cell.ok) << cell.error;
}
