#include "evcc/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>

#include "evcc/errors.hpp"
#include "evcc/metrics.hpp"

namespace evcc {

namespace {

std::string_view trim(std::string_view s) {
  const auto ws = " \t\r\n";
  const auto b = s.find_first_not_of(ws);
  if (b == std::string_view::npos) return {};
  return s.substr(b, s.find_last_not_of(ws) - b + 1);
}

[[noreturn]] void bad_value(std::string_view key, std::string_view value, const char* expected) {
  throw ConfigError("bad value '" + std::string(value) + "' for " + std::string(key) + " (expected " + expected + ")");
}

Index to_index(std::string_view key, std::string_view v) {
  Index out = 0;
  auto res = std::from_chars(v.data(), v.data() + v.size(), out);
  if (res.ec != std::errc() || res.ptr != v.data() + v.size()) bad_value(key, v, "an integer");
  return out;
}

std::uint64_t to_u64(std::string_view key, std::string_view v) {
  std::uint64_t out = 0;
  auto res = std::from_chars(v.data(), v.data() + v.size(), out);
  if (res.ec != std::errc() || res.ptr != v.data() + v.size()) bad_value(key, v, "a non-negative integer");
  return out;
}

double to_double(std::string_view key, std::string_view v) {
  double out = 0;
  auto res = std::from_chars(v.data(), v.data() + v.size(), out);
  if (res.ec != std::errc() || res.ptr != v.data() + v.size()) bad_value(key, v, "a number");
  return out;
}

bool to_bool(std::string_view key, std::string_view v) {
  if (v == "1" || v == "true") return true;
  if (v == "0" || v == "false") return false;
  bad_value(key, v, "0/1/true/false");
}

template <typename T, typename F>
std::vector<T> to_list(std::string_view v, F parse_one) {
  std::vector<T> out;
  while (!v.empty()) {
    const auto comma = v.find(',');
    out.push_back(parse_one(trim(v.substr(0, comma))));
    if (comma == std::string_view::npos) break;
    v.remove_prefix(comma + 1);
  }
  return out;
}

template <typename T>
std::string join(const std::vector<T>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) s += ",";
    if constexpr (std::is_floating_point_v<T>)
      s += format_double(v[i]);
    else
      s += std::to_string(v[i]);
  }
  return s;
}

struct Key {
  const char* name;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, std::string_view)> set;
};

#define EVCC_INDEX(NAME, FIELD)                                                         \
  Key {                                                                                 \
    NAME, [](const RunConfig& c) { return std::to_string(c.FIELD); },                   \
        [](RunConfig& c, std::string_view v) { c.FIELD = to_index(NAME, v); }           \
  }
#define EVCC_DOUBLE(NAME, FIELD)                                                        \
  Key {                                                                                 \
    NAME, [](const RunConfig& c) { return format_double(c.FIELD); },                    \
        [](RunConfig& c, std::string_view v) { c.FIELD = to_double(NAME, v); }          \
  }
#define EVCC_BOOL(NAME, FIELD)                                                          \
  Key {                                                                                 \
    NAME, [](const RunConfig& c) { return std::string(c.FIELD ? "1" : "0"); },          \
        [](RunConfig& c, std::string_view v) { c.FIELD = to_bool(NAME, v); }            \
  }
#define EVCC_STRING(NAME, FIELD)                                                        \
  Key {                                                                                 \
    NAME, [](const RunConfig& c) { return c.FIELD; },                                   \
        [](RunConfig& c, std::string_view v) { c.FIELD = std::string(v); }              \
  }

const std::vector<Key>& key_table() {
  static const std::vector<Key> table = {
      Key{"run.seed", [](const RunConfig& c) { return std::to_string(c.seed); },
          [](RunConfig& c, std::string_view v) { c.seed = to_u64("run.seed", v); }},
      EVCC_STRING("run.out", out_dir),

      EVCC_INDEX("model.image_size", model.branches.image_size),
      EVCC_INDEX("model.patch_size", model.branches.patch_size),
      EVCC_INDEX("model.vit_blocks", model.branches.vit_blocks),
      EVCC_INDEX("model.vit_heads", model.branches.vit_heads),
      Key{"model.conv_depths", [](const RunConfig& c) { return join(c.model.branches.conv_stage_depths); },
          [](RunConfig& c, std::string_view v) {
            c.model.branches.conv_stage_depths =
                to_list<Index>(v, [](std::string_view x) { return to_index("model.conv_depths", x); });
          }},
      Key{"model.conv_dims", [](const RunConfig& c) { return join(c.model.branches.conv_stage_dims); },
          [](RunConfig& c, std::string_view v) {
            c.model.branches.conv_stage_dims =
                to_list<Index>(v, [](std::string_view x) { return to_index("model.conv_dims", x); });
          }},
      EVCC_INDEX("model.hybrid_blocks", model.branches.hybrid_blocks),
      EVCC_INDEX("model.d_v", model.branches.d_v),
      EVCC_INDEX("model.d_x", model.branches.d_x),
      EVCC_INDEX("model.d", model.branches.d),
      EVCC_INDEX("model.mlp_ratio", model.branches.mlp_ratio),
      EVCC_BOOL("model.vit_positional", model.branches.vit_positional),
      Key{"model.padding",
          [](const RunConfig& c) {
            return std::string(c.model.branches.padding == Padding::kCircular ? "circular" : "zero");
          },
          [](RunConfig& c, std::string_view v) {
            if (v == "zero")
              c.model.branches.padding = Padding::kZero;
            else if (v == "circular")
              c.model.branches.padding = Padding::kCircular;
            else
              bad_value("model.padding", v, "zero or circular");
          }},
      EVCC_INDEX("model.frozen_vit_blocks", model.branches.frozen_vit_blocks),
      EVCC_INDEX("model.frozen_conv_stages", model.branches.frozen_conv_stages),
      EVCC_BOOL("model.vit_only", model.vit_only),

      EVCC_BOOL("prune.enabled", model.prune_enabled),
      EVCC_INDEX("prune.r", model.prune.r),
      EVCC_INDEX("prune.n_min", model.prune.n_min),
      EVCC_DOUBLE("prune.gamma_init", model.prune.gamma_init),
      EVCC_INDEX("prune.score_hidden", model.prune.score_hidden),
      EVCC_BOOL("prune.score_scaling", model.prune.score_scaling),

      EVCC_INDEX("fusion.depth", model.fusion.depth),
      EVCC_INDEX("fusion.heads", model.fusion.heads),
      EVCC_INDEX("router.hidden", model.router_hidden),
      EVCC_DOUBLE("loss.lambda", model.lambda),

      Key{"data.source",
          [](const RunConfig& c) { return std::string(c.data.source == DataSource::kCifar ? "cifar" : "synthetic"); },
          [](RunConfig& c, std::string_view v) {
            if (v == "synthetic")
              c.data.source = DataSource::kSynthetic;
            else if (v == "cifar")
              c.data.source = DataSource::kCifar;
            else
              bad_value("data.source", v, "synthetic or cifar");
          }},
      EVCC_INDEX("data.n_classes", data.synthetic.n_classes),
      EVCC_INDEX("data.samples_per_class", data.synthetic.samples_per_class),
      EVCC_INDEX("data.test_samples_per_class", data.test_samples_per_class),
      EVCC_DOUBLE("data.global_cue", data.synthetic.global_cue_strength),
      EVCC_DOUBLE("data.local_cue", data.synthetic.local_cue_strength),
      EVCC_DOUBLE("data.noise_std", data.synthetic.noise_std),
      Key{"data.seed", [](const RunConfig& c) { return std::to_string(c.data.synthetic.seed); },
          [](RunConfig& c, std::string_view v) { c.data.synthetic.seed = to_u64("data.seed", v); }},
      EVCC_STRING("data.train_path", data.train_path),
      EVCC_STRING("data.test_path", data.test_path),
      EVCC_INDEX("data.take_n", data.take_n),
      EVCC_BOOL("data.standardize", data.standardize),
      EVCC_BOOL("data.augment", data.augment),

      Key{"train.optimizer",
          [](const RunConfig& c) {
            return std::string(c.train.optim.kind == OptimizerKind::kAdam ? "adam" : "sgd");
          },
          [](RunConfig& c, std::string_view v) {
            if (v == "sgd")
              c.train.optim.kind = OptimizerKind::kSgd;
            else if (v == "adam")
              c.train.optim.kind = OptimizerKind::kAdam;
            else
              bad_value("train.optimizer", v, "sgd or adam");
          }},
      EVCC_DOUBLE("train.lr", train.optim.lr),
      EVCC_DOUBLE("train.min_lr", train.optim.min_lr),
      EVCC_INDEX("train.warmup_steps", train.optim.warmup_steps),
      EVCC_DOUBLE("train.weight_decay", train.optim.weight_decay),
      EVCC_DOUBLE("train.clip_norm", train.optim.clip_norm),
      EVCC_DOUBLE("train.beta1", train.optim.beta1),
      EVCC_DOUBLE("train.beta2", train.optim.beta2),
      EVCC_INDEX("train.steps", train.steps),
      EVCC_INDEX("train.batch_size", train.batch_size),
      EVCC_INDEX("train.eval_every", train.eval_every),
      EVCC_INDEX("train.eval_train_samples", train.eval_train_samples),
      EVCC_INDEX("train.eval_batch_size", train.eval_batch_size),
      EVCC_INDEX("train.checkpoint_every", train.checkpoint_every),
      EVCC_INDEX("train.stop_after", train.stop_after),

      EVCC_INDEX("gradcheck.batch", gradcheck.batch),
      EVCC_DOUBLE("gradcheck.tolerance", gradcheck.tolerance),
      EVCC_DOUBLE("gradcheck.step", gradcheck.step),
      EVCC_INDEX("gradcheck.max_per_tensor", gradcheck.max_per_tensor),

      Key{"sweep.knob", [](const RunConfig& c) { return knob_name(c.sweep.knob); },
          [](RunConfig& c, std::string_view v) {
            if (v == "none")
              c.sweep.knob = SweepKnob::kNone;
            else if (v == "loss.lambda")
              c.sweep.knob = SweepKnob::kLambda;
            else if (v == "fusion.depth")
              c.sweep.knob = SweepKnob::kFusionDepth;
            else if (v == "prune.r")
              c.sweep.knob = SweepKnob::kPruneR;
            else
              bad_value("sweep.knob", v, "loss.lambda, fusion.depth or prune.r");
          }},
      Key{"sweep.values", [](const RunConfig& c) { return join(c.sweep.values); },
          [](RunConfig& c, std::string_view v) {
            c.sweep.values = to_list<double>(v, [](std::string_view x) { return to_double("sweep.values", x); });
          }},
      EVCC_INDEX("sweep.repeats", sweep.repeats),
  };
  return table;
}

#undef EVCC_INDEX
#undef EVCC_DOUBLE
#undef EVCC_BOOL
#undef EVCC_STRING

const Key& find_key(std::string_view key) {
  for (const auto& k : key_table())
    if (key == k.name) return k;
  throw ConfigError("unknown config key: " + std::string(key));
}

}  // namespace

std::string knob_name(SweepKnob knob) {
  switch (knob) {
    case SweepKnob::kLambda: return "loss.lambda";
    case SweepKnob::kFusionDepth: return "fusion.depth";
    case SweepKnob::kPruneR: return "prune.r";
    case SweepKnob::kNone: break;
  }
  return "none";
}

void RunConfig::set(std::string_view key, std::string_view value) { find_key(key).set(*this, trim(value)); }

std::string RunConfig::get(std::string_view key) const { return find_key(key).get(*this); }

std::vector<std::string> RunConfig::keys() {
  std::vector<std::string> out;
  for (const auto& k : key_table()) out.emplace_back(k.name);
  return out;
}

std::string RunConfig::to_text() const {
  std::string s;
  for (const auto& k : key_table()) s += std::string(k.name) + "=" + k.get(*this) + "\n";
  return s;
}

ModelConfig RunConfig::resolved_model() const {
  ModelConfig m = model;
  if (!m.branches.conv_stage_dims.empty()) m.branches.d_c = m.branches.conv_stage_dims.back();
  m.n_classes = data.n_classes();
  m.finalize();
  return m;
}

void RunConfig::validate() const {
  const auto m = resolved_model();
  train.optim.validate();
  if (train.steps < 0) throw ConfigError("train.steps must be >= 0");
  if (train.batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
  if (train.eval_every < 0 || train.checkpoint_every < 0 || train.stop_after < 0 || train.eval_train_samples < 0)
    throw ConfigError("train.eval_every, checkpoint_every, stop_after and eval_train_samples must be >= 0");
  if (train.eval_batch_size < 1) throw ConfigError("train.eval_batch_size must be >= 1");
  if (gradcheck.batch < 1) throw ConfigError("gradcheck.batch must be >= 1");
  if (!(gradcheck.tolerance > 0) || !(gradcheck.step > 0)) throw ConfigError("gradcheck tolerance and step must be > 0");
  if (gradcheck.max_per_tensor < 0) throw ConfigError("gradcheck.max_per_tensor must be >= 0");
  if (sweep.repeats < 1) throw ConfigError("sweep.repeats must be >= 1");
  if (data.test_samples_per_class < 1) throw ConfigError("data.test_samples_per_class must be >= 1");
  if (data.source == DataSource::kSynthetic) {
    auto synthetic = data.synthetic;
    synthetic.image_size = m.branches.image_size;  // generated at the model resolution
    synthetic.validate();
  } else {
    if (data.train_path.empty()) throw ConfigError("data.train_path is required for data.source=cifar");
    if (m.branches.image_size != 32) throw ConfigError("CIFAR images are 32x32; set model.image_size=32");
  }
}

RunConfig parse_config(std::string_view text) {
  RunConfig c;
  Index line_no = 0;
  while (!text.empty()) {
    ++line_no;
    const auto nl = text.find('\n');
    auto line = text.substr(0, nl);
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos)
      throw ConfigError("config line " + std::to_string(line_no) + ": expected key=value, got '" + std::string(line) +
                        "'");
    try {
      c.set(trim(line.substr(0, eq)), line.substr(eq + 1));
    } catch (const ConfigError& e) {
      throw ConfigError("config line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return c;
}

RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

}  // namespace evcc
