#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "diffstereo/bridge.hpp"
#include "diffstereo/dataio.hpp"
#include "diffstereo/model.hpp"
#include "diffstereo/objectives.hpp"

namespace diffstereo {

enum class TrainingMode { unrolled, bridge };

struct TrainConfig {
  TrainingMode mode = TrainingMode::unrolled;
  int iters = 22;
  int steps = 2000;
  int batch = 2;
  double lr = 2e-4;
  double weight_decay = 1e-5;
  double pct_start = 0.05;
  double clip = 1.0;
  int crop_height = 64;
  int crop_width = 128;
  uint64_t seed = 1;
  bool detach_iterate = true;
  int log_every = 50;
  int checkpoint_every = 0;  // 0: only at the end
  double bridge_weight = 1.0;
};

struct EvalConfig {
  std::vector<int> iters{1, 2, 3, 4, 8, 32};
  int infer_iters = 32;
  int save_outputs = 2;  // per-sample PFM/PNG files written by eval
};

struct DataConfig {
  dataio::SynthConfig synth;
  int train_samples = 2000;
  int eval_samples = 32;
  uint64_t eval_seed = 7777;
  std::string manifest;       // replaces the synthetic training set when set
  std::string eval_manifest;  // replaces the synthetic held-out set when set
};

struct RunConfig {
  ModelConfig model;
  bridge::ScheduleParams schedule;
  bridge::ReverseRule rule = bridge::ReverseRule::cumulative;
  bool plain_linear = false;
  TrainConfig train;
  objectives::LossWeights loss;
  EvalConfig eval;
  DataConfig data;
  std::string output_dir = "runs/default";

  /// Throws ConfigError on inconsistent values.
  void validate() const;
};

/// Environment variable that overrides output.dir.
inline constexpr const char* kOutputDirEnv = "DIFFSTEREO_OUTPUT_DIR";

/// Small CPU preset used by the tests and the desk-scale acceptance runs.
RunConfig desk_config();

/// Parses an INI-style file ("[section]" headers, "key = value" lines) on
/// top of `base`. Unknown sections or keys are errors.
RunConfig load_config(const std::filesystem::path& path, RunConfig base = {});
RunConfig parse_config(const std::string& text, RunConfig base = {});

/// Sets one field addressed as "section.key".
void set_value(RunConfig& config, const std::string& dotted_key, const std::string& value);
std::string get_value(const RunConfig& config, const std::string& dotted_key);

/// Every addressable "section.key", in canonical order.
std::vector<std::string> config_keys();

/// Canonical INI rendering; load_config(to_ini(c)) reproduces c.
std::string to_ini(const RunConfig& config);

/// Hex digest identifying everything that influences results (all fields
/// except output.dir).
std::string config_hash(const RunConfig& config);

/// Applies the output-directory environment override, if set.
void apply_environment(RunConfig& config);

std::string to_string(TrainingMode mode);

}  // namespace diffstereo
