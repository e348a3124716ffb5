#pragma once

#include <filesystem>
#include <iosfwd>
#include <memory>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "diffstereo/config.hpp"
#include "diffstereo/dataio.hpp"
#include "diffstereo/model.hpp"
#include "diffstereo/objectives.hpp"

namespace diffstereo::pipeline {

/// One-cycle schedule: cosine warm-up from max/25 to max over the first
/// pct_start of the steps, then cosine decay to max/2.5e5.
double one_cycle_lr(int step, int total_steps, double max_lr, double pct_start);

/// Clamps every gradient entry to [-clip, clip]. Returns the largest
/// absolute entry seen before clamping.
double clip_gradients(torch::nn::Module& module, double clip);

struct StepStats {
  int step = 0;  // 1-based index of the completed step
  double loss = 0.0;
  double init = 0.0;
  double pixel = 0.0;
  double diff = 0.0;
  double bridge = 0.0;
  double lr = 0.0;
  double grad_max = 0.0;  // before clipping
};

/// Loss terms for one batch. `bridge_t` < 0 disables the bridge term.
struct BatchLoss {
  torch::Tensor total;
  objectives::LossComponents parts;
  torch::Tensor bridge;
};

BatchLoss batch_loss(StereoModel& model, const dataio::Batch& batch, const RunConfig& config,
                     double bridge_t);

/// Training set selected by the config (manifest or synthetic).
std::unique_ptr<dataio::Dataset> make_train_dataset(const RunConfig& config);
/// Held-out set selected by the config (manifest or synthetic with eval_seed).
std::unique_ptr<dataio::Dataset> make_eval_dataset(const RunConfig& config);
std::string dataset_name(const RunConfig& config, bool eval);

class Trainer {
 public:
  explicit Trainer(RunConfig config);

  /// Runs one optimisation step. Throws NumericalError on a non-finite loss
  /// after writing the offending batch to <output>/nan_dump.pt.
  StepStats step();

  /// Steps until config.train.steps, logging every log_every steps and
  /// writing checkpoints. Returns the stats of every executed step.
  std::vector<StepStats> run(std::ostream* log = nullptr);

  dataio::Batch batch_for_step(int step) const;

  void save(const std::filesystem::path& path) const;
  /// Restores parameters, optimiser state and step counter. The stored
  /// config hash must match this trainer's.
  void load(const std::filesystem::path& path);

  int current_step() const { return step_; }
  const RunConfig& config() const { return config_; }
  StereoModel& model() { return model_; }
  torch::optim::AdamW& optimizer() { return *optimizer_; }
  std::filesystem::path checkpoint_path() const;

 private:
  RunConfig config_;
  StereoModel model_{nullptr};
  std::unique_ptr<torch::optim::AdamW> optimizer_;
  std::unique_ptr<dataio::Dataset> data_;
  int step_ = 0;
};

struct LoadedModel {
  RunConfig config;
  StereoModel model{nullptr};
  int step = 0;
  std::string id;  // "<config hash>@<step>"
};

LoadedModel load_model(const std::filesystem::path& checkpoint);

struct EvalRecord {
  int iters = 0;
  objectives::MetricReport report;
};

struct EvalResult {
  std::string checkpoint;
  std::string dataset;
  std::vector<EvalRecord> records;
};

struct EvalOptions {
  std::vector<int> iters{1, 2, 3, 4, 8, 32};  // 0 scores the initial estimate d_0
  bridge::ReverseRule rule = bridge::ReverseRule::cumulative;
  double max_gt = 0.0;  // pixels with gt >= max_gt are ignored; 0 disables
  int save_outputs = 0;
  std::filesystem::path output_dir;  // predictions written here when set
};

EvalResult evaluate(StereoModel& model, const dataio::Dataset& dataset,
                    const EvalOptions& options, std::string checkpoint_id = {},
                    std::string dataset_name = {});

EvalOptions eval_options(const RunConfig& config);

/// "checkpoint=... dataset=... iters=8 epe=... bad1=... bad3=... d1_all=..."
std::string format_record(const EvalResult& result, const EvalRecord& record);
std::string to_json(const EvalResult& result);
/// Writes metrics.txt (one record per line) and metrics.json.
void write_eval(const EvalResult& result, const std::filesystem::path& directory);

/// Full-resolution disparity [H, W] for one pair of [3, H, W] images. Inputs
/// are edge-padded to a multiple of 16 and the output cropped back.
torch::Tensor infer(StereoModel& model, const torch::Tensor& left, const torch::Tensor& right,
                    int iters, bridge::ReverseRule rule = bridge::ReverseRule::cumulative);

struct AblationRow {
  std::string label;
  std::string config_hash;
  RunConfig config;
  EvalResult eval;
};

/// Axes accepted by ablate().
const std::vector<std::string>& ablation_axes();

/// Trains and evaluates the Cartesian product of the requested axes. Flag
/// axes take {off, on}; "schedule" walks the schedule presets in bridge
/// training mode; "iterations" reports every iteration count of the table.
std::vector<AblationRow> ablate(const RunConfig& base, const std::vector<std::string>& axes,
                                std::ostream* log = nullptr);

std::string format_ablation(const std::vector<AblationRow>& rows);
std::string ablation_json(const std::vector<AblationRow>& rows);

}  // namespace diffstereo::pipeline
