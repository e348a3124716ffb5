#pragma once

#include <optional>
#include <vector>

#include <torch/torch.h>

#include "diffstereo/bridge.hpp"
#include "diffstereo/encoders.hpp"
#include "diffstereo/types.hpp"
#include "diffstereo/updater.hpp"
#include "diffstereo/volume.hpp"

namespace diffstereo {

/// Architecture switches from the ablation study.
struct AblationFlags {
  bool ca = true;      // channel self-attention on the context branch
  bool ffn = false;    // feed-forward block after attention
  bool smish = true;   // SMISH activation on the attended context
  bool te = true;      // time encoder conditioning
  bool aa = false;     // agent attention after the motion encoder
};

struct ModelConfig {
  int feature_channels = 32;
  int groups = 4;
  int max_disp = 16;  // disparity hypotheses at 1/4 resolution
  int hidden = 128;
  int context_base = 64;
  int regularizer_channels = 16;
  int radius = 4;
  int agent_grid = 7;
  double time_scale = 100.0;
  AblationFlags flags;
};

struct ForwardOptions {
  int iters = 22;
  bridge::ReverseRule rule = bridge::ReverseRule::cumulative;
  /// Stop gradients through the iterate used for lookups and motion
  /// encoding; the additive update path stays differentiable.
  bool detach_iterate = true;
};

/// Quantities that stay fixed across refinement steps for one batch.
struct PreparedPair {
  std::optional<volume::GeometryVolumes> volumes;
  DisparityField initial;  // d_0 at 1/4 scale
  encoders::ContextPyramid context;
};

struct ForwardOutput {
  DisparityField initial;                  // d_0, 1/4 scale
  DisparityField initial_full;             // d_0 upsampled with a uniform mask
  std::vector<DisparityField> quarter;     // D'_{1/N} ... D'_1 at 1/4 scale
  std::vector<DisparityField> full;        // the same, upsampled
};

struct StereoModelImpl : torch::nn::Module {
  explicit StereoModelImpl(ModelConfig config);

  PreparedPair prepare(const torch::Tensor& left, const torch::Tensor& right);

  /// Time embedding for a batch of size `batch`, or an undefined tensor when
  /// time conditioning is disabled.
  torch::Tensor time_embedding(double t, int64_t batch);

  /// One application of the velocity network at the given iterate.
  updater::UpdateOutput velocity(const PreparedPair& prepared, const updater::HiddenStates& hidden,
                                 const DisparityField& iterate, double t);

  /// Reverse process from d_0 with `options.iters` steps.
  ForwardOutput refine(const PreparedPair& prepared, const ForwardOptions& options);

  ForwardOutput forward(const torch::Tensor& left, const torch::Tensor& right,
                        const ForwardOptions& options);

  ModelConfig config;
  encoders::FeatureEncoder features{nullptr};
  volume::Regularizer regularizer{nullptr};
  encoders::ContextNetwork context{nullptr};
  updater::TimeEncoder time_encoder{nullptr};
  updater::MotionEncoder motion{nullptr};
  updater::AgentAttention agent{nullptr};
  updater::UpdateBlock update{nullptr};
};
TORCH_MODULE(StereoModel);

}  // namespace diffstereo
