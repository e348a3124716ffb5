#pragma once

#include <functional>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "diffstereo/types.hpp"

namespace diffstereo::bridge {

enum class ScheduleFamily { linear, sigmoid };

/// Interpolation schedule between the initial disparity (t = 0, beta = 1)
/// and the ground truth (t = 1, beta ~ 0).
struct ScheduleParams {
  ScheduleFamily family = ScheduleFamily::linear;
  double start = -3.0;
  double end = 3.0;
  double tau = 1.0;
  double min_clip = 1e-9;
  int steps = 32;

  void validate() const;
};

struct NamedSchedule {
  std::string name;
  ScheduleParams params;
};

/// The five schedules of the noise-schedule ablation: 1 - t and four sigmoid
/// settings.
std::vector<NamedSchedule> schedule_presets();

/// Looks up a preset by name ("linear", "sigmoid_s-3_e3_t1", ...).
ScheduleParams schedule_preset(const std::string& name);

double beta(double t, const ScheduleParams& schedule);

/// D_t = sqrt(1 - beta_t) * D_gt + sqrt(beta_t) * D_0, or the affine blend
/// (1 - beta_t) * D_gt + beta_t * D_0 when `plain_linear` is set.
DisparityField forward_interpolate(const DisparityField& ground_truth, const DisparityField& initial,
                                   double t, const ScheduleParams& schedule,
                                   bool plain_linear = false);

/// Regression target of the velocity network: D_gt - D_0.
VelocityField velocity_target(const DisparityField& ground_truth, const DisparityField& initial);

struct BridgeState {
  int t_hat = 0;
  int steps = 1;
  DisparityField current;
  DisparityField initial;

  double t() const { return static_cast<double>(t_hat) / steps; }
};

/// D'_{(k+1)/N} = D'_{k/N} + v / N.
BridgeState euler_step(const BridgeState& state, const VelocityField& velocity);

/// D'_{(k+1)/N} = D'_0 + v: the velocity is the cumulative displacement from
/// the initial disparity.
DisparityField cumulative_update(const DisparityField& initial, const VelocityField& velocity);

enum class ReverseRule { euler, cumulative };

using VelocityFn = std::function<VelocityField(const DisparityField&, double)>;

/// Runs the deterministic reverse process from `initial` for schedule.steps
/// steps with t = k / N. Returns N + 1 states including the initial one.
std::vector<DisparityField> sample_reverse(const VelocityFn& velocity_fn,
                                           const DisparityField& initial,
                                           const ScheduleParams& schedule,
                                           ReverseRule rule = ReverseRule::cumulative);

std::string to_string(ScheduleFamily family);
std::string to_string(ReverseRule rule);
ScheduleFamily parse_schedule_family(const std::string& text);
ReverseRule parse_reverse_rule(const std::string& text);

}  // namespace diffstereo::bridge
