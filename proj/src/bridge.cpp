#include "diffstereo/bridge.hpp"

#include <algorithm>
#include <cmath>

#include <fmt/format.h>

#include "diffstereo/errors.hpp"

namespace diffstereo::bridge {

namespace {

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

void check_same_shape(const torch::Tensor& a, const torch::Tensor& b, const char* what) {
  if (!a.sizes().equals(b.sizes())) {
    throw ShapeError(fmt::format("{}: shape mismatch", what));
  }
}

void check_time(double t) {
  if (!(t >= 0.0 && t <= 1.0)) {
    throw std::domain_error(fmt::format("time {} outside [0, 1]", t));
  }
}

}  // namespace

void ScheduleParams::validate() const {
  if (!(min_clip > 0.0 && min_clip < 1.0)) {
    throw ConfigError(fmt::format("schedule min_clip must be in (0, 1), got {}", min_clip));
  }
  if (!(tau > 0.0)) throw ConfigError(fmt::format("schedule tau must be > 0, got {}", tau));
  if (steps < 1) throw ConfigError(fmt::format("schedule steps must be >= 1, got {}", steps));
  if (family == ScheduleFamily::sigmoid && !(end > start)) {
    throw ConfigError("sigmoid schedule needs end > start");
  }
}

std::vector<NamedSchedule> schedule_presets() {
  auto sig = [](double s, double e, double tau) {
    ScheduleParams p;
    p.family = ScheduleFamily::sigmoid;
    p.start = s;
    p.end = e;
    p.tau = tau;
    return p;
  };
  return {
      {"linear", ScheduleParams{}},
      {"sigmoid_s0_e3_t0.3", sig(0.0, 3.0, 0.3)},
      {"sigmoid_s0_e3_t0.7", sig(0.0, 3.0, 0.7)},
      {"sigmoid_s-3_e3_t1", sig(-3.0, 3.0, 1.0)},
      {"sigmoid_s-3_e3_t1.1", sig(-3.0, 3.0, 1.1)},
  };
}

ScheduleParams schedule_preset(const std::string& name) {
  for (const auto& preset : schedule_presets()) {
    if (preset.name == name) return preset.params;
  }
  throw ConfigError(fmt::format("unknown schedule preset '{}'", name));
}

double beta(double t, const ScheduleParams& schedule) {
  check_time(t);
  double value = 0.0;
  if (schedule.family == ScheduleFamily::linear) {
    value = 1.0 - t;
  } else {
    const double v_start = sigmoid(schedule.start / schedule.tau);
    const double v_end = sigmoid(schedule.end / schedule.tau);
    const double v = sigmoid((t * (schedule.end - schedule.start) + schedule.start) / schedule.tau);
    value = (v_end - v) / (v_end - v_start);
  }
  return std::clamp(value, schedule.min_clip, 1.0);
}

DisparityField forward_interpolate(const DisparityField& ground_truth, const DisparityField& initial,
                                   double t, const ScheduleParams& schedule, bool plain_linear) {
  check_same_shape(ground_truth.data, initial.data, "forward_interpolate");
  const double b = beta(t, schedule);
  const double w_gt = plain_linear ? 1.0 - b : std::sqrt(1.0 - b);
  const double w_init = plain_linear ? b : std::sqrt(b);
  return {w_gt * ground_truth.data + w_init * initial.data, initial.scale};
}

VelocityField velocity_target(const DisparityField& ground_truth, const DisparityField& initial) {
  check_same_shape(ground_truth.data, initial.data, "velocity_target");
  return {ground_truth.data - initial.data};
}

BridgeState euler_step(const BridgeState& state, const VelocityField& velocity) {
  if (state.t_hat >= state.steps) {
    throw std::out_of_range(fmt::format("euler_step past final step {}", state.steps));
  }
  check_same_shape(state.current.data, velocity.data, "euler_step");
  BridgeState next = state;
  next.current = {state.current.data + velocity.data / static_cast<double>(state.steps),
                  state.current.scale};
  next.t_hat = state.t_hat + 1;
  return next;
}

DisparityField cumulative_update(const DisparityField& initial, const VelocityField& velocity) {
  check_same_shape(initial.data, velocity.data, "cumulative_update");
  return {initial.data + velocity.data, initial.scale};
}

std::vector<DisparityField> sample_reverse(const VelocityFn& velocity_fn,
                                           const DisparityField& initial,
                                           const ScheduleParams& schedule, ReverseRule rule) {
  schedule.validate();
  std::vector<DisparityField> trajectory{initial};
  trajectory.reserve(schedule.steps + 1);
  BridgeState state{0, schedule.steps, initial, initial};
  while (state.t_hat < state.steps) {
    auto v = velocity_fn(state.current, state.t());
    if (!v.data.sizes().equals(initial.data.sizes())) {
      throw ShapeError("velocity_fn returned a field of the wrong shape");
    }
    if (rule == ReverseRule::euler) {
      state = euler_step(state, v);
    } else {
      state.current = cumulative_update(state.initial, v);
      ++state.t_hat;
    }
    trajectory.push_back(state.current);
  }
  return trajectory;
}

std::string to_string(ScheduleFamily family) {
  return family == ScheduleFamily::linear ? "linear" : "sigmoid";
}

std::string to_string(ReverseRule rule) {
  return rule == ReverseRule::euler ? "euler" : "cumulative";
}

ScheduleFamily parse_schedule_family(const std::string& text) {
  if (text == "linear") return ScheduleFamily::linear;
  if (text == "sigmoid") return ScheduleFamily::sigmoid;
  throw ConfigError(fmt::format("unknown schedule family '{}'", text));
}

ReverseRule parse_reverse_rule(const std::string& text) {
  if (text == "euler") return ReverseRule::euler;
  if (text == "cumulative") return ReverseRule::cumulative;
  throw ConfigError(fmt::format("unknown reverse rule '{}'", text));
}

}  // namespace diffstereo::bridge
