#include "diffstereo/model.hpp"

#include <fmt/format.h>

#include "diffstereo/errors.hpp"

namespace diffstereo {

StereoModelImpl::StereoModelImpl(ModelConfig cfg) : config(cfg) {
  if (config.max_disp < 1 || config.hidden < 1 || config.radius < 0) {
    throw ConfigError("model dimensions must be positive");
  }
  if (config.feature_channels % config.groups != 0) {
    throw ConfigError(fmt::format("feature_channels {} not divisible by groups {}",
                                  config.feature_channels, config.groups));
  }
  features = register_module("features", encoders::FeatureEncoder(config.feature_channels));
  regularizer = register_module(
      "regularizer", volume::Regularizer(config.groups, config.regularizer_channels));
  encoders::ContextOptions ctx_opts;
  ctx_opts.hidden = config.hidden;
  ctx_opts.base = config.context_base;
  ctx_opts.attention = config.flags.ca;
  ctx_opts.smish = config.flags.smish;
  ctx_opts.feed_forward = config.flags.ffn;
  context = register_module("context", encoders::ContextNetwork(ctx_opts));
  if (config.flags.te) {
    time_encoder =
        register_module("time_encoder", updater::TimeEncoder(config.hidden, config.time_scale));
  }
  const int geometry_channels = 4 * (2 * config.radius + 1);
  motion = register_module("motion", updater::MotionEncoder(geometry_channels, config.hidden));
  const auto motion_channels = static_cast<int>(motion->output_channels());
  if (config.flags.aa) {
    agent = register_module("agent", updater::AgentAttention(motion_channels, config.agent_grid));
  }
  update = register_module("update", updater::UpdateBlock(config.hidden, motion_channels));
}

PreparedPair StereoModelImpl::prepare(const torch::Tensor& left, const torch::Tensor& right) {
  if (!left.sizes().equals(right.sizes())) {
    throw ShapeError("left and right images differ in size");
  }
  auto [group_l, pair_l] = features->forward(left);
  auto [group_r, pair_r] = features->forward(right);
  auto corr = volume::group_correlation(group_l, group_r, config.groups, config.max_disp);
  auto geometry = regularizer->forward(corr);
  auto initial = volume::soft_argmin_disparity(geometry);
  auto all_pairs = volume::all_pairs_correlation(pair_l, pair_r, config.max_disp);
  PreparedPair prepared;
  prepared.volumes.emplace(geometry, all_pairs);
  prepared.initial = initial;
  prepared.context = context->forward(left);
  return prepared;
}

torch::Tensor StereoModelImpl::time_embedding(double t, int64_t batch) {
  if (!time_encoder) return {};
  return time_encoder->encode(t).expand({batch, config.hidden});
}

updater::UpdateOutput StereoModelImpl::velocity(const PreparedPair& prepared,
                                                const updater::HiddenStates& hidden,
                                                const DisparityField& iterate, double t) {
  auto te = time_embedding(t, iterate.data.size(0));
  auto geometry = volume::lookup_geometry(*prepared.volumes, iterate, config.radius);
  auto x = motion->forward(geometry, iterate, te);
  if (agent) x = agent->forward(x);
  return update->forward(hidden, prepared.context, x, te);
}

ForwardOutput StereoModelImpl::forward(const torch::Tensor& left, const torch::Tensor& right,
                                       const ForwardOptions& options) {
  if (options.iters < 1) throw ConfigError("iteration count must be >= 1");
  return refine(prepare(left, right), options);
}

ForwardOutput StereoModelImpl::refine(const PreparedPair& prepared,
                                      const ForwardOptions& options) {
  if (options.iters < 1) throw ConfigError("iteration count must be >= 1");

  ForwardOutput out;
  out.initial = prepared.initial;
  out.initial_full = updater::upsample_disparity(prepared.initial,
                                                 updater::uniform_mask(prepared.initial));

  updater::HiddenStates hidden = prepared.context.hidden_init;
  std::vector<torch::Tensor> masks;
  auto velocity_fn = [&](const DisparityField& iterate, double t) {
    DisparityField lookup = iterate;
    if (options.detach_iterate) lookup.data = lookup.data.detach();
    auto step = velocity(prepared, hidden, lookup, t);
    hidden = step.hidden;
    masks.push_back(step.mask_logits);
    return step.velocity;
  };

  bridge::ScheduleParams schedule;
  schedule.steps = options.iters;
  auto trajectory = bridge::sample_reverse(velocity_fn, prepared.initial, schedule, options.rule);
  for (size_t k = 1; k < trajectory.size(); ++k) {
    out.quarter.push_back(trajectory[k]);
    out.full.push_back(
        updater::upsample_disparity(trajectory[k], updater::normalize_mask(masks[k - 1])));
  }
  return out;
}

}  // namespace diffstereo
