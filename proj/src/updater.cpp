#include "diffstereo/updater.hpp"

#include <cmath>

#include <fmt/format.h>

#include "diffstereo/errors.hpp"

namespace diffstereo::updater {

namespace nn = torch::nn;
namespace F = torch::nn::functional;

namespace {

nn::Conv2d conv2d(int in, int out, int kernel) {
  return nn::Conv2d(nn::Conv2dOptions(in, out, kernel).padding(kernel / 2));
}

void zero_init(nn::Conv2d& conv) {
  torch::NoGradGuard guard;
  conv->weight.zero_();
  if (conv->bias.defined()) conv->bias.zero_();
}

torch::Tensor broadcast_time(const torch::Tensor& time_embedding) {
  return time_embedding.unsqueeze(-1).unsqueeze(-1);
}

torch::Tensor pool2x(const torch::Tensor& x) {
  return F::avg_pool2d(x, F::AvgPool2dFuncOptions(3).stride(2).padding(1));
}

torch::Tensor resize_to(const torch::Tensor& x, const torch::Tensor& ref) {
  return F::interpolate(x, F::InterpolateFuncOptions()
                               .size(std::vector<int64_t>{ref.size(2), ref.size(3)})
                               .mode(torch::kBilinear)
                               .align_corners(true));
}

}  // namespace

TimeEncoderImpl::TimeEncoderImpl(int width_in, double time_scale) : width(width_in) {
  const int half = std::max(1, width / 2);
  embed = register_module("embed", nn::Linear(1, 1));
  fc1 = register_module("fc1", nn::Linear(2 * half, width));
  fc2 = register_module("fc2", nn::Linear(width, width));
  torch::NoGradGuard guard;
  embed->weight.fill_(time_scale);
  embed->bias.zero_();
}

torch::Tensor TimeEncoderImpl::forward(const torch::Tensor& t) {
  const int half = std::max(1, width / 2);
  auto position = embed->forward(t.view({-1, 1}));
  auto freqs =
      torch::exp(torch::arange(half, t.options()) * (-std::log(10000.0) / half)).view({1, -1});
  auto args = position * freqs;
  auto emb = torch::cat({torch::sin(args), torch::cos(args)}, 1);
  return fc2->forward(torch::gelu(fc1->forward(torch::gelu(emb))));
}

torch::Tensor TimeEncoderImpl::encode(double t) {
  if (!(t >= 0.0 && t <= 1.0)) {
    throw std::domain_error(fmt::format("time {} outside [0, 1]", t));
  }
  return forward(torch::full({1}, t, embed->weight.options()));
}

MotionEncoderImpl::MotionEncoderImpl(int geometry_channels, int width_in) : width(width_in) {
  geo1 = register_module("geo1", conv2d(geometry_channels, width, 1));
  geo2 = register_module("geo2", conv2d(width, width, 3));
  disp1 = register_module("disp1", conv2d(1, width, 7));
  disp2 = register_module("disp2", conv2d(width, width, 3));
}

torch::Tensor MotionEncoderImpl::forward(const GeometryFeatures& geometry,
                                         const DisparityField& disparity,
                                         const torch::Tensor& time_embedding) {
  const auto& g = geometry.data;
  const auto& d = disparity.data;
  if (g.size(0) != d.size(0) || g.size(2) != d.size(2) || g.size(3) != d.size(3)) {
    throw ShapeError("motion encoder: geometry and disparity differ in shape");
  }
  auto geo = geo2->forward(torch::relu(geo1->forward(g)));
  auto disp = disp2->forward(torch::relu(disp1->forward(d)));
  if (time_embedding.defined()) {
    if (time_embedding.size(-1) != width) {
      throw ShapeError(fmt::format("time embedding width {} != encoder width {}",
                                   time_embedding.size(-1), width));
    }
    auto te = broadcast_time(time_embedding);
    geo = geo + te;
    disp = disp + te;
  }
  return torch::cat({geo, disp, d}, 1);
}

torch::Tensor agent_attention(const torch::Tensor& q, const torch::Tensor& k,
                              const torch::Tensor& v, const torch::Tensor& agents, double scale,
                              FlopCounter* counter) {
  if (q.dim() != 3 || !q.sizes().equals(k.sizes()) || !q.sizes().equals(v.sizes()) ||
      agents.dim() != 3 || agents.size(2) != q.size(2)) {
    throw ShapeError("agent_attention: expected q, k, v [B, N, C] and agents [B, n, C]");
  }
  auto agent_weights = torch::softmax(torch::matmul(agents, k.transpose(1, 2)) * scale, -1);
  auto agent_values = torch::matmul(agent_weights, v);
  auto query_weights = torch::softmax(torch::matmul(q, agents.transpose(1, 2)) * scale, -1);
  auto out = torch::matmul(query_weights, agent_values);
  if (counter != nullptr) {
    const int64_t b = q.size(0);
    const int64_t n_tokens = q.size(1);
    const int64_t channels = q.size(2);
    const int64_t n_agents = agents.size(1);
    const int64_t matmul = 2 * b * n_tokens * n_agents * channels;
    // Four products of this size plus exp/normalise over two N x n maps.
    counter->flops += 4 * matmul + 2 * 3 * b * n_tokens * n_agents;
  }
  return out;
}

AgentAttentionImpl::AgentAttentionImpl(int channels, int grid_in) : grid(grid_in) {
  if (grid < 1) throw ConfigError("agent grid must be >= 1");
  q_proj = register_module("q_proj", conv2d(channels, channels, 1));
  k_proj = register_module("k_proj", conv2d(channels, channels, 1));
  v_proj = register_module("v_proj", conv2d(channels, channels, 1));
  out_proj = register_module("out_proj", conv2d(channels, channels, 1));
  zero_init(out_proj);
}

torch::Tensor AgentAttentionImpl::forward(const torch::Tensor& x) {
  const auto b = x.size(0);
  const auto c = x.size(1);
  auto q_map = q_proj->forward(x);
  auto tokens = [&](const torch::Tensor& t) { return t.flatten(2).transpose(1, 2); };
  auto agents = tokens(F::adaptive_avg_pool2d(
      q_map, F::AdaptiveAvgPool2dFuncOptions(std::vector<int64_t>{grid, grid})));
  auto out = agent_attention(tokens(q_map), tokens(k_proj->forward(x)),
                             tokens(v_proj->forward(x)), agents,
                             1.0 / std::sqrt(static_cast<double>(c)));
  out = out.transpose(1, 2).reshape({b, c, x.size(2), x.size(3)});
  return x + out_proj->forward(out);
}

TimeGruImpl::TimeGruImpl(int hidden, int input) {
  conv_z = register_module("conv_z", conv2d(hidden + input, hidden, 3));
  conv_r = register_module("conv_r", conv2d(hidden + input, hidden, 3));
  conv_h = register_module("conv_h", conv2d(hidden + input, hidden, 3));
}

GruStep TimeGruImpl::step(const torch::Tensor& h, const torch::Tensor& x,
                          const encoders::ContextTriple& context,
                          const torch::Tensor& time_embedding) {
  if (h.size(2) != x.size(2) || h.size(3) != x.size(3) || !h.sizes().equals(context.z.sizes())) {
    throw ShapeError("t_gru_step: hidden, input and context shapes differ");
  }
  auto hx = torch::cat({h, x}, 1);
  auto pre_z = conv_z->forward(hx) + context.z;
  auto pre_r = conv_r->forward(hx) + context.r;
  torch::Tensor te;
  if (time_embedding.defined()) {
    te = broadcast_time(time_embedding);
    pre_z = pre_z + te;
    pre_r = pre_r + te;
  }
  auto z = torch::sigmoid(pre_z);
  auto r = torch::sigmoid(pre_r);
  auto pre_h = conv_h->forward(torch::cat({r * h, x}, 1)) + context.h;
  if (te.defined()) pre_h = pre_h + te;
  auto candidate = torch::tanh(pre_h);
  return {(1 - z) * h + z * candidate, z, r};
}

UpdateBlockImpl::UpdateBlockImpl(int hidden, int motion_channels) {
  gru16 = register_module("gru16", TimeGru(hidden, hidden));
  gru08 = register_module("gru08", TimeGru(hidden, 2 * hidden));
  gru04 = register_module("gru04", TimeGru(hidden, motion_channels + hidden));
  velocity1 = register_module("velocity1", conv2d(hidden, hidden, 3));
  velocity2 = register_module("velocity2", conv2d(hidden, 1, 3));
  mask1 = register_module("mask1", conv2d(hidden, hidden, 3));
  mask2 = register_module("mask2", conv2d(hidden, 9 * kUpsampleFactor * kUpsampleFactor, 1));
  zero_init(velocity2);
  zero_init(mask2);
}

UpdateOutput UpdateBlockImpl::forward(const HiddenStates& hidden,
                                      const encoders::ContextPyramid& context,
                                      const torch::Tensor& motion,
                                      const torch::Tensor& time_embedding) {
  for (int level = 0; level < 3; ++level) {
    if (!hidden[level].sizes().equals(context.hidden_init[level].sizes())) {
      throw ShapeError(fmt::format("hidden state at level {} does not match context", level));
    }
  }
  HiddenStates next;
  next[2] = gru16->forward(hidden[2], pool2x(hidden[1]), context.context[2], {});
  next[1] = gru08->forward(hidden[1],
                           torch::cat({pool2x(hidden[0]), resize_to(next[2], hidden[1])}, 1),
                           context.context[1], {});
  next[0] = gru04->forward(hidden[0], torch::cat({motion, resize_to(next[1], hidden[0])}, 1),
                           context.context[0], time_embedding);
  auto velocity = velocity2->forward(torch::relu(velocity1->forward(next[0])));
  auto mask = 0.25 * mask2->forward(torch::relu(mask1->forward(next[0])));
  return {next, VelocityField{velocity}, mask};
}

torch::Tensor normalize_mask(const torch::Tensor& logits) {
  const auto b = logits.size(0);
  constexpr int k = kUpsampleFactor;
  if (logits.size(1) != 9 * k * k) {
    throw ShapeError(fmt::format("mask logits need {} channels, got {}", 9 * k * k, logits.size(1)));
  }
  return torch::softmax(logits.view({b, 9, k, k, logits.size(2), logits.size(3)}), 1);
}

torch::Tensor uniform_mask(const DisparityField& coarse) {
  const auto& d = coarse.data;
  constexpr int k = kUpsampleFactor;
  return torch::full({d.size(0), 9, k, k, d.size(2), d.size(3)}, 1.0 / 9.0, d.options());
}

DisparityField upsample_disparity(const DisparityField& coarse, const torch::Tensor& mask) {
  const auto& d = coarse.data;
  constexpr int k = kUpsampleFactor;
  const auto b = d.size(0);
  const auto h = d.size(2);
  const auto w = d.size(3);
  if (d.dim() != 4 || d.size(1) != 1) throw ShapeError("upsample_disparity: expected [B, 1, H, W]");
  if (mask.dim() != 6 || mask.size(0) != b || mask.size(1) != 9 || mask.size(2) != k ||
      mask.size(3) != k || mask.size(4) != h || mask.size(5) != w) {
    throw ShapeError("upsample_disparity: mask must be [B, 9, 4, 4, H, W]");
  }
  {
    torch::NoGradGuard guard;
    const double deviation = (mask.sum(1) - 1.0).abs().max().item<double>();
    const double lowest = mask.min().item<double>();
    if (deviation > 1e-4 || lowest < 0.0) {
      throw std::invalid_argument(
          fmt::format("upsample mask is not normalised (max |sum - 1| = {})", deviation));
    }
  }
  auto padded = F::pad(k * d, F::PadFuncOptions({1, 1, 1, 1}).mode(torch::kReplicate));
  auto neighbours = F::unfold(padded, F::UnfoldFuncOptions({3, 3})).view({b, 9, 1, 1, h, w});
  auto fine = (mask * neighbours).sum(1);  // [B, k, k, H, W]
  fine = fine.permute({0, 3, 1, 4, 2}).reshape({b, 1, k * h, k * w});
  return {fine, coarse.scale / k > 0 ? coarse.scale / k : 1};
}

}  // namespace diffstereo::updater
