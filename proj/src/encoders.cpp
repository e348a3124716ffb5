#include "diffstereo/encoders.hpp"

#include <cmath>

#include <fmt/format.h>

#include "diffstereo/errors.hpp"

namespace diffstereo::encoders {

namespace nn = torch::nn;
namespace F = torch::nn::functional;

namespace {

nn::Conv2d conv2d(int in, int out, int kernel, int stride = 1) {
  return nn::Conv2d(nn::Conv2dOptions(in, out, kernel).stride(stride).padding(kernel / 2));
}

void push_conv_norm_relu(nn::Sequential& seq, int in, int out, int stride) {
  seq->push_back(conv2d(in, out, 3, stride));
  seq->push_back(nn::InstanceNorm2d(nn::InstanceNorm2dOptions(out)));
  seq->push_back(nn::ReLU());
}

void zero_init(nn::Conv2d& conv) {
  torch::NoGradGuard guard;
  conv->weight.zero_();
  if (conv->bias.defined()) conv->bias.zero_();
}

void check_divisible(const torch::Tensor& image, int factor, const char* what) {
  if (image.dim() != 4 || image.size(1) != 3) {
    throw ShapeError(fmt::format("{}: expected [B, 3, H, W] image", what));
  }
  if (image.size(2) % factor != 0 || image.size(3) % factor != 0) {
    throw ShapeError(fmt::format("{}: image {}x{} not divisible by {}", what, image.size(2),
                                 image.size(3), factor));
  }
}

}  // namespace

double smish(double x) { return x * std::tanh(std::log1p(1.0 / (1.0 + std::exp(-x)))); }

torch::Tensor smish(const torch::Tensor& x) { return x * torch::tanh(torch::log1p(torch::sigmoid(x))); }

FeatureEncoderImpl::FeatureEncoderImpl(int channels) {
  nn::Sequential seq;
  push_conv_norm_relu(seq, 3, channels / 2, 2);
  push_conv_norm_relu(seq, channels / 2, channels, 2);
  push_conv_norm_relu(seq, channels, channels, 1);
  push_conv_norm_relu(seq, channels, channels, 1);
  trunk = register_module("trunk", seq);
  group_head = register_module("group_head", conv2d(channels, channels, 3));
  pair_head = register_module("pair_head", conv2d(channels, channels, 3));
}

std::pair<FeatureMap, FeatureMap> FeatureEncoderImpl::forward(const torch::Tensor& image) {
  check_divisible(image, 4, "extract_features");
  auto x = trunk->forward(image);
  return {FeatureMap{group_head->forward(x), 4}, FeatureMap{pair_head->forward(x), 4}};
}

ChannelSelfAttentionImpl::ChannelSelfAttentionImpl(int channels, bool apply_smish_in)
    : apply_smish(apply_smish_in) {
  qkv = register_module("qkv", conv2d(channels, 3 * channels, 1));
  qkv_dw = register_module(
      "qkv_dw",
      nn::Conv2d(nn::Conv2dOptions(3 * channels, 3 * channels, 3).padding(1).groups(3 * channels)));
  project = register_module("project", conv2d(channels, channels, 1));
  zero_init(project);
  log_alpha = register_parameter(
      "log_alpha", torch::full({1}, std::log(std::sqrt(static_cast<double>(channels)))));
}

std::array<torch::Tensor, 3> ChannelSelfAttentionImpl::projections(const torch::Tensor& x) {
  const auto b = x.size(0);
  const auto c = x.size(1);
  auto qkv_out = qkv_dw->forward(qkv->forward(x)).view({b, 3, c, -1});
  auto q = F::normalize(qkv_out.select(1, 0), F::NormalizeFuncOptions().dim(-1));
  auto k = F::normalize(qkv_out.select(1, 1), F::NormalizeFuncOptions().dim(-1));
  return {q, k, qkv_out.select(1, 2)};
}

torch::Tensor ChannelSelfAttentionImpl::attention_map(const torch::Tensor& x) {
  auto [q, k, v] = projections(x);
  return torch::softmax(torch::matmul(q, k.transpose(1, 2)) / log_alpha.exp(), -1);
}

torch::Tensor ChannelSelfAttentionImpl::forward(const torch::Tensor& x) {
  auto [q, k, v] = projections(x);
  auto attn = torch::softmax(torch::matmul(q, k.transpose(1, 2)) / log_alpha.exp(), -1);
  auto mixed = torch::matmul(attn, v).view_as(x);
  auto out = project->forward(mixed) + x;
  return apply_smish ? smish(out) : out;
}

FeedForwardImpl::FeedForwardImpl(int channels, int expansion, bool enabled_in)
    : enabled(enabled_in) {
  const int hidden = channels * expansion;
  project_in = register_module("project_in", conv2d(channels, 2 * hidden, 1));
  depthwise = register_module(
      "depthwise",
      nn::Conv2d(nn::Conv2dOptions(2 * hidden, 2 * hidden, 3).padding(1).groups(2 * hidden)));
  project_out = register_module("project_out", conv2d(hidden, channels, 1));
  zero_init(project_out);
}

torch::Tensor FeedForwardImpl::forward(const torch::Tensor& x) {
  if (!enabled) return x;
  auto halves = depthwise->forward(project_in->forward(x)).chunk(2, 1);
  return x + project_out->forward(smish(halves[0]) * halves[1]);
}

ResidualBlockImpl::ResidualBlockImpl(int in, int out, int stride) {
  conv1 = register_module("conv1", conv2d(in, out, 3, stride));
  conv2 = register_module("conv2", conv2d(out, out, 3));
  norm1 = register_module("norm1", nn::InstanceNorm2d(nn::InstanceNorm2dOptions(out)));
  norm2 = register_module("norm2", nn::InstanceNorm2d(nn::InstanceNorm2dOptions(out)));
  if (stride != 1 || in != out) {
    skip = register_module("skip", conv2d(in, out, 1, stride));
    norm3 = register_module("norm3", nn::InstanceNorm2d(nn::InstanceNorm2dOptions(out)));
  }
}

torch::Tensor ResidualBlockImpl::forward(const torch::Tensor& x) {
  auto y = torch::relu(norm1->forward(conv1->forward(x)));
  y = torch::relu(norm2->forward(conv2->forward(y)));
  auto shortcut = skip ? norm3->forward(skip->forward(x)) : x;
  return torch::relu(shortcut + y);
}

ContextNetworkImpl::ContextNetworkImpl(ContextOptions opts) : options(opts) {
  const int base = options.base;
  const int hidden = options.hidden;
  trunk = register_module(
      "trunk", nn::Sequential(conv2d(3, base / 2, 7, 2),
                              nn::InstanceNorm2d(nn::InstanceNorm2dOptions(base / 2)), nn::ReLU(),
                              ResidualBlock(base / 2, base / 2, 1), ResidualBlock(base / 2, base, 2),
                              ResidualBlock(base, base, 1)));
  down8 = register_module("down8", nn::Sequential(ResidualBlock(base, base, 2)));
  down16 = register_module("down16", nn::Sequential(ResidualBlock(base, base, 2)));
  hidden_heads = register_module("hidden_heads", nn::ModuleList());
  context_heads = register_module("context_heads", nn::ModuleList());
  for (int level = 0; level < 3; ++level) {
    hidden_heads->push_back(conv2d(base, hidden, 3));
    context_heads->push_back(conv2d(base, 3 * hidden, 3));
  }
  if (options.attention) {
    attention = register_module("attention", ChannelSelfAttention(3 * hidden, false));
  }
  if (options.feed_forward) {
    ffn = register_module("ffn", FeedForward(3 * hidden, 2, true));
  }
}

ContextPyramid ContextNetworkImpl::forward(const torch::Tensor& image) {
  check_divisible(image, 16, "context_network");
  std::array<torch::Tensor, 3> levels;
  levels[0] = trunk->forward(image);
  levels[1] = down8->forward(levels[0]);
  levels[2] = down16->forward(levels[1]);

  ContextPyramid out;
  for (int level = 0; level < 3; ++level) {
    out.hidden_init[level] =
        torch::tanh(hidden_heads[level]->as<nn::Conv2d>()->forward(levels[level]));
    auto ctx = context_heads[level]->as<nn::Conv2d>()->forward(levels[level]);
    if (level == 0) {
      if (attention) ctx = attention->forward(ctx);
      if (options.smish) ctx = smish(ctx);
      if (ffn) ctx = ffn->forward(ctx);
    }
    auto parts = torch::relu(ctx).chunk(3, 1);
    out.context[level] = ContextTriple{parts[0], parts[1], parts[2]};
  }
  return out;
}

}  // namespace diffstereo::encoders
