#pragma once

#include <array>
#include <utility>

#include <torch/torch.h>

#include "diffstereo/types.hpp"

namespace diffstereo::encoders {

/// x * tanh(log(1 + sigmoid(x))).
double smish(double x);
torch::Tensor smish(const torch::Tensor& x);

/// Weight-shared matching feature network. Both outputs are at 1/4 scale:
/// the first feeds the group-wise volume, the second the all-pairs volume.
struct FeatureEncoderImpl : torch::nn::Module {
  explicit FeatureEncoderImpl(int channels);

  std::pair<FeatureMap, FeatureMap> forward(const torch::Tensor& image);

  torch::nn::Sequential trunk{nullptr};
  torch::nn::Conv2d group_head{nullptr};
  torch::nn::Conv2d pair_head{nullptr};
};
TORCH_MODULE(FeatureEncoder);

/// Cross-covariance attention over channels: the attention map is C x C, so
/// the cost is linear in the number of pixels.
struct ChannelSelfAttentionImpl : torch::nn::Module {
  ChannelSelfAttentionImpl(int channels, bool apply_smish);

  torch::Tensor forward(const torch::Tensor& x);

  /// Row-stochastic [B, C, C] attention map for `x`.
  torch::Tensor attention_map(const torch::Tensor& x);

  double alpha() const { return log_alpha.exp().item<double>(); }

  torch::nn::Conv2d qkv{nullptr};
  torch::nn::Conv2d qkv_dw{nullptr};
  torch::nn::Conv2d project{nullptr};  // W_p, zero-initialised
  torch::Tensor log_alpha;
  bool apply_smish;

 private:
  std::array<torch::Tensor, 3> projections(const torch::Tensor& x);
};
TORCH_MODULE(ChannelSelfAttention);

/// Gated depthwise feed-forward block with a SMISH gate and residual add.
struct FeedForwardImpl : torch::nn::Module {
  FeedForwardImpl(int channels, int expansion, bool enabled);

  torch::Tensor forward(const torch::Tensor& x);

  torch::nn::Conv2d project_in{nullptr};
  torch::nn::Conv2d depthwise{nullptr};
  torch::nn::Conv2d project_out{nullptr};
  bool enabled;
};
TORCH_MODULE(FeedForward);

/// Gate biases c_z, c_r, c_h for one recurrent level.
struct ContextTriple {
  torch::Tensor z;
  torch::Tensor r;
  torch::Tensor h;
};

/// Index 0 is 1/4 scale, 1 is 1/8, 2 is 1/16.
struct ContextPyramid {
  std::array<torch::Tensor, 3> hidden_init;
  std::array<ContextTriple, 3> context;
};

struct ContextOptions {
  int hidden = 128;
  int base = 64;
  bool attention = true;
  bool smish = true;
  bool feed_forward = false;
};

struct ResidualBlockImpl : torch::nn::Module {
  ResidualBlockImpl(int in, int out, int stride);
  torch::Tensor forward(const torch::Tensor& x);

  torch::nn::Conv2d conv1{nullptr}, conv2{nullptr}, skip{nullptr};
  torch::nn::InstanceNorm2d norm1{nullptr}, norm2{nullptr}, norm3{nullptr};
};
TORCH_MODULE(ResidualBlock);

/// Multi-level context encoder for the left image. Hidden states are
/// tanh-activated, context features ReLU-activated. Channel self-attention
/// (and the optional feed-forward block) runs on the 1/4 context branch.
struct ContextNetworkImpl : torch::nn::Module {
  explicit ContextNetworkImpl(ContextOptions options);

  ContextPyramid forward(const torch::Tensor& image);

  ContextOptions options;
  torch::nn::Sequential trunk{nullptr};
  torch::nn::Sequential down8{nullptr};
  torch::nn::Sequential down16{nullptr};
  torch::nn::ModuleList hidden_heads{nullptr};
  torch::nn::ModuleList context_heads{nullptr};
  ChannelSelfAttention attention{nullptr};
  FeedForward ffn{nullptr};
};
TORCH_MODULE(ContextNetwork);

}  // namespace diffstereo::encoders
