#pragma once

#include <array>
#include <cstdint>

#include <torch/torch.h>

#include "diffstereo/encoders.hpp"
#include "diffstereo/types.hpp"

namespace diffstereo::updater {

/// Maps t in [0, 1] to a width-E embedding: scalar linear embedding,
/// sinusoidal features at geometric frequencies, then two GELU + linear
/// blocks.
struct TimeEncoderImpl : torch::nn::Module {
  explicit TimeEncoderImpl(int width, double time_scale = 100.0);

  /// t: [B] -> [B, E].
  torch::Tensor forward(const torch::Tensor& t);

  /// Single time value; throws std::domain_error outside [0, 1].
  torch::Tensor encode(double t);

  int width;
  torch::nn::Linear embed{nullptr};
  torch::nn::Linear fc1{nullptr};
  torch::nn::Linear fc2{nullptr};
};
TORCH_MODULE(TimeEncoder);

/// x_k = [Encoder_g(G) + t_e, Encoder_d(d) + t_e, d]; 2E + 1 channels.
struct MotionEncoderImpl : torch::nn::Module {
  MotionEncoderImpl(int geometry_channels, int width);

  /// `time_embedding` is [B, E]; pass an undefined tensor for no conditioning.
  torch::Tensor forward(const GeometryFeatures& geometry, const DisparityField& disparity,
                        const torch::Tensor& time_embedding);

  int64_t output_channels() const { return 2 * width + 1; }

  int width;
  torch::nn::Conv2d geo1{nullptr}, geo2{nullptr};
  torch::nn::Conv2d disp1{nullptr}, disp2{nullptr};
};
TORCH_MODULE(MotionEncoder);

/// Counts the floating-point work of the attention products actually
/// executed (multiply-adds count as two).
struct FlopCounter {
  int64_t flops = 0;
};

/// softmax(Q A^T * scale) (softmax(A K^T * scale) V) for token-major inputs
/// q, k, v: [B, N, C] and agents: [B, n, C]. The agent-value product is
/// formed first so the cost is O(N n C).
torch::Tensor agent_attention(const torch::Tensor& q, const torch::Tensor& k,
                              const torch::Tensor& v, const torch::Tensor& agents, double scale,
                              FlopCounter* counter = nullptr);

/// Agent attention over the spatial tokens of a feature map. Agent tokens
/// are the adaptive average pool of Q to a grid x grid lattice. The output
/// projection starts at zero, so the block starts as the identity.
struct AgentAttentionImpl : torch::nn::Module {
  AgentAttentionImpl(int channels, int grid);

  torch::Tensor forward(const torch::Tensor& x);

  int grid;
  torch::nn::Conv2d q_proj{nullptr}, k_proj{nullptr}, v_proj{nullptr}, out_proj{nullptr};
};
TORCH_MODULE(AgentAttention);

struct GruStep {
  torch::Tensor hidden;
  torch::Tensor z;
  torch::Tensor r;
};

/// Convolutional GRU whose gates take additive context biases and, when a
/// time embedding is supplied, the broadcast embedding as well:
///   z = sigma(Conv([h, x], W_z) + c_z + t_e)
///   r = sigma(Conv([h, x], W_r) + c_r + t_e)
///   h~ = tanh(Conv([r * h, x], W_h) + c_h + t_e)
///   h' = (1 - z) * h + z * h~
struct TimeGruImpl : torch::nn::Module {
  TimeGruImpl(int hidden, int input);

  GruStep step(const torch::Tensor& h, const torch::Tensor& x,
               const encoders::ContextTriple& context, const torch::Tensor& time_embedding);

  torch::Tensor forward(const torch::Tensor& h, const torch::Tensor& x,
                        const encoders::ContextTriple& context,
                        const torch::Tensor& time_embedding) {
    return step(h, x, context, time_embedding).hidden;
  }

  torch::nn::Conv2d conv_z{nullptr}, conv_r{nullptr}, conv_h{nullptr};
};
TORCH_MODULE(TimeGru);

using HiddenStates = std::array<torch::Tensor, 3>;

struct UpdateOutput {
  HiddenStates hidden;
  VelocityField velocity;
  torch::Tensor mask_logits;  // [B, 144, H, W]
};

/// Three-level recurrent stack (1/16, 1/8 plain GRUs, 1/4 time-conditioned
/// GRU) with cross-scale hidden exchange and two decoding heads.
struct UpdateBlockImpl : torch::nn::Module {
  UpdateBlockImpl(int hidden, int motion_channels);

  UpdateOutput forward(const HiddenStates& hidden, const encoders::ContextPyramid& context,
                       const torch::Tensor& motion, const torch::Tensor& time_embedding);

  TimeGru gru16{nullptr}, gru08{nullptr}, gru04{nullptr};
  torch::nn::Conv2d velocity1{nullptr}, velocity2{nullptr};
  torch::nn::Conv2d mask1{nullptr}, mask2{nullptr};
};
TORCH_MODULE(UpdateBlock);

inline constexpr int kUpsampleFactor = 4;

/// Softmax over the 3x3 neighbourhood axis: [B, 144, H, W] ->
/// [B, 9, 4, 4, H, W].
torch::Tensor normalize_mask(const torch::Tensor& logits);

/// Mask of equal neighbour weights.
torch::Tensor uniform_mask(const DisparityField& coarse);

/// Convex upsampling by 4: each fine pixel is a weighted mean of its coarse
/// 3x3 neighbourhood (edge-replicated), then scaled by 4. The mask must be
/// non-negative and sum to one over the neighbourhood axis.
DisparityField upsample_disparity(const DisparityField& coarse, const torch::Tensor& mask);

}  // namespace diffstereo::updater
