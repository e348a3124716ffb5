#pragma once

#include <torch/torch.h>

#include "diffstereo/types.hpp"

namespace diffstereo::volume {

/// Group-wise correlation. out[g, d, y, x] is the mean over the channels of
/// group g of f_l(y, x) * f_r(y, x - d); right features left of the frame
/// are treated as zero.
CostVolume group_correlation(const FeatureMap& left, const FeatureMap& right, int groups,
                             int max_disp);

/// All-pairs correlation, summed over every channel. Result has G = 1.
CostVolume all_pairs_correlation(const FeatureMap& left, const FeatureMap& right, int max_disp);

/// Average-pools the disparity axis by two. An odd trailing slice is kept
/// as-is, so the pooled depth is ceil(D / 2).
CostVolume pool_volume(const CostVolume& volume);

/// Expected disparity under a softmax over the disparity axis of a
/// single-group geometry volume.
DisparityField soft_argmin_disparity(const CostVolume& geometry);

/// Lightweight 3D hourglass that turns a group-wise correlation volume into
/// the single-channel geometry encoding volume.
struct RegularizerImpl : torch::nn::Module {
  RegularizerImpl(int groups, int channels);

  CostVolume forward(const CostVolume& corr);

  torch::nn::Conv3d stem{nullptr};
  torch::nn::Conv3d down1{nullptr};
  torch::nn::Conv3d down2{nullptr};
  torch::nn::ConvTranspose3d up2{nullptr};
  torch::nn::ConvTranspose3d up1{nullptr};
  torch::nn::Conv3d head{nullptr};
};
TORCH_MODULE(Regularizer);

/// The four sources sampled by every geometry lookup. Pooled volumes are
/// built once on construction and only read afterwards.
struct GeometryVolumes {
  GeometryVolumes(CostVolume geometry, CostVolume all_pairs);

  CostVolume geometry;
  CostVolume all_pairs;
  CostVolume geometry_pooled;
  CostVolume all_pairs_pooled;
};

/// Samples each source at d + i (pooled sources at d / 2 + i) for
/// i in [-radius, radius], linearly interpolating along disparity and
/// clamping to [0, D - 1]. Output channel order is source-major:
/// geometry, all-pairs, pooled geometry, pooled all-pairs.
GeometryFeatures lookup_geometry(const GeometryVolumes& volumes, const DisparityField& disparity,
                                 int radius);

GeometryFeatures lookup_geometry(const CostVolume& geometry, const CostVolume& all_pairs,
                                 const DisparityField& disparity, int radius);

/// Linear interpolation of a [B, D, H, W] volume at fractional disparity
/// positions [B, K, H, W]. Exposed for testing. Non-finite positions raise
/// NumericalError.
torch::Tensor sample_disparity_axis(const torch::Tensor& volume, const torch::Tensor& positions);

}  // namespace diffstereo::volume
