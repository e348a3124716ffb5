#pragma once

#include <torch/torch.h>

namespace diffstereo {

// All tensors carry a leading batch axis. Unbatched callers pass B = 1.

/// Matching features, [B, C, H, W], `scale` is the downsampling factor
/// relative to the input image.
struct FeatureMap {
  torch::Tensor data;
  int scale = 4;
};

enum class VolumeKind { corr, geometry, all_pairs, pooled };

/// Correlation volume over disparity hypotheses, [B, G, D, H, W].
struct CostVolume {
  torch::Tensor data;
  int max_disp = 0;
  VolumeKind kind = VolumeKind::corr;

  int64_t groups() const { return data.size(1); }
  int64_t disparities() const { return data.size(2); }
};

/// Single-channel disparity map, [B, 1, H, W], in pixels of its own scale.
struct DisparityField {
  torch::Tensor data;
  int scale = 1;
};

/// Per-pixel displacement predicted by the update operator, [B, 1, H, W].
struct VelocityField {
  torch::Tensor data;
};

/// Looked-up geometry features, [B, 4 * (2r + 1), H, W].
struct GeometryFeatures {
  torch::Tensor data;
  int radius = 0;
};

}  // namespace diffstereo
