#pragma once

#include <optional>
#include <vector>

#include <torch/torch.h>

#include "diffstereo/types.hpp"

namespace diffstereo::objectives {

struct LossWeights {
  double gamma = 0.9;
  double lambda1 = 1.0;
  double lambda2 = 0.5;
  int ssim_window = 7;
  double dynamic_range = 64.0;  // L in the SSIM constants, in disparity pixels

  void validate() const;
};

// Masks are boolean or {0, 1} tensors broadcastable to the disparity shape.
// An undefined mask means every pixel is valid.

/// Masked mean of smooth-L1(pred - gt).
torch::Tensor loss_init(const DisparityField& initial, const DisparityField& ground_truth,
                        const torch::Tensor& mask = {});

/// sum_i gamma^(N - i) * masked-mean |d_i - gt| over the N updated fields.
torch::Tensor loss_pixel(const std::vector<DisparityField>& sequence,
                         const DisparityField& ground_truth, double gamma,
                         const torch::Tensor& mask = {});

/// Per-window SSIM map over all fully-contained windows, uniform weights.
torch::Tensor ssim_map(const torch::Tensor& x, const torch::Tensor& y, int window,
                       double dynamic_range);

/// 1 - mean windowed SSIM; lies in [0, 2].
torch::Tensor loss_diff(const DisparityField& prediction, const DisparityField& ground_truth,
                        const LossWeights& weights);

struct LossComponents {
  torch::Tensor init;
  torch::Tensor pixel;
  torch::Tensor diff;
};

/// lambda1 * init + pixel + lambda2 * diff. Throws NumericalError if any
/// component is non-finite.
torch::Tensor total_loss(const LossComponents& components, const LossWeights& weights);

struct MetricReport {
  double epe = 0.0;
  double bad1 = 0.0;
  double bad3 = 0.0;
  double d1_all = 0.0;
  std::optional<double> d1_fg;
  std::optional<double> d1_bg;
  int64_t pixels = 0;
  int64_t fg_pixels = 0;
  int64_t bg_pixels = 0;
};

/// EPE, bad-k and D1 (error > 3 px and > 5 % of gt) over valid pixels.
/// `foreground` optionally splits D1 into foreground/background regions.
MetricReport metrics(const torch::Tensor& prediction, const torch::Tensor& ground_truth,
                     const torch::Tensor& mask = {}, const torch::Tensor& foreground = {});

/// Pixel-weighted average of per-sample reports.
MetricReport merge(const std::vector<MetricReport>& reports);

/// Fills every invalid pixel of an [H, W] map with the value of its nearest
/// valid pixel (Euclidean distance; ties go to the smallest row-major index).
torch::Tensor infill_gt_nearest(const torch::Tensor& sparse, const torch::Tensor& mask);

}  // namespace diffstereo::objectives
