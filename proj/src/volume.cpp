#include "diffstereo/volume.hpp"

#include <fmt/format.h>
#include <fmt/ranges.h>

#include "diffstereo/errors.hpp"

namespace diffstereo::volume {

namespace nn = torch::nn;
using torch::indexing::None;
using torch::indexing::Slice;

namespace {

void check_feature_pair(const FeatureMap& left, const FeatureMap& right, int max_disp) {
  if (left.data.dim() != 4 || !left.data.sizes().equals(right.data.sizes())) {
    throw ShapeError(fmt::format("feature shape mismatch: [{}] vs [{}]",
                                 fmt::join(left.data.sizes(), ","),
                                 fmt::join(right.data.sizes(), ",")));
  }
  if (max_disp < 1) {
    throw ShapeError(fmt::format("max_disp must be >= 1, got {}", max_disp));
  }
}

// Output size after a stride-2 transposed conv can overshoot odd inputs.
torch::Tensor crop_like(const torch::Tensor& x, const torch::Tensor& ref) {
  return x.index({Slice(), Slice(), Slice(0, ref.size(2)), Slice(0, ref.size(3)),
                  Slice(0, ref.size(4))});
}

}  // namespace

CostVolume group_correlation(const FeatureMap& left, const FeatureMap& right, int groups,
                             int max_disp) {
  check_feature_pair(left, right, max_disp);
  const auto b = left.data.size(0);
  const auto c = left.data.size(1);
  const auto h = left.data.size(2);
  const auto w = left.data.size(3);
  if (groups < 1 || c % groups != 0) {
    throw ShapeError(fmt::format("{} channels not divisible into {} groups", c, groups));
  }
  const auto per_group = c / groups;
  auto out = torch::zeros({b, groups, max_disp, h, w}, left.data.options());
  for (int d = 0; d < max_disp && d < w; ++d) {
    auto prod = left.data.index({Slice(), Slice(), Slice(), Slice(d, None)}) *
                right.data.index({Slice(), Slice(), Slice(), Slice(0, w - d)});
    auto corr = prod.view({b, groups, per_group, h, w - d}).mean(2);
    out.index_put_({Slice(), Slice(), d, Slice(), Slice(d, None)}, corr);
  }
  return {out, max_disp, VolumeKind::corr};
}

CostVolume all_pairs_correlation(const FeatureMap& left, const FeatureMap& right, int max_disp) {
  check_feature_pair(left, right, max_disp);
  const auto b = left.data.size(0);
  const auto h = left.data.size(2);
  const auto w = left.data.size(3);
  auto out = torch::zeros({b, 1, max_disp, h, w}, left.data.options());
  for (int d = 0; d < max_disp && d < w; ++d) {
    auto corr = (left.data.index({Slice(), Slice(), Slice(), Slice(d, None)}) *
                 right.data.index({Slice(), Slice(), Slice(), Slice(0, w - d)}))
                    .sum(1);
    out.index_put_({Slice(), 0, d, Slice(), Slice(d, None)}, corr);
  }
  return {out, max_disp, VolumeKind::all_pairs};
}

CostVolume pool_volume(const CostVolume& volume) {
  if (volume.kind == VolumeKind::pooled) {
    throw ShapeError("volume is already pooled");
  }
  auto x = volume.data;
  const auto depth = x.size(2);
  if (depth % 2 == 1) {
    x = torch::cat({x, x.index({Slice(), Slice(), Slice(depth - 1, depth)})}, 2);
  }
  auto pooled = 0.5 * (x.index({Slice(), Slice(), Slice(0, None, 2)}) +
                       x.index({Slice(), Slice(), Slice(1, None, 2)}));
  return {pooled, static_cast<int>((volume.max_disp + 1) / 2), VolumeKind::pooled};
}

DisparityField soft_argmin_disparity(const CostVolume& geometry) {
  if (geometry.kind != VolumeKind::geometry) {
    throw ShapeError("soft_argmin_disparity expects a geometry volume");
  }
  if (geometry.groups() != 1) {
    throw ShapeError("geometry volume must have a single group");
  }
  auto logits = geometry.data.select(1, 0);  // [B, D, H, W]
  auto prob = torch::softmax(logits, 1);
  auto levels = torch::arange(logits.size(1), logits.options()).view({1, -1, 1, 1});
  return {(prob * levels).sum(1, /*keepdim=*/true), 4};
}

RegularizerImpl::RegularizerImpl(int groups, int channels) {
  auto conv = [](int in, int out, int stride) {
    return nn::Conv3d(nn::Conv3dOptions(in, out, 3).stride(stride).padding(1));
  };
  stem = register_module("stem", conv(groups, channels, 1));
  down1 = register_module("down1", conv(channels, 2 * channels, 2));
  down2 = register_module("down2", conv(2 * channels, 4 * channels, 2));
  up2 = register_module(
      "up2", nn::ConvTranspose3d(
                 nn::ConvTranspose3dOptions(4 * channels, 2 * channels, 4).stride(2).padding(1)));
  up1 = register_module(
      "up1", nn::ConvTranspose3d(
                 nn::ConvTranspose3dOptions(2 * channels, channels, 4).stride(2).padding(1)));
  head = register_module("head", conv(channels, 1, 1));
}

CostVolume RegularizerImpl::forward(const CostVolume& corr) {
  if (corr.kind != VolumeKind::corr) {
    throw ShapeError("regularize_volume expects a group-wise correlation volume");
  }
  auto act = [](const torch::Tensor& x) { return torch::leaky_relu(x, 0.1); };
  auto s0 = act(stem->forward(corr.data));
  auto s1 = act(down1->forward(s0));
  auto s2 = act(down2->forward(s1));
  auto u1 = act(crop_like(up2->forward(s2), s1) + s1);
  auto u0 = act(crop_like(up1->forward(u1), s0) + s0);
  return {head->forward(u0), corr.max_disp, VolumeKind::geometry};
}

GeometryVolumes::GeometryVolumes(CostVolume geometry_in, CostVolume all_pairs_in)
    : geometry(std::move(geometry_in)),
      all_pairs(std::move(all_pairs_in)),
      geometry_pooled(pool_volume(geometry)),
      all_pairs_pooled(pool_volume(all_pairs)) {
  if (geometry.groups() != 1 || all_pairs.groups() != 1) {
    throw ShapeError("geometry lookups need single-group volumes");
  }
}

torch::Tensor sample_disparity_axis(const torch::Tensor& volume, const torch::Tensor& positions) {
  const auto depth = volume.size(1);
  if (depth == 1) {
    return volume.expand_as(positions).clone();
  }
  if (!torch::isfinite(positions).all().item<bool>()) {
    throw NumericalError("non-finite disparity passed to the volume lookup");
  }
  auto p = positions.clamp(0.0, static_cast<double>(depth - 1));
  auto lower = p.floor().clamp(0.0, static_cast<double>(depth - 2));
  auto frac = p - lower;
  auto idx = lower.to(torch::kLong);
  auto v0 = volume.gather(1, idx);
  auto v1 = volume.gather(1, idx + 1);
  return v0 + frac * (v1 - v0);
}

GeometryFeatures lookup_geometry(const GeometryVolumes& volumes, const DisparityField& disparity,
                                 int radius) {
  if (radius < 0) {
    throw ShapeError("lookup radius must be >= 0");
  }
  const auto& d = disparity.data;
  if (d.dim() != 4 || d.size(1) != 1 || d.size(2) != volumes.geometry.data.size(3) ||
      d.size(3) != volumes.geometry.data.size(4)) {
    throw ShapeError("disparity and volumes differ in spatial size");
  }
  auto offsets = torch::arange(-radius, radius + 1, d.options()).view({1, -1, 1, 1});
  auto full = d + offsets;
  auto half = d / 2 + offsets;
  std::vector<torch::Tensor> parts{
      sample_disparity_axis(volumes.geometry.data.select(1, 0), full),
      sample_disparity_axis(volumes.all_pairs.data.select(1, 0), full),
      sample_disparity_axis(volumes.geometry_pooled.data.select(1, 0), half),
      sample_disparity_axis(volumes.all_pairs_pooled.data.select(1, 0), half),
  };
  return {torch::cat(parts, 1), radius};
}

GeometryFeatures lookup_geometry(const CostVolume& geometry, const CostVolume& all_pairs,
                                 const DisparityField& disparity, int radius) {
  return lookup_geometry(GeometryVolumes(geometry, all_pairs), disparity, radius);
}

}  // namespace diffstereo::volume
