#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include <torch/torch.h>

namespace diffstereo::dataio {

/// One rectified pair. Images are [3, H, W] in [0, 1]; gt and mask are
/// [1, H, W] (float32 / bool).
struct StereoSample {
  torch::Tensor left;
  torch::Tensor right;
  torch::Tensor gt_disparity;
  torch::Tensor valid_mask;
};

struct SynthConfig {
  uint64_t seed = 0;
  int height = 80;
  int width = 160;
  double max_disp = 24.0;  // full-resolution pixels
  int octaves = 4;
  int shapes = 6;
  bool subpixel = false;   // integer layer disparities unless set

  void validate() const;
};

/// Layered scene of textured rectangles and ellipses at constant
/// disparities over a background plane. The right view is rendered from the
/// same continuous layer textures, so on non-occluded pixels it matches the
/// left view exactly under the ground-truth warp. Deterministic per seed.
StereoSample generate_pair(const SynthConfig& config);

/// Same crop window for all four fields.
StereoSample random_crop(const StereoSample& sample, int height, int width, uint64_t seed);

struct PfmImage {
  torch::Tensor data;   // [H, W] float32, non-finite entries replaced by 0
  torch::Tensor valid;  // [H, W] bool, false where the file held NaN/inf
};

/// Reads "Pf" (single channel) or "PF" (first channel kept) maps in either
/// byte order.
PfmImage read_pfm(const std::filesystem::path& path);

/// Writes a little-endian "Pf" map with bottom-to-top rows.
void write_pfm(const std::filesystem::path& path, const torch::Tensor& field);

/// 8-bit image to [3, H, W] RGB in [0, 1]. Grayscale inputs are replicated.
torch::Tensor read_image(const std::filesystem::path& path);
void write_image(const std::filesystem::path& path, const torch::Tensor& rgb);

/// Colour-mapped 8-bit rendering of an [H, W] disparity map.
void write_disparity_png(const std::filesystem::path& path, const torch::Tensor& disparity,
                         double max_disp);

struct ManifestEntry {
  std::filesystem::path left;
  std::filesystem::path right;
  std::filesystem::path gt;
};

/// One "left right gt" triple per line; '#' starts a comment. Relative paths
/// resolve against the manifest's directory.
std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path);
void write_manifest(const std::filesystem::path& path, const std::vector<ManifestEntry>& entries);

class Dataset {
 public:
  virtual ~Dataset() = default;
  virtual size_t size() const = 0;
  virtual StereoSample get(size_t index) const = 0;
};

/// `count` synthetic pairs; sample i uses a seed derived from (seed, i).
class SyntheticDataset final : public Dataset {
 public:
  SyntheticDataset(SynthConfig base, size_t count);
  size_t size() const override { return count_; }
  StereoSample get(size_t index) const override;

 private:
  SynthConfig base_;
  size_t count_;
};

class ManifestDataset final : public Dataset {
 public:
  explicit ManifestDataset(const std::filesystem::path& manifest);
  size_t size() const override { return entries_.size(); }
  StereoSample get(size_t index) const override;

 private:
  std::vector<ManifestEntry> entries_;
};

/// Permutation of [0, n) determined by (seed, epoch).
std::vector<size_t> epoch_order(size_t n, uint64_t seed, uint64_t epoch);

/// Stable 64-bit mix of two values, used to derive per-sample seeds.
uint64_t mix_seed(uint64_t a, uint64_t b);

struct Batch {
  torch::Tensor left;   // [B, 3, H, W]
  torch::Tensor right;  // [B, 3, H, W]
  torch::Tensor gt;     // [B, 1, H, W]
  torch::Tensor valid;  // [B, 1, H, W] bool
};

Batch collate(const std::vector<StereoSample>& samples);

/// Writes every sample of a dataset to PNG/PFM files plus a manifest.
void export_dataset(const Dataset& dataset, const std::filesystem::path& directory);

}  // namespace diffstereo::dataio
