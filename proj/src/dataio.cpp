#include "diffstereo/dataio.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>
#include <sstream>

#include <fmt/format.h>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "diffstereo/errors.hpp"

namespace diffstereo::dataio {

namespace fs = std::filesystem;
using torch::indexing::Slice;

namespace {

// Uniform double in [0, 1) from the 53 high bits; std distributions are
// implementation-defined, the engine output is not.
double uniform01(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

double uniform(std::mt19937_64& rng, double lo, double hi) { return lo + (hi - lo) * uniform01(rng); }

uint64_t hash_lattice(int64_t x, int64_t y, uint64_t seed) {
  return mix_seed(mix_seed(seed, static_cast<uint64_t>(x)), static_cast<uint64_t>(y));
}

double lattice_value(int64_t x, int64_t y, uint64_t seed) {
  return static_cast<double>(hash_lattice(x, y, seed) >> 11) * 0x1.0p-53;
}

double smoothstep(double t) { return t * t * (3.0 - 2.0 * t); }

// Continuous value noise in [0, 1].
double value_noise(double x, double y, uint64_t seed) {
  const double fx = std::floor(x);
  const double fy = std::floor(y);
  const auto ix = static_cast<int64_t>(fx);
  const auto iy = static_cast<int64_t>(fy);
  const double tx = smoothstep(x - fx);
  const double ty = smoothstep(y - fy);
  const double a = lattice_value(ix, iy, seed);
  const double b = lattice_value(ix + 1, iy, seed);
  const double c = lattice_value(ix, iy + 1, seed);
  const double d = lattice_value(ix + 1, iy + 1, seed);
  return (a + (b - a) * tx) + ((c + (d - c) * tx) - (a + (b - a) * tx)) * ty;
}

enum class ShapeKind { plane, rectangle, ellipse };

struct Layer {
  ShapeKind kind = ShapeKind::plane;
  double cx = 0, cy = 0, rx = 0, ry = 0;
  double disparity = 0;
  double base[3] = {0.5, 0.5, 0.5};
  double contrast = 0.4;
  double frequency = 1.0 / 16.0;
  uint64_t texture_seed = 0;

  // Pixel-centre membership in left-image coordinates.
  bool contains(double x, double y) const {
    switch (kind) {
      case ShapeKind::plane:
        return true;
      case ShapeKind::rectangle:
        return std::abs(x - cx) <= rx && std::abs(y - cy) <= ry;
      case ShapeKind::ellipse: {
        const double u = (x - cx) / rx;
        const double v = (y - cy) / ry;
        return u * u + v * v <= 1.0;
      }
    }
    return false;
  }

  void color(double x, double y, int octaves, float out[3]) const {
    for (int ch = 0; ch < 3; ++ch) {
      double n = 0.0;
      double amp = 1.0;
      double norm = 0.0;
      double f = frequency;
      for (int o = 0; o < octaves; ++o) {
        n += amp * value_noise(x * f, y * f, mix_seed(texture_seed, 16 * ch + o));
        norm += amp;
        amp *= 0.6;
        f *= 2.0;
      }
      const double value = base[ch] + contrast * (n / norm - 0.5) * 2.0;
      out[ch] = static_cast<float>(std::clamp(value, 0.0, 1.0));
    }
  }
};

std::vector<Layer> make_layers(const SynthConfig& cfg, std::mt19937_64& rng) {
  const double w = cfg.width;
  const double h = cfg.height;
  auto pick_disparity = [&](double lo, double hi) {
    double d = uniform(rng, lo, hi);
    return cfg.subpixel ? d : std::round(d);
  };
  auto texture = [&](Layer& layer) {
    for (double& c : layer.base) c = uniform(rng, 0.2, 0.8);
    layer.contrast = uniform01(rng) < 0.1 ? 0.05 : uniform(rng, 0.25, 0.5);
    layer.frequency = 1.0 / uniform(rng, 6.0, 16.0);
    layer.texture_seed = rng();
  };

  std::vector<Layer> layers;
  Layer background;
  background.kind = ShapeKind::plane;
  background.disparity = pick_disparity(0.0, 0.3 * cfg.max_disp);
  texture(background);
  layers.push_back(background);

  for (int i = 0; i < cfg.shapes; ++i) {
    Layer layer;
    layer.kind = uniform01(rng) < 0.5 ? ShapeKind::rectangle : ShapeKind::ellipse;
    layer.cx = uniform(rng, 0.0, w);
    layer.cy = uniform(rng, 0.0, h);
    layer.rx = uniform(rng, 0.08 * w, 0.3 * w);
    layer.ry = uniform(rng, 0.1 * h, 0.4 * h);
    layer.disparity = pick_disparity(background.disparity + 1.0, cfg.max_disp);
    texture(layer);
    layers.push_back(layer);
  }
  // Nearer layers (larger disparity) are drawn last; ties keep draw order.
  std::stable_sort(layers.begin(), layers.end(),
                   [](const Layer& a, const Layer& b) { return a.disparity < b.disparity; });
  return layers;
}

// Index of the front-most layer visible at left-frame position (x, y) seen
// from a view shifted by `shift` (0 for left, 1 for right).
int front_layer(const std::vector<Layer>& layers, double x, double y, double shift) {
  for (int i = static_cast<int>(layers.size()) - 1; i >= 0; --i) {
    if (layers[i].contains(x + shift * layers[i].disparity, y)) return i;
  }
  return 0;
}

template <typename T>
T read_scalar(std::istream& in, bool little_endian) {
  T value;
  in.read(reinterpret_cast<char*>(&value), sizeof(T));
  const bool host_little = std::endian::native == std::endian::little;
  if (host_little != little_endian) {
    auto* bytes = reinterpret_cast<char*>(&value);
    std::reverse(bytes, bytes + sizeof(T));
  }
  return value;
}

fs::path resolve(const fs::path& base, const std::string& entry) {
  fs::path p(entry);
  return p.is_absolute() ? p : base / p;
}

}  // namespace

uint64_t mix_seed(uint64_t a, uint64_t b) {
  uint64_t z = a + 0x9E3779B97F4A7C15ULL * (b + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

void SynthConfig::validate() const {
  if (height < 32 || width < 32 || height % 16 != 0 || width % 16 != 0) {
    throw ConfigError(
        fmt::format("synthetic size {}x{} must be >= 32 and divisible by 16", height, width));
  }
  if (!(max_disp >= 0.0) || max_disp >= width / 4.0) {
    throw ConfigError(
        fmt::format("max_disp {} too large for width {} (limit W / 4)", max_disp, width));
  }
  if (octaves < 1 || shapes < 0) throw ConfigError("octaves must be >= 1 and shapes >= 0");
}

StereoSample generate_pair(const SynthConfig& cfg) {
  cfg.validate();
  std::mt19937_64 rng(cfg.seed);
  const auto layers = make_layers(cfg, rng);
  const int h = cfg.height;
  const int w = cfg.width;

  auto left = torch::empty({3, h, w}, torch::kFloat32);
  auto right = torch::empty({3, h, w}, torch::kFloat32);
  auto gt = torch::empty({1, h, w}, torch::kFloat32);
  auto valid = torch::empty({1, h, w}, torch::kBool);
  auto l = left.accessor<float, 3>();
  auto r = right.accessor<float, 3>();
  auto g = gt.accessor<float, 3>();
  auto m = valid.accessor<bool, 3>();

  float rgb[3];
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const int li = front_layer(layers, x, y, 0.0);
      const Layer& lay = layers[li];
      lay.color(x, y, cfg.octaves, rgb);
      for (int c = 0; c < 3; ++c) l[c][y][x] = rgb[c];
      g[0][y][x] = static_cast<float>(lay.disparity);
      const double xr = x - lay.disparity;
      m[0][y][x] = xr >= 0.0 && front_layer(layers, xr, y, 1.0) == li;

      const int ri = front_layer(layers, x, y, 1.0);
      layers[ri].color(x + layers[ri].disparity, y, cfg.octaves, rgb);
      for (int c = 0; c < 3; ++c) r[c][y][x] = rgb[c];
    }
  }
  return {left, right, gt, valid};
}

StereoSample random_crop(const StereoSample& sample, int height, int width, uint64_t seed) {
  const auto h = sample.left.size(1);
  const auto w = sample.left.size(2);
  if (height < 1 || width < 1 || height > h || width > w) {
    throw std::invalid_argument(
        fmt::format("crop {}x{} does not fit image {}x{}", height, width, h, w));
  }
  std::mt19937_64 rng(seed);
  const auto y0 = static_cast<int64_t>(uniform01(rng) * static_cast<double>(h - height + 1));
  const auto x0 = static_cast<int64_t>(uniform01(rng) * static_cast<double>(w - width + 1));
  auto crop = [&](const torch::Tensor& t) {
    return t.index({Slice(), Slice(y0, y0 + height), Slice(x0, x0 + width)}).clone();
  };
  return {crop(sample.left), crop(sample.right), crop(sample.gt_disparity), crop(sample.valid_mask)};
}

PfmImage read_pfm(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(fmt::format("cannot open {}", path.string()));
  std::string magic;
  int64_t width = 0;
  int64_t height = 0;
  double scale = 0.0;
  in >> magic >> width >> height >> scale;
  if (!in || (magic != "Pf" && magic != "PF") || width <= 0 || height <= 0 || scale == 0.0) {
    throw FormatError(fmt::format("malformed PFM header in {}", path.string()));
  }
  in.get();  // single whitespace before the raster
  const int channels = magic == "PF" ? 3 : 1;
  const bool little = scale < 0.0;

  auto data = torch::empty({height, width}, torch::kFloat32);
  auto valid = torch::empty({height, width}, torch::kBool);
  auto d = data.accessor<float, 2>();
  auto v = valid.accessor<bool, 2>();
  for (int64_t row = 0; row < height; ++row) {
    const int64_t y = height - 1 - row;
    for (int64_t x = 0; x < width; ++x) {
      float value = read_scalar<float>(in, little);
      for (int c = 1; c < channels; ++c) read_scalar<float>(in, little);
      const bool finite = std::isfinite(value);
      d[y][x] = finite ? value : 0.0f;
      v[y][x] = finite;
    }
  }
  if (!in) throw FormatError(fmt::format("truncated PFM raster in {}", path.string()));
  return {data, valid};
}

void write_pfm(const fs::path& path, const torch::Tensor& field) {
  auto f = field.squeeze().to(torch::kFloat32).contiguous();
  if (f.dim() != 2) throw ShapeError("write_pfm expects an [H, W] field");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError(fmt::format("cannot write {}", path.string()));
  const auto h = f.size(0);
  const auto w = f.size(1);
  out << "Pf\n" << w << ' ' << h << "\n-1\n";
  const float* p = f.data_ptr<float>();
  for (int64_t row = h - 1; row >= 0; --row) {
    for (int64_t x = 0; x < w; ++x) {
      uint32_t bits = std::bit_cast<uint32_t>(p[row * w + x]);
      char bytes[4] = {static_cast<char>(bits & 0xFF), static_cast<char>((bits >> 8) & 0xFF),
                       static_cast<char>((bits >> 16) & 0xFF),
                       static_cast<char>((bits >> 24) & 0xFF)};
      out.write(bytes, 4);
    }
  }
  if (!out) throw FormatError(fmt::format("failed writing {}", path.string()));
}

torch::Tensor read_image(const fs::path& path) {
  cv::Mat img = cv::imread(path.string(), cv::IMREAD_COLOR);
  if (img.empty()) throw FormatError(fmt::format("cannot read image {}", path.string()));
  cv::Mat rgb;
  cv::cvtColor(img, rgb, cv::COLOR_BGR2RGB);
  auto t = torch::from_blob(rgb.data, {rgb.rows, rgb.cols, 3}, torch::kUInt8).clone();
  return t.permute({2, 0, 1}).to(torch::kFloat32).div(255.0).contiguous();
}

void write_image(const fs::path& path, const torch::Tensor& rgb) {
  if (rgb.dim() != 3 || rgb.size(0) != 3) throw ShapeError("write_image expects [3, H, W]");
  auto bytes = (rgb.detach().to(torch::kFloat32).clamp(0.0, 1.0) * 255.0)
                   .round()
                   .to(torch::kUInt8)
                   .permute({1, 2, 0})
                   .contiguous();
  cv::Mat view(static_cast<int>(bytes.size(0)), static_cast<int>(bytes.size(1)), CV_8UC3,
               bytes.data_ptr<uint8_t>());
  cv::Mat bgr;
  cv::cvtColor(view, bgr, cv::COLOR_RGB2BGR);
  if (!cv::imwrite(path.string(), bgr)) {
    throw FormatError(fmt::format("cannot write image {}", path.string()));
  }
}

void write_disparity_png(const fs::path& path, const torch::Tensor& disparity, double max_disp) {
  auto d = disparity.detach().squeeze().to(torch::kFloat32);
  if (d.dim() != 2) throw ShapeError("write_disparity_png expects an [H, W] field");
  auto bytes =
      (d.clamp(0.0, max_disp) * (255.0 / std::max(max_disp, 1e-6))).round().to(torch::kUInt8).contiguous();
  cv::Mat gray(static_cast<int>(bytes.size(0)), static_cast<int>(bytes.size(1)), CV_8UC1,
               bytes.data_ptr<uint8_t>());
  cv::Mat colored;
  cv::applyColorMap(gray, colored, cv::COLORMAP_TURBO);
  if (!cv::imwrite(path.string(), colored)) {
    throw FormatError(fmt::format("cannot write image {}", path.string()));
  }
}

std::vector<ManifestEntry> read_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError(fmt::format("cannot open manifest {}", path.string()));
  const fs::path base = path.parent_path();
  std::vector<ManifestEntry> entries;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    std::istringstream fields(line);
    std::vector<std::string> parts;
    for (std::string s; fields >> s;) parts.push_back(s);
    if (parts.empty()) continue;
    if (parts.size() != 3) {
      throw FormatError(
          fmt::format("{}:{}: expected 'left right gt', got {} fields", path.string(), line_no,
                      parts.size()));
    }
    entries.push_back({resolve(base, parts[0]), resolve(base, parts[1]), resolve(base, parts[2])});
  }
  return entries;
}

void write_manifest(const fs::path& path, const std::vector<ManifestEntry>& entries) {
  std::ofstream out(path);
  if (!out) throw FormatError(fmt::format("cannot write manifest {}", path.string()));
  for (const auto& e : entries) {
    out << e.left.string() << ' ' << e.right.string() << ' ' << e.gt.string() << '\n';
  }
}

SyntheticDataset::SyntheticDataset(SynthConfig base, size_t count)
    : base_(std::move(base)), count_(count) {
  base_.validate();
}

StereoSample SyntheticDataset::get(size_t index) const {
  if (index >= count_) throw std::out_of_range("synthetic dataset index out of range");
  SynthConfig cfg = base_;
  cfg.seed = mix_seed(base_.seed, index);
  return generate_pair(cfg);
}

ManifestDataset::ManifestDataset(const fs::path& manifest) : entries_(read_manifest(manifest)) {}

StereoSample ManifestDataset::get(size_t index) const {
  const auto& e = entries_.at(index);
  auto left = read_image(e.left);
  auto right = read_image(e.right);
  if (!left.sizes().equals(right.sizes())) {
    throw ShapeError(fmt::format("{} and {} differ in size", e.left.string(), e.right.string()));
  }
  auto gt = read_pfm(e.gt);
  if (gt.data.size(0) != left.size(1) || gt.data.size(1) != left.size(2)) {
    throw ShapeError(fmt::format("{} does not match image size", e.gt.string()));
  }
  return {left, right, gt.data.unsqueeze(0), gt.valid.logical_and(gt.data >= 0).unsqueeze(0)};
}

std::vector<size_t> epoch_order(size_t n, uint64_t seed, uint64_t epoch) {
  std::vector<size_t> order(n);
  for (size_t i = 0; i < n; ++i) order[i] = i;
  std::mt19937_64 rng(mix_seed(seed, epoch));
  for (size_t i = n; i > 1; --i) {
    const auto j = static_cast<size_t>(uniform01(rng) * static_cast<double>(i));
    std::swap(order[i - 1], order[j]);
  }
  return order;
}

Batch collate(const std::vector<StereoSample>& samples) {
  if (samples.empty()) throw std::invalid_argument("collate: empty batch");
  std::vector<torch::Tensor> l, r, g, v;
  for (const auto& s : samples) {
    l.push_back(s.left);
    r.push_back(s.right);
    g.push_back(s.gt_disparity);
    v.push_back(s.valid_mask);
  }
  return {torch::stack(l), torch::stack(r), torch::stack(g), torch::stack(v)};
}

void export_dataset(const Dataset& dataset, const fs::path& directory) {
  fs::create_directories(directory);
  std::vector<ManifestEntry> entries;
  for (size_t i = 0; i < dataset.size(); ++i) {
    auto s = dataset.get(i);
    const auto stem = fmt::format("{:05d}", i);
    ManifestEntry e{directory / (stem + "_left.png"), directory / (stem + "_right.png"),
                    directory / (stem + "_disp.pfm")};
    write_image(e.left, s.left);
    write_image(e.right, s.right);
    auto gt = s.gt_disparity.squeeze(0).clone();
    gt.masked_fill_(s.valid_mask.squeeze(0).logical_not(), std::nanf(""));
    write_pfm(e.gt, gt);
    entries.push_back({e.left.filename(), e.right.filename(), e.gt.filename()});
  }
  write_manifest(directory / "manifest.txt", entries);
}

}  // namespace diffstereo::dataio
