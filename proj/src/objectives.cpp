#include "diffstereo/objectives.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <fmt/format.h>
#include <fmt/ranges.h>

#include "diffstereo/errors.hpp"

namespace diffstereo::objectives {

namespace F = torch::nn::functional;

namespace {

torch::Tensor mask_like(const torch::Tensor& mask, const torch::Tensor& ref) {
  if (!mask.defined()) return torch::ones_like(ref);
  return mask.to(ref.dtype()).expand_as(ref);
}

torch::Tensor masked_mean(const torch::Tensor& values, const torch::Tensor& mask) {
  auto m = mask_like(mask, values);
  auto count = m.sum();
  if (count.item<double>() <= 0.0) {
    throw std::invalid_argument("validity mask selects no pixels");
  }
  return (values * m).sum() / count;
}

void check_same_shape(const torch::Tensor& a, const torch::Tensor& b, const char* what) {
  if (!a.sizes().equals(b.sizes())) {
    throw ShapeError(fmt::format("{}: shape mismatch [{}] vs [{}]", what,
                                 fmt::join(a.sizes(), ","), fmt::join(b.sizes(), ",")));
  }
}

}  // namespace

void LossWeights::validate() const {
  if (!(gamma > 0.0 && gamma <= 1.0)) throw ConfigError("loss gamma must be in (0, 1]");
  if (lambda1 < 0.0 || lambda2 < 0.0) throw ConfigError("loss weights must be >= 0");
  if (ssim_window < 3 || ssim_window % 2 == 0) {
    throw ConfigError("ssim window must be odd and >= 3");
  }
  if (!(dynamic_range > 0.0)) throw ConfigError("ssim dynamic range must be > 0");
}

torch::Tensor loss_init(const DisparityField& initial, const DisparityField& ground_truth,
                        const torch::Tensor& mask) {
  check_same_shape(initial.data, ground_truth.data, "loss_init");
  auto residual = (initial.data - ground_truth.data).abs();
  auto smooth = torch::where(residual < 1.0, 0.5 * residual * residual, residual - 0.5);
  return masked_mean(smooth, mask);
}

torch::Tensor loss_pixel(const std::vector<DisparityField>& sequence,
                         const DisparityField& ground_truth, double gamma,
                         const torch::Tensor& mask) {
  if (sequence.empty()) throw std::invalid_argument("loss_pixel: empty sequence");
  const auto n = static_cast<int>(sequence.size());
  torch::Tensor total;
  for (int i = 0; i < n; ++i) {
    check_same_shape(sequence[i].data, ground_truth.data, "loss_pixel");
    auto term = std::pow(gamma, n - 1 - i) *
                masked_mean((sequence[i].data - ground_truth.data).abs(), mask);
    total = total.defined() ? total + term : term;
  }
  return total;
}

torch::Tensor ssim_map(const torch::Tensor& x, const torch::Tensor& y, int window,
                       double dynamic_range) {
  check_same_shape(x, y, "ssim");
  if (x.size(-1) < window || x.size(-2) < window) {
    throw ShapeError(fmt::format("image {}x{} smaller than ssim window {}", x.size(-2), x.size(-1),
                                 window));
  }
  const double c1 = std::pow(0.01 * dynamic_range, 2);
  const double c2 = std::pow(0.03 * dynamic_range, 2);
  auto pool = [window](const torch::Tensor& t) {
    return F::avg_pool2d(t, F::AvgPool2dFuncOptions(window).stride(1));
  };
  auto mu_x = pool(x);
  auto mu_y = pool(y);
  auto var_x = pool(x * x) - mu_x * mu_x;
  auto var_y = pool(y * y) - mu_y * mu_y;
  auto cov = pool(x * y) - mu_x * mu_y;
  return ((2 * mu_x * mu_y + c1) * (2 * cov + c2)) /
         ((mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2));
}

torch::Tensor loss_diff(const DisparityField& prediction, const DisparityField& ground_truth,
                        const LossWeights& weights) {
  return 1.0 - ssim_map(prediction.data, ground_truth.data, weights.ssim_window,
                        weights.dynamic_range)
                   .mean();
}

torch::Tensor total_loss(const LossComponents& c, const LossWeights& weights) {
  for (const auto* part : {&c.init, &c.pixel, &c.diff}) {
    if (part->defined() && !torch::isfinite(*part).all().item<bool>()) {
      throw NumericalError("non-finite loss component");
    }
  }
  auto zero = [&](const torch::Tensor& t) {
    return t.defined() ? t : torch::zeros({}, torch::kFloat64);
  };
  return weights.lambda1 * zero(c.init) + zero(c.pixel) + weights.lambda2 * zero(c.diff);
}

MetricReport metrics(const torch::Tensor& prediction, const torch::Tensor& ground_truth,
                     const torch::Tensor& mask, const torch::Tensor& foreground) {
  check_same_shape(prediction, ground_truth, "metrics");
  torch::NoGradGuard guard;
  auto pred = prediction.to(torch::kFloat64).flatten();
  auto gt = ground_truth.to(torch::kFloat64).flatten();
  auto valid = mask.defined() ? mask.to(torch::kBool).expand_as(prediction).flatten()
                              : torch::ones_like(pred, torch::kBool);
  auto err = (pred - gt).abs().masked_select(valid);
  auto gt_valid = gt.masked_select(valid);
  MetricReport r;
  r.pixels = err.numel();
  if (r.pixels == 0) throw std::invalid_argument("metrics: validity mask selects no pixels");
  const double n = static_cast<double>(r.pixels);
  auto outlier = (err > 3.0).logical_and(err > 0.05 * gt_valid);
  r.epe = err.mean().item<double>();
  r.bad1 = 100.0 * (err > 1.0).sum().item<double>() / n;
  r.bad3 = 100.0 * (err > 3.0).sum().item<double>() / n;
  r.d1_all = 100.0 * outlier.sum().item<double>() / n;
  if (foreground.defined()) {
    auto fg = foreground.to(torch::kBool).expand_as(prediction).flatten().masked_select(valid);
    r.fg_pixels = fg.sum().item<int64_t>();
    r.bg_pixels = r.pixels - r.fg_pixels;
    if (r.fg_pixels > 0) {
      r.d1_fg = 100.0 * outlier.logical_and(fg).sum().item<double>() / r.fg_pixels;
    }
    if (r.bg_pixels > 0) {
      r.d1_bg = 100.0 * outlier.logical_and(fg.logical_not()).sum().item<double>() / r.bg_pixels;
    }
  }
  return r;
}

MetricReport merge(const std::vector<MetricReport>& reports) {
  MetricReport out;
  double fg_bad = 0.0;
  double bg_bad = 0.0;
  for (const auto& r : reports) {
    const double n = static_cast<double>(r.pixels);
    out.epe += r.epe * n;
    out.bad1 += r.bad1 * n;
    out.bad3 += r.bad3 * n;
    out.d1_all += r.d1_all * n;
    out.pixels += r.pixels;
    if (r.d1_fg) fg_bad += *r.d1_fg * r.fg_pixels;
    if (r.d1_bg) bg_bad += *r.d1_bg * r.bg_pixels;
    out.fg_pixels += r.fg_pixels;
    out.bg_pixels += r.bg_pixels;
  }
  if (out.pixels == 0) throw std::invalid_argument("merge: no pixels");
  const double n = static_cast<double>(out.pixels);
  out.epe /= n;
  out.bad1 /= n;
  out.bad3 /= n;
  out.d1_all /= n;
  if (out.fg_pixels > 0) out.d1_fg = fg_bad / out.fg_pixels;
  if (out.bg_pixels > 0) out.d1_bg = bg_bad / out.bg_pixels;
  return out;
}

torch::Tensor infill_gt_nearest(const torch::Tensor& sparse, const torch::Tensor& mask) {
  if (sparse.dim() != 2 || !sparse.sizes().equals(mask.sizes())) {
    throw ShapeError("infill_gt_nearest expects matching [H, W] field and mask");
  }
  auto values = sparse.to(torch::kFloat64).contiguous();
  auto valid = mask.to(torch::kBool).contiguous();
  const auto h = values.size(0);
  const auto w = values.size(1);
  const double* v = values.data_ptr<double>();
  const bool* m = valid.data_ptr<bool>();

  std::vector<std::vector<int64_t>> columns(h);
  bool any = false;
  for (int64_t y = 0; y < h; ++y) {
    for (int64_t x = 0; x < w; ++x) {
      if (m[y * w + x]) {
        columns[y].push_back(x);
        any = true;
      }
    }
  }
  if (!any) throw std::invalid_argument("infill_gt_nearest: no valid pixels");

  auto out = values.clone();
  double* o = out.data_ptr<double>();
  for (int64_t y = 0; y < h; ++y) {
    for (int64_t x = 0; x < w; ++x) {
      if (m[y * w + x]) continue;
      int64_t best_d2 = std::numeric_limits<int64_t>::max();
      int64_t best_idx = -1;
      auto consider = [&](int64_t yy) {
        const auto& cols = columns[yy];
        if (cols.empty()) return;
        auto it = std::lower_bound(cols.begin(), cols.end(), x);
        const int64_t dy2 = (yy - y) * (yy - y);
        for (auto cand : {it == cols.begin() ? cols.end() : it - 1, it}) {
          if (cand == cols.end()) continue;
          const int64_t dx = *cand - x;
          const int64_t d2 = dy2 + dx * dx;
          const int64_t idx = yy * w + *cand;
          if (d2 < best_d2 || (d2 == best_d2 && idx < best_idx)) {
            best_d2 = d2;
            best_idx = idx;
          }
        }
      };
      for (int64_t r = 0; r < h && r * r <= best_d2; ++r) {
        if (y - r >= 0) consider(y - r);
        if (r > 0 && y + r < h) consider(y + r);
      }
      o[y * w + x] = v[best_idx];
    }
  }
  return out.to(sparse.dtype());
}

}  // namespace diffstereo::objectives
