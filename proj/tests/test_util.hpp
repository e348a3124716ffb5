#pragma once

#include <gtest/gtest.h>
#include <torch/torch.h>

namespace diffstereo::testing {

inline double max_abs_diff(const torch::Tensor& a, const torch::Tensor& b) {
  return (a.to(torch::kFloat64) - b.to(torch::kFloat64)).abs().max().item<double>();
}

inline ::testing::AssertionResult all_close(const torch::Tensor& a, const torch::Tensor& b,
                                            double tol) {
  if (!a.sizes().equals(b.sizes())) {
    return ::testing::AssertionFailure() << "shape " << a.sizes() << " vs " << b.sizes();
  }
  const double d = max_abs_diff(a, b);
  if (d <= tol) return ::testing::AssertionSuccess();
  return ::testing::AssertionFailure() << "max |a - b| = " << d << " > " << tol;
}

inline torch::TensorOptions f64() { return torch::TensorOptions().dtype(torch::kFloat64); }

}  // namespace diffstereo::testing
