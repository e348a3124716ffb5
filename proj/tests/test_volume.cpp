#include <cmath>
#include <limits>

#include "diffstereo/errors.hpp"
#include "diffstereo/volume.hpp"
#include "test_util.hpp"

using namespace diffstereo;
using diffstereo::testing::all_close;
using diffstereo::testing::f64;

namespace {

// out[b, g, d, y, x] = (1 / (C / G)) * sum_{c in g} l[c, y, x] * r[c, y, x - d]
torch::Tensor naive_group(const torch::Tensor& l, const torch::Tensor& r, int groups, int dmax) {
  const auto B = l.size(0), C = l.size(1), H = l.size(2), W = l.size(3);
  const auto per = C / groups;
  auto out = torch::zeros({B, groups, dmax, H, W}, f64());
  auto la = l.accessor<double, 4>();
  auto ra = r.accessor<double, 4>();
  auto oa = out.accessor<double, 5>();
  for (int64_t b = 0; b < B; ++b)
    for (int g = 0; g < groups; ++g)
      for (int d = 0; d < dmax; ++d)
        for (int64_t y = 0; y < H; ++y)
          for (int64_t x = 0; x < W; ++x) {
            if (x - d < 0) continue;
            double s = 0.0;
            for (int64_t c = g * per; c < (g + 1) * per; ++c) s += la[b][c][y][x] * ra[b][c][y][x - d];
            oa[b][g][d][y][x] = s / static_cast<double>(per);
          }
  return out;
}

torch::Tensor naive_all_pairs(const torch::Tensor& l, const torch::Tensor& r, int dmax) {
  const auto B = l.size(0), C = l.size(1), H = l.size(2), W = l.size(3);
  auto out = torch::zeros({B, 1, dmax, H, W}, f64());
  auto la = l.accessor<double, 4>();
  auto ra = r.accessor<double, 4>();
  auto oa = out.accessor<double, 5>();
  for (int64_t b = 0; b < B; ++b)
    for (int d = 0; d < dmax; ++d)
      for (int64_t y = 0; y < H; ++y)
        for (int64_t x = d; x < W; ++x) {
          double s = 0.0;
          for (int64_t c = 0; c < C; ++c) s += la[b][c][y][x] * ra[b][c][y][x - d];
          oa[b][0][d][y][x] = s;
        }
  return out;
}

CostVolume geometry_volume(torch::Tensor data) {
  const auto d = static_cast<int>(data.size(2));
  return {std::move(data), d, VolumeKind::geometry};
}

}  // namespace

TEST(GroupCorrelation, ZeroFeaturesGiveZeroVolume) {
  FeatureMap f{torch::zeros({1, 4, 2, 2}, f64())};
  auto v = volume::group_correlation(f, f, 2, 2);
  EXPECT_EQ(v.data.sizes(), (std::vector<int64_t>{1, 2, 2, 2, 2}));
  EXPECT_EQ(v.data.abs().max().item<double>(), 0.0);
}

TEST(GroupCorrelation, ConstantOnesAtZeroDisparity) {
  FeatureMap f{torch::ones({1, 4, 3, 5}, f64())};
  auto v = volume::group_correlation(f, f, 2, 3);
  EXPECT_TRUE(all_close(v.data.select(2, 0), torch::ones({1, 2, 3, 5}, f64()), 0.0));
}

TEST(GroupCorrelation, ZeroWhereRightPixelLeavesFrame) {
  torch::manual_seed(3);
  FeatureMap l{torch::randn({1, 4, 3, 6}, f64())};
  FeatureMap r{torch::randn({1, 4, 3, 6}, f64())};
  auto v = volume::group_correlation(l, r, 2, 5);
  for (int d = 0; d < 5; ++d) {
    for (int x = 0; x < d; ++x) {
      EXPECT_EQ(v.data.index({0, torch::indexing::Slice(), d, torch::indexing::Slice(), x})
                    .abs()
                    .max()
                    .item<double>(),
                0.0);
    }
  }
}

TEST(GroupCorrelation, MatchesNaiveLoopOracle) {
  torch::manual_seed(11);
  for (int c : {2, 4, 8}) {
    for (int groups : {1, 2}) {
      for (int d : {1, 3, 8}) {
        for (int hw : {1, 4, 8}) {
          FeatureMap l{torch::randn({2, c, hw, hw}, f64())};
          FeatureMap r{torch::randn({2, c, hw, hw}, f64())};
          auto v = volume::group_correlation(l, r, groups, d);
          EXPECT_TRUE(all_close(v.data, naive_group(l.data, r.data, groups, d), 1e-6))
              << "C=" << c << " G=" << groups << " D=" << d << " HW=" << hw;
        }
      }
    }
  }
}

TEST(GroupCorrelation, RejectsIndivisibleGroups) {
  FeatureMap f{torch::zeros({1, 3, 2, 2})};
  EXPECT_THROW(volume::group_correlation(f, f, 2, 2), ShapeError);
}

TEST(AllPairsCorrelation, ZeroFeaturesGiveZeroVolume) {
  FeatureMap f{torch::zeros({1, 3, 4, 4}, f64())};
  EXPECT_EQ(volume::all_pairs_correlation(f, f, 3).data.abs().max().item<double>(), 0.0);
}

TEST(AllPairsCorrelation, OrthogonalVectorsAtZeroDisparity) {
  auto l = torch::zeros({1, 2, 3, 3}, f64());
  auto r = torch::zeros({1, 2, 3, 3}, f64());
  l.select(1, 0).fill_(1.0);
  r.select(1, 1).fill_(1.0);
  auto v = volume::all_pairs_correlation({l}, {r}, 2);
  EXPECT_EQ(v.data.select(2, 0).abs().max().item<double>(), 0.0);
}

TEST(AllPairsCorrelation, MatchesNaiveLoopOracle) {
  torch::manual_seed(5);
  {
    FeatureMap l{torch::randn({1, 2, 3, 3}, f64())};
    FeatureMap r{torch::randn({1, 2, 3, 3}, f64())};
    EXPECT_TRUE(all_close(volume::all_pairs_correlation(l, r, 3).data,
                          naive_all_pairs(l.data, r.data, 3), 1e-6));
  }
  for (int c : {1, 4, 8}) {
    for (int d : {1, 5, 8}) {
      FeatureMap l{torch::randn({2, c, 8, 8}, f64())};
      FeatureMap r{torch::randn({2, c, 8, 8}, f64())};
      EXPECT_TRUE(all_close(volume::all_pairs_correlation(l, r, d).data,
                            naive_all_pairs(l.data, r.data, d), 1e-6));
    }
  }
}

TEST(Regularizer, ShapeContract) {
  torch::manual_seed(0);
  volume::Regularizer reg(8, 4);
  CostVolume c{torch::randn({1, 8, 12, 16, 16}), 12, VolumeKind::corr};
  auto out = reg->forward(c);
  EXPECT_EQ(out.data.sizes(), (std::vector<int64_t>{1, 1, 12, 16, 16}));
  EXPECT_EQ(out.kind, VolumeKind::geometry);
}

TEST(Regularizer, DeterministicAndFinite) {
  torch::manual_seed(0);
  volume::Regularizer reg(8, 4);
  CostVolume c{torch::randn({1, 8, 12, 16, 16}), 12, VolumeKind::corr};
  EXPECT_TRUE(torch::equal(reg->forward(c).data, reg->forward(c).data));
  for (int seed = 0; seed < 100; ++seed) {
    torch::manual_seed(seed);
    CostVolume r{torch::randn({1, 8, 5, 6, 7}) * 10.0, 5, VolumeKind::corr};
    EXPECT_TRUE(torch::isfinite(reg->forward(r).data).all().item<bool>()) << seed;
  }
}

TEST(Regularizer, RejectsNonCorrelationInput) {
  volume::Regularizer reg(2, 4);
  CostVolume c{torch::zeros({1, 2, 4, 4, 4}), 4, VolumeKind::geometry};
  EXPECT_THROW(reg->forward(c), std::invalid_argument);
}

TEST(SoftArgmin, OneHotLogits) {
  auto logits = torch::zeros({1, 1, 8, 3, 4}, f64());
  logits.select(2, 5).fill_(1e6);
  auto d = volume::soft_argmin_disparity(geometry_volume(logits));
  EXPECT_TRUE(all_close(d.data, torch::full({1, 1, 3, 4}, 5.0, f64()), 1e-9));
  EXPECT_EQ(d.scale, 4);
}

TEST(SoftArgmin, UniformLogits) {
  auto d = volume::soft_argmin_disparity(geometry_volume(torch::zeros({1, 1, 4, 2, 2}, f64())));
  EXPECT_TRUE(all_close(d.data, torch::full({1, 1, 2, 2}, 1.5, f64()), 1e-12));
}

TEST(SoftArgmin, HandSoftmaxWeights) {
  auto logits = torch::zeros({1, 1, 3, 1, 1}, f64());
  logits[0][0][1] = std::log(2.0);
  auto d = volume::soft_argmin_disparity(geometry_volume(logits));
  EXPECT_NEAR(d.data.item<double>(), 1.0, 1e-12);
}

TEST(PoolVolume, HalvesDepth) {
  CostVolume c{torch::randn({1, 1, 8, 2, 2}), 8, VolumeKind::geometry};
  auto p = volume::pool_volume(c);
  EXPECT_EQ(p.disparities(), 4);
  EXPECT_EQ(p.kind, VolumeKind::pooled);
  EXPECT_THROW(volume::pool_volume(p), ShapeError);
}

TEST(PoolVolume, MeanOfPair) {
  auto data = torch::zeros({1, 1, 2, 1, 1}, f64());
  data[0][0][0] = 2.0;
  data[0][0][1] = 4.0;
  auto p = volume::pool_volume(geometry_volume(data));
  EXPECT_DOUBLE_EQ(p.data.item<double>(), 3.0);
}

TEST(PoolVolume, MatchesWindowMeanOracle) {
  torch::manual_seed(2);
  for (int depth : {2, 5, 8}) {
    auto data = torch::randn({2, 3, depth, 4, 5}, f64());
    auto p = volume::pool_volume({data, depth, VolumeKind::all_pairs});
    const int out_depth = (depth + 1) / 2;
    ASSERT_EQ(p.disparities(), out_depth);
    for (int k = 0; k < out_depth; ++k) {
      const int hi = std::min(2 * k + 1, depth - 1);
      auto expect = 0.5 * (data.select(2, 2 * k) + data.select(2, hi));
      EXPECT_TRUE(all_close(p.data.select(2, k), expect, 1e-12));
    }
  }
}

TEST(LookupGeometry, IntegerDisparityRadiusZeroIsExact) {
  torch::manual_seed(4);
  auto g = torch::randn({1, 1, 8, 2, 3}, f64());
  auto a = torch::randn({1, 1, 8, 2, 3}, f64());
  auto d = torch::tensor({2.0, 4.0, 6.0, 0.0, 3.0, 7.0}, f64()).view({1, 1, 2, 3});
  auto feats = volume::lookup_geometry(geometry_volume(g), {a, 8, VolumeKind::all_pairs},
                                       {d, 4}, 0);
  ASSERT_EQ(feats.data.size(1), 4);
  auto gp = volume::pool_volume(geometry_volume(g)).data;
  auto ap = volume::pool_volume({a, 8, VolumeKind::all_pairs}).data;
  for (int y = 0; y < 2; ++y) {
    for (int x = 0; x < 3; ++x) {
      const auto di = static_cast<int64_t>(d[0][0][y][x].item<double>());
      EXPECT_DOUBLE_EQ(feats.data[0][0][y][x].item<double>(), g[0][0][di][y][x].item<double>());
      EXPECT_DOUBLE_EQ(feats.data[0][1][y][x].item<double>(), a[0][0][di][y][x].item<double>());
      if (di % 2 == 0) {
        EXPECT_DOUBLE_EQ(feats.data[0][2][y][x].item<double>(),
                         gp[0][0][di / 2][y][x].item<double>());
        EXPECT_DOUBLE_EQ(feats.data[0][3][y][x].item<double>(),
                         ap[0][0][di / 2][y][x].item<double>());
      }
    }
  }
}

TEST(LookupGeometry, HalfwayInterpolation) {
  auto g = torch::zeros({1, 1, 4, 1, 1}, f64());
  g[0][0][1] = 10.0;
  g[0][0][2] = 20.0;
  auto a = torch::zeros({1, 1, 4, 1, 1}, f64());
  auto d = torch::full({1, 1, 1, 1}, 1.5, f64());
  auto feats = volume::lookup_geometry(geometry_volume(g), {a, 4, VolumeKind::all_pairs},
                                       {d, 4}, 0);
  EXPECT_NEAR(feats.data[0][0].item<double>(), 15.0, 1e-12);
}

TEST(LookupGeometry, RadiusFourGivesThirtySixChannels) {
  auto g = torch::randn({2, 1, 16, 4, 5});
  auto a = torch::randn({2, 1, 16, 4, 5});
  auto d = torch::rand({2, 1, 4, 5}) * 15.0;
  auto feats = volume::lookup_geometry(geometry_volume(g), {a, 16, VolumeKind::all_pairs},
                                       {d, 4}, 4);
  EXPECT_EQ(feats.data.sizes(), (std::vector<int64_t>{2, 36, 4, 5}));
  EXPECT_EQ(feats.radius, 4);
}

TEST(LookupGeometry, ClampsOutsideRange) {
  auto vol = torch::arange(5, f64()).view({1, 5, 1, 1});
  auto pos = torch::tensor({-3.0, 0.0, 4.0, 9.5}, f64()).view({1, 4, 1, 1});
  auto s = volume::sample_disparity_axis(vol, pos);
  EXPECT_TRUE(all_close(s.flatten(), torch::tensor({0.0, 0.0, 4.0, 4.0}, f64()), 1e-12));
}

TEST(LookupGeometry, NonFinitePositionIsNumericalError) {
  auto vol = torch::rand({1, 4, 2, 2});
  auto pos = torch::zeros({1, 1, 2, 2});
  pos[0][0][1][1] = std::numeric_limits<float>::quiet_NaN();
  EXPECT_THROW(volume::sample_disparity_axis(vol, pos), NumericalError);
}
