#include <cmath>

#include "diffstereo/encoders.hpp"
#include "diffstereo/errors.hpp"
#include "test_util.hpp"

using namespace diffstereo;
using diffstereo::testing::all_close;
using diffstereo::testing::f64;

TEST(Smish, Zero) { EXPECT_EQ(encoders::smish(0.0), 0.0); }

TEST(Smish, ValueAtOne) {
  // 1 * tanh(log(1 + 1 / (1 + e^-1))) evaluated in long double.
  const long double s = 1.0L / (1.0L + std::exp(-1.0L));
  const long double expect = std::tanh(std::log1p(s));
  EXPECT_NEAR(encoders::smish(1.0), static_cast<double>(expect), 1e-12);
  EXPECT_NEAR(encoders::smish(1.0), 0.49959, 1e-4);
}

TEST(Smish, AsymptoticSlope) {
  EXPECT_NEAR(encoders::smish(50.0) / 50.0, 0.6, 1e-6);
  EXPECT_NEAR(std::tanh(std::log(2.0)), 0.6, 1e-15);
}

TEST(Smish, TensorMatchesScalar) {
  auto x = torch::linspace(-6.0, 6.0, 41, f64());
  auto y = encoders::smish(x);
  for (int64_t i = 0; i < x.size(0); ++i) {
    EXPECT_NEAR(y[i].item<double>(), encoders::smish(x[i].item<double>()), 1e-14);
  }
}

TEST(FeatureEncoder, QuarterScale) {
  torch::manual_seed(0);
  encoders::FeatureEncoder enc(16);
  auto [g, p] = enc->forward(torch::rand({1, 3, 64, 64}));
  EXPECT_EQ(g.data.sizes(), (std::vector<int64_t>{1, 16, 16, 16}));
  EXPECT_EQ(p.data.sizes(), (std::vector<int64_t>{1, 16, 16, 16}));
  EXPECT_EQ(g.scale, 4);
}

TEST(FeatureEncoder, SharedWeightsAndSensitivity) {
  torch::manual_seed(0);
  encoders::FeatureEncoder enc(8);
  auto img = torch::rand({1, 3, 32, 32});
  auto a = enc->forward(img).first.data;
  auto b = enc->forward(img.clone()).first.data;
  EXPECT_TRUE(torch::equal(a, b));
  auto changed = img.clone();
  changed[0][1][10][10] += 0.5;
  EXPECT_GT((enc->forward(changed).first.data - a).abs().max().item<double>(), 0.0);
}

TEST(FeatureEncoder, RejectsIndivisibleSize) {
  encoders::FeatureEncoder enc(8);
  EXPECT_THROW(enc->forward(torch::rand({1, 3, 30, 32})), ShapeError);
}

TEST(ContextNetwork, ScalesAndRanges) {
  torch::manual_seed(1);
  encoders::ContextOptions opts;
  opts.hidden = 8;
  opts.base = 16;
  encoders::ContextNetwork net(opts);
  auto pyr = net->forward(torch::rand({1, 3, 64, 64}));
  const int64_t sizes[3] = {16, 8, 4};
  for (int level = 0; level < 3; ++level) {
    const auto& h = pyr.hidden_init[level];
    EXPECT_EQ(h.sizes(), (std::vector<int64_t>{1, 8, sizes[level], sizes[level]}));
    EXPECT_LT(h.abs().max().item<double>(), 1.0);
    for (const auto& c : {pyr.context[level].z, pyr.context[level].r, pyr.context[level].h}) {
      EXPECT_EQ(c.sizes(), h.sizes());
      EXPECT_GE(c.min().item<double>(), 0.0);
    }
  }
}

TEST(ContextNetwork, EveryFlagCombinationRuns) {
  for (int mask = 0; mask < 8; ++mask) {
    encoders::ContextOptions opts;
    opts.hidden = 4;
    opts.base = 8;
    opts.attention = mask & 1;
    opts.smish = mask & 2;
    opts.feed_forward = mask & 4;
    encoders::ContextNetwork net(opts);
    auto pyr = net->forward(torch::rand({1, 3, 32, 32}));
    EXPECT_TRUE(torch::isfinite(pyr.context[0].z).all().item<bool>());
  }
}

TEST(ChannelSelfAttention, ZeroProjectionIsSmishOfInput) {
  torch::manual_seed(2);
  encoders::ChannelSelfAttention attn(8, true);
  auto x = torch::randn({1, 8, 16, 16});
  auto y = attn->forward(x);
  EXPECT_EQ(y.sizes(), x.sizes());
  EXPECT_TRUE(all_close(y, encoders::smish(x), 1e-6));
}

TEST(ChannelSelfAttention, RowStochasticMap) {
  torch::manual_seed(3);
  encoders::ChannelSelfAttention attn(6, false);
  auto m = attn->attention_map(torch::randn({2, 6, 5, 7}));
  EXPECT_EQ(m.sizes(), (std::vector<int64_t>{2, 6, 6}));
  EXPECT_TRUE(all_close(m.sum(-1), torch::ones({2, 6}), 1e-6));
  EXPECT_GE(m.min().item<double>(), 0.0);
}

TEST(ChannelSelfAttention, SingleChannelHandComputation) {
  torch::manual_seed(4);
  encoders::ChannelSelfAttention attn(1, true);
  {
    torch::NoGradGuard g;
    attn->project->weight.fill_(0.7);
    attn->project->bias.fill_(-0.2);
  }
  auto x = torch::randn({1, 1, 4, 4});
  EXPECT_NEAR(attn->attention_map(x).item<double>(), 1.0, 1e-12);
  auto v = attn->qkv_dw->forward(attn->qkv->forward(x)).select(1, 2).unsqueeze(1);
  auto expect = encoders::smish(0.7 * v - 0.2 + x);
  EXPECT_TRUE(all_close(attn->forward(x), expect, 1e-6));
}

TEST(ChannelSelfAttention, TemperatureStartsAtSqrtChannels) {
  encoders::ChannelSelfAttention attn(16, false);
  EXPECT_NEAR(attn->alpha(), 4.0, 1e-6);
}

TEST(FeedForward, DisabledIsIdentity) {
  encoders::FeedForward ffn(4, 2, false);
  auto x = torch::randn({1, 4, 3, 3});
  EXPECT_TRUE(torch::equal(ffn->forward(x), x));
}

TEST(FeedForward, ZeroOutputProjectionIsIdentity) {
  encoders::FeedForward ffn(4, 2, true);
  auto x = torch::randn({1, 4, 3, 3});
  EXPECT_TRUE(all_close(ffn->forward(x), x, 0.0));
}

TEST(FeedForward, ShapePreservedOnRandomInputs) {
  torch::manual_seed(5);
  for (int trial = 0; trial < 10; ++trial) {
    const int c = 1 + trial % 5;
    encoders::FeedForward ffn(c, 2, true);
    {
      torch::NoGradGuard g;
      ffn->project_out->weight.normal_();
    }
    auto x = torch::randn({1 + trial % 2, c, 2 + trial, 3 + trial % 3});
    EXPECT_EQ(ffn->forward(x).sizes(), x.sizes());
  }
}
