#include <cmath>

#include "diffstereo/errors.hpp"
#include "diffstereo/updater.hpp"
#include "test_util.hpp"

using namespace diffstereo;
using namespace diffstereo::updater;
using diffstereo::testing::all_close;
using diffstereo::testing::f64;

namespace {

encoders::ContextPyramid random_pyramid(int hidden, int64_t h, int64_t w, int64_t batch = 1) {
  encoders::ContextPyramid p;
  for (int level = 0; level < 3; ++level) {
    const auto hh = h >> level;
    const auto ww = w >> level;
    p.hidden_init[level] = torch::tanh(torch::randn({batch, hidden, hh, ww}));
    p.context[level] = {torch::relu(torch::randn({batch, hidden, hh, ww})),
                        torch::relu(torch::randn({batch, hidden, hh, ww})),
                        torch::relu(torch::randn({batch, hidden, hh, ww}))};
  }
  return p;
}

void fill_all(torch::nn::Module& m, double value) {
  torch::NoGradGuard g;
  for (auto& p : m.parameters()) p.fill_(value);
}

}  // namespace

TEST(TimeEncoder, DeterministicAndDefaultWidth) {
  torch::manual_seed(0);
  TimeEncoder te(128);
  auto a = te->encode(0.3);
  EXPECT_EQ(a.sizes(), (std::vector<int64_t>{1, 128}));
  EXPECT_TRUE(torch::equal(a, te->encode(0.3)));
}

TEST(TimeEncoder, DistinguishesEndpoints) {
  torch::manual_seed(1);
  TimeEncoder te(32);
  EXPECT_GT((te->encode(0.0) - te->encode(1.0)).norm().item<double>(), 0.0);
}

TEST(TimeEncoder, RejectsTimeOutsideUnitInterval) {
  TimeEncoder te(8);
  EXPECT_THROW(te->encode(1.2), std::domain_error);
  EXPECT_THROW(te->encode(-0.1), std::domain_error);
}

TEST(TimeEncoder, BatchMatchesScalar) {
  torch::manual_seed(2);
  TimeEncoder te(16);
  auto batch = te->forward(torch::tensor({0.0f, 0.25f, 1.0f}));
  EXPECT_TRUE(all_close(batch[1], te->encode(0.25)[0], 1e-6));
}

TEST(MotionEncoder, ChannelCount) {
  MotionEncoder enc(36, 24);
  EXPECT_EQ(enc->output_channels(), 2 * 24 + 1);
  auto out = enc->forward({torch::randn({2, 36, 5, 6}), 4}, {torch::randn({2, 1, 5, 6}), 4}, {});
  EXPECT_EQ(out.size(1), 49);
}

TEST(MotionEncoder, ZeroEmbeddingEqualsNoConditioning) {
  torch::manual_seed(3);
  MotionEncoder enc(4, 6);
  GeometryFeatures g{torch::randn({1, 4, 5, 5}), 0};
  DisparityField d{torch::randn({1, 1, 5, 5}), 4};
  EXPECT_TRUE(torch::equal(enc->forward(g, d, torch::zeros({1, 6})), enc->forward(g, d, {})));
}

TEST(MotionEncoder, ConstantEmbeddingShiftsEncoderBlocks) {
  torch::manual_seed(4);
  MotionEncoder enc(4, 6);
  GeometryFeatures g{torch::randn({1, 4, 5, 5}), 0};
  DisparityField d{torch::randn({1, 1, 5, 5}), 4};
  const double c = 0.75;
  auto diff = enc->forward(g, d, torch::full({1, 6}, c)) - enc->forward(g, d, {});
  EXPECT_TRUE(all_close(diff.narrow(1, 0, 12), torch::full({1, 12, 5, 5}, c), 1e-6));
  EXPECT_EQ(diff.narrow(1, 12, 1).abs().max().item<double>(), 0.0);
}

TEST(AgentAttention, SingleTokenSingleAgentReturnsValue) {
  auto q = torch::randn({1, 1, 3}, f64());
  auto k = torch::randn({1, 1, 3}, f64());
  auto v = torch::randn({1, 1, 3}, f64());
  auto out = agent_attention(q, k, v, torch::randn({1, 1, 3}, f64()), 0.5);
  EXPECT_TRUE(all_close(out, v, 1e-12));
}

TEST(AgentAttention, MatchesDenseOracle) {
  // Three tokens, one agent, C = 2, fixed small matrices.
  auto q = torch::tensor({0.1, 0.2, -0.3, 0.4, 0.5, -0.6}, f64()).view({1, 3, 2});
  auto k = torch::tensor({0.7, -0.1, 0.2, 0.3, -0.5, 0.9}, f64()).view({1, 3, 2});
  auto v = torch::tensor({1.0, 2.0, 3.0, -1.0, 0.5, 0.0}, f64()).view({1, 3, 2});
  auto a = torch::tensor({0.3, -0.2}, f64()).view({1, 1, 2});
  const double s = 0.8;
  // First softmax over tokens for the single agent.
  double logits[3], weights[3], total = 0.0;
  for (int j = 0; j < 3; ++j) {
    logits[j] = s * (0.3 * k[0][j][0].item<double>() - 0.2 * k[0][j][1].item<double>());
    weights[j] = std::exp(logits[j]);
    total += weights[j];
  }
  double agent_value[2] = {0.0, 0.0};
  for (int j = 0; j < 3; ++j) {
    for (int c = 0; c < 2; ++c) agent_value[c] += weights[j] / total * v[0][j][c].item<double>();
  }
  // With one agent the second softmax is 1 for every token.
  auto expect = torch::tensor({agent_value[0], agent_value[1], agent_value[0], agent_value[1],
                               agent_value[0], agent_value[1]},
                              f64())
                    .view({1, 3, 2});
  EXPECT_TRUE(all_close(agent_attention(q, k, v, a, s), expect, 1e-12));
}

TEST(AgentAttention, SoftmaxFactorsAreRowStochastic) {
  torch::manual_seed(5);
  auto q = torch::randn({2, 20, 4}, f64());
  auto k = torch::randn({2, 20, 4}, f64());
  auto a = torch::randn({2, 3, 4}, f64());
  auto f1 = torch::softmax(torch::matmul(a, k.transpose(1, 2)) * 0.5, -1);
  auto f2 = torch::softmax(torch::matmul(q, a.transpose(1, 2)) * 0.5, -1);
  EXPECT_TRUE(all_close(f1.sum(-1), torch::ones({2, 3}, f64()), 1e-6));
  EXPECT_TRUE(all_close(f2.sum(-1), torch::ones({2, 20}, f64()), 1e-6));
}

TEST(AgentAttention, OutputInsideValueHull) {
  torch::manual_seed(6);
  for (int trial = 0; trial < 20; ++trial) {
    auto q = torch::randn({1, 30, 5}, f64()) * 3.0;
    auto k = torch::randn({1, 30, 5}, f64()) * 3.0;
    auto v = torch::randn({1, 30, 5}, f64());
    auto a = torch::randn({1, 4, 5}, f64());
    auto out = agent_attention(q, k, v, a, 1.0);
    auto lo = std::get<0>(v.min(1, true));
    auto hi = std::get<0>(v.max(1, true));
    EXPECT_TRUE((out >= lo - 1e-12).all().item<bool>());
    EXPECT_TRUE((out <= hi + 1e-12).all().item<bool>());
  }
}

TEST(AgentAttention, CostLinearInTokens) {
  FlopCounter small, large;
  auto run = [](int64_t n, FlopCounter& counter) {
    agent_attention(torch::randn({1, n, 8}), torch::randn({1, n, 8}), torch::randn({1, n, 8}),
                    torch::randn({1, 49, 8}), 0.3, &counter);
  };
  run(256, small);
  run(512, large);
  EXPECT_LE(static_cast<double>(large.flops) / small.flops, 2.2);
}

TEST(AgentAttentionModule, StartsAsIdentity) {
  torch::manual_seed(7);
  AgentAttention aa(6, 7);
  auto x = torch::randn({1, 6, 10, 12});
  EXPECT_TRUE(all_close(aa->forward(x), x, 0.0));
}

TEST(TimeGru, ClosedGateKeepsHidden) {
  TimeGru gru(3, 2);
  {
    torch::NoGradGuard g;
    gru->conv_z->weight.zero_();
    gru->conv_z->bias.fill_(-1e4);
  }
  auto h = torch::tanh(torch::randn({1, 3, 4, 4}));
  encoders::ContextTriple c{torch::zeros_like(h), torch::zeros_like(h), torch::zeros_like(h)};
  auto out = gru->step(h, torch::randn({1, 2, 4, 4}), c, torch::randn({1, 3}));
  EXPECT_TRUE(torch::equal(out.hidden, h));
}

TEST(TimeGru, OpenGateTakesCandidate) {
  TimeGru gru(3, 2);
  {
    torch::NoGradGuard g;
    gru->conv_z->weight.zero_();
    gru->conv_z->bias.fill_(1e4);
  }
  auto h = torch::tanh(torch::randn({1, 3, 4, 4}));
  encoders::ContextTriple c{torch::zeros_like(h), torch::zeros_like(h), torch::randn({1, 3, 4, 4})};
  auto out = gru->step(h, torch::randn({1, 2, 4, 4}) * 10, c, {});
  EXPECT_LT(out.hidden.abs().max().item<double>(), 1.0);
  EXPECT_GT((out.hidden - h).abs().max().item<double>(), 0.0);
}

TEST(TimeGru, ScalarHandComputation) {
  TimeGru gru(1, 1);
  gru->to(torch::kFloat64);
  // 3x3 kernels on a 1x1 map only see their centre tap.
  auto set = [](torch::nn::Conv2d& conv, double wh, double wx, double b) {
    torch::NoGradGuard g;
    conv->weight.zero_();
    conv->weight[0][0][1][1] = wh;
    conv->weight[0][1][1][1] = wx;
    conv->bias.fill_(b);
  };
  set(gru->conv_z, 0.5, -0.3, 0.1);
  set(gru->conv_r, -0.2, 0.4, 0.05);
  set(gru->conv_h, 0.9, 0.7, -0.1);
  const double h = 0.3, x = -1.2, cz = 0.2, cr = 0.1, ch = -0.05, te = 0.15;
  auto sig = [](double v) { return 1.0 / (1.0 + std::exp(-v)); };
  const double z = sig(0.5 * h - 0.3 * x + 0.1 + cz + te);
  const double r = sig(-0.2 * h + 0.4 * x + 0.05 + cr + te);
  const double cand = std::tanh(0.9 * r * h + 0.7 * x - 0.1 + ch + te);
  const double expect = (1 - z) * h + z * cand;
  auto T = [](double v) { return torch::full({1, 1, 1, 1}, v, f64()); };
  auto out = gru->step(T(h), T(x), {T(cz), T(cr), T(ch)}, torch::full({1, 1}, te, f64()));
  EXPECT_NEAR(out.hidden.item<double>(), expect, 1e-12);
  EXPECT_NEAR(out.z.item<double>(), z, 1e-12);
  EXPECT_NEAR(out.r.item<double>(), r, 1e-12);
}

TEST(UpdateBlock, ShapesDeterminismAndBoundedHidden) {
  torch::manual_seed(8);
  const int hidden = 8, motion = 2 * hidden + 1;
  UpdateBlock block(hidden, motion);
  fill_all(*block, 0.05);
  auto ctx = random_pyramid(hidden, 8, 12);
  HiddenStates state = ctx.hidden_init;
  auto x = torch::randn({1, motion, 8, 12});
  auto te = torch::randn({1, hidden});
  auto first = block->forward(state, ctx, x, te);
  auto again = block->forward(state, ctx, x, te);
  EXPECT_EQ(first.velocity.data.sizes(), (std::vector<int64_t>{1, 1, 8, 12}));
  EXPECT_EQ(first.mask_logits.sizes(), (std::vector<int64_t>{1, 144, 8, 12}));
  EXPECT_TRUE(torch::equal(first.velocity.data, again.velocity.data));
  for (int i = 0; i < 50; ++i) {
    state = block->forward(state, ctx, torch::randn({1, motion, 8, 12}) * 5, te).hidden;
  }
  for (const auto& h : state) EXPECT_LE(h.abs().max().item<double>(), 1.0);
}

TEST(UpdateBlock, ZeroInitialisedHeads) {
  UpdateBlock block(4, 9);
  auto ctx = random_pyramid(4, 4, 4);
  auto out = block->forward(ctx.hidden_init, ctx, torch::randn({1, 9, 4, 4}), {});
  EXPECT_EQ(out.velocity.data.abs().max().item<double>(), 0.0);
  EXPECT_EQ(out.mask_logits.abs().max().item<double>(), 0.0);
}

TEST(Upsample, ConstantFieldScalesByFour) {
  DisparityField d{torch::full({1, 1, 3, 5}, 2.5, f64()), 4};
  auto mask = normalize_mask(torch::randn({1, 144, 3, 5}, f64()));
  auto up = upsample_disparity(d, mask);
  EXPECT_EQ(up.data.sizes(), (std::vector<int64_t>{1, 1, 12, 20}));
  EXPECT_TRUE(all_close(up.data, torch::full({1, 1, 12, 20}, 10.0, f64()), 1e-12));
}

TEST(Upsample, WithinNeighbourhoodBounds) {
  torch::manual_seed(9);
  for (int trial = 0; trial < 10; ++trial) {
    auto d = torch::randn({2, 1, 5, 6}, f64()) * 10.0;
    auto mask = normalize_mask(torch::randn({2, 144, 5, 6}, f64()) * 3.0);
    auto up = upsample_disparity({d, 4}, mask).data;
    auto padded = torch::nn::functional::pad(
        d, torch::nn::functional::PadFuncOptions({1, 1, 1, 1}).mode(torch::kReplicate));
    auto lo = -torch::max_pool2d(-padded, 3, 1);
    auto hi = torch::max_pool2d(padded, 3, 1);
    auto lo_f = 4.0 * lo.repeat_interleave(4, 2).repeat_interleave(4, 3);
    auto hi_f = 4.0 * hi.repeat_interleave(4, 2).repeat_interleave(4, 3);
    EXPECT_TRUE((up >= lo_f - 1e-9).all().item<bool>());
    EXPECT_TRUE((up <= hi_f + 1e-9).all().item<bool>());
  }
}

TEST(Upsample, RejectsUnnormalisedMask) {
  DisparityField d{torch::zeros({1, 1, 2, 2}), 4};
  EXPECT_THROW(upsample_disparity(d, torch::ones({1, 9, 4, 4, 2, 2})), std::invalid_argument);
  EXPECT_THROW(upsample_disparity(d, torch::ones({1, 9, 4, 4, 3, 2}) / 9.0), ShapeError);
}

TEST(Upsample, UniformMaskIsLocalMean) {
  auto d = torch::arange(9, f64()).view({1, 1, 3, 3});
  auto up = upsample_disparity({d, 4}, uniform_mask({d, 4})).data;
  EXPECT_NEAR(up[0][0][4][4].item<double>(), 4.0 * 4.0, 1e-12);  // centre pixel: mean 4
}
