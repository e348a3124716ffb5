#include <cmath>

#include "diffstereo/bridge.hpp"
#include "diffstereo/errors.hpp"
#include "test_util.hpp"

using namespace diffstereo;
using namespace diffstereo::bridge;
using diffstereo::testing::all_close;
using diffstereo::testing::f64;

namespace {

ScheduleParams sigmoid_defaults() {
  ScheduleParams s;
  s.family = ScheduleFamily::sigmoid;
  return s;
}

DisparityField field(double value, int64_t h = 3, int64_t w = 4) {
  return {torch::full({1, 1, h, w}, value, f64()), 4};
}

}  // namespace

TEST(Beta, SigmoidMidpointAndEndpoints) {
  const auto s = sigmoid_defaults();
  EXPECT_NEAR(beta(0.5, s), 0.5, 1e-9);
  EXPECT_DOUBLE_EQ(beta(0.0, s), 1.0);
  EXPECT_DOUBLE_EQ(beta(1.0, s), 1e-9);
}

TEST(Beta, SigmoidMonotoneOnGrid) {
  for (const auto& preset : schedule_presets()) {
    double prev = beta(0.0, preset.params);
    for (int i = 1; i < 1000; ++i) {
      const double b = beta(i / 999.0, preset.params);
      EXPECT_LE(b, prev) << preset.name << " at " << i;
      prev = b;
    }
  }
}

TEST(Beta, LinearIsOneMinusT) {
  ScheduleParams s;
  EXPECT_DOUBLE_EQ(beta(0.25, s), 0.75);
  EXPECT_DOUBLE_EQ(beta(0.0, s), 1.0);
  EXPECT_DOUBLE_EQ(beta(1.0, s), s.min_clip);
}

TEST(Beta, RejectsTimeOutsideUnitInterval) {
  EXPECT_THROW(beta(-0.01, ScheduleParams{}), std::domain_error);
  EXPECT_THROW(beta(1.5, ScheduleParams{}), std::domain_error);
}

TEST(Beta, InvalidScheduleIsConfigError) {
  ScheduleParams s;
  s.tau = 0.0;
  EXPECT_THROW(s.validate(), ConfigError);
  EXPECT_THROW(schedule_preset("cosine"), ConfigError);
}

TEST(SchedulePresets, FiveTableRows) {
  auto presets = schedule_presets();
  ASSERT_EQ(presets.size(), 5u);
  EXPECT_EQ(presets[0].params.family, ScheduleFamily::linear);
  EXPECT_DOUBLE_EQ(presets[1].params.start, 0.0);
  EXPECT_DOUBLE_EQ(presets[1].params.tau, 0.3);
  EXPECT_DOUBLE_EQ(presets[2].params.tau, 0.7);
  EXPECT_DOUBLE_EQ(presets[3].params.start, -3.0);
  EXPECT_DOUBLE_EQ(presets[4].params.tau, 1.1);
  EXPECT_DOUBLE_EQ(schedule_preset("sigmoid_s-3_e3_t1.1").end, 3.0);
}

TEST(ForwardInterpolate, Endpoints) {
  auto gt = DisparityField{torch::randn({1, 1, 3, 4}, f64()), 4};
  auto d0 = DisparityField{torch::randn({1, 1, 3, 4}, f64()), 4};
  ScheduleParams s;
  s.min_clip = 1e-300;
  // beta(1) = min_clip, so sqrt(beta) ~ 1e-150 is below double resolution of gt.
  EXPECT_TRUE(all_close(forward_interpolate(gt, d0, 1.0, s).data, gt.data, 1e-12));
  EXPECT_TRUE(torch::equal(forward_interpolate(gt, d0, 0.0, s).data, d0.data));
}

TEST(ForwardInterpolate, HalfwayScalar) {
  ScheduleParams s;
  auto d = forward_interpolate(field(10.0), field(2.0), 0.5, s);
  EXPECT_NEAR(d.data[0][0][0][0].item<double>(), std::sqrt(0.5) * 12.0, 1e-12);
  EXPECT_NEAR(d.data[0][0][0][0].item<double>(), 8.4853, 1e-4);
  auto lin = forward_interpolate(field(10.0), field(2.0), 0.5, s, true);
  EXPECT_NEAR(lin.data[0][0][0][0].item<double>(), 6.0, 1e-12);
}

TEST(VelocityTarget, Cases) {
  EXPECT_EQ(velocity_target(field(3.0), field(3.0)).data.abs().max().item<double>(), 0.0);
  EXPECT_TRUE(all_close(velocity_target(field(5.0), field(2.0)).data, field(3.0).data, 0.0));
  auto a = torch::randn({2, 1, 5, 5}, f64());
  auto b = torch::randn({2, 1, 5, 5}, f64());
  EXPECT_TRUE(all_close(velocity_target({a, 4}, {b, 4}).data, a - b, 0.0));
  EXPECT_THROW(velocity_target(field(1.0, 2, 2), field(1.0, 3, 3)), ShapeError);
}

TEST(EulerStep, ZeroVelocityLeavesFieldUnchanged) {
  BridgeState s{0, 4, field(2.5), field(2.5)};
  auto next = euler_step(s, VelocityField{torch::zeros({1, 1, 3, 4}, f64())});
  EXPECT_TRUE(torch::equal(next.current.data, s.current.data));
  EXPECT_EQ(next.t_hat, 1);
}

TEST(EulerStep, TwoStepHandComputation) {
  BridgeState s{0, 2, field(0.0), field(0.0)};
  VelocityField v{torch::full({1, 1, 3, 4}, 4.0, f64())};
  s = euler_step(s, v);
  EXPECT_DOUBLE_EQ(s.current.data[0][0][0][0].item<double>(), 2.0);
  s = euler_step(s, v);
  EXPECT_DOUBLE_EQ(s.current.data[0][0][0][0].item<double>(), 4.0);
  EXPECT_THROW(euler_step(s, v), std::out_of_range);
}

TEST(CumulativeUpdate, Cases) {
  EXPECT_DOUBLE_EQ(cumulative_update(field(2.0), {field(1.0).data}).data[0][0][0][0].item<double>(),
                   3.0);
  auto d0 = field(2.0);
  EXPECT_TRUE(torch::equal(cumulative_update(d0, {torch::zeros_like(d0.data)}).data, d0.data));
  auto gt = field(7.25);
  EXPECT_TRUE(torch::equal(cumulative_update(d0, velocity_target(gt, d0)).data, gt.data));
}

TEST(SampleReverse, ZeroVelocityIsFixedPoint) {
  auto d0 = DisparityField{torch::randn({1, 1, 4, 4}, f64()), 4};
  ScheduleParams s;
  s.steps = 5;
  for (auto rule : {ReverseRule::euler, ReverseRule::cumulative}) {
    auto traj = sample_reverse(
        [](const DisparityField& d, double) { return VelocityField{torch::zeros_like(d.data)}; },
        d0, s, rule);
    ASSERT_EQ(traj.size(), 6u);
    for (const auto& d : traj) EXPECT_TRUE(torch::equal(d.data, d0.data));
  }
}

TEST(SampleReverse, ExactVelocityRecoversGroundTruth) {
  torch::manual_seed(9);
  for (int trial = 0; trial < 5; ++trial) {
    auto gt = DisparityField{torch::rand({2, 1, 6, 7}, f64()) * 40.0, 4};
    auto d0 = DisparityField{torch::rand({2, 1, 6, 7}, f64()) * 40.0, 4};
    auto exact = [&](const DisparityField&, double) { return velocity_target(gt, d0); };
    for (int n : {1, 2, 4, 8, 32}) {
      ScheduleParams s;
      s.steps = n;
      auto euler = sample_reverse(exact, d0, s, ReverseRule::euler);
      EXPECT_TRUE(all_close(euler.back().data, gt.data, 1e-6)) << "euler N=" << n;
      auto cumulative = sample_reverse(exact, d0, s, ReverseRule::cumulative);
      for (size_t k = 1; k < cumulative.size(); ++k) {
        EXPECT_TRUE(all_close(cumulative[k].data, gt.data, 1e-6)) << "cumulative N=" << n;
      }
    }
  }
}

TEST(SampleReverse, TimesRunFromZeroTowardOne) {
  ScheduleParams s;
  s.steps = 4;
  std::vector<double> times;
  sample_reverse(
      [&](const DisparityField& d, double t) {
        times.push_back(t);
        return VelocityField{torch::zeros_like(d.data)};
      },
      field(0.0), s);
  EXPECT_EQ(times, (std::vector<double>{0.0, 0.25, 0.5, 0.75}));
}

TEST(SampleReverse, WrongVelocityShapeThrows) {
  ScheduleParams s;
  s.steps = 2;
  EXPECT_THROW(sample_reverse([](const DisparityField&,
                                 double) { return VelocityField{torch::zeros({1, 1, 1, 1})}; },
                              field(0.0), s),
               ShapeError);
}

TEST(Parsing, RoundTrip) {
  EXPECT_EQ(parse_schedule_family(to_string(ScheduleFamily::sigmoid)), ScheduleFamily::sigmoid);
  EXPECT_EQ(parse_reverse_rule(to_string(ReverseRule::euler)), ReverseRule::euler);
  EXPECT_THROW(parse_reverse_rule("rk4"), ConfigError);
}
