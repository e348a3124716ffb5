// Acceptance suite: one PASS/FAIL line per criterion.

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <limits>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <torch/torch.h>

#include "diffstereo/bridge.hpp"
#include "diffstereo/config.hpp"
#include "diffstereo/encoders.hpp"
#include "diffstereo/objectives.hpp"
#include "diffstereo/pipeline.hpp"
#include "diffstereo/updater.hpp"
#include "diffstereo/volume.hpp"

using namespace diffstereo;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

const auto kF64 = torch::TensorOptions().dtype(torch::kFloat64);

std::vector<double> to_vector(const torch::Tensor& t) {
  auto c = t.to(torch::kFloat64).contiguous();
  return {c.data_ptr<double>(), c.data_ptr<double>() + c.numel()};
}

// Criterion 1 --------------------------------------------------------------

// Plain-array reference for both volumes; features are [C][H][W] per batch.
double naive_volume_error(int b, int c, int g, int d, int h, int w, std::mt19937_64& rng) {
  std::normal_distribution<double> normal;
  std::vector<double> l(b * c * h * w), r(b * c * h * w);
  for (auto& v : l) v = normal(rng);
  for (auto& v : r) v = normal(rng);
  auto at = [&](const std::vector<double>& f, int bi, int ci, int y, int x) {
    return f[((bi * c + ci) * h + y) * w + x];
  };
  auto lt = torch::from_blob(l.data(), {b, c, h, w}, kF64).clone();
  auto rt = torch::from_blob(r.data(), {b, c, h, w}, kF64).clone();
  auto grp = to_vector(volume::group_correlation({lt}, {rt}, g, d).data);
  auto all = to_vector(volume::all_pairs_correlation({lt}, {rt}, d).data);

  double worst = 0.0;
  const int per = c / g;
  for (int bi = 0; bi < b; ++bi)
    for (int di = 0; di < d; ++di)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          double total = 0.0;
          for (int gi = 0; gi < g; ++gi) {
            double s = 0.0;
            for (int ci = gi * per; ci < (gi + 1) * per; ++ci) {
              if (x - di >= 0) s += at(l, bi, ci, y, x) * at(r, bi, ci, y, x - di);
            }
            total += s;
            const double got = grp[(((bi * g + gi) * d + di) * h + y) * w + x];
            worst = std::max(worst, std::abs(got - s / per));
          }
          const double got = all[((bi * d + di) * h + y) * w + x];
          worst = std::max(worst, std::abs(got - total));
        }
  return worst;
}

Outcome criterion1() {
  std::mt19937_64 rng(1);
  double worst = 0.0;
  int cases = 0;
  for (int c = 1; c <= 8; ++c)
    for (int g = 1; g <= c; ++g) {
      if (c % g) continue;
      for (int d = 1; d <= 8; ++d)
        for (int h : {1, 3, 8})
          for (int w : {1, 5, 8}) {
            worst = std::max(worst, naive_volume_error(2, c, g, d, h, w, rng));
            ++cases;
          }
    }
  return {worst <= 1e-6, fmt::format("{} shapes, max |err| = {:.3e} (tol 1e-6)", cases, worst)};
}

// Criterion 2 --------------------------------------------------------------

Outcome criterion2() {
  torch::manual_seed(2);
  double worst = 0.0;
  for (int trial = 0; trial < 10; ++trial) {
    DisparityField gt{torch::rand({2, 1, 7, 9}, kF64) * 48.0, 4};
    DisparityField d0{torch::rand({2, 1, 7, 9}, kF64) * 48.0, 4};
    auto oracle = [&](const DisparityField&, double) { return VelocityField{gt.data - d0.data}; };
    for (int n : {1, 2, 4, 8, 32}) {
      bridge::ScheduleParams s;
      s.family = bridge::ScheduleFamily::sigmoid;
      s.steps = n;
      for (auto rule : {bridge::ReverseRule::euler, bridge::ReverseRule::cumulative}) {
        auto traj = bridge::sample_reverse(oracle, d0, s, rule);
        worst = std::max(worst, (traj.back().data - gt.data).abs().max().item<double>());
      }
    }
  }
  return {worst <= 1e-6, fmt::format("max |D_N - D_gt| = {:.3e} over both rules, N in "
                                     "{{1,2,4,8,32}} (tol 1e-6)",
                                     worst)};
}

// Criterion 3 --------------------------------------------------------------

Outcome criterion3() {
  bridge::ScheduleParams sig;
  sig.family = bridge::ScheduleFamily::sigmoid;
  sig.start = -3.0;
  sig.end = 3.0;
  sig.tau = 1.0;
  const double b0 = bridge::beta(0.0, sig);
  const double bh = bridge::beta(0.5, sig);
  const double b1 = bridge::beta(1.0, sig);
  bool monotone = true;
  double prev = b0;
  for (int i = 1; i < 1000; ++i) {
    const double b = bridge::beta(i / 999.0, sig);
    monotone = monotone && b <= prev;
    prev = b;
  }
  bridge::ScheduleParams lin;
  double lin_err = 0.0;
  for (int i = 0; i <= 1000; ++i) {
    const double t = i / 1000.0;
    const double expect = std::max(1.0 - t, lin.min_clip);
    lin_err = std::max(lin_err, std::abs(bridge::beta(t, lin) - expect));
  }
  const bool pass = b0 == 1.0 && std::abs(bh - 0.5) <= 1e-9 && b1 == 1e-9 && monotone &&
                    lin_err == 0.0;
  return {pass, fmt::format("beta(0)={} beta(0.5)={:.12f} beta(1)={:.3g} monotone={} "
                            "linear max err={:.1e}",
                            b0, bh, b1, monotone, lin_err)};
}

// Criterion 4 --------------------------------------------------------------

Outcome criterion4() {
  auto cfg = desk_config();
  cfg.model.feature_channels = 8;
  cfg.model.groups = 2;
  cfg.model.max_disp = 4;
  cfg.model.hidden = 8;
  cfg.model.context_base = 8;
  cfg.model.regularizer_channels = 4;
  cfg.model.radius = 2;
  cfg.model.agent_grid = 2;
  cfg.model.flags.aa = true;
  cfg.model.flags.ffn = true;
  cfg.train.iters = 3;
  cfg.train.detach_iterate = false;
  cfg.loss.dynamic_range = 16.0;

  torch::manual_seed(4);
  StereoModel model(cfg.model);
  model->to(torch::kFloat64);
  {
    // Give the zero-initialised heads and projections random weights so every
    // parameter receives a non-trivial gradient.
    torch::NoGradGuard guard;
    for (auto& p : model->parameters()) {
      if (p.abs().max().item<double>() == 0.0) p.normal_(0.0, 0.1);
    }
  }
  model->train();

  dataio::SynthConfig synth;
  synth.height = 32;
  synth.width = 32;
  synth.max_disp = 6;
  synth.seed = 4;
  auto sample = dataio::generate_pair(synth);
  auto batch = dataio::collate({sample});
  batch.left = batch.left.to(torch::kFloat64);
  batch.right = batch.right.to(torch::kFloat64);
  batch.gt = batch.gt.to(torch::kFloat64);

  auto loss_value = [&]() { return pipeline::batch_loss(model, batch, cfg, -1.0).total; };
  model->zero_grad();
  loss_value().backward();

  const double eps = 1e-5;
  double worst = 0.0;
  std::string worst_name;
  int probes = 0;
  for (const auto& item : model->named_parameters()) {
    auto p = item.value();
    auto grad = p.grad().reshape(-1).clone();
    // The entries with the largest analytic gradient are the ones whose
    // finite difference is well above round-off.
    const int64_t k = std::min<int64_t>(3, grad.numel());
    auto idx = std::get<1>(grad.abs().topk(k));
    for (int64_t j = 0; j < k; ++j) {
      const int64_t i = idx[j].item<int64_t>();
      const double an = grad[i].item<double>();
      if (std::abs(an) < 1e-6) continue;
      torch::NoGradGuard guard;
      auto flat = p.view(-1);
      const double orig = flat[i].item<double>();
      flat[i] = orig + eps;
      const double up = loss_value().item<double>();
      flat[i] = orig - eps;
      const double down = loss_value().item<double>();
      flat[i] = orig;
      const double fd = (up - down) / (2 * eps);
      const double rel = std::abs(an - fd) / std::max(std::abs(an), std::abs(fd));
      ++probes;
      if (rel > worst) {
        worst = rel;
        worst_name = item.key();
      }
    }
  }
  return {worst <= 1e-4 && probes > 0,
          fmt::format("{} parameter probes over {} tensors, max rel err = {:.3e} ({}) (tol 1e-4)",
                      probes, model->parameters().size(), worst, worst_name)};
}

// Criterion 5 --------------------------------------------------------------

Outcome criterion5() {
  const double at0 = encoders::smish(0.0);
  const double slope = encoders::smish(50.0) / 50.0;
  const double at1 = encoders::smish(1.0);
  const bool pass = at0 == 0.0 && std::abs(slope - 0.6) <= 1e-6 && std::abs(at1 - 0.49959) <= 1e-4;
  return {pass, fmt::format("smish(0)={} smish(50)/50={:.9f} smish(1)={:.6f}", at0, slope, at1)};
}

// Criterion 6 --------------------------------------------------------------

Outcome criterion6() {
  torch::manual_seed(6);
  double row_err = 0.0;
  for (int c : {1, 4, 16}) {
    encoders::ChannelSelfAttention attn(c, true);
    auto m = attn->attention_map(torch::randn({2, c, 9, 11}));
    row_err = std::max(row_err, (m.sum(-1) - 1.0).abs().max().item<double>());
  }

  double hull_violation = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    auto q = torch::randn({1, 64, 8}, kF64) * 3.0;
    auto k = torch::randn({1, 64, 8}, kF64) * 3.0;
    auto v = torch::randn({1, 64, 8}, kF64);
    auto a = torch::randn({1, 9, 8}, kF64);
    auto out = updater::agent_attention(q, k, v, a, 0.35);
    auto lo = std::get<0>(v.min(1, true));
    auto hi = std::get<0>(v.max(1, true));
    hull_violation = std::max(
        hull_violation, torch::relu(torch::maximum(lo - out, out - hi)).max().item<double>());
  }

  updater::FlopCounter small, large;
  auto count = [](int64_t n, updater::FlopCounter& c) {
    updater::agent_attention(torch::randn({1, n, 32}), torch::randn({1, n, 32}),
                             torch::randn({1, n, 32}), torch::randn({1, 49, 32}), 0.18, &c);
  };
  count(1024, small);
  count(2048, large);
  const double ratio = static_cast<double>(large.flops) / static_cast<double>(small.flops);

  const bool pass = row_err <= 1e-6 && hull_violation == 0.0 && ratio <= 2.2;
  return {pass, fmt::format("row-sum err={:.2e}, hull violation={:.2e}, cost ratio(2N/N)={:.3f}",
                            row_err, hull_violation, ratio)};
}

// Criteria 7 and 8 ---------------------------------------------------------

struct DeskRun {
  pipeline::EvalResult eval;
  double seconds = 0.0;
};

DeskRun train_and_eval(RunConfig cfg, const std::vector<int>& iters, std::ostream* log) {
  const auto t0 = std::chrono::steady_clock::now();
  pipeline::Trainer trainer(cfg);
  trainer.run(log);
  auto data = pipeline::make_eval_dataset(cfg);
  auto opts = pipeline::eval_options(cfg);
  opts.iters = iters;
  opts.output_dir = fs::path(cfg.output_dir) / "eval";
  auto result = pipeline::evaluate(
      trainer.model(), *data, opts,
      fmt::format("{}@{}", config_hash(cfg), trainer.current_step()),
      pipeline::dataset_name(cfg, true));
  pipeline::write_eval(result, cfg.output_dir);
  const auto t1 = std::chrono::steady_clock::now();
  return {result, std::chrono::duration<double>(t1 - t0).count()};
}

double epe_at(const pipeline::EvalResult& r, int n) {
  for (const auto& rec : r.records) {
    if (rec.iters == n) return rec.report.epe;
  }
  return std::numeric_limits<double>::quiet_NaN();
}

// Criterion 9 --------------------------------------------------------------

Outcome criterion9(const fs::path& work, int steps, std::ostream* log) {
  struct Variant {
    std::string name;
    bool ca, te;
  };
  const std::vector<Variant> variants{{"full", true, true}, {"no_te", true, false},
                                      {"baseline", false, false}};
  std::map<std::string, std::vector<double>> epe;
  for (uint64_t seed : {11u, 12u, 13u}) {
    for (const auto& v : variants) {
      auto cfg = desk_config();
      cfg.train.steps = steps;
      cfg.train.seed = seed;
      cfg.model.flags.ca = v.ca;
      cfg.model.flags.te = v.te;
      cfg.output_dir = (work / fmt::format("c9_{}_s{}", v.name, seed)).string();
      auto run = train_and_eval(cfg, {8}, nullptr);
      epe[v.name].push_back(epe_at(run.eval, 8));
      if (log) {
        *log << fmt::format("  c9 {} seed={} epe@8={:.4f} ({:.0f}s)\n", v.name, seed,
                            epe[v.name].back(), run.seconds)
             << std::flush;
      }
    }
  }
  auto mean = [](const std::vector<double>& x) {
    double s = 0.0;
    for (double v : x) s += v;
    return s / static_cast<double>(x.size());
  };
  // Paired improvement from disabling TE; positive means no_te is better.
  std::vector<double> gain;
  for (size_t i = 0; i < 3; ++i) gain.push_back(epe["full"][i] - epe["no_te"][i]);
  const double g = mean(gain);
  double var = 0.0;
  for (double x : gain) var += (x - g) * (x - g);
  const double se = std::sqrt(var / 2.0) / std::sqrt(3.0);
  const double noise = 2.92 * se;  // one-sided t(0.95, df = 2)
  const bool te_ok = g <= noise;
  const double ratio = mean(epe["full"]) / mean(epe["baseline"]);
  const bool ca_ok = ratio <= 1.05;
  return {te_ok && ca_ok,
          fmt::format("mean EPE@8 full={:.4f} no_te={:.4f} baseline={:.4f}; disabling TE "
                      "gain={:.4f} vs noise {:.4f}; full/baseline={:.3f} (max 1.05); {} steps",
                      mean(epe["full"]), mean(epe["no_te"]), mean(epe["baseline"]), g, noise,
                      ratio, steps)};
}

// Criterion 10 -------------------------------------------------------------

Outcome criterion10() {
  torch::manual_seed(10);
  auto pred = torch::rand({1, 1, 12, 10}, kF64) * 30.0;
  auto gt = torch::rand({1, 1, 12, 10}, kF64) * 30.0;
  auto mask = torch::rand({1, 1, 12, 10}) > 0.3;
  const double got = objectives::loss_pixel({{pred, 1}}, {gt, 1}, 0.9, mask).item<double>();
  auto p = to_vector(pred), g = to_vector(gt);
  auto m = mask.reshape(-1);
  double sum = 0.0;
  int64_t n = 0;
  for (int64_t i = 0; i < m.numel(); ++i) {
    if (!m[i].item<bool>()) continue;
    sum += std::abs(p[i] - g[i]);
    ++n;
  }
  const double l1 = sum / static_cast<double>(n);

  objectives::LossWeights w;
  const auto one = torch::tensor(1.0, kF64);
  const double total =
      objectives::total_loss({one, one * 2.0, one * 0.5}, w).item<double>();
  const double self = objectives::loss_diff({pred, 1}, {pred, 1}, w).item<double>();

  const bool pass = std::abs(got - l1) <= 1e-12 * l1 && total == 3.25 && std::abs(self) <= 1e-12;
  return {pass, fmt::format("L_pixel(N=1)={:.15g} masked L1={:.15g}; total(1,2,0.5)={}; "
                            "L_diff(d,d)={:.1e}",
                            got, l1, total, self)};
}

// Criterion 11 -------------------------------------------------------------

Outcome criterion11() {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> value(0.0, 50.0);
  int mismatches = 0, not_idempotent = 0, grids = 0;
  for (int h = 1; h <= 16; h += 3) {
    for (int w = 1; w <= 16; w += 3) {
      for (double density : {0.05, 0.3, 0.8}) {
        std::bernoulli_distribution keep(density);
        std::vector<double> vals(h * w);
        std::vector<char> valid(h * w);
        bool any = false;
        for (int i = 0; i < h * w; ++i) {
          vals[i] = value(rng);
          valid[i] = keep(rng);
          any = any || valid[i];
        }
        if (!any) valid[0] = 1;
        auto vt = torch::from_blob(vals.data(), {h, w}, kF64).clone();
        auto mt = torch::from_blob(valid.data(), {h, w}, torch::kBool).clone();
        auto filled = objectives::infill_gt_nearest(vt, mt);
        auto again = objectives::infill_gt_nearest(filled, torch::ones({h, w}, torch::kBool));
        if (!torch::equal(again, filled)) ++not_idempotent;
        auto f = to_vector(filled);
        for (int y = 0; y < h; ++y)
          for (int x = 0; x < w; ++x) {
            double expect = vals[y * w + x];
            if (!valid[y * w + x]) {
              int64_t best = std::numeric_limits<int64_t>::max();
              for (int yy = 0; yy < h; ++yy)
                for (int xx = 0; xx < w; ++xx) {
                  if (!valid[yy * w + xx]) continue;
                  const int64_t d2 = int64_t(yy - y) * (yy - y) + int64_t(xx - x) * (xx - x);
                  if (d2 < best) {
                    best = d2;
                    expect = vals[yy * w + xx];
                  }
                }
            }
            if (f[y * w + x] != expect) ++mismatches;
          }
        ++grids;
      }
    }
  }
  return {mismatches == 0 && not_idempotent == 0,
          fmt::format("{} grids up to 16x16: {} oracle mismatches, {} non-idempotent", grids,
                      mismatches, not_idempotent)};
}

// Criterion 12 -------------------------------------------------------------

Outcome criterion12(const fs::path& work, int steps) {
  std::vector<std::string> records[2];
  for (int run = 0; run < 2; ++run) {
    auto cfg = desk_config();
    cfg.train.steps = steps;
    cfg.data.eval_samples = 8;
    cfg.output_dir = (work / fmt::format("c12_run{}", run)).string();
    auto result = train_and_eval(cfg, {1, 2, 4, 8}, nullptr);
    for (const auto& rec : result.eval.records) {
      records[run].push_back(pipeline::format_record(result.eval, rec));
    }
  }
  const bool same = records[0] == records[1];
  return {same, fmt::format("{} records per run, identical={} ({} training steps); e.g. {}",
                            records[0].size(), same, steps,
                            records[0].empty() ? "-" : records[0].back())};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance criteria"};
  std::vector<int> only;
  std::string work = "acceptance_work";
  int steps9 = 300;
  int steps12 = 40;
  std::vector<int> allow_fail;
  std::string report;
  app.add_option("--only", only, "criteria to run (default: all)")->delimiter(',');
  app.add_option("--work", work, "scratch directory for training runs");
  app.add_option("--ablation-steps", steps9, "training steps per run for criterion 9");
  app.add_option("--determinism-steps", steps12, "training steps per run for criterion 12");
  app.add_option("--allow-fail", allow_fail,
                 "criteria whose FAIL is reported but does not set the exit code")
      ->delimiter(',');
  app.add_option("--report", report, "also write the result lines to this file");
  CLI11_PARSE(app, argc, argv);

  torch::set_num_threads(1);
  const fs::path root(work);
  fs::create_directories(root);
  std::set<int> wanted(only.begin(), only.end());
  auto enabled = [&](int k) { return wanted.empty() || wanted.count(k) > 0; };

  std::optional<DeskRun> desk;
  auto desk_run = [&]() -> const DeskRun& {
    if (!desk) {
      auto cfg = desk_config();
      cfg.output_dir = (root / "c7_desk").string();
      std::ofstream log(root / "c7_train.log");
      desk = train_and_eval(cfg, {0, 1, 2, 4, 8}, &log);
    }
    return *desk;
  };

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"oracle equivalence of correlation volumes", criterion1},
      {"bridge exactness under oracle velocity", criterion2},
      {"noise schedule contract", criterion3},
      {"gradient integrity of the full pipeline", criterion4},
      {"smish identities", criterion5},
      {"attention properties", criterion6},
      {"desk-scale convergence",
       [&] {
         const auto& r = desk_run();
         const double e8 = epe_at(r.eval, 8);
         return Outcome{e8 < 1.0, fmt::format("held-out EPE@8 = {:.4f} px (need < 1.0); {} "
                                              "steps, train+eval {:.0f}s",
                                              e8, desk_config().train.steps, r.seconds)};
       }},
      {"iteration trend",
       [&] {
         const auto& r = desk_run();
         std::vector<double> e;
         for (int n : {1, 2, 4, 8}) e.push_back(epe_at(r.eval, n));
         bool monotone = true;
         for (size_t i = 1; i < e.size(); ++i) monotone = monotone && e[i] <= e[i - 1];
         const double gain = (e[0] - e[3]) / e[0];
         return Outcome{monotone && gain >= 0.10,
                        fmt::format("EPE N=1,2,4,8: {:.4f} {:.4f} {:.4f} {:.4f}; "
                                    "non-increasing={} improvement={:.1f}% (need >= 10%); "
                                    "d_0 EPE {:.4f}",
                                    e[0], e[1], e[2], e[3], monotone, 100 * gain,
                                    epe_at(r.eval, 0))};
       }},
      {"ablation direction",
       [&] { return criterion9(root, steps9, &std::cout); }},
      {"loss identities", criterion10},
      {"nearest-neighbour infill", criterion11},
      {"determinism", [&] { return criterion12(root, steps12); }},
  };

  const std::set<int> allowed(allow_fail.begin(), allow_fail.end());
  std::ofstream report_file;
  if (!report.empty()) report_file.open(report);
  auto emit = [&](const std::string& line) {
    std::cout << line << std::endl;
    if (report_file) report_file << line << std::endl;
  };

  int failed = 0;
  int blocking = 0;
  for (size_t i = 0; i < criteria.size(); ++i) {
    const int k = static_cast<int>(i) + 1;
    if (!enabled(k)) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, fmt::format("exception: {}", e.what())};
    }
    if (!o.pass) {
      ++failed;
      if (!allowed.count(k)) ++blocking;
    }
    emit(fmt::format("criterion {:>2} {} {}: {}{}", k, o.pass ? "PASS" : "FAIL",
                     criteria[i].first, o.detail,
                     !o.pass && allowed.count(k) ? " [allowed to fail]" : ""));
  }
  emit(fmt::format("acceptance finished: {} failed, {} blocking", failed, blocking));
  return blocking == 0 ? 0 : 1;
}
