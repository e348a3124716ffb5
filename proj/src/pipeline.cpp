#include "diffstereo/pipeline.hpp"

#include <cmath>
#include <fstream>
#include <numbers>
#include <ostream>
#include <random>
#include <set>

#include <fmt/format.h>
#include "json.hpp"

#include "diffstereo/errors.hpp"

namespace diffstereo::pipeline {

namespace fs = std::filesystem;
namespace F = torch::nn::functional;
using torch::indexing::None;
using torch::indexing::Slice;

namespace {

constexpr uint64_t kBridgeStream = 0x62726964676521ULL;

double cosine_anneal(double from, double to, double fraction) {
  return to + (from - to) * 0.5 * (std::cos(std::numbers::pi * fraction) + 1.0);
}

ForwardOptions forward_options(const RunConfig& config) {
  ForwardOptions o;
  o.iters = config.train.iters;
  o.rule = config.rule;
  o.detach_iterate = config.train.detach_iterate;
  return o;
}

torch::Tensor eval_mask(const torch::Tensor& valid, const torch::Tensor& gt, double max_gt) {
  auto mask = valid.to(torch::kBool);
  if (max_gt > 0.0) mask = mask.logical_and(gt < max_gt);
  return mask;
}

/// Ground truth with unknown pixels replaced by their nearest known value.
torch::Tensor infill_batch(const torch::Tensor& gt, const torch::Tensor& mask) {
  if (mask.all().item<bool>()) return gt;
  std::vector<torch::Tensor> rows;
  for (int64_t b = 0; b < gt.size(0); ++b) {
    auto m = mask[b][0];
    rows.push_back(m.any().item<bool>()
                       ? objectives::infill_gt_nearest(gt[b][0], m).unsqueeze(0)
                       : gt[b]);
  }
  return torch::stack(rows);
}

struct Padded {
  torch::Tensor left;
  torch::Tensor right;
  int64_t height;
  int64_t width;
};

Padded pad16(const torch::Tensor& left, const torch::Tensor& right) {
  if (left.dim() != 3 || left.size(0) != 3 || !left.sizes().equals(right.sizes())) {
    throw ShapeError("expected two [3, H, W] images of equal size");
  }
  const auto h = left.size(1);
  const auto w = left.size(2);
  const auto ph = (16 - h % 16) % 16;
  const auto pw = (16 - w % 16) % 16;
  auto prep = [&](const torch::Tensor& t) {
    auto x = t.to(torch::kFloat32).unsqueeze(0);
    if (ph == 0 && pw == 0) return x;
    return F::pad(x, F::PadFuncOptions({0, pw, 0, ph}).mode(torch::kReplicate));
  };
  return {prep(left), prep(right), h, w};
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error(fmt::format("cannot write {}", path.string()));
  out << text;
}

}  // namespace

double one_cycle_lr(int step, int total_steps, double max_lr, double pct_start) {
  const double initial = max_lr / 25.0;
  const double final_lr = initial / 1e4;
  const int warm = std::max(1, static_cast<int>(std::lround(pct_start * total_steps)));
  if (step < warm) return cosine_anneal(initial, max_lr, static_cast<double>(step) / warm);
  const int decay = std::max(1, total_steps - 1 - warm);
  const double fraction = std::min(1.0, static_cast<double>(step - warm) / decay);
  return cosine_anneal(max_lr, final_lr, fraction);
}

double clip_gradients(torch::nn::Module& module, double clip) {
  double largest = 0.0;
  torch::NoGradGuard guard;
  for (auto& p : module.parameters()) {
    if (!p.grad().defined()) continue;
    auto g = p.grad();
    const double m = g.abs().max().item<double>();
    if (!std::isfinite(m)) return m;
    largest = std::max(largest, m);
    g.clamp_(-clip, clip);
  }
  return largest;
}

BatchLoss batch_loss(StereoModel& model, const dataio::Batch& batch, const RunConfig& config,
                     double bridge_t) {
  auto prepared = model->prepare(batch.left, batch.right);
  auto out = model->refine(prepared, forward_options(config));

  const auto mask = eval_mask(batch.valid, batch.gt, 4.0 * config.model.max_disp);
  const DisparityField gt{batch.gt, 1};
  BatchLoss loss;
  loss.parts.init = objectives::loss_init(out.initial_full, gt, mask);
  loss.parts.pixel = objectives::loss_pixel(out.full, gt, config.loss.gamma, mask);
  loss.parts.diff = objectives::loss_diff(out.full.back(),
                                          DisparityField{infill_batch(batch.gt, mask), 1},
                                          config.loss);
  loss.total = objectives::total_loss(loss.parts, config.loss);

  if (config.train.mode == TrainingMode::bridge && bridge_t >= 0.0) {
    const auto every4 = Slice(None, None, updater::kUpsampleFactor);
    DisparityField gt_q{batch.gt.index({Slice(), Slice(), every4, every4}) / 4.0, 4};
    auto mask_q = mask.index({Slice(), Slice(), every4, every4});
    DisparityField d0{prepared.initial.data.detach(), 4};
    auto d_t = bridge::forward_interpolate(gt_q, d0, bridge_t, config.schedule,
                                           config.plain_linear);
    auto v = model->velocity(prepared, prepared.context.hidden_init, d_t, bridge_t).velocity;
    auto target = bridge::velocity_target(gt_q, d0).data;
    auto m = mask_q.to(v.data.dtype());
    loss.bridge = ((v.data - target).pow(2) * m).sum() / m.sum().clamp_min(1.0);
    if (!torch::isfinite(loss.bridge).item<bool>()) {
      throw NumericalError("non-finite bridge loss");
    }
    loss.total = loss.total + config.train.bridge_weight * loss.bridge;
  }
  return loss;
}

std::unique_ptr<dataio::Dataset> make_train_dataset(const RunConfig& config) {
  if (!config.data.manifest.empty()) {
    return std::make_unique<dataio::ManifestDataset>(config.data.manifest);
  }
  return std::make_unique<dataio::SyntheticDataset>(config.data.synth,
                                                    config.data.train_samples);
}

std::unique_ptr<dataio::Dataset> make_eval_dataset(const RunConfig& config) {
  if (!config.data.eval_manifest.empty()) {
    return std::make_unique<dataio::ManifestDataset>(config.data.eval_manifest);
  }
  auto synth = config.data.synth;
  synth.seed = config.data.eval_seed;
  return std::make_unique<dataio::SyntheticDataset>(synth, config.data.eval_samples);
}

std::string dataset_name(const RunConfig& config, bool eval) {
  const auto& manifest = eval ? config.data.eval_manifest : config.data.manifest;
  if (!manifest.empty()) return manifest;
  return fmt::format("synthetic-{}x{}", eval ? config.data.eval_seed : config.data.synth.seed,
                     eval ? config.data.eval_samples : config.data.train_samples);
}

Trainer::Trainer(RunConfig config) : config_(std::move(config)) {
  config_.validate();
  torch::set_num_threads(1);
  torch::manual_seed(config_.train.seed);
  model_ = StereoModel(config_.model);
  optimizer_ = std::make_unique<torch::optim::AdamW>(
      model_->parameters(),
      torch::optim::AdamWOptions(config_.train.lr).weight_decay(config_.train.weight_decay));
  data_ = make_train_dataset(config_);
  if (data_->size() == 0) throw ConfigError("training set is empty");
}

dataio::Batch Trainer::batch_for_step(int step) const {
  const auto n = data_->size();
  const auto seed = config_.train.seed;
  std::vector<dataio::StereoSample> samples;
  for (int b = 0; b < config_.train.batch; ++b) {
    const auto position = static_cast<uint64_t>(step) * config_.train.batch + b;
    const auto order = dataio::epoch_order(n, seed, position / n);
    auto sample = data_->get(order[position % n]);
    samples.push_back(dataio::random_crop(sample, config_.train.crop_height,
                                          config_.train.crop_width,
                                          dataio::mix_seed(seed, position)));
  }
  return dataio::collate(samples);
}

StepStats Trainer::step() {
  const auto& tc = config_.train;
  auto batch = batch_for_step(step_);
  double bridge_t = -1.0;
  if (tc.mode == TrainingMode::bridge) {
    std::mt19937_64 rng(dataio::mix_seed(tc.seed ^ kBridgeStream, step_));
    bridge_t = static_cast<double>(rng() >> 11) * 0x1.0p-53;
  }

  StepStats stats;
  stats.lr = one_cycle_lr(step_, tc.steps, tc.lr, tc.pct_start);
  for (auto& group : optimizer_->param_groups()) {
    static_cast<torch::optim::AdamWOptions&>(group.options()).lr(stats.lr);
  }
  model_->train();
  optimizer_->zero_grad();

  auto dump = [&](const std::string& why) {
    const auto path = fs::path(config_.output_dir) / "nan_dump.pt";
    fs::create_directories(path.parent_path());
    torch::serialize::OutputArchive archive;
    archive.write("left", batch.left);
    archive.write("right", batch.right);
    archive.write("gt", batch.gt);
    archive.write("valid", batch.valid);
    archive.write("step", torch::tensor(static_cast<int64_t>(step_)));
    archive.save_to(path.string());
    return NumericalError(fmt::format("step {}: {}; batch written to {}", step_ + 1, why,
                                      path.string()));
  };

  BatchLoss loss;
  try {
    loss = batch_loss(model_, batch, config_, bridge_t);
  } catch (const NumericalError& e) {
    throw dump(e.what());
  }
  loss.total.backward();
  stats.grad_max = clip_gradients(*model_, tc.clip);
  if (!std::isfinite(stats.grad_max)) throw dump("non-finite gradient");
  optimizer_->step();
  ++step_;

  stats.step = step_;
  stats.loss = loss.total.item<double>();
  stats.init = loss.parts.init.item<double>();
  stats.pixel = loss.parts.pixel.item<double>();
  stats.diff = loss.parts.diff.item<double>();
  if (loss.bridge.defined()) stats.bridge = loss.bridge.item<double>();
  return stats;
}

fs::path Trainer::checkpoint_path() const { return fs::path(config_.output_dir) / "checkpoint.pt"; }

std::vector<StepStats> Trainer::run(std::ostream* log) {
  const fs::path dir(config_.output_dir);
  fs::create_directories(dir);
  write_text(dir / "config.ini", to_ini(config_));
  std::ofstream log_file(dir / "train_log.txt", step_ == 0 ? std::ios::trunc : std::ios::app);

  std::vector<StepStats> history;
  while (step_ < config_.train.steps) {
    auto s = step();
    history.push_back(s);
    if (s.step == 1 || s.step % std::max(1, config_.train.log_every) == 0 ||
        s.step == config_.train.steps) {
      auto line = fmt::format(
          "step={} loss={:.6f} init={:.6f} pixel={:.6f} diff={:.6f} bridge={:.6f} lr={:.3e} "
          "grad_max={:.3e}",
          s.step, s.loss, s.init, s.pixel, s.diff, s.bridge, s.lr, s.grad_max);
      log_file << line << '\n' << std::flush;
      if (log) *log << line << '\n' << std::flush;
    }
    if (config_.train.checkpoint_every > 0 && s.step % config_.train.checkpoint_every == 0) {
      save(checkpoint_path());
    }
  }
  save(checkpoint_path());
  return history;
}

void Trainer::save(const fs::path& path) const {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  torch::serialize::OutputArchive archive;
  torch::serialize::OutputArchive model_archive;
  model_->save(model_archive);
  archive.write("model", model_archive);
  torch::serialize::OutputArchive optimizer_archive;
  optimizer_->save(optimizer_archive);
  archive.write("optimizer", optimizer_archive);
  archive.write("step", torch::tensor(static_cast<int64_t>(step_)));
  archive.write("config", c10::IValue(to_ini(config_)));
  archive.write("hash", c10::IValue(config_hash(config_)));
  const auto tmp = fs::path(path.string() + ".tmp");
  archive.save_to(tmp.string());
  fs::rename(tmp, path);
}

void Trainer::load(const fs::path& path) {
  torch::serialize::InputArchive archive;
  archive.load_from(path.string());
  c10::IValue hash;
  if (!archive.try_read("hash", hash) || hash.toStringRef() != config_hash(config_)) {
    throw ConfigError(fmt::format("checkpoint {} was written with a different config",
                                  path.string()));
  }
  torch::serialize::InputArchive model_archive;
  archive.read("model", model_archive);
  model_->load(model_archive);
  torch::serialize::InputArchive optimizer_archive;
  archive.read("optimizer", optimizer_archive);
  optimizer_->load(optimizer_archive);
  torch::Tensor step;
  archive.read("step", step);
  step_ = static_cast<int>(step.item<int64_t>());
}

LoadedModel load_model(const fs::path& checkpoint) {
  if (!fs::exists(checkpoint)) {
    throw ConfigError(fmt::format("checkpoint {} not found", checkpoint.string()));
  }
  torch::serialize::InputArchive archive;
  archive.load_from(checkpoint.string());
  c10::IValue text;
  if (!archive.try_read("config", text)) {
    throw FormatError(fmt::format("{} has no stored config", checkpoint.string()));
  }
  LoadedModel loaded;
  loaded.config = parse_config(text.toStringRef());
  torch::set_num_threads(1);
  loaded.model = StereoModel(loaded.config.model);
  torch::serialize::InputArchive model_archive;
  archive.read("model", model_archive);
  loaded.model->load(model_archive);
  torch::Tensor step;
  archive.read("step", step);
  loaded.step = static_cast<int>(step.item<int64_t>());
  loaded.id = fmt::format("{}@{}", config_hash(loaded.config), loaded.step);
  return loaded;
}

EvalOptions eval_options(const RunConfig& config) {
  EvalOptions o;
  o.iters = config.eval.iters;
  o.rule = config.rule;
  o.max_gt = 4.0 * config.model.max_disp;
  o.save_outputs = config.eval.save_outputs;
  return o;
}

EvalResult evaluate(StereoModel& model, const dataio::Dataset& dataset,
                    const EvalOptions& options, std::string checkpoint_id,
                    std::string name) {
  if (options.iters.empty()) throw ConfigError("no iteration counts to evaluate");
  if (*std::min_element(options.iters.begin(), options.iters.end()) < 0) {
    throw ConfigError("iteration counts must be >= 0");
  }
  torch::NoGradGuard guard;
  model->eval();
  const int n_max = *std::max_element(options.iters.begin(), options.iters.end());
  std::vector<std::vector<objectives::MetricReport>> per_count(options.iters.size());

  for (size_t i = 0; i < dataset.size(); ++i) {
    auto sample = dataset.get(i);
    auto padded = pad16(sample.left, sample.right);
    auto gt = sample.gt_disparity[0];
    auto mask = eval_mask(sample.valid_mask[0], gt, options.max_gt);
    if (!mask.any().item<bool>()) continue;
    auto prepared = model->prepare(padded.left, padded.right);
    for (size_t k = 0; k < options.iters.size(); ++k) {
      ForwardOptions fo;
      fo.iters = std::max(options.iters[k], 1);
      fo.rule = options.rule;
      auto out = model->refine(prepared, fo);
      const auto& field = options.iters[k] == 0 ? out.initial_full : out.full.back();
      auto pred = field.data[0][0].index(
          {Slice(0, padded.height), Slice(0, padded.width)});
      per_count[k].push_back(objectives::metrics(pred, gt, mask));
      if (!options.output_dir.empty() && static_cast<int>(i) < options.save_outputs &&
          options.iters[k] == n_max) {
        fs::create_directories(options.output_dir);
        const auto stem = options.output_dir / fmt::format("sample_{:03d}_n{}", i, n_max);
        dataio::write_pfm(stem.string() + ".pfm", pred);
        dataio::write_disparity_png(stem.string() + ".png", pred,
                                    options.max_gt > 0.0 ? options.max_gt : 0.0);
      }
    }
  }

  EvalResult result{std::move(checkpoint_id), std::move(name), {}};
  for (size_t k = 0; k < options.iters.size(); ++k) {
    if (per_count[k].empty()) throw std::invalid_argument("evaluation set has no valid pixels");
    result.records.push_back({options.iters[k], objectives::merge(per_count[k])});
  }
  return result;
}

std::string format_record(const EvalResult& result, const EvalRecord& record) {
  const auto& r = record.report;
  auto line = fmt::format(
      "checkpoint={} dataset={} iters={} epe={:.6f} bad1={:.4f} bad3={:.4f} d1_all={:.4f} "
      "pixels={}",
      result.checkpoint.empty() ? "-" : result.checkpoint,
      result.dataset.empty() ? "-" : result.dataset, record.iters, r.epe, r.bad1, r.bad3,
      r.d1_all, r.pixels);
  if (r.d1_fg) line += fmt::format(" d1_fg={:.4f}", *r.d1_fg);
  if (r.d1_bg) line += fmt::format(" d1_bg={:.4f}", *r.d1_bg);
  return line;
}

std::string to_json(const EvalResult& result) {
  nlohmann::json j;
  j["checkpoint"] = result.checkpoint;
  j["dataset"] = result.dataset;
  j["records"] = nlohmann::json::array();
  for (const auto& rec : result.records) {
    nlohmann::json r{{"iters", rec.iters},       {"epe", rec.report.epe},
                     {"bad1", rec.report.bad1},  {"bad3", rec.report.bad3},
                     {"d1_all", rec.report.d1_all}, {"pixels", rec.report.pixels}};
    if (rec.report.d1_fg) r["d1_fg"] = *rec.report.d1_fg;
    if (rec.report.d1_bg) r["d1_bg"] = *rec.report.d1_bg;
    j["records"].push_back(r);
  }
  return j.dump(2);
}

void write_eval(const EvalResult& result, const fs::path& directory) {
  std::string text;
  for (const auto& rec : result.records) text += format_record(result, rec) + '\n';
  write_text(directory / "metrics.txt", text);
  write_text(directory / "metrics.json", to_json(result) + '\n');
}

torch::Tensor infer(StereoModel& model, const torch::Tensor& left, const torch::Tensor& right,
                    int iters, bridge::ReverseRule rule) {
  torch::NoGradGuard guard;
  model->eval();
  auto padded = pad16(left, right);
  ForwardOptions fo;
  fo.iters = iters;
  fo.rule = rule;
  auto out = model->forward(padded.left, padded.right, fo);
  return out.full.back().data[0][0]
      .index({Slice(0, padded.height), Slice(0, padded.width)})
      .contiguous();
}

const std::vector<std::string>& ablation_axes() {
  static const std::vector<std::string> axes{"ca", "ffn", "smish", "te", "aa", "schedule",
                                             "iterations"};
  return axes;
}

std::vector<AblationRow> ablate(const RunConfig& base, const std::vector<std::string>& axes,
                                std::ostream* log) {
  std::set<std::string> seen;
  for (const auto& axis : axes) {
    const auto& known = ablation_axes();
    if (std::find(known.begin(), known.end(), axis) == known.end()) {
      throw ConfigError(fmt::format("unknown ablation axis '{}'", axis));
    }
    if (!seen.insert(axis).second) {
      throw ConfigError(fmt::format("ablation axis '{}' given twice", axis));
    }
  }

  std::vector<std::pair<std::string, RunConfig>> grid{{"", base}};
  for (const auto& axis : axes) {
    std::vector<std::pair<std::string, RunConfig>> next;
    for (const auto& [label, cfg] : grid) {
      const auto sep = label.empty() ? "" : " ";
      if (axis == "iterations") {
        auto c = cfg;
        c.eval.iters = {1, 2, 3, 4, 8, 32};
        next.emplace_back(label, c);
      } else if (axis == "schedule") {
        for (const auto& preset : bridge::schedule_presets()) {
          auto c = cfg;
          c.schedule = preset.params;
          c.train.mode = TrainingMode::bridge;
          next.emplace_back(fmt::format("{}{}schedule={}", label, sep, preset.name), c);
        }
      } else {
        for (bool on : {false, true}) {
          auto c = cfg;
          auto& flags = c.model.flags;
          bool& flag = axis == "ca"      ? flags.ca
                       : axis == "ffn"   ? flags.ffn
                       : axis == "smish" ? flags.smish
                       : axis == "te"    ? flags.te
                                         : flags.aa;
          flag = on;
          next.emplace_back(fmt::format("{}{}{}={}", label, sep, axis, on ? "on" : "off"), c);
        }
      }
    }
    grid = std::move(next);
  }

  std::vector<AblationRow> rows;
  for (size_t i = 0; i < grid.size(); ++i) {
    auto [label, cfg] = grid[i];
    cfg.output_dir = (fs::path(base.output_dir) / fmt::format("ablate_{:02d}", i)).string();
    if (label.empty()) label = "baseline";
    if (log) *log << fmt::format("[{}/{}] {}", i + 1, grid.size(), label) << '\n' << std::flush;
    Trainer trainer(cfg);
    trainer.run(log);
    auto opts = eval_options(cfg);
    opts.output_dir = fs::path(cfg.output_dir) / "eval";
    auto data = make_eval_dataset(cfg);
    auto hash = config_hash(cfg);
    auto result = evaluate(trainer.model(), *data, opts,
                           fmt::format("{}@{}", hash, trainer.current_step()),
                           dataset_name(cfg, true));
    write_eval(result, cfg.output_dir);
    rows.push_back({label, hash, cfg, std::move(result)});
  }
  return rows;
}

std::string format_ablation(const std::vector<AblationRow>& rows) {
  if (rows.empty()) return {};
  size_t width = 5;
  for (const auto& r : rows) width = std::max(width, r.label.size());
  std::string header = fmt::format("{:<{}}  {:<16}", "setting", width, "config");
  for (const auto& rec : rows.front().eval.records) {
    header += fmt::format("  {:>9} {:>9}", fmt::format("EPE@{}", rec.iters),
                          fmt::format("D1@{}", rec.iters));
  }
  std::string out = header + '\n';
  for (const auto& r : rows) {
    auto line = fmt::format("{:<{}}  {:<16}", r.label, width, r.config_hash);
    for (const auto& rec : r.eval.records) {
      line += fmt::format("  {:>9.4f} {:>9.3f}", rec.report.epe, rec.report.d1_all);
    }
    out += line + '\n';
  }
  return out;
}

std::string ablation_json(const std::vector<AblationRow>& rows) {
  auto j = nlohmann::json::array();
  for (const auto& r : rows) {
    j.push_back({{"setting", r.label},
                 {"config_hash", r.config_hash},
                 {"metrics", nlohmann::json::parse(to_json(r.eval))}});
  }
  return j.dump(2);
}

}  // namespace diffstereo::pipeline
