#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <fmt/format.h>

#include "CLI11.hpp"
#include "diffstereo/config.hpp"
#include "diffstereo/dataio.hpp"
#include "diffstereo/errors.hpp"
#include "diffstereo/pipeline.hpp"

namespace fs = std::filesystem;
using namespace diffstereo;

namespace {

enum ExitCode { kOk = 0, kFailure = 1, kConfigError = 2, kNumericalError = 3 };

struct CommonOptions {
  std::string config_path;
  std::string preset = "default";
  std::vector<std::string> overrides;
};

void add_common(CLI::App* cmd, CommonOptions& o) {
  cmd->add_option("-c,--config", o.config_path, "INI config file");
  cmd->add_option("--preset", o.preset, "base values before the config file")
      ->check(CLI::IsMember({"default", "desk"}));
  cmd->add_option("--set", o.overrides, "override as section.key=value (repeatable)");
}

void apply_overrides(RunConfig& config, const std::vector<std::string>& overrides) {
  for (const auto& item : overrides) {
    const auto eq = item.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(fmt::format("--set expects section.key=value, got '{}'", item));
    }
    set_value(config, item.substr(0, eq), item.substr(eq + 1));
  }
}

RunConfig build_config(const CommonOptions& o) {
  RunConfig config = o.preset == "desk" ? desk_config() : RunConfig{};
  if (!o.config_path.empty()) config = load_config(o.config_path, config);
  apply_overrides(config, o.overrides);
  apply_environment(config);
  config.validate();
  return config;
}

std::vector<std::string> split(const std::string& text, char sep) {
  std::vector<std::string> out;
  std::stringstream in(text);
  for (std::string item; std::getline(in, item, sep);) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

void write_file(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream(path) << text;
}

int run_train(const CommonOptions& common, const std::string& resume) {
  auto config = build_config(common);
  pipeline::Trainer trainer(config);
  if (!resume.empty()) trainer.load(resume);
  std::cout << fmt::format("config {} -> {}", config_hash(config), config.output_dir)
            << std::endl;
  trainer.run(&std::cout);
  std::cout << "checkpoint " << trainer.checkpoint_path().string() << std::endl;
  return kOk;
}

int run_eval(const CommonOptions& common, const std::string& checkpoint,
             const std::string& iters) {
  auto loaded = pipeline::load_model(checkpoint);
  auto config = loaded.config;
  if (!common.config_path.empty()) config = load_config(common.config_path, config);
  apply_overrides(config, common.overrides);
  apply_environment(config);
  for (const auto& key : config_keys()) {
    const bool architecture = key.starts_with("model.") || key.starts_with("flags.");
    if (architecture && get_value(config, key) != get_value(loaded.config, key)) {
      throw ConfigError(fmt::format("{} cannot be changed at evaluation time", key));
    }
  }
  if (!iters.empty()) set_value(config, "eval.iters", iters);
  config.validate();

  auto data = pipeline::make_eval_dataset(config);
  auto options = pipeline::eval_options(config);
  options.output_dir = fs::path(config.output_dir) / "eval";
  auto result = pipeline::evaluate(loaded.model, *data, options, loaded.id,
                                   pipeline::dataset_name(config, true));
  for (const auto& rec : result.records) std::cout << pipeline::format_record(result, rec) << '\n';
  pipeline::write_eval(result, config.output_dir);
  return kOk;
}

int run_infer(const std::string& checkpoint, const std::string& left, const std::string& right,
              const std::string& output, const std::string& png, std::optional<int> iters) {
  auto loaded = pipeline::load_model(checkpoint);
  auto l = dataio::read_image(left);
  auto r = dataio::read_image(right);
  const int n = iters.value_or(loaded.config.eval.infer_iters);
  if (n < 1) throw ConfigError("--iters must be >= 1");
  auto disparity = pipeline::infer(loaded.model, l, r, n, loaded.config.rule);
  if (!torch::isfinite(disparity).all().item<bool>()) {
    throw NumericalError("prediction contains non-finite values");
  }
  if (fs::path(output).has_parent_path()) fs::create_directories(fs::path(output).parent_path());
  dataio::write_pfm(output, disparity);
  if (!png.empty()) {
    dataio::write_disparity_png(png, disparity, 4.0 * loaded.config.model.max_disp);
  }
  std::cout << fmt::format("wrote {} ({}x{}, {} iterations)", output, disparity.size(1),
                           disparity.size(0), n)
            << std::endl;
  return kOk;
}

int run_ablate(const CommonOptions& common, const std::string& axes) {
  auto config = build_config(common);
  auto rows = pipeline::ablate(config, split(axes, ','), &std::cout);
  const auto table = pipeline::format_ablation(rows);
  std::cout << table;
  write_file(fs::path(config.output_dir) / "ablation.txt", table);
  write_file(fs::path(config.output_dir) / "ablation.json", pipeline::ablation_json(rows) + '\n');
  return kOk;
}

int run_synth(const CommonOptions& common, const std::string& out, bool eval) {
  auto config = build_config(common);
  auto data = eval ? pipeline::make_eval_dataset(config) : pipeline::make_train_dataset(config);
  dataio::export_dataset(*data, out);
  std::cout << fmt::format("wrote {} pairs to {}", data->size(), out) << std::endl;
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Iterative stereo matching with a diffusion-bridge refinement process"};
  app.require_subcommand(1);

  CommonOptions train_opts, eval_opts, ablate_opts, synth_opts;
  std::string resume, checkpoint, iters_list, left, right, output, png, axes, synth_out;
  std::optional<int> infer_iters;
  bool synth_eval = false;

  auto* train = app.add_subcommand("train", "train a model");
  add_common(train, train_opts);
  train->add_option("--resume", resume, "checkpoint to continue from")->check(CLI::ExistingFile);

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on the held-out set");
  add_common(eval, eval_opts);
  eval->add_option("--checkpoint", checkpoint)->required();
  eval->add_option("--iters", iters_list, "comma-separated iteration counts");

  auto* infer = app.add_subcommand("infer", "predict disparity for one image pair");
  infer->add_option("--checkpoint", checkpoint)->required();
  infer->add_option("--left", left)->required()->check(CLI::ExistingFile);
  infer->add_option("--right", right)->required()->check(CLI::ExistingFile);
  infer->add_option("-o,--output", output, "PFM output")->required();
  infer->add_option("--png", png, "colour-mapped PNG output");
  infer->add_option("--iters", infer_iters, "refinement steps");

  auto* ablate = app.add_subcommand("ablate", "train and evaluate an ablation grid");
  add_common(ablate, ablate_opts);
  ablate->add_option("--axes", axes, "comma-separated subset of ca,ffn,smish,te,aa,schedule,iterations");

  auto* synth = app.add_subcommand("synth", "write the synthetic dataset as PNG/PFM + manifest");
  add_common(synth, synth_opts);
  synth->add_option("-o,--output", synth_out)->required();
  synth->add_flag("--eval", synth_eval, "export the held-out split");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfigError;
  }

  try {
    if (*train) return run_train(train_opts, resume);
    if (*eval) return run_eval(eval_opts, checkpoint, iters_list);
    if (*infer) return run_infer(checkpoint, left, right, output, png, infer_iters);
    if (*ablate) return run_ablate(ablate_opts, axes);
    if (*synth) return run_synth(synth_opts, synth_out, synth_eval);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << std::endl;
    return kConfigError;
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << std::endl;
    return kNumericalError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return kFailure;
  }
  return kFailure;
}
