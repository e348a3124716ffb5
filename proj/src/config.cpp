#include "diffstereo/config.hpp"

#include <cstdlib>
#include <functional>
#include <map>
#include <sstream>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <fmt/format.h>
#include <fmt/ranges.h>
#include <openssl/evp.h>

#include "diffstereo/errors.hpp"

namespace diffstereo {

namespace {

struct Field {
  std::string key;  // "section.name"
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

std::string trim(const std::string& s) {
  const auto first = s.find_first_not_of(" \t\r\n");
  if (first == std::string::npos) return {};
  const auto last = s.find_last_not_of(" \t\r\n");
  return s.substr(first, last - first + 1);
}

template <typename T>
T parse_number(const std::string& key, const std::string& text) {
  std::istringstream in(trim(text));
  T value{};
  in >> value;
  if (in.fail() || !in.eof()) {
    throw ConfigError(fmt::format("{}: cannot parse '{}' as a number", key, text));
  }
  return value;
}

bool parse_bool(const std::string& key, const std::string& text) {
  const auto t = trim(text);
  if (t == "true" || t == "1" || t == "on" || t == "yes") return true;
  if (t == "false" || t == "0" || t == "off" || t == "no") return false;
  throw ConfigError(fmt::format("{}: expected a boolean, got '{}'", key, text));
}

std::string format_double(double v) { return fmt::format("{}", v); }

std::vector<int> parse_int_list(const std::string& key, const std::string& text) {
  std::vector<int> out;
  std::stringstream in(text);
  for (std::string item; std::getline(in, item, ',');) {
    if (trim(item).empty()) continue;
    out.push_back(parse_number<int>(key, item));
  }
  if (out.empty()) throw ConfigError(fmt::format("{}: empty list", key));
  return out;
}

template <typename T, typename Member>
Field number_field(std::string key, Member member) {
  return {key,
          [member](const RunConfig& c) {
            if constexpr (std::is_floating_point_v<T>) {
              return format_double(member(const_cast<RunConfig&>(c)));
            } else {
              return std::to_string(member(const_cast<RunConfig&>(c)));
            }
          },
          [member, key](RunConfig& c, const std::string& v) {
            member(c) = parse_number<T>(key, v);
          }};
}

template <typename Member>
Field bool_field(std::string key, Member member) {
  return {key,
          [member](const RunConfig& c) {
            return std::string(member(const_cast<RunConfig&>(c)) ? "true" : "false");
          },
          [member, key](RunConfig& c, const std::string& v) { member(c) = parse_bool(key, v); }};
}

template <typename Member>
Field string_field(std::string key, Member member) {
  return {key, [member](const RunConfig& c) { return member(const_cast<RunConfig&>(c)); },
          [member](RunConfig& c, const std::string& v) { member(c) = trim(v); }};
}

#define DS_REF(expr) [](RunConfig& c) -> auto& { return c.expr; }

const std::vector<Field>& fields() {
  static const std::vector<Field> table = [] {
    std::vector<Field> f;
    f.push_back(number_field<int>("model.feature_channels", DS_REF(model.feature_channels)));
    f.push_back(number_field<int>("model.groups", DS_REF(model.groups)));
    f.push_back(number_field<int>("model.max_disp", DS_REF(model.max_disp)));
    f.push_back(number_field<int>("model.hidden", DS_REF(model.hidden)));
    f.push_back(number_field<int>("model.context_base", DS_REF(model.context_base)));
    f.push_back(
        number_field<int>("model.regularizer_channels", DS_REF(model.regularizer_channels)));
    f.push_back(number_field<int>("model.radius", DS_REF(model.radius)));
    f.push_back(number_field<int>("model.agent_grid", DS_REF(model.agent_grid)));
    f.push_back(number_field<double>("model.time_scale", DS_REF(model.time_scale)));

    f.push_back(bool_field("flags.ca", DS_REF(model.flags.ca)));
    f.push_back(bool_field("flags.ffn", DS_REF(model.flags.ffn)));
    f.push_back(bool_field("flags.smish", DS_REF(model.flags.smish)));
    f.push_back(bool_field("flags.te", DS_REF(model.flags.te)));
    f.push_back(bool_field("flags.aa", DS_REF(model.flags.aa)));

    f.push_back({"schedule.family",
                 [](const RunConfig& c) { return bridge::to_string(c.schedule.family); },
                 [](RunConfig& c, const std::string& v) {
                   c.schedule.family = bridge::parse_schedule_family(trim(v));
                 }});
    f.push_back(number_field<double>("schedule.start", DS_REF(schedule.start)));
    f.push_back(number_field<double>("schedule.end", DS_REF(schedule.end)));
    f.push_back(number_field<double>("schedule.tau", DS_REF(schedule.tau)));
    f.push_back(number_field<double>("schedule.min_clip", DS_REF(schedule.min_clip)));

    f.push_back({"bridge.rule", [](const RunConfig& c) { return bridge::to_string(c.rule); },
                 [](RunConfig& c, const std::string& v) {
                   c.rule = bridge::parse_reverse_rule(trim(v));
                 }});
    f.push_back(bool_field("bridge.plain_linear", DS_REF(plain_linear)));

    f.push_back({"train.mode", [](const RunConfig& c) { return to_string(c.train.mode); },
                 [](RunConfig& c, const std::string& v) {
                   const auto t = trim(v);
                   if (t == "unrolled") {
                     c.train.mode = TrainingMode::unrolled;
                   } else if (t == "bridge") {
                     c.train.mode = TrainingMode::bridge;
                   } else {
                     throw ConfigError(fmt::format("train.mode: unknown mode '{}'", t));
                   }
                 }});
    f.push_back(number_field<int>("train.iters", DS_REF(train.iters)));
    f.push_back(number_field<int>("train.steps", DS_REF(train.steps)));
    f.push_back(number_field<int>("train.batch", DS_REF(train.batch)));
    f.push_back(number_field<double>("train.lr", DS_REF(train.lr)));
    f.push_back(number_field<double>("train.weight_decay", DS_REF(train.weight_decay)));
    f.push_back(number_field<double>("train.pct_start", DS_REF(train.pct_start)));
    f.push_back(number_field<double>("train.clip", DS_REF(train.clip)));
    f.push_back(number_field<int>("train.crop_height", DS_REF(train.crop_height)));
    f.push_back(number_field<int>("train.crop_width", DS_REF(train.crop_width)));
    f.push_back(number_field<uint64_t>("train.seed", DS_REF(train.seed)));
    f.push_back(bool_field("train.detach_iterate", DS_REF(train.detach_iterate)));
    f.push_back(number_field<int>("train.log_every", DS_REF(train.log_every)));
    f.push_back(number_field<int>("train.checkpoint_every", DS_REF(train.checkpoint_every)));
    f.push_back(number_field<double>("train.bridge_weight", DS_REF(train.bridge_weight)));

    f.push_back(number_field<double>("loss.gamma", DS_REF(loss.gamma)));
    f.push_back(number_field<double>("loss.lambda1", DS_REF(loss.lambda1)));
    f.push_back(number_field<double>("loss.lambda2", DS_REF(loss.lambda2)));
    f.push_back(number_field<int>("loss.ssim_window", DS_REF(loss.ssim_window)));
    f.push_back(number_field<double>("loss.dynamic_range", DS_REF(loss.dynamic_range)));

    f.push_back({"eval.iters",
                 [](const RunConfig& c) { return fmt::format("{}", fmt::join(c.eval.iters, ",")); },
                 [](RunConfig& c, const std::string& v) {
                   c.eval.iters = parse_int_list("eval.iters", v);
                 }});
    f.push_back(number_field<int>("eval.infer_iters", DS_REF(eval.infer_iters)));
    f.push_back(number_field<int>("eval.save_outputs", DS_REF(eval.save_outputs)));

    f.push_back(number_field<uint64_t>("data.seed", DS_REF(data.synth.seed)));
    f.push_back(number_field<int>("data.height", DS_REF(data.synth.height)));
    f.push_back(number_field<int>("data.width", DS_REF(data.synth.width)));
    f.push_back(number_field<double>("data.max_disp", DS_REF(data.synth.max_disp)));
    f.push_back(number_field<int>("data.octaves", DS_REF(data.synth.octaves)));
    f.push_back(number_field<int>("data.shapes", DS_REF(data.synth.shapes)));
    f.push_back(bool_field("data.subpixel", DS_REF(data.synth.subpixel)));
    f.push_back(number_field<int>("data.train_samples", DS_REF(data.train_samples)));
    f.push_back(number_field<int>("data.eval_samples", DS_REF(data.eval_samples)));
    f.push_back(number_field<uint64_t>("data.eval_seed", DS_REF(data.eval_seed)));
    f.push_back(string_field("data.manifest", DS_REF(data.manifest)));
    f.push_back(string_field("data.eval_manifest", DS_REF(data.eval_manifest)));

    f.push_back(string_field("output.dir", DS_REF(output_dir)));
    return f;
  }();
  return table;
}

#undef DS_REF

const Field& find_field(const std::string& key) {
  for (const auto& f : fields()) {
    if (f.key == key) return f;
  }
  throw ConfigError(fmt::format("unknown config key '{}'", key));
}

std::string sha256_hex(const std::string& text) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int length = 0;
  if (EVP_Digest(text.data(), text.size(), digest, &length, EVP_sha256(), nullptr) != 1) {
    throw std::runtime_error("SHA-256 digest failed");
  }
  std::string hex;
  for (unsigned int i = 0; i < length; ++i) hex += fmt::format("{:02x}", digest[i]);
  return hex;
}

}  // namespace

void RunConfig::validate() const {
  if (model.max_disp < 1 || model.hidden < 1 || model.feature_channels < 2 ||
      model.context_base < 2 || model.regularizer_channels < 1 || model.radius < 0) {
    throw ConfigError("model dimensions must be positive");
  }
  if (model.groups < 1 || model.feature_channels % model.groups != 0) {
    throw ConfigError("model.feature_channels must be divisible by model.groups");
  }
  schedule.validate();
  loss.validate();
  if (train.iters < 1) throw ConfigError("train.iters must be >= 1");
  if (!(train.lr > 0.0)) throw ConfigError("train.lr must be > 0");
  if (train.steps < 0 || train.batch < 1) throw ConfigError("train.steps/batch out of range");
  if (!(train.clip > 0.0)) throw ConfigError("train.clip must be > 0");
  if (!(train.pct_start > 0.0 && train.pct_start < 1.0)) {
    throw ConfigError("train.pct_start must be in (0, 1)");
  }
  if (train.crop_height % 16 != 0 || train.crop_width % 16 != 0) {
    throw ConfigError("crop size must be divisible by 16");
  }
  if (data.manifest.empty()) {
    data.synth.validate();
    if (train.crop_height > data.synth.height || train.crop_width > data.synth.width) {
      throw ConfigError("crop larger than synthetic images");
    }
  }
  for (int n : eval.iters) {
    if (n < 0) throw ConfigError("eval.iters entries must be >= 0");
  }
  if (eval.infer_iters < 1) throw ConfigError("eval.infer_iters must be >= 1");
  if (data.train_samples < 1 || data.eval_samples < 1) {
    throw ConfigError("data sample counts must be >= 1");
  }
}

RunConfig desk_config() {
  RunConfig c;
  c.model.hidden = 32;
  c.model.context_base = 32;
  c.model.feature_channels = 32;
  c.model.groups = 4;
  c.model.max_disp = 16;
  c.model.regularizer_channels = 8;
  c.model.radius = 4;
  c.train.iters = 8;
  c.train.steps = 2000;
  c.train.batch = 2;
  c.train.lr = 1e-3;
  c.eval.iters = {1, 2, 4, 8};
  c.eval.infer_iters = 8;
  c.data.synth.height = 80;
  c.data.synth.width = 160;
  c.data.synth.max_disp = 24.0;
  c.loss.dynamic_range = 4.0 * c.model.max_disp;
  return c;
}

namespace {

RunConfig apply_tree(const boost::property_tree::ptree& tree, const std::string& origin,
                     RunConfig base) {
  for (const auto& [section, entries] : tree) {
    if (entries.empty()) {
      throw ConfigError(fmt::format("{}: key '{}' outside any section", origin, section));
    }
    for (const auto& [key, value] : entries) {
      set_value(base, section + "." + key, value.get_value<std::string>());
    }
  }
  return base;
}

}  // namespace

RunConfig load_config(const std::filesystem::path& path, RunConfig base) {
  boost::property_tree::ptree tree;
  try {
    boost::property_tree::read_ini(path.string(), tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ConfigError(fmt::format("cannot parse config {}: {}", path.string(), e.what()));
  }
  return apply_tree(tree, path.string(), std::move(base));
}

RunConfig parse_config(const std::string& text, RunConfig base) {
  boost::property_tree::ptree tree;
  std::istringstream in(text);
  try {
    boost::property_tree::read_ini(in, tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ConfigError(fmt::format("cannot parse config text: {}", e.what()));
  }
  return apply_tree(tree, "<text>", std::move(base));
}

void set_value(RunConfig& config, const std::string& dotted_key, const std::string& value) {
  find_field(dotted_key).set(config, value);
}

std::string get_value(const RunConfig& config, const std::string& dotted_key) {
  return find_field(dotted_key).get(config);
}

std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  for (const auto& f : fields()) keys.push_back(f.key);
  return keys;
}

std::string to_ini(const RunConfig& config) {
  std::string out;
  std::string current;
  for (const auto& f : fields()) {
    const auto dot = f.key.find('.');
    const auto section = f.key.substr(0, dot);
    if (section != current) {
      if (!current.empty()) out += '\n';
      out += fmt::format("[{}]\n", section);
      current = section;
    }
    out += fmt::format("{} = {}\n", f.key.substr(dot + 1), f.get(config));
  }
  return out;
}

std::string config_hash(const RunConfig& config) {
  RunConfig copy = config;
  copy.output_dir.clear();
  return sha256_hex(to_ini(copy)).substr(0, 16);
}

void apply_environment(RunConfig& config) {
  if (const char* dir = std::getenv(kOutputDirEnv); dir != nullptr && *dir != '\0') {
    config.output_dir = dir;
  }
}

std::string to_string(TrainingMode mode) {
  return mode == TrainingMode::unrolled ? "unrolled" : "bridge";
}

}  // namespace diffstereo
