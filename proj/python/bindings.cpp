#include <cstring>
#include <optional>

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <torch/torch.h>

#include "diffstereo/bridge.hpp"
#include "diffstereo/config.hpp"
#include "diffstereo/dataio.hpp"
#include "diffstereo/encoders.hpp"
#include "diffstereo/errors.hpp"
#include "diffstereo/objectives.hpp"
#include "diffstereo/pipeline.hpp"

namespace py = pybind11;
using namespace diffstereo;

namespace {

using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;
using BoolArray = py::array_t<bool, py::array::c_style | py::array::forcecast>;

torch::Tensor to_tensor(const FloatArray& a) {
  std::vector<int64_t> shape(a.shape(), a.shape() + a.ndim());
  return torch::from_blob(const_cast<float*>(a.data()), shape, torch::kFloat32).clone();
}

torch::Tensor to_tensor(const BoolArray& a) {
  std::vector<int64_t> shape(a.shape(), a.shape() + a.ndim());
  return torch::from_blob(const_cast<bool*>(a.data()), shape, torch::kBool).clone();
}

template <typename T>
py::array_t<T> to_numpy(const torch::Tensor& t) {
  auto c = t.contiguous();
  py::array_t<T> out(std::vector<py::ssize_t>(c.sizes().begin(), c.sizes().end()));
  std::memcpy(out.mutable_data(), c.data_ptr<T>(), sizeof(T) * c.numel());
  return out;
}

py::dict sample_dict(const dataio::StereoSample& s) {
  py::dict d;
  d["left"] = to_numpy<float>(s.left);
  d["right"] = to_numpy<float>(s.right);
  d["gt"] = to_numpy<float>(s.gt_disparity[0]);
  d["valid"] = to_numpy<bool>(s.valid_mask[0]);
  return d;
}

py::dict report_dict(const objectives::MetricReport& r) {
  py::dict d;
  d["epe"] = r.epe;
  d["bad1"] = r.bad1;
  d["bad3"] = r.bad3;
  d["d1_all"] = r.d1_all;
  d["pixels"] = r.pixels;
  if (r.d1_fg) d["d1_fg"] = *r.d1_fg;
  if (r.d1_bg) d["d1_bg"] = *r.d1_bg;
  return d;
}

RunConfig make_config(const std::string& preset) {
  if (preset == "default") return RunConfig{};
  if (preset == "desk") return desk_config();
  throw ConfigError("unknown preset '" + preset + "' (expected default or desk)");
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Diffusion-bridge iterative stereo matching";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<NumericalError>(m, "NumericalError", PyExc_ArithmeticError);
  py::register_exception<FormatError>(m, "FormatError", PyExc_IOError);
  py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);

  m.def("smish", py::overload_cast<double>(&encoders::smish), py::arg("x"));

  m.def("schedule_presets", [] {
    std::vector<std::string> names;
    for (const auto& p : bridge::schedule_presets()) names.push_back(p.name);
    return names;
  });
  m.def(
      "beta",
      [](double t, const std::string& schedule) {
        return bridge::beta(t, bridge::schedule_preset(schedule));
      },
      py::arg("t"), py::arg("schedule") = "linear",
      "Schedule weight beta(t) for one of schedule_presets().");

  m.def(
      "read_pfm",
      [](const std::filesystem::path& path) {
        auto img = dataio::read_pfm(path);
        return py::make_tuple(to_numpy<float>(img.data), to_numpy<bool>(img.valid));
      },
      py::arg("path"), "Returns (disparity, valid) arrays of shape [H, W].");
  m.def(
      "write_pfm",
      [](const std::filesystem::path& path, const FloatArray& field) {
        dataio::write_pfm(path, to_tensor(field));
      },
      py::arg("path"), py::arg("field"));

  m.def(
      "generate_pair",
      [](uint64_t seed, int height, int width, double max_disp, int shapes, bool subpixel) {
        dataio::SynthConfig c;
        c.seed = seed;
        c.height = height;
        c.width = width;
        c.max_disp = max_disp;
        c.shapes = shapes;
        c.subpixel = subpixel;
        return sample_dict(dataio::generate_pair(c));
      },
      py::arg("seed") = 0, py::arg("height") = 80, py::arg("width") = 160,
      py::arg("max_disp") = 24.0, py::arg("shapes") = 6, py::arg("subpixel") = false,
      "Synthetic pair as a dict of left/right [3, H, W], gt [H, W] and valid [H, W].");

  m.def(
      "metrics",
      [](const FloatArray& pred, const FloatArray& gt, std::optional<BoolArray> mask) {
        return report_dict(objectives::metrics(to_tensor(pred), to_tensor(gt),
                                               mask ? to_tensor(*mask) : torch::Tensor{}));
      },
      py::arg("prediction"), py::arg("ground_truth"), py::arg("mask") = py::none());

  py::class_<RunConfig>(m, "Config")
      .def(py::init([](const std::string& preset, std::optional<std::filesystem::path> path) {
             auto c = make_config(preset);
             return path ? load_config(*path, c) : c;
           }),
           py::arg("preset") = "default", py::arg("path") = py::none())
      .def_static("from_ini", [](const std::string& text) { return parse_config(text); })
      .def("set", [](RunConfig& c, const std::string& key, const std::string& value) {
        set_value(c, key, value);
      })
      .def("get", [](const RunConfig& c, const std::string& key) { return get_value(c, key); })
      .def_static("keys", &config_keys)
      .def("validate", &RunConfig::validate)
      .def("to_ini", [](const RunConfig& c) { return to_ini(c); })
      .def("hash", [](const RunConfig& c) { return config_hash(c); })
      .def("__repr__", [](const RunConfig& c) {
        return "<Config " + config_hash(c) + " output=" + c.output_dir + ">";
      });

  m.def(
      "train",
      [](const RunConfig& config) {
        std::vector<pipeline::StepStats> history;
        {
          py::gil_scoped_release release;
          pipeline::Trainer trainer(config);
          history = trainer.run();
        }
        py::list out;
        for (const auto& s : history) {
          py::dict d;
          d["step"] = s.step;
          d["loss"] = s.loss;
          d["init"] = s.init;
          d["pixel"] = s.pixel;
          d["diff"] = s.diff;
          d["bridge"] = s.bridge;
          d["lr"] = s.lr;
          d["grad_max"] = s.grad_max;
          out.append(d);
        }
        return out;
      },
      py::arg("config"), "Trains to config train.steps; writes <output>/checkpoint.pt.");

  m.def(
      "evaluate",
      [](const std::filesystem::path& checkpoint, std::optional<std::vector<int>> iters) {
        pipeline::EvalResult result;
        {
          py::gil_scoped_release release;
          auto loaded = pipeline::load_model(checkpoint);
          auto opts = pipeline::eval_options(loaded.config);
          opts.save_outputs = 0;
          if (iters) opts.iters = *iters;
          auto data = pipeline::make_eval_dataset(loaded.config);
          result = pipeline::evaluate(loaded.model, *data, opts, loaded.id,
                                      pipeline::dataset_name(loaded.config, true));
        }
        py::dict d;
        d["checkpoint"] = result.checkpoint;
        d["dataset"] = result.dataset;
        py::list records;
        for (const auto& rec : result.records) {
          auto r = report_dict(rec.report);
          r["iters"] = rec.iters;
          records.append(r);
        }
        d["records"] = records;
        return d;
      },
      py::arg("checkpoint"), py::arg("iters") = py::none());

  m.def(
      "infer",
      [](const std::filesystem::path& checkpoint, const FloatArray& left, const FloatArray& right,
         std::optional<int> iters) {
        auto l = to_tensor(left);
        auto r = to_tensor(right);
        torch::Tensor disp;
        {
          py::gil_scoped_release release;
          auto loaded = pipeline::load_model(checkpoint);
          disp = pipeline::infer(loaded.model, l, r, iters.value_or(loaded.config.eval.infer_iters),
                                 loaded.config.rule);
        }
        return to_numpy<float>(disp);
      },
      py::arg("checkpoint"), py::arg("left"), py::arg("right"), py::arg("iters") = py::none(),
      "Disparity [H, W] for [3, H, W] images in [0, 1].");
}
