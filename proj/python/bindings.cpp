#include <pybind11/iostream.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <iostream>
#include <sstream>

#include "pdse/cli.hpp"
#include "pdse/gradient_suite.hpp"
#include "pdse/losses.hpp"
#include "pdse/trainer.hpp"

namespace py = pybind11;
using namespace pdse;

namespace {

using F64Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

BasicTensor<double> to_tensor(const F64Array& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  return BasicTensor<double>(shape, std::vector<double>(a.data(), a.data() + a.size()));
}

template <typename T>
py::array_t<T> to_array(const BasicTensor<T>& t) {
  py::array_t<T> out(std::vector<py::ssize_t>(t.shape().begin(), t.shape().end()));
  std::copy(t.data().begin(), t.data().end(), out.mutable_data());
  return out;
}

CTSlice to_slice(const py::array_t<std::uint16_t, py::array::c_style | py::array::forcecast>& pixels,
                 const std::string& image_id) {
  if (pixels.ndim() != 2) throw py::value_error("expected a 2-D uint16 array");
  CTSlice s;
  s.image_id = image_id;
  s.height = pixels.shape(0);
  s.width = pixels.shape(1);
  s.pixels.assign(pixels.data(), pixels.data() + pixels.size());
  return s;
}

std::vector<Box> to_boxes(const F64Array& a) {
  if (a.size() == 0) return {};
  if (a.ndim() != 2 || a.shape(1) != 4) throw py::value_error("boxes must be [N, 4]");
  std::vector<Box> out;
  for (py::ssize_t i = 0; i < a.shape(0); ++i) out.push_back({a.at(i, 0), a.at(i, 1), a.at(i, 2), a.at(i, 3)});
  return out;
}

py::list detections_to_py(const std::vector<Detection>& dets) {
  py::list out;
  for (const auto& d : dets) {
    py::dict row;
    row["class_id"] = d.class_id;
    row["score"] = d.score;
    row["box"] = py::make_tuple(d.box.x1, d.box.y1, d.box.x2, d.box.y2);
    out.append(row);
  }
  return out;
}

py::object parse_json(const std::string& text) { return py::module_::import("json").attr("loads")(text); }

// f(inputs) and the gradient of sum(f(inputs)) with respect to every input.
template <typename Fn>
py::tuple value_and_grads(std::vector<BasicTensor<double>> inputs, Fn&& fn) {
  for (auto& t : inputs) t = BasicTensor<double>(t.shape(), std::vector<double>(t.data().begin(), t.data().end()), true);
  auto out = fn(inputs);
  py::list grads;
  auto loss = ops::sum(out);
  loss.backward();
  for (auto& t : inputs) {
    grads.append(t.has_grad() ? to_array(BasicTensor<double>(t.shape(), std::vector<double>(t.grad().begin(), t.grad().end())))
                              : py::array_t<double>(std::vector<py::ssize_t>(t.shape().begin(), t.shape().end())));
  }
  return py::make_tuple(to_array(out), grads);
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Lesion detection on synthetic CT phantoms: preprocessing, operators, training and evaluation.";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<DataError>(m, "DataError", PyExc_IOError);
  py::register_exception<CheckpointError>(m, "CheckpointError", PyExc_IOError);
  py::register_exception<TrainingError>(m, "TrainingError", PyExc_RuntimeError);
  py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);

  m.def(
      "hu_normalize",
      [](const py::array_t<std::uint16_t, py::array::c_style | py::array::forcecast>& pixels) {
        const auto t = hu_normalize<double>(to_slice(pixels, ""));
        return to_array(ops::reshape(t, {t.dim(1), t.dim(2)}));
      },
      py::arg("pixels"), "Raw 16-bit slice [H, W] to [0, 1] over the HU window [-1024, 3071].");

  m.def(
      "load_slice",
      [](const std::string& path) {
        const auto s = load_slice(path);
        py::array_t<std::uint16_t> out({s.height, s.width});
        std::copy(s.pixels.begin(), s.pixels.end(), out.mutable_data());
        return out;
      },
      py::arg("path"));

  m.def(
      "generate_phantoms",
      [](const std::string& spec_json) { return parse_json(manifest_to_json(generate_phantoms(phantom_spec_from_json(spec_json)))); },
      py::arg("spec_json"), "Renders a phantom dataset; returns the manifest.");

  m.def(
      "nms",
      [](const F64Array& boxes, const std::vector<double>& scores, double iou_thresh) {
        return nms(to_boxes(boxes), scores, iou_thresh);
      },
      py::arg("boxes"), py::arg("scores"), py::arg("iou_thresh") = 0.5);

  m.def(
      "average_precision",
      [](const std::vector<std::tuple<std::size_t, std::array<double, 4>, double>>& detections,
         const std::vector<std::vector<std::array<double, 4>>>& ground_truth, double iou_thresh) -> py::object {
        std::vector<ClassDetection> dets;
        for (const auto& [image, b, score] : detections) dets.push_back({image, {b[0], b[1], b[2], b[3]}, score});
        std::vector<std::vector<Box>> gts;
        for (const auto& img : ground_truth) {
          gts.emplace_back();
          for (const auto& b : img) gts.back().push_back({b[0], b[1], b[2], b[3]});
        }
        const auto ap = average_precision(dets, gts, {iou_thresh, Interpolation::kAllPoints});
        return ap ? py::cast(*ap) : py::none();
      },
      py::arg("detections"), py::arg("ground_truth"), py::arg("iou_thresh") = 0.5,
      "detections: (image index, (x1, y1, x2, y2), score); None when there is no ground truth.");

  m.def(
      "conv2d",
      [](const F64Array& x, const F64Array& w, int stride, int padding) {
        return value_and_grads({to_tensor(x), to_tensor(w)}, [&](auto& in) {
          return ops::conv2d(in[0], in[1], BasicTensor<double>(), {stride, padding});
        });
      },
      py::arg("input"), py::arg("weight"), py::arg("stride") = 1, py::arg("padding") = 1,
      "Returns (output, [d sum(output)/d input, d sum(output)/d weight]).");

  m.def(
      "deformable_conv2d",
      [](const F64Array& x, const F64Array& offsets, const F64Array& w) {
        return value_and_grads({to_tensor(x), to_tensor(offsets), to_tensor(w)}, [&](auto& in) {
          return deformable_conv2d(in[0], in[1], in[2], BasicTensor<double>(), {1, 1});
        });
      },
      py::arg("input"), py::arg("offsets"), py::arg("weight"),
      "3x3, stride 1, pad 1. offsets [N, 18, H, W]. Returns (output, gradients of sum(output)).");

  m.def(
      "focal_loss",
      [](const F64Array& logits, const std::vector<int>& labels, double alpha, double gamma) {
        return value_and_grads({to_tensor(logits)}, [&](auto& in) {
          return focal_loss(in[0], labels, {alpha, gamma}).loss;
        });
      },
      py::arg("logits"), py::arg("labels"), py::arg("alpha") = 0.25, py::arg("gamma") = 2.0,
      "labels: -1 ignore, 0 background, 1..K class. Returns (loss [1], [d loss/d logits]).");

  m.def(
      "gradient_suite",
      [](int instances, std::vector<std::string> only, std::uint64_t seed) {
        GradientSuiteOptions opts;
        opts.instances = instances;
        opts.only = std::move(only);
        opts.seed = seed;
        py::list out;
        for (const auto& r : run_gradient_suite(opts)) {
          py::dict row;
          row["name"] = r.name;
          row["passed"] = r.passed();
          row["instances"] = r.instances;
          row["max_rel_error"] = r.max_rel_error;
          row["max_abs_error"] = r.max_abs_error;
          out.append(row);
        }
        return out;
      },
      py::arg("instances") = 100, py::arg("only") = std::vector<std::string>{}, py::arg("seed") = 1);

  py::class_<LoadedModel>(m, "Model")
      .def_static(
          "load", [](const std::string& path) { return load_checkpoint(path); }, py::arg("path"))
      .def_static(
          "init",
          [](const std::string& model_json, std::uint64_t seed) {
            return init_model(model_config_from_json(nlohmann::json::parse(model_json)), seed);
          },
          py::arg("model_json") = "{}", py::arg("seed") = 1)
      .def("save", [](const LoadedModel& self, const std::string& path) { save_checkpoint(path, self); })
      .def_property_readonly("config",
                             [](const LoadedModel& self) { return parse_json(model_config_to_json(self.config).dump()); })
      .def_property_readonly("metadata", [](const LoadedModel& self) { return parse_json(self.metadata.dump()); })
      .def_property_readonly("num_parameters",
                             [](const LoadedModel& self) {
                               std::int64_t n = 0;
                               for (const auto& p : self.store.parameters()) n += p.tensor.numel();
                               return n;
                             })
      .def(
          "detect",
          [](const LoadedModel& self, const py::array_t<std::uint16_t, py::array::c_style | py::array::forcecast>& pixels,
             double score_thresh) {
            PostprocessConfig post;
            post.score_thresh = score_thresh;
            return detections_to_py(detect(self, {hu_normalize<float>(to_slice(pixels, ""))}, post)[0]);
          },
          py::arg("pixels"), py::arg("score_thresh") = 0.05, "Raw uint16 slice [H, W] to a list of detections.")
      .def(
          "evaluate",
          [](const LoadedModel& self, const std::string& manifest, const std::string& split, int threads) {
            const auto dataset = load_dataset(manifest);
            return parse_json(report_to_json(evaluate_model(self, dataset, dataset.split(split), {}, threads), false));
          },
          py::arg("manifest"), py::arg("split") = "test", py::arg("threads") = 1);

  m.def(
      "train",
      [](const std::string& config_path) {
        const auto run = train(load_train_config(config_path));
        py::dict out;
        out["best_checkpoint"] = run.best_checkpoint.string();
        out["best_epoch"] = run.best_epoch;
        out["best_val_map"] = run.best_val_map;
        out["test_map"] = run.test_report ? py::cast(run.test_report->map) : py::none();
        return out;
      },
      py::arg("config_path"));

  m.def(
      "cli",
      [](std::vector<std::string> args) {
        args.insert(args.begin(), "pdse");
        std::vector<const char*> argv;
        for (const auto& a : args) argv.push_back(a.c_str());
        py::scoped_ostream_redirect out_redirect(std::cout, py::module_::import("sys").attr("stdout"));
        py::scoped_ostream_redirect err_redirect(std::cerr, py::module_::import("sys").attr("stderr"));
        return run_cli(static_cast<int>(argv.size()), argv.data(), std::cout, std::cerr);
      },
      py::arg("args"), "Runs the command line in-process; returns the exit code.");
}
