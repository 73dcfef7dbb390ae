/* Copyright 2026 The sdtlab Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License. */

// Python bindings. Arrays cross the boundary as NumPy copies; the C++ tensors
// stay row-major so a copy is a plain memcpy.

#include <cstring>
#include <string>

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "sdtlab/checkpoint.hpp"
#include "sdtlab/dts.hpp"
#include "sdtlab/error.hpp"
#include "sdtlab/evalkit.hpp"
#include "sdtlab/losses.hpp"
#include "sdtlab/phantom.hpp"
#include "sdtlab/trainer.hpp"

namespace py = pybind11;
using namespace sdtlab;

namespace {

template <typename T>
using CArray = py::array_t<T, py::array::c_style | py::array::forcecast>;

template <typename T>
Tensor<T> to_tensor(const CArray<T>& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  Tensor<T> t(shape);
  if (t.size() > 0) std::memcpy(t.data(), a.data(), t.size() * sizeof(T));
  return t;
}

template <typename T>
py::array_t<T> to_array(const Tensor<T>& t) {
  py::array_t<T> a(std::vector<py::ssize_t>(t.shape().begin(), t.shape().end()));
  if (t.size() > 0) std::memcpy(a.mutable_data(), t.data(), t.size() * sizeof(T));
  return a;
}

// Runs a loss with a gradient sink and hands back (value, gradient).
template <typename F>
py::tuple with_grad(F&& loss) {
  TensorD grad;
  const double v = loss(GradSink{&grad, 1.0});
  return py::make_tuple(v, to_array(grad));
}

py::dict sample_dict(const PhantomSample& s) {
  py::dict d;
  d["id"] = s.id;
  d["image"] = to_array(s.image);
  d["mask"] = to_array(s.mask);
  d["scribble"] = to_array(s.scribble);
  return d;
}

py::dict dice_dict(const DiceReport& r) {
  py::dict per;
  for (const auto& [c, v] : r.per_class) per[py::int_(c)] = v;
  py::dict d;
  d["per_class"] = per;
  d["mean"] = r.mean;
  d["samples"] = r.samples;
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Scribble-supervised segmentation with dynamically selected EMA teachers";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<InputError>(m, "InputError", PyExc_ValueError);
  py::register_exception<NumericalError>(m, "NumericalError", PyExc_ArithmeticError);
  py::register_exception<IoError>(m, "IoError", PyExc_OSError);

  m.attr("IGNORE") = py::int_(kIgnore);

  py::class_<DatasetSpec>(m, "DatasetSpec")
      .def(py::init<>())
      .def_readwrite("num_classes", &DatasetSpec::num_classes)
      .def_readwrite("image_size", &DatasetSpec::image_size)
      .def_readwrite("n_train", &DatasetSpec::n_train)
      .def_readwrite("n_val", &DatasetSpec::n_val)
      .def_readwrite("n_test", &DatasetSpec::n_test)
      .def_readwrite("seed", &DatasetSpec::seed)
      .def_readwrite("max_scribble_fraction", &DatasetSpec::max_scribble_fraction)
      .def("validate", &DatasetSpec::validate);

  m.def("generate_phantom",
        [](const DatasetSpec& spec, int index) { return sample_dict(generate_phantom(spec, index)); },
        py::arg("spec"), py::arg("index"), "One phantom slice as a dict of arrays.");
  m.def(
      "synth",
      [](const DatasetSpec& spec, const std::filesystem::path& dir) {
        const Dataset ds = generate_dataset(spec);
        save_dataset(dir, ds);
        return dataset_fingerprint(ds);
      },
      py::arg("spec"), py::arg("out_dir"), "Writes a dataset and returns its fingerprint.");
  m.def(
      "load_split",
      [](const std::filesystem::path& dir, const std::string& split) {
        const Dataset ds = load_dataset(dir);
        py::list out;
        for (const auto& s : ds.split(parse_split(split))) out.append(sample_dict(s));
        return out;
      },
      py::arg("data_dir"), py::arg("split") = "train");

  m.def("softmax", [](const CArray<double>& x) { return to_array(softmax(to_tensor(x))); });
  m.def(
      "pce_loss",
      [](const CArray<double>& probs, const CArray<uint8_t>& labels) {
        const TensorD p = to_tensor(probs);
        const LabelMap y = to_tensor(labels);
        return with_grad([&](GradSink s) { return pce_loss(p, y, s); });
      },
      py::arg("probs"), py::arg("labels"), "Partial cross-entropy and its gradient w.r.t. probs.");
  m.def(
      "masked_dice_loss",
      [](const CArray<double>& probs, const CArray<uint8_t>& labels, const CArray<uint8_t>& mask) {
        const TensorD p = to_tensor(probs);
        const LabelMap y = to_tensor(labels);
        const Tensor<uint8_t> k = to_tensor(mask);
        return with_grad([&](GradSink s) { return masked_dice_loss(p, y, k, s); });
      },
      py::arg("probs"), py::arg("labels"), py::arg("mask"));
  m.def(
      "feature_consistency",
      [](const CArray<double>& fs, const CArray<double>& ft) {
        const TensorD a = to_tensor(fs), b = to_tensor(ft);
        return with_grad([&](GradSink s) { return feature_consistency(a, b, s); });
      },
      py::arg("f_student"), py::arg("f_teacher"));
  m.def(
      "hico_loss",
      [](const CArray<double>& s_low, const CArray<double>& s_high, const CArray<double>& t_low,
         const CArray<double>& t_high) {
        const FeatureTaps s{to_tensor(s_low), to_tensor(s_high)}, t{to_tensor(t_low), to_tensor(t_high)};
        return hico_loss(s, t);
      },
      py::arg("student_low"), py::arg("student_high"), py::arg("teacher_low"), py::arg("teacher_high"));

  m.def(
      "score_teachers",
      [](const CArray<double>& p1, const CArray<double>& p2, const CArray<uint8_t>& scribble) {
        return score_teachers(to_tensor(p1), to_tensor(p2), to_tensor(scribble));
      },
      py::arg("probs_t1"), py::arg("probs_t2"), py::arg("scribble"));
  m.def(
      "select_teacher",
      [](double l1, double l2) { return std::string(teacher_name(select_teacher(l1, l2))); },
      py::arg("loss_t1"), py::arg("loss_t2"), "'T1' when strictly better, otherwise 'T2'.");
  m.def(
      "pick_reliable_pixels",
      [](const CArray<double>& probs, double tau) {
        const PseudoLabelMap pl = pick_reliable_pixels(to_tensor(probs), tau);
        return py::make_tuple(to_array(pl.labels), to_array(pl.reliable));
      },
      py::arg("probs"), py::arg("tau"), "(argmax labels, reliability mask).");

  m.def(
      "dice_score",
      [](const CArray<uint8_t>& pred, const CArray<uint8_t>& truth, int num_classes) {
        return dice_dict(dice_score(to_tensor(pred), to_tensor(truth), num_classes));
      },
      py::arg("pred"), py::arg("truth"), py::arg("num_classes"));

  m.def(
      "parse_config",
      [](const std::string& text) {
        const TrainConfig cfg = parse_train_config(text);
        cfg.validate();
        return format_train_config(cfg);
      },
      py::arg("text"), "Validates a key = value config and returns it in canonical form.");
  m.def(
      "train",
      [](const std::string& config_text, const std::filesystem::path& data_dir, const std::filesystem::path& run_dir) {
        const TrainConfig cfg = parse_train_config(config_text);
        RunSummary s;
        {
          py::gil_scoped_release release;
          s = run(cfg, data_dir, run_dir);
        }
        py::dict d;
        d["last_checkpoint"] = s.last_checkpoint;
        d["best_checkpoint"] = s.best_checkpoint;
        d["best_val"] = s.best_val;
        d["seconds"] = s.seconds;
        return d;
      },
      py::arg("config"), py::arg("data_dir"), py::arg("run_dir"));
  m.def(
      "evaluate",
      [](const std::filesystem::path& checkpoint, const std::filesystem::path& data_dir, const std::string& split) {
        const NetworkWeights w = load_weights(checkpoint);
        const Dataset ds = load_dataset(data_dir);
        DiceReport r;
        {
          py::gil_scoped_release release;
          r = evaluate_samples(w, ds.split(parse_split(split)));
        }
        return dice_dict(r);
      },
      py::arg("checkpoint"), py::arg("data_dir"), py::arg("split") = "test");
  m.def(
      "gradcheck",
      [](uint64_t seed, int trials) {
        const GradcheckReport r = gradcheck_suite(seed, trials);
        py::dict out;
        for (const auto& e : r.entries) out[py::str(e.name)] = py::make_tuple(e.max_rel_error, e.passed);
        return out;
      },
      py::arg("seed") = 0, py::arg("trials") = 3, "{loss name: (max relative error, passed)}.");
}
