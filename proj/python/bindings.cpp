/*
 * SPDX-FileCopyrightText: Copyright (c) 2026 The echoguide Authors. All rights reserved.
 * SPDX-License-Identifier: Apache-2.0
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 * http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "echoguide/demo.hpp"
#include "echoguide/eval.hpp"
#include "echoguide/model.hpp"
#include "echoguide/phantom.hpp"
#include "echoguide/se3.hpp"
#include "echoguide/service.hpp"
#include "echoguide/train.hpp"

namespace py = pybind11;
namespace eg = echoguide;
using eg::se3::Pose6;
using PoseList = std::array<double, 6>;

namespace {

Pose6 to_pose(const PoseList& a) { return Pose6::from_array(a); }

py::array_t<float> frame_array(const eg::phantom::Frame& f) {
  py::array_t<float> out({f.h, f.w});
  std::copy(f.pixels.begin(), f.pixels.end(), out.mutable_data());
  return out;
}

eg::phantom::Frame array_frame(const py::array_t<float, py::array::c_style | py::array::forcecast>& a, double spacing) {
  if (a.ndim() != 2) throw std::invalid_argument("frame must be a 2-D array");
  eg::phantom::Frame f;
  f.h = static_cast<int>(a.shape(0));
  f.w = static_cast<int>(a.shape(1));
  f.spacing = spacing;
  f.pixels.assign(a.data(), a.data() + a.size());
  return f;
}

py::array_t<double> matrix_array(const eg::se3::HomTransform& t) {
  py::array_t<double> out({4, 4});
  auto m = out.mutable_unchecked<2>();
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j) m(i, j) = t.matrix()(i, j);
  return out;
}

eg::train::TrainConfig make_config(const std::string& variant, int epochs, std::uint64_t seed, int batch_size,
                                   double lr, int pairs_per_sequence) {
  eg::train::TrainConfig cfg;
  cfg.variant = eg::train::parse_variant(variant);
  cfg.epochs = epochs;
  cfg.seed = seed;
  cfg.batch_size = batch_size;
  cfg.base_lr = lr;
  cfg.pairs_per_sequence = pairs_per_sequence;
  return cfg;
}

// Stateful wrapper around a loaded checkpoint.
class Model {
 public:
  explicit Model(const std::filesystem::path& path) : loaded_(eg::model::load_model(path)) {}
  PoseList predict(const py::array_t<float, py::array::c_style | py::array::forcecast>& frame, int plane,
                   double spacing) const {
    return loaded_.model.predict(array_frame(frame, spacing), eg::phantom::PlaneId(plane)).to_array();
  }
  std::string variant() const { return loaded_.meta.variant; }
  int epochs_completed() const { return loaded_.meta.epochs_completed; }
  std::string train_manifest() const { return loaded_.meta.train_manifest; }

 private:
  eg::model::LoadedModel loaded_;
};

}  // namespace

PYBIND11_MODULE(_echoguide, m) {
  m.doc() = "Probe guidance core: pose algebra, phantom rendering, training, evaluation and sessions";

  py::register_exception<eg::se3::GimbalLock>(m, "GimbalLock", PyExc_ValueError);

  // Pose algebra. Poses are [x, y, z, rx, ry, rz] in mm and degrees.
  m.def("compose", [](const PoseList& a, const PoseList& b) { return eg::se3::compose(to_pose(a), to_pose(b)).to_array(); });
  m.def("relative", [](const PoseList& a, const PoseList& b) { return eg::se3::relative(to_pose(a), to_pose(b)).to_array(); });
  m.def("invert", [](const PoseList& a) { return eg::se3::invert(to_pose(a)).to_array(); });
  m.def("combine_through_intermediate", [](const PoseList& a12, const PoseList& a2t) {
    return eg::se3::combine_through_intermediate(to_pose(a12), to_pose(a2t)).to_array();
  });
  m.def("to_matrix", [](const PoseList& a) { return matrix_array(eg::se3::to_matrix(to_pose(a))); });
  m.def("from_matrix", [](const py::array_t<double, py::array::c_style | py::array::forcecast>& a) {
    if (a.ndim() != 2 || a.shape(0) != 4 || a.shape(1) != 4) throw std::invalid_argument("expected a 4x4 matrix");
    Eigen::Matrix4d mat;
    auto r = a.unchecked<2>();
    for (int i = 0; i < 4; ++i)
      for (int j = 0; j < 4; ++j) mat(i, j) = r(i, j);
    return eg::se3::from_matrix(eg::se3::HomTransform(mat)).to_array();
  });

  // Phantom.
  py::class_<eg::phantom::Phantom>(m, "Phantom")
      .def_property_readonly("subject_seed", &eg::phantom::Phantom::subject_seed)
      .def_property_readonly("num_blobs", [](const eg::phantom::Phantom& p) { return p.blobs().size(); })
      .def("with_noise", &eg::phantom::Phantom::with_noise, py::arg("sigma"));
  m.def("generate_phantom", &eg::phantom::generate_phantom, py::arg("subject_seed"));
  m.def("standard_plane_poses", [](const eg::phantom::Phantom& p) {
    std::vector<PoseList> out;
    for (const auto& pose : eg::phantom::standard_plane_poses(p)) out.push_back(pose.to_array());
    return out;
  });
  m.def(
      "render_slice",
      [](const eg::phantom::Phantom& p, const PoseList& pose, int h, int w, double spacing, std::uint64_t noise_seed) {
        return frame_array(eg::phantom::render_slice(p, to_pose(pose), {h, w, spacing}, noise_seed));
      },
      py::arg("phantom"), py::arg("pose"), py::arg("h") = eg::phantom::kDefaultImageSize,
      py::arg("w") = eg::phantom::kDefaultImageSize, py::arg("spacing") = eg::phantom::kDefaultSpacing,
      py::arg("noise_seed") = 0);

  // Datasets.
  m.def(
      "generate_data",
      [](const std::filesystem::path& out, int train_subjects, int test_subjects, int scans_per_plane, int frames,
         std::uint64_t seed) {
        eg::demo::GenerateConfig cfg;
        cfg.train_subjects = train_subjects;
        cfg.test_subjects = test_subjects;
        cfg.scans_per_plane = scans_per_plane;
        cfg.frames = frames;
        cfg.seed = seed;
        eg::demo::generate_split_datasets(cfg, out);
      },
      py::arg("out"), py::arg("train_subjects") = 12, py::arg("test_subjects") = 3, py::arg("scans_per_plane") = 2,
      py::arg("frames") = 50, py::arg("seed") = 1);
  m.def("manifest_hash", &eg::demo::manifest_hash, py::arg("dir"));
  m.def(
      "dataset_summary",
      [](const std::filesystem::path& dir) {
        const auto ds = eg::demo::load_dataset(dir);
        py::dict d;
        d["split"] = ds.split;
        d["subjects"] = ds.subjects;
        d["held_out_subjects"] = ds.held_out_subjects;
        d["scans"] = ds.scans.size();
        std::size_t frames = 0;
        for (const auto& s : ds.scans) frames += s.size();
        d["frames"] = frames;
        d["h"] = ds.geom.h;
        d["w"] = ds.geom.w;
        return d;
      },
      py::arg("dir"));

  // Training and evaluation. Reports are returned as JSON text.
  m.def(
      "train",
      [](const std::string& variant, const std::filesystem::path& data, const std::filesystem::path& out, int epochs,
         std::uint64_t seed, int batch_size, double lr, int pairs_per_sequence) {
        py::gil_scoped_release release;
        return eg::train::train(make_config(variant, epochs, seed, batch_size, lr, pairs_per_sequence), data, out)
            .to_json();
      },
      py::arg("variant"), py::arg("data"), py::arg("out"), py::arg("epochs") = 40, py::arg("seed") = 1,
      py::arg("batch_size") = 32, py::arg("lr") = 1e-4, py::arg("pairs_per_sequence") = 0);
  m.def(
      "compare",
      [](const std::filesystem::path& baseline, const std::filesystem::path& dreamer, const std::filesystem::path& data,
         const std::filesystem::path& out, int bins) {
        const auto r = eg::eval::compare(eg::model::load_model(baseline), eg::model::load_model(dreamer),
                                         eg::demo::load_dataset(data), bins);
        if (!out.empty()) eg::eval::write_compare(r, out);
        return r.to_text();
      },
      py::arg("baseline"), py::arg("dreamer"), py::arg("data"), py::arg("out") = std::filesystem::path(),
      py::arg("bins") = 8);
  m.def(
      "evaluate",
      [](const std::filesystem::path& ckpt, const std::filesystem::path& data, int bins) {
        const auto e = eg::eval::evaluate(eg::model::load_model(ckpt), eg::demo::load_dataset(data), bins);
        py::dict d;
        d["variant"] = e.variant;
        std::vector<std::array<double, 6>> mae;
        for (const auto& row : e.table.rows) mae.push_back(row.mae);
        d["mae"] = mae;
        d["overall"] = e.table.overall.mae;
        d["pooled_std_ae"] = e.curve.pooled_std_ae;
        d["pooled_mean_ae"] = e.curve.pooled_mean_ae;
        return d;
      },
      py::arg("ckpt"), py::arg("data"), py::arg("bins") = 8);
  m.def("format_percent", &eg::eval::format_percent);
  m.def("percent_change", &eg::eval::percent_change);

  py::class_<Model>(m, "Model")
      .def(py::init<const std::filesystem::path&>(), py::arg("path"))
      .def("predict", &Model::predict, py::arg("frame"), py::arg("plane"),
           py::arg("spacing") = eg::phantom::kDefaultSpacing)
      .def_property_readonly("variant", &Model::variant)
      .def_property_readonly("epochs_completed", &Model::epochs_completed)
      .def_property_readonly("train_manifest", &Model::train_manifest);

  // Guidance sessions through the JSON protocol.
  py::class_<eg::service::GuidanceService>(m, "GuidanceService")
      .def(py::init([](const std::filesystem::path& baseline, const std::filesystem::path& dreamer) {
             return eg::service::GuidanceService::from_files(baseline, dreamer);
           }),
           py::arg("baseline") = std::filesystem::path(), py::arg("dreamer") = std::filesystem::path())
      .def("handle", &eg::service::GuidanceService::handle, py::arg("message"))
      .def("loaded_models", &eg::service::GuidanceService::loaded_models);
}
