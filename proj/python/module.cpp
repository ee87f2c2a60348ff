#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <optional>
#include <sstream>

#include "cli.hpp"
#include "volseq/metrics.hpp"
#include "volseq/model.hpp"
#include "volseq/nifti.hpp"
#include "volseq/train.hpp"

namespace py = pybind11;
using namespace volseq;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const Array& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  return Tensor(std::move(shape), std::vector<double>(a.data(), a.data() + a.size()));
}

Array to_array(const Tensor& t) {
  Array a(std::vector<py::ssize_t>(t.shape().begin(), t.shape().end()));
  std::copy(t.storage().begin(), t.storage().end(), a.mutable_data());
  return a;
}

std::vector<std::size_t> labels_from(const py::array_t<long long, py::array::c_style | py::array::forcecast>& y) {
  std::vector<std::size_t> out;
  for (py::ssize_t i = 0; i < y.size(); ++i) {
    if (y.data()[i] < 0) throw Error(ErrorKind::Label, "labels must be non-negative");
    out.push_back(static_cast<std::size_t>(y.data()[i]));
  }
  return out;
}

py::list table_rows(const ParameterTable& t) {
  py::list rows;
  for (const auto& r : t.rows) rows.append(py::make_tuple(r.type, r.output_shape, r.params));
  return rows;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Volumetric sequence classifier core";

  // Messages start with the error kind, e.g. "format error: ...".
  py::register_exception<Error>(m, "VolseqError", PyExc_RuntimeError);

  m.def(
      "read_nifti",
      [](const std::filesystem::path& path) {
        const Volume v = read_nifti(path);
        Array affine({4, 4});
        std::copy(v.affine.begin(), v.affine.end(), affine.mutable_data());
        return py::make_tuple(to_array(v.grid), py::make_tuple(v.spacing[0], v.spacing[1], v.spacing[2]), affine);
      },
      py::arg("path"), "Returns (grid, spacing, affine).");

  m.def(
      "write_nifti",
      [](const std::filesystem::path& path, const Array& grid, std::array<double, 3> spacing,
         std::optional<Array> affine, const std::string& datatype) {
        Volume v;
        v.grid = to_tensor(grid);
        v.spacing = spacing;
        if (affine) {
          if (affine->size() != 16) throw Error(ErrorKind::Shape, "affine must be 4x4");
          std::copy(affine->data(), affine->data() + 16, v.affine.begin());
        }
        write_nifti(v, path, nifti_type_from_string(datatype));
      },
      py::arg("path"), py::arg("grid"), py::arg("spacing") = std::array<double, 3>{1, 1, 1},
      py::arg("affine") = py::none(),
      py::arg("datatype") = "f32");

  m.def("architectures", [] {
    std::vector<std::string> out;
    for (auto id : all_architectures()) out.push_back(to_string(id));
    return out;
  });

  m.def(
      "parameter_table",
      [](const std::string& arch, const std::string& profile) {
        return table_rows(count_parameters(Model::build(architecture_from_string(arch), Profile::by_name(profile), 0)));
      },
      py::arg("arch"), py::arg("profile") = "full", "Rows of (type, output shape, parameter count).");

  m.def("golden_table", [](const std::string& arch) { return table_rows(golden_table(architecture_from_string(arch))); });

  m.def(
      "macro_summary",
      [](const py::array_t<long long, py::array::c_style | py::array::forcecast>& y_true,
         const py::array_t<long long, py::array::c_style | py::array::forcecast>& y_pred, std::size_t classes) {
        const auto s = macro_summary(confusion(labels_from(y_true), labels_from(y_pred), classes));
        py::dict d;
        d["accuracy"] = s.accuracy;
        d["precision"] = s.precision;
        d["recall"] = s.recall;
        d["f1"] = s.f1;
        return d;
      },
      py::arg("y_true"), py::arg("y_pred"), py::arg("classes"));

  m.def(
      "roc_auc",
      [](const py::array_t<long long, py::array::c_style | py::array::forcecast>& y_true, const Array& scores,
         std::size_t k) { return roc_ovr(labels_from(y_true), to_tensor(scores), k).auc; },
      py::arg("y_true"), py::arg("scores"), py::arg("k"), "One-vs-rest AUC for class k.");

  m.def(
      "macro_ovr_auc",
      [](const py::array_t<long long, py::array::c_style | py::array::forcecast>& y_true, const Array& scores) {
        return macro_ovr_auc(labels_from(y_true), to_tensor(scores));
      },
      py::arg("y_true"), py::arg("scores"));

  py::class_<Model>(m, "Model")
      .def_static(
          "build",
          [](const std::string& arch, const std::string& profile, std::uint64_t seed) {
            return Model::build(architecture_from_string(arch), Profile::by_name(profile), seed);
          },
          py::arg("arch"), py::arg("profile") = "reduced", py::arg("seed") = 0)
      .def_static(
          "load", [](const std::filesystem::path& p) { return load_checkpoint(p).model; }, py::arg("path"))
      .def(
          "save", [](const Model& self, const std::filesystem::path& p) { save_checkpoint(self, p); }, py::arg("path"))
      .def_property_readonly("arch", [](const Model& self) { return to_string(self.arch); })
      .def_property_readonly("input_shape", [](const Model& self) { return self.profile.input; })
      .def(
          "predict",
          [](const Model& self, const std::vector<Array>& volumes) {
            std::vector<Tensor> seq;
            for (const auto& v : volumes) {
              Tensor t = to_tensor(v);
              if (t.rank() == 3) t = t.reshaped({t.dim(0), t.dim(1), t.dim(2), 1});
              seq.push_back(std::move(t));
            }
            return to_array(self.predict(seq));
          },
          py::arg("volumes"), "Class probabilities for one sequence of volumes.");

  m.def(
      "gradient_check",
      [](const std::vector<std::string>& components, double tolerance, std::size_t samples) {
        GradCheckOptions opt;
        opt.tolerance = tolerance;
        opt.model_samples = samples;
        py::list out;
        for (const auto& e : gradient_check(components, opt).entries)
          out.append(py::make_tuple(e.block, e.checked, e.max_relative_error, e.passed));
        return out;
      },
      py::arg("components"), py::arg("tolerance") = 1e-4, py::arg("samples") = 50);

  m.def(
      "run_cli",
      [](std::vector<std::string> args) {
        args.insert(args.begin(), "volseq");
        std::vector<const char*> argv;
        for (const auto& a : args) argv.push_back(a.c_str());
        std::ostringstream out, err;
        int code;
        {
          py::gil_scoped_release release;
          code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
        }
        return py::make_tuple(code, out.str(), err.str());
      },
      py::arg("args"), "Runs the command-line tool in process; returns (exit code, stdout, stderr).");
}
