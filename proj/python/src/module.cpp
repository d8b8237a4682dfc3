#include <pybind11/functional.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <cstring>
#include <optional>

#include "brain3d/pipeline.hpp"

namespace py = pybind11;
namespace fs = std::filesystem;
using namespace brain3d;

namespace {

using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;
using DoubleArray = py::array_t<double, py::array::c_style | py::array::forcecast>;

py::object to_python(const nlohmann::json& j) { return py::module_::import("json").attr("loads")(j.dump()); }

Volume to_volume(const FloatArray& a) {
  if (a.ndim() != 3) throw ShapeError("expected a 3-D array (depth, height, width)");
  Volume v(Dims{std::size_t(a.shape(0)), std::size_t(a.shape(1)), std::size_t(a.shape(2))});
  std::memcpy(v.voxels.data(), a.data(), v.voxels.size() * sizeof(float));
  return v;
}

FloatArray to_array(const Volume& v) {
  FloatArray out({v.dims.depth, v.dims.height, v.dims.width});
  std::memcpy(out.mutable_data(), v.voxels.data(), v.voxels.size() * sizeof(float));
  return out;
}

Matrix<double> to_matrix(const DoubleArray& a) {
  if (a.ndim() != 2) throw ShapeError("expected a 2-D array");
  Matrix<double> m(a.shape(0), a.shape(1));
  std::memcpy(m.data(), a.data(), std::size_t(m.size()) * sizeof(double));
  return m;
}

DoubleArray to_array(const Matrix<double>& m) {
  DoubleArray out({m.rows(), m.cols()});
  std::memcpy(out.mutable_data(), m.data(), std::size_t(m.size()) * sizeof(double));
  return out;
}

Dims to_dims(const std::array<std::size_t, 3>& d) { return {d[0], d[1], d[2]}; }

ExperimentConfig resolve(const std::optional<fs::path>& config, std::optional<std::uint64_t> seed) {
  ExperimentConfig cfg = config ? load_experiment_config(*config) : ExperimentConfig{};
  if (seed) cfg.apply_seed(*seed);
  cfg.validate();
  return cfg;
}

py::dict findings_dict(const ClinicalFindings& f) {
  py::dict d;
  d["laterality"] = f.laterality;
  d["anatomy"] = f.anatomy;
  d["pathology"] = f.pathology;
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Core bindings for volumetric report generation";

  auto base = py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<FormatError>(m, "FormatError", base.ptr());
  py::register_exception<DomainError>(m, "DomainError", PyExc_ValueError);
  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);
  py::register_exception<IndexError>(m, "IndexError", PyExc_IndexError);
  py::register_exception<DegenerateInputError>(m, "DegenerateInputError", PyExc_ValueError);
  py::register_exception<NumericError>(m, "NumericError", base.ptr());
  py::register_exception<UsageError>(m, "UsageError", base.ptr());
  py::register_exception<ProvenanceError>(m, "ProvenanceError", base.ptr());
  py::register_exception<IntegrityError>(m, "IntegrityError", base.ptr());

  // Volumes
  m.def("read_volume", [](const fs::path& p) { return to_array(read_volume(p)); }, py::arg("path"));
  m.def("write_volume", [](const FloatArray& a, const fs::path& p) { write_volume(to_volume(a), p); },
        py::arg("volume"), py::arg("path"));
  m.def(
      "preprocess_volume",
      [](const FloatArray& a, double low, double high, std::array<std::size_t, 3> dims) {
        return to_array(preprocess_volume(to_volume(a), PreprocessConfig{low, high, to_dims(dims)}));
      },
      py::arg("volume"), py::arg("clip_low") = 1.0, py::arg("clip_high") = 99.0,
      py::arg("dims") = std::array<std::size_t, 3>{16, 32, 32});
  m.def(
      "resample_trilinear",
      [](const FloatArray& a, std::array<std::size_t, 3> dims) {
        return to_array(resample_trilinear(to_volume(a), to_dims(dims)));
      },
      py::arg("volume"), py::arg("dims"));

  // Synthetic subjects
  m.def(
      "generate_subject",
      [](std::uint64_t seed, const std::string& cls, const std::string& laterality,
         std::array<std::size_t, 3> dims) {
        CohortConfig cfg;
        cfg.volume_dims = to_dims(dims);
        const auto r = generate_subject(seed, subject_class_from_string(cls), laterality_from_string(laterality), cfg);
        py::dict d;
        d["subject_id"] = r.subject_id;
        d["class"] = to_string(r.subject_class);
        d["laterality"] = to_string(r.laterality);
        d["anatomy"] = r.anatomy;
        d["report"] = r.report;
        d["volume"] = to_array(r.volume);
        d["lesion_center"] = r.lesion_center;
        d["findings"] = findings_dict(r.findings);
        return d;
      },
      py::arg("seed"), py::arg("subject_class") = "pathological", py::arg("laterality") = "left",
      py::arg("dims") = std::array<std::size_t, 3>{16, 32, 32});

  // Bridge and losses
  m.def(
      "compress_tokens", [](const DoubleArray& z, std::size_t k) { return to_array(compress_tokens(to_matrix(z), k)); },
      py::arg("tokens"), py::arg("k"));
  m.def(
      "infonce",
      [](const DoubleArray& v, const DoubleArray& t, double tau) {
        return infonce_symmetric(to_matrix(v), to_matrix(t), tau);
      },
      py::arg("visual"), py::arg("text"), py::arg("tau"));

  // Decoding
  m.def(
      "top_p_filter", [](const std::vector<double>& probs, double p) { return top_p_filter(probs, p); },
      py::arg("probs"), py::arg("p"));

  // Metrics
  m.def(
      "bleu",
      [](const std::string& hyp, const std::vector<std::string>& refs, int n) { return bleu_n(hyp, refs, n); },
      py::arg("hypothesis"), py::arg("references"), py::arg("n") = 4);
  m.def("rouge_n", [](const std::string& h, const std::string& r, int n) { return rouge_n(h, r, n); },
        py::arg("hypothesis"), py::arg("reference"), py::arg("n"));
  m.def("rouge_l", [](const std::string& h, const std::string& r) { return rouge_l(h, r); }, py::arg("hypothesis"),
        py::arg("reference"));
  m.def(
      "cider",
      [](const std::vector<std::string>& hyps, const std::vector<std::vector<std::string>>& refs) {
        return cider_scores(hyps, refs);
      },
      py::arg("hypotheses"), py::arg("references"));
  m.def("extract_findings", [](const std::string& report) { return findings_dict(extract_findings(report)); },
        py::arg("report"));
  m.def(
      "evaluate_reports",
      [](const std::vector<std::string>& pred, const std::vector<std::string>& gold, int n_boot, std::uint64_t seed) {
        return to_python(metric_report_to_json(evaluate_reports(pred, gold, EvalConfig{n_boot, seed})));
      },
      py::arg("predictions"), py::arg("gold"), py::arg("n_boot") = 1000, py::arg("seed") = 0);
  m.def(
      "bootstrap_ci",
      [](const std::vector<double>& scores, int n_boot, std::uint64_t seed) {
        const auto ci = bootstrap_ci(scores, n_boot, seed);
        return std::make_pair(ci.low, ci.high);
      },
      py::arg("scores"), py::arg("n_boot") = 1000, py::arg("seed") = 0);

  // Attribution
  m.def(
      "lime_fit",
      [](int n_features, const std::function<double(std::vector<std::uint8_t>)>& scorer, int n_samples,
         double kernel_width, double ridge, std::uint64_t seed) {
        const auto fit = lime_fit(
            n_features, [&](const std::vector<std::uint8_t>& z) { return scorer(z); },
            LimeConfig{n_samples, kernel_width, ridge, seed});
        py::dict d;
        d["weights"] = fit.weights;
        d["intercept"] = fit.intercept;
        d["r2"] = fit.r2;
        return d;
      },
      py::arg("n_features"), py::arg("scorer"), py::arg("n_samples") = 200, py::arg("kernel_width") = 0.25,
      py::arg("ridge") = 1e-3, py::arg("seed") = 0);

  // Experiment commands
  m.def(
      "default_config", [] { return to_python(experiment_config_to_json(ExperimentConfig{})); },
      "Default experiment config as a dict.");
  m.def(
      "synth",
      [](const fs::path& out, std::optional<fs::path> config, std::optional<std::uint64_t> seed) {
        py::gil_scoped_release release;
        return cmd_synth(resolve(config, seed), out);
      },
      py::arg("out"), py::arg("config") = py::none(), py::arg("seed") = py::none());
  m.def(
      "train",
      [](const std::string& phase, const fs::path& out, std::optional<fs::path> config,
         std::optional<std::uint64_t> seed, std::optional<fs::path> init) {
        const Phase p = phase_from_string(phase);
        py::gil_scoped_release release;
        return cmd_train(resolve(config, seed), p, out, init);
      },
      py::arg("phase"), py::arg("out"), py::arg("config") = py::none(), py::arg("seed") = py::none(),
      py::arg("init") = py::none());
  m.def(
      "generate",
      [](const fs::path& out, const std::string& split, std::optional<fs::path> config,
         std::optional<std::uint64_t> seed, std::optional<fs::path> checkpoint) {
        py::gil_scoped_release release;
        return cmd_generate(resolve(config, seed), out, split, checkpoint);
      },
      py::arg("out"), py::arg("split") = "test", py::arg("config") = py::none(), py::arg("seed") = py::none(),
      py::arg("checkpoint") = py::none());
  m.def(
      "evaluate",
      [](const fs::path& out, std::optional<fs::path> predictions, std::optional<fs::path> config,
         std::optional<std::uint64_t> seed) {
        fs::path path;
        {
          py::gil_scoped_release release;
          path = cmd_evaluate(resolve(config, seed), out, predictions.value_or(out / "predictions" / "test.jsonl"));
        }
        return py::module_::import("json").attr("load")(py::module_::import("builtins").attr("open")(path.string()));
      },
      py::arg("out"), py::arg("predictions") = py::none(), py::arg("config") = py::none(),
      py::arg("seed") = py::none());
  m.def(
      "explain",
      [](const fs::path& out, const std::string& subject, std::optional<fs::path> config,
         std::optional<std::uint64_t> seed, std::optional<fs::path> checkpoint) {
        py::gil_scoped_release release;
        return cmd_explain(resolve(config, seed), out, subject, checkpoint);
      },
      py::arg("out"), py::arg("subject"), py::arg("config") = py::none(), py::arg("seed") = py::none(),
      py::arg("checkpoint") = py::none());
}
