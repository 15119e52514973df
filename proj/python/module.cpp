// Python bindings: metrics, the attention/Dice formulas, configs and the
// pipeline commands. Structured results cross the boundary as JSON text and
// are decoded on the Python side.

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <torch/torch.h>

#include "pedetect/attention.hpp"
#include "pedetect/config.hpp"
#include "pedetect/error.hpp"
#include "pedetect/losses.hpp"
#include "pedetect/metrics.hpp"
#include "pedetect/pipeline.hpp"

namespace py = pybind11;
using namespace pedetect;

namespace {

using Doubles = py::array_t<double, py::array::c_style | py::array::forcecast>;
using Bytes = py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>;

std::span<const double> view(const Doubles& a) { return {a.data(), static_cast<std::size_t>(a.size())}; }

config::ExperimentConfig load_config(const std::string& path, std::optional<std::uint64_t> seed) {
  auto c = config::load(path);
  if (seed) c.seed = *seed;
  return c;
}

pipeline::Options options(bool force, bool resume, std::optional<std::string> out) {
  pipeline::Options o;
  o.force = force;
  o.resume = resume;
  if (out) o.out = *out;
  return o;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Two-stage volumetric lesion detector";
  m.attr("__version__") = PEDETECT_VERSION;

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<DataError>(m, "DataError", PyExc_RuntimeError);
  py::register_exception<GeometryError>(m, "GeometryError", PyExc_ValueError);
  py::register_exception<TrainingDivergence>(m, "TrainingDivergence", PyExc_ArithmeticError);

  m.def(
      "auc",
      [](const Doubles& scores, const std::vector<int>& labels) { return metrics::auc(view(scores), labels); },
      py::arg("scores"), py::arg("labels"));
  m.def(
      "delong_ci",
      [](const Doubles& scores, const std::vector<int>& labels, double alpha) {
        const auto ci = metrics::delong_ci(view(scores), labels, alpha);
        return py::make_tuple(ci.low, ci.high, ci.degenerate);
      },
      py::arg("scores"), py::arg("labels"), py::arg("alpha") = 0.05);
  m.def(
      "_evaluate",
      [](const Doubles& scores, const std::vector<int>& labels) {
        return nlohmann::json(metrics::evaluate(view(scores), labels)).dump();
      },
      py::arg("scores"), py::arg("labels"));

  m.def(
      "continuous_dice",
      [](const Doubles& attention, const Bytes& mask, double epsilon) {
        if (attention.size() != mask.size()) throw GeometryError("attention and mask sizes differ");
        return losses::continuous_dice(view(attention), std::span<const std::uint8_t>(mask.data(), mask.size()),
                                       epsilon);
      },
      py::arg("attention"), py::arg("mask"), py::arg("epsilon") = 1.0);
  m.def(
      "attention_map",
      [](const Doubles& features, const Doubles& weights) {
        if (features.ndim() != 3 || weights.ndim() != 1 || weights.shape(0) != features.shape(0))
          throw GeometryError("expected (K, u, v) features and (K,) weights");
        auto f = torch::from_blob(const_cast<double*>(features.data()),
                                  {features.shape(0), features.shape(1), features.shape(2)}, torch::kFloat64);
        auto w = torch::from_blob(const_cast<double*>(weights.data()), {weights.shape(0)}, torch::kFloat64);
        auto a = attention::attention_map(f, w).values.contiguous();
        Doubles out({a.size(0), a.size(1)});
        std::copy(a.data_ptr<double>(), a.data_ptr<double>() + a.numel(), out.mutable_data());
        return out;
      },
      py::arg("features"), py::arg("weights"));

  m.def("_desk_config", [] { return nlohmann::json(config::desk_config()).dump(); });
  m.def(
      "_validate_config",
      [](const std::string& text) {
        auto c = nlohmann::json::parse(text).get<config::ExperimentConfig>();
        c.validate();
        return nlohmann::json(c).dump();
      },
      py::arg("config_json"));

  m.def(
      "_gen",
      [](const std::string& path, std::optional<std::uint64_t> seed, bool force, std::optional<std::string> out) {
        py::gil_scoped_release release;
        auto r = pipeline::cmd_gen(load_config(path, seed), options(force, false, out));
        return nlohmann::json{{"dir", r.dir.string()}, {"generated", r.generated}, {"checksum", r.manifest.checksum},
                              {"studies", r.manifest.studies.size()}}
            .dump();
      },
      py::arg("config"), py::arg("seed") = py::none(), py::arg("force") = false, py::arg("out") = py::none());
  m.def(
      "_run_scenario",
      [](const std::string& path, std::optional<std::uint64_t> seed, bool resume, std::optional<std::string> out) {
        py::gil_scoped_release release;
        return pipeline::cmd_run_scenario(load_config(path, seed), options(false, resume, out)).report.dump();
      },
      py::arg("config"), py::arg("seed") = py::none(), py::arg("resume") = false, py::arg("out") = py::none());
}
