#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "halluscope/cache_io.hpp"
#include "halluscope/calibration.hpp"
#include "halluscope/cli.hpp"
#include "halluscope/error.hpp"
#include "halluscope/eval.hpp"
#include "halluscope/pipeline.hpp"
#include "halluscope/synth.hpp"

namespace py = pybind11;
using namespace halluscope;

namespace {

// Samples cross the boundary as the JSON text of the inline capture format.
std::string load_sample(const std::filesystem::path& dir, const std::string& sample_id) {
  const CacheReader r(dir);
  const auto i = r.find(sample_id);
  if (!i) fail(ErrorKind::kMissingArtifact, "sample '" + sample_id + "' not in " + dir.string());
  return sample_to_json(r.load(*i)).dump();
}

std::vector<std::string> cache_ids(const std::filesystem::path& dir) {
  const CacheReader r(dir);
  std::vector<std::string> ids;
  for (std::size_t i = 0; i < r.size(); ++i) ids.push_back(r.record(i).sample_id);
  return ids;
}

std::vector<std::pair<std::string, std::string>> validate_sample(const std::string& sample_json) {
  const auto rep = validate_cache(sample_from_json(nlohmann::json::parse(sample_json)));
  std::vector<std::pair<std::string, std::string>> out;
  for (const auto& v : rep.violations) out.emplace_back(v.code, v.message);
  return out;
}

py::tuple raw_signals(const std::filesystem::path& dir, const std::string& s8) {
  const auto t = pipeline::extract_table(dir, pipeline::S8Source::parse(s8), false, 0);
  py::array_t<double> values({t.values.rows, t.values.cols});
  std::copy(t.values.data.begin(), t.values.data.end(), values.mutable_data());
  std::vector<std::string> ids;
  for (const auto& r : t.rows) ids.push_back(r.sample_id);
  return py::make_tuple(values, t.columns, ids);
}

std::size_t synth_cache(const std::filesystem::path& dir, std::size_t n_samples, std::uint64_t seed, bool shift) {
  auto mix = synth::benchmark_mixture(n_samples, seed);
  for (auto& c : mix.components) c.spec.shift = shift;
  write_cache(synth::generate_mixture(mix), dir);
  return n_samples;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "halluscope native core";

  static py::exception<Error> exc(m, "HalluscopeError");
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const Error& e) {
      py::set_error(exc, e.what());
    }
  });

  m.def("cache_ids", &cache_ids, py::arg("cache_dir"));
  m.def("load_sample", &load_sample, py::arg("cache_dir"), py::arg("sample_id"));
  m.def("validate", &validate_sample, py::arg("sample_json"),
        "Violations (code, message) of one inline capture; empty when valid.");
  m.def("raw_signals", &raw_signals, py::arg("cache_dir"), py::arg("s8_source") = "metadata",
        "(values[n, d], column names, sample ids) for every sample of a cache.");
  m.def("synth", &synth_cache, py::arg("out_dir"), py::arg("n_samples") = 200, py::arg("seed") = 0,
        py::arg("shift") = false);

  m.def("roc_auc", [](const std::vector<double>& s, const std::vector<int>& y) { return eval::roc_auc(s, y); });
  m.def("ks_distance", [](const std::vector<double>& a, const std::vector<double>& b) { return eval::ks_distance(a, b); });
  m.def("apply_temperature", [](const std::vector<double>& z, double t) { return calibration::apply_temperature(z, t); },
        py::arg("logits"), py::arg("temperature") = calibration::kDefaultTemperature);
  m.def(
      "fit_isotonic",
      [](const std::vector<double>& s, const std::vector<int>& y, std::size_t min_pairs) {
        const auto fit = calibration::fit_isotonic(s, y, "global", calibration::IsotonicOptions{min_pairs});
        return py::make_tuple(fit.breakpoints, fit.values);
      },
      py::arg("scores"), py::arg("labels"), py::arg("min_pairs") = 50);

  m.def("run", &run_cli, py::arg("args"), "Runs one CLI command line; returns the exit code.");
}
