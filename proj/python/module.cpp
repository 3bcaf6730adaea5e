#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "balr/ablation.hpp"
#include "balr/adapter.hpp"
#include "balr/bench.hpp"
#include "balr/errors.hpp"
#include "balr/harness.hpp"
#include "balr/instrument.hpp"
#include "balr/training.hpp"
#include "balr/verify.hpp"

namespace py = pybind11;
using namespace balr;

namespace {

Tensor mask_tensor(const py::array_t<double, py::array::c_style | py::array::forcecast>& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  return Tensor::from_vector(shape, std::span<const double>(a.data(), static_cast<std::size_t>(a.size())));
}

py::array_t<double> to_numpy(const Tensor& t) {
  py::array_t<double> out(t.shape());
  std::copy(t.data().begin(), t.data().end(), out.mutable_data());
  return out;
}

py::dict metrics_dict(const MetricsReport& m) {
  py::dict d;
  d["dice"] = m.dice;
  d["miou"] = m.miou;
  d["recall"] = m.recall;
  d["precision"] = m.precision;
  d["accuracy"] = m.accuracy;
  return d;
}

}  // namespace

PYBIND11_MODULE(_balr, m) {
  m.doc() = "Low-rank attention and adapter segmentation toolkit";

  auto base_error = py::register_exception<Error>(m, "BalrError");
  py::register_exception<ConfigError>(m, "ConfigError", base_error);
  py::register_exception<FormatError>(m, "FormatError", base_error);
  py::register_exception<ValidationError>(m, "ValidationError", base_error);
  py::register_exception<ScheduleError>(m, "ScheduleError", base_error);
  py::register_exception<DivergenceError>(m, "DivergenceError", base_error);
  py::register_exception<DimensionError>(m, "DimensionError", base_error);
  py::register_exception<NumericError>(m, "NumericError", base_error);

  m.def(
      "adapter_param_count",
      [](std::int64_t rows, std::int64_t cols, std::int64_t rank) {
        const auto c = adapter_param_count(rows, cols, rank);
        return py::make_tuple(c.fullrank, c.lowrank, c.reduction);
      },
      py::arg("rows"), py::arg("cols"), py::arg("rank"), "Returns (fullrank, lowrank, reduction).");

  m.def(
      "parameter_split",
      [](const std::string& config_text) {
        const auto s = count_parameters(parse_harness_config(config_text)).split();
        return py::make_tuple(s.frozen, s.trainable);
      },
      py::arg("config_text") = "", "Closed-form (frozen, trainable) counts for a harness configuration.");

  m.def("default_config_text", [] { return HarnessConfig{}.to_text(); });
  m.def("sam_scale_fraction", [] { return sam_scale_extrapolation().fraction_of_reference; });

  m.def(
      "cosine_lr",
      [](double t, double lr0, std::int64_t epochs, double lr_min) {
        return cosine_lr(t, Schedule{lr0, epochs, lr_min, true});
      },
      py::arg("t"), py::arg("lr0"), py::arg("epochs"), py::arg("lr_min") = 0.0);

  m.def(
      "metrics",
      [](const py::array_t<double, py::array::c_style | py::array::forcecast>& pred,
         const py::array_t<double, py::array::c_style | py::array::forcecast>& gt) {
        return metrics_dict(metrics(mask_tensor(pred), mask_tensor(gt)));
      },
      py::arg("pred"), py::arg("gt"));

  m.def(
      "synth_sample",
      [](std::uint64_t seed, std::int64_t index, std::int64_t size, int difficulty) {
        auto data = synth_dataset(seed, std::max<std::int64_t>(10, index + 1), size, difficulty);
        const auto& s = data[static_cast<std::size_t>(index)];
        return py::make_tuple(to_numpy(s.image), to_numpy(s.mask));
      },
      py::arg("seed"), py::arg("index") = 0, py::arg("size") = 32, py::arg("difficulty") = 2,
      "Returns (image [3, H, W], mask [1, H, W]).");

  m.def(
      "bench_attention",
      [](const std::string& mechanism, std::int64_t n, std::int64_t d, std::int64_t heads, std::int64_t rank,
         std::uint64_t seed) {
        TensorAttnConfig cfg;
        cfg.d = d;
        cfg.rank_q = cfg.rank_k = cfg.rank_v = rank;
        return bench_attention(parse_mechanism(mechanism), n, d, heads, cfg, seed).to_json();
      },
      py::arg("mechanism"), py::arg("n"), py::arg("d") = 64, py::arg("heads") = 4, py::arg("rank") = 8,
      py::arg("seed") = 0, "BenchReport as a JSON string.");

  m.def(
      "train",
      [](const std::string& config_text, std::uint64_t seed, std::int64_t epochs, double lr0,
         std::int64_t dataset_size, int difficulty) {
        const auto cfg = parse_harness_config(config_text);
        py::gil_scoped_release release;
        auto model = build_balr_model(cfg, seed);
        const auto data = split_dataset(synth_dataset(seed, dataset_size, cfg.image_size, difficulty));
        return train(model, data, Schedule{lr0, epochs, 0.0, true}, seed).to_json();
      },
      py::arg("config_text"), py::arg("seed") = 0, py::arg("epochs") = 2, py::arg("lr0") = 1e-3,
      py::arg("dataset_size") = 20, py::arg("difficulty") = 2, "Training history as a JSON string.");

  m.def(
      "verify",
      [](const std::string& filter) {
        const auto r = run_verify(filter);
        return py::make_tuple(r.all_passed(), r.to_json());
      },
      py::arg("filter") = "", "Returns (all_passed, report JSON).");

  m.def("set_instrumentation", &instrument::set_enabled, py::arg("enabled"));
}
