#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "fedmema/errors.hpp"
#include "fedmema/experiment.hpp"
#include "fedmema/federation.hpp"
#include "fedmema/lacca.hpp"
#include "json.hpp"

namespace py = pybind11;
using namespace fedmema;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;
using Labels = py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const Array& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  return Tensor(shape, std::vector<double>(a.data(), a.data() + a.size()));
}

Array to_array(const Tensor& t) {
  Array out(std::vector<py::ssize_t>(t.shape().begin(), t.shape().end()));
  std::copy(t.data().begin(), t.data().end(), out.mutable_data());
  return out;
}

LabelMap to_labels(const Labels& m) {
  if (m.ndim() == 2) return LabelMap(m.shape(0), m.shape(1), {m.data(), m.data() + m.size()});
  if (m.ndim() == 3) return LabelMap(m.shape(0), m.shape(1), m.shape(2), {m.data(), m.data() + m.size()});
  throw DimensionError("mask must be [H,W] or [N,H,W]");
}

ExperimentConfig make_config(const py::object& config, const std::vector<std::string>& overrides) {
  if (config.is_none()) return parse_config("", overrides);
  if (py::isinstance<py::dict>(config)) {
    std::vector<std::string> all;
    for (const auto& [k, v] : config.cast<py::dict>()) all.push_back(py::str(k).cast<std::string>() + "=" + py::str(v).cast<std::string>());
    all.insert(all.end(), overrides.begin(), overrides.end());
    return parse_config("", all);
  }
  return load_config(config.cast<std::filesystem::path>(), overrides);
}

py::dict config_dict(const ExperimentConfig& cfg) {
  py::dict d;
  for (const auto& key : config_keys()) d[py::str(key)] = get_config_value(cfg, key);
  return d;
}

py::object from_json(const std::string& text) { return py::module_::import("json").attr("loads")(text); }

py::dict metrics_dict(const MetricRecord& m) {
  py::dict d;
  d["per_class"] = m.per_class;
  d["mdsc"] = m.mdsc;
  d["count"] = m.count;
  return d;
}

py::dict run_dict(const RunResult& r) {
  py::dict d;
  d["run_dir"] = r.run_dir.string();
  py::list rounds;
  for (const auto& rec : r.rounds) rounds.append(from_json(round_record_json(rec)));
  d["rounds"] = rounds;
  py::list clients;
  for (const auto& c : r.final_metrics.clients) {
    py::dict cd = metrics_dict(*c.metrics);
    cd["id"] = c.id;
    cd["modality"] = std::string(modality_name(c.modality));
    clients.append(cd);
  }
  d["client_avg_mdsc"] = r.final_metrics.client_avg_mdsc;
  d["server_mdsc"] = r.final_metrics.server_mdsc;
  d["server"] = metrics_dict(r.final_metrics.server);
  d["clients"] = clients;
  d["messages"] = r.messages.size();
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "FedMEMA federated segmentation simulator";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<DimensionError>(m, "DimensionError", PyExc_ValueError);
  py::register_exception<ProtocolError>(m, "ProtocolError", PyExc_RuntimeError);
  py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);
  py::register_exception<DataError>(m, "DataError", PyExc_RuntimeError);

  m.def(
      "load_config",
      [](const py::object& config, const std::vector<std::string>& overrides) {
        return config_dict(make_config(config, overrides));
      },
      py::arg("config") = py::none(), py::arg("overrides") = std::vector<std::string>{},
      "Validated configuration as a key -> value dict. `config` is a path, a dict of keys, or None for defaults.");

  m.def(
      "run",
      [](const py::object& config, const std::vector<std::string>& overrides, bool write_artifacts,
         bool keep_messages) {
        const ExperimentConfig cfg = make_config(config, overrides);
        RunOptions opt;
        opt.write_artifacts = write_artifacts;
        opt.keep_messages = keep_messages;
        RunResult r;
        {
          py::gil_scoped_release release;
          r = run_federation(cfg, opt);
        }
        return run_dict(r);
      },
      py::arg("config") = py::none(), py::arg("overrides") = std::vector<std::string>{},
      py::arg("write_artifacts") = false, py::arg("keep_messages") = false,
      "One federated run. Returns round records and final test metrics.");

  m.def(
      "ablate",
      [](const py::object& config, const std::vector<std::string>& overrides, std::size_t jobs) {
        const ExperimentConfig cfg = make_config(config, overrides);
        ExperimentOptions opt;
        opt.jobs = jobs;
        std::string text;
        {
          py::gil_scoped_release release;
          text = report_json(run_ablation(cfg, opt));
        }
        return from_json(text);
      },
      py::arg("config") = py::none(), py::arg("overrides") = std::vector<std::string>{}, py::arg("jobs") = 1);

  m.def(
      "sweep",
      [](const py::object& config, const std::string& param, const std::vector<std::string>& values,
         const std::vector<std::string>& overrides, std::size_t jobs) {
        const ExperimentConfig cfg = make_config(config, overrides);
        ExperimentOptions opt;
        opt.jobs = jobs;
        std::string text;
        {
          py::gil_scoped_release release;
          text = report_json(run_sweep(cfg, param, values, opt));
        }
        return from_json(text);
      },
      py::arg("config"), py::arg("param"), py::arg("values"), py::arg("overrides") = std::vector<std::string>{},
      py::arg("jobs") = 1);

  m.def("export_attention", [](const std::filesystem::path& run_dir) { return export_attention_from_run(run_dir); },
        py::arg("run_dir"), "Writes attention weights of a finished run; returns the file count.");

  m.def(
      "generate_dataset",
      [](std::size_t n, std::size_t size, std::uint64_t seed) {
        const Dataset d = generate_dataset(n, size, seed);
        py::array_t<float> images({n, std::size_t{4}, size, size});
        py::array_t<std::uint8_t> masks({n, size, size});
        for (std::size_t i = 0; i < n; ++i) {
          std::copy(d.samples[i].image.begin(), d.samples[i].image.end(), images.mutable_data() + i * 4 * size * size);
          std::copy(d.samples[i].mask.begin(), d.samples[i].mask.end(), masks.mutable_data() + i * size * size);
        }
        return py::make_tuple(images, masks);
      },
      py::arg("n"), py::arg("size") = 32, py::arg("seed") = 0, "(images [N,4,H,W] float32, masks [N,H,W] uint8)");

  m.def(
      "kmeans",
      [](const Array& points, std::size_t k, std::uint64_t seed) {
        if (points.ndim() != 2) throw DimensionError("points must be [N,D]");
        std::vector<std::vector<double>> pts(points.shape(0));
        for (std::size_t i = 0; i < pts.size(); ++i)
          pts[i].assign(points.data() + i * points.shape(1), points.data() + (i + 1) * points.shape(1));
        const KMeansResult r = kmeans(pts, k, seed);
        Array centroids({r.centroids.size(), static_cast<std::size_t>(points.shape(1))});
        for (std::size_t j = 0; j < r.centroids.size(); ++j)
          std::copy(r.centroids[j].begin(), r.centroids[j].end(), centroids.mutable_data() + j * points.shape(1));
        return py::make_tuple(centroids, r.membership, r.sse);
      },
      py::arg("points"), py::arg("k"), py::arg("seed") = 0, "(centroids, membership, sse)");

  m.def(
      "calibrate",
      [](const Array& features, const Array& anchors, std::size_t heads) {
        AttentionTrace trace;
        const Tensor out = calibrate(to_tensor(features), to_tensor(anchors), heads, &trace);
        return py::make_tuple(to_array(out), to_array(trace.mean()));
      },
      py::arg("features"), py::arg("anchors"), py::arg("heads"),
      "Cross-attention of [C,H,W] features against [R,C] anchors: (output, head-mean weights [HW,R]).");

  m.def(
      "dice_ce_loss",
      [](const Array& logits, const Labels& mask) { return dice_ce_loss(to_tensor(logits), to_labels(mask)).item(); },
      py::arg("logits"), py::arg("mask"));

  m.def(
      "dsc",
      [](const Array& logits, const Labels& mask) { return metrics_dict(dsc_metric(to_tensor(logits), to_labels(mask))); },
      py::arg("logits"), py::arg("mask"));

  m.def(
      "crc32",
      [](const py::bytes& data) {
        const std::string s = data;
        return crc32_of({reinterpret_cast<const std::uint8_t*>(s.data()), s.size()});
      },
      py::arg("data"));
}
