#include <pybind11/eigen.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <cstring>

#include "tcagu/errors.hpp"
#include "tcagu/experiments.hpp"
#include "tcagu/graph.hpp"
#include "tcagu/vca.hpp"

namespace py = pybind11;
using namespace tcagu;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Array to_array(const std::vector<double>& v, std::vector<py::ssize_t> shape) {
  Array a(shape);
  std::memcpy(a.mutable_data(), v.data(), v.size() * sizeof(double));
  return a;
}

std::vector<double> from_array(const Array& a, std::size_t ndim, const char* what) {
  if (static_cast<std::size_t>(a.ndim()) != ndim) {
    throw DimensionError(std::string(what) + " must have " + std::to_string(ndim) + " dimensions");
  }
  return {a.data(), a.data() + a.size()};
}

HsiCube make_cube(const Array& data, std::optional<Eigen::MatrixXd> endmembers, std::optional<Array> abundances) {
  HsiCube c;
  c.data = from_array(data, 3, "data");
  c.bands = static_cast<std::size_t>(data.shape(0));
  c.height = static_cast<std::size_t>(data.shape(1));
  c.width = static_cast<std::size_t>(data.shape(2));
  c.gt_endmembers = std::move(endmembers);
  if (abundances) c.gt_abundances = from_array(*abundances, 3, "abundances");
  c.validate();
  return c;
}

py::ssize_t sz(std::size_t v) { return static_cast<py::ssize_t>(v); }

py::tuple predict(TrainState& s, const HsiCube& cube) {
  ad::Tape tape;
  const ForwardResult f = forward(tape, s.params, s.config.model, cube_tensor(cube));
  const std::size_t p = s.config.model.endmembers;
  return py::make_tuple(to_array(f.abundances.value(), {sz(p), sz(cube.height), sz(cube.width)}),
                        to_array(f.reconstruction.value(), {sz(cube.bands), sz(cube.height), sz(cube.width)}));
}

py::dict result_dict(const UnmixResult& r) {
  py::dict d;
  d["endmembers"] = r.endmembers;
  d["abundances"] = r.abundances;
  d["per_endmember_sad"] = r.per_endmember_sad;
  d["per_endmember_rmse"] = r.per_endmember_rmse;
  d["mean_sad"] = r.mean_sad;
  d["rmse"] = r.rmse;
  d["alignment"] = r.alignment;
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Hyperspectral unmixing with a transformer encoder and content-adaptive graph refinement";

  auto base = py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<ConfigError>(m, "ConfigError", base);
  py::register_exception<DimensionError>(m, "DimensionError", base);
  py::register_exception<NumericDomainError>(m, "NumericDomainError", base);
  py::register_exception<DegenerateSceneError>(m, "DegenerateSceneError", base);
  py::register_exception<SpecError>(m, "SpecError", base);
  py::register_exception<FormatError>(m, "FormatError", base);
  py::register_exception<IoError>(m, "IoError", base);

  py::class_<HsiCube>(m, "Cube")
      .def(py::init(&make_cube), py::arg("data"), py::arg("endmembers") = py::none(),
           py::arg("abundances") = py::none(), "data is L×H×W; endmembers L×P; abundances P×H×W")
      .def_readonly("bands", &HsiCube::bands)
      .def_readonly("height", &HsiCube::height)
      .def_readonly("width", &HsiCube::width)
      .def_property_readonly("endmember_count", &HsiCube::endmembers)
      .def_property_readonly("data",
                             [](const HsiCube& c) { return to_array(c.data, {sz(c.bands), sz(c.height), sz(c.width)}); })
      .def_property_readonly("gt_endmembers", [](const HsiCube& c) { return c.gt_endmembers; })
      .def_property_readonly("gt_abundances",
                             [](const HsiCube& c) -> std::optional<Array> {
                               if (!c.gt_abundances) return std::nullopt;
                               return to_array(*c.gt_abundances, {sz(c.endmembers()), sz(c.height), sz(c.width)});
                             })
      .def("matrix", &HsiCube::matrix, "L×N pixel matrix")
      .def("save", [](const HsiCube& c, const std::filesystem::path& p) { write_container(c, p); })
      .def_static("load", &read_container)
      .def("to_bytes",
           [](const HsiCube& c) {
             const auto b = encode_container(c);
             return py::bytes(reinterpret_cast<const char*>(b.data()), b.size());
           })
      .def_static("from_bytes", [](const py::bytes& b) {
        const std::string s = b;
        return decode_container({s.begin(), s.end()});
      });

  m.def(
      "generate_synthetic",
      [](std::size_t height, std::size_t width, std::size_t bands, std::size_t endmembers, double snr_db,
         std::uint64_t seed, double dirichlet_alpha, bool pure_pixels) {
        SynthSpec s;
        s.height = height;
        s.width = width;
        s.bands = bands;
        s.endmembers = endmembers;
        s.snr_db = snr_db;
        s.seed = seed;
        s.dirichlet_alpha = dirichlet_alpha;
        s.purity_pixels = pure_pixels;
        return generate_synthetic(s);
      },
      py::arg("height") = 30, py::arg("width") = 30, py::arg("bands") = 60, py::arg("endmembers") = 3,
      py::arg("snr_db") = 80.0, py::arg("seed") = 0, py::arg("dirichlet_alpha") = 1.0, py::arg("pure_pixels") = true);

  py::class_<VcaResult>(m, "VcaResult")
      .def_readonly("endmembers", &VcaResult::endmembers)
      .def_readonly("pixel_indices", &VcaResult::pixel_indices)
      .def_readonly("snr_estimate_db", &VcaResult::snr_estimate_db)
      .def_readonly("projective", &VcaResult::projective);
  m.def("vca", py::overload_cast<const Eigen::MatrixXd&, std::size_t, std::uint64_t>(&vca_extract), py::arg("pixels"),
        py::arg("endmembers"), py::arg("seed") = 0, "VCA on an L×N pixel matrix");

  m.def("spectral_angle", &spectral_angle, py::arg("a"), py::arg("b"));
  m.def(
      "evaluate",
      [](const Eigen::MatrixXd& e, const Eigen::MatrixXd& a, const Eigen::MatrixXd& ge, const Eigen::MatrixXd& ga) {
        return result_dict(evaluate(e, a, ge, ga));
      },
      py::arg("endmembers"), py::arg("abundances"), py::arg("gt_endmembers"), py::arg("gt_abundances"),
      "Aligned SAD/RMSE. Endmembers L×P, abundances P×N.");

  m.def(
      "graph_adjacency",
      [](const Array& features, std::size_t height, std::size_t width, std::size_t radius, double sigma_f,
         double sigma_g) {
        const auto f = from_array(features, 2, "features");
        ad::Tape tape;
        const auto x = tape.constant(ad::Tensor({static_cast<std::size_t>(features.shape(0)),
                                                 static_cast<std::size_t>(features.shape(1))},
                                                f, false));
        if (sigma_g <= 0.0) sigma_g = 4.0 * static_cast<double>(radius * radius);
        return dense_adjacency(build_graph(x, height, width, radius, sigma_f, sigma_g));
      },
      py::arg("features"), py::arg("height"), py::arg("width"), py::arg("radius") = 1, py::arg("sigma_f") = 1.0,
      py::arg("sigma_g") = 0.0, "Dense normalized adjacency of the window graph over B×N features");

  py::class_<ModelConfig>(m, "ModelConfig")
      .def(py::init<>())
      .def_readwrite("bands", &ModelConfig::bands)
      .def_readwrite("endmembers", &ModelConfig::endmembers)
      .def_readwrite("channels", &ModelConfig::channels)
      .def_readwrite("spectral_dim", &ModelConfig::spectral_dim)
      .def_readwrite("spatial_dim", &ModelConfig::spatial_dim)
      .def_readwrite("fused_channels", &ModelConfig::fused_channels)
      .def_readwrite("patch_size", &ModelConfig::patch_size)
      .def_readwrite("k_steps", &ModelConfig::k_steps)
      .def_readwrite("radius", &ModelConfig::radius)
      .def_readwrite("sigma_f", &ModelConfig::sigma_f)
      .def_readwrite("sigma_g", &ModelConfig::sigma_g)
      .def_readwrite("square_sigma_f", &ModelConfig::square_sigma_f)
      .def_readwrite("beta", &ModelConfig::beta)
      .def_property(
          "ablation", [](const ModelConfig& c) { return to_string(c.graph_mode); },
          [](ModelConfig& c, const std::string& s) { c.graph_mode = parse_graph_mode(s); })
      .def("validate", &ModelConfig::validate);

  py::class_<TrainConfig>(m, "TrainConfig")
      .def(py::init<>())
      .def_readwrite("model", &TrainConfig::model)
      .def_readwrite("lr", &TrainConfig::lr)
      .def_readwrite("weight_decay", &TrainConfig::weight_decay)
      .def_readwrite("epochs", &TrainConfig::epochs)
      .def_readwrite("seed", &TrainConfig::seed)
      .def("validate", &TrainConfig::validate)
      .def("to_json", &config_to_json)
      .def_static("from_json", &config_from_json);

  py::class_<TrainState>(m, "Model")
      .def_readonly("config", &TrainState::config)
      .def_readonly("epoch", &TrainState::epoch)
      .def_readonly("step", &TrainState::step)
      .def_readonly("loss_history", &TrainState::loss_history)
      .def_property_readonly("endmembers", [](const TrainState& s) { return s.params.decoder.endmember_matrix(); })
      .def_property_readonly("mixing_weights",
                             [](TrainState& s) {
                               ad::Tape tape;
                               return mixing_weights(tape, s.params.graph).value();
                             })
      .def("predict", &predict, py::arg("cube"), "(abundances P×H×W, reconstruction L×H×W)")
      .def(
          "resume",
          [](TrainState& s, const HsiCube& cube, std::size_t epochs) {
            s.config.epochs += epochs;
            py::gil_scoped_release release;
            run_epochs(s, cube, epochs);
          },
          py::arg("cube"), py::arg("epochs"))
      .def("save", [](const TrainState& s, const std::filesystem::path& p) { save_checkpoint(s, p); })
      .def_static("load", &load_checkpoint)
      .def("to_bytes",
           [](const TrainState& s) {
             const auto b = encode_checkpoint(s);
             return py::bytes(reinterpret_cast<const char*>(b.data()), b.size());
           })
      .def("export_maps",
           [](const TrainState& s, const HsiCube& cube, const std::filesystem::path& out_dir, const std::string& name) {
             const ExportResult r = export_abundance_maps(s, cube, out_dir, name);
             return r.maps;
           },
           py::arg("cube"), py::arg("out_dir"), py::arg("dataset") = "data");

  m.def(
      "train",
      [](const TrainConfig& cfg, const HsiCube& cube) {
        py::gil_scoped_release release;
        return train(cfg, cube);
      },
      py::arg("config"), py::arg("cube"));

  py::class_<GradGroup>(m, "GradGroup")
      .def_readonly("name", &GradGroup::name)
      .def_readonly("size", &GradGroup::size)
      .def_readonly("max_rel_error", &GradGroup::max_rel_error)
      .def("__repr__", [](const GradGroup& g) {
        return "GradGroup(" + g.name + ", size=" + std::to_string(g.size) + ", err=" + std::to_string(g.max_rel_error) +
               ")";
      });
  m.def(
      "gradcheck",
      [](std::uint64_t seed, double step, std::vector<std::string> frozen) {
        GradcheckOptions o;
        o.seed = seed;
        o.step = step;
        o.frozen = std::move(frozen);
        py::gil_scoped_release release;
        return gradcheck(o);
      },
      py::arg("seed") = 0, py::arg("step") = 1e-4, py::arg("frozen") = std::vector<std::string>{});

  m.def("write_pgm", &write_pgm, py::arg("path"), py::arg("values"), py::arg("height"), py::arg("width"));
  m.def("read_pgm", [](const std::filesystem::path& p) {
    std::size_t h = 0, w = 0;
    const auto v = read_pgm(p, &h, &w);
    return to_array(v, {sz(h), sz(w)});
  });
}
