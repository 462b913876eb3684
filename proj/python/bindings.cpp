#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <sstream>

#include "poul/baselines.hpp"
#include "poul/cli.hpp"
#include "poul/errors.hpp"
#include "poul/metrics.hpp"
#include "poul/synthetic.hpp"
#include "poul/uplift_model.hpp"
#include "poul/version.hpp"

namespace py = pybind11;
using namespace poul;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;
using IndexArray = py::array_t<std::int64_t, py::array::c_style | py::array::forcecast>;

Dataset dataset_from_arrays(const Array& x, const IndexArray& t, const Array& y, const PolicySpec& spec) {
  if (x.ndim() != 2) throw ShapeError("x must be a 2-d array");
  const auto n = static_cast<std::size_t>(x.shape(0));
  const auto p = static_cast<std::size_t>(x.shape(1));
  if (static_cast<std::size_t>(t.size()) != n || static_cast<std::size_t>(y.size()) != n) {
    throw ShapeError("x, t and y must have the same number of rows");
  }
  Dataset d(p);
  const double* xs = x.data();
  for (std::size_t i = 0; i < n; ++i) {
    const auto ti = t.data()[i];
    if (ti < 0 || static_cast<std::size_t>(ti) >= spec.num_policies()) throw UnknownIdError("policy index out of range");
    d.add_row(std::span<const double>(xs + i * p, p), static_cast<std::size_t>(ti), y.data()[i]);
  }
  return d;
}

py::dict dataset_to_dict(const Dataset& d) {
  const auto n = static_cast<py::ssize_t>(d.size());
  const auto p = static_cast<py::ssize_t>(d.num_features());
  Array x({n, p});
  IndexArray t(n);
  Array y(n);
  auto xm = x.mutable_unchecked<2>();
  for (py::ssize_t i = 0; i < n; ++i) {
    const auto row = d.x(static_cast<std::size_t>(i));
    for (py::ssize_t k = 0; k < p; ++k) xm(i, k) = row[static_cast<std::size_t>(k)];
    t.mutable_data()[i] = static_cast<std::int64_t>(d.t(static_cast<std::size_t>(i)));
    y.mutable_data()[i] = d.y(static_cast<std::size_t>(i));
  }
  py::dict out;
  out["x"] = x;
  out["t"] = t;
  out["y"] = y;
  return out;
}

Array cate_rows(const UpliftModel& m, const Array& x, std::size_t t1, std::size_t t0) {
  if (x.ndim() != 2) throw ShapeError("x must be a 2-d array");
  const auto n = x.shape(0);
  const auto p = static_cast<std::size_t>(x.shape(1));
  const auto emb = m.embeddings();
  if (t1 >= emb.size() || t0 >= emb.size()) throw UnknownIdError("policy index out of range");
  Array out(n);
  for (py::ssize_t i = 0; i < n; ++i) {
    out.mutable_data()[i] = predict_cate(m, std::span<const double>(x.data() + i * p, p), emb[t1], emb[t0]);
  }
  return out;
}

ScoredDataset scored(const Array& score, const py::array_t<bool>& treated, const Array& y) {
  if (score.size() != treated.size() || score.size() != y.size()) throw ShapeError("inputs differ in length");
  ScoredDataset d;
  for (py::ssize_t i = 0; i < score.size(); ++i) d.add(score.data()[i], treated.data()[i], y.data()[i]);
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Uplift estimation for policy-valued treatments";
  m.attr("__version__") = kVersion;

  py::register_exception<ValidationError>(m, "ValidationError", PyExc_ValueError);
  py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);
  py::register_exception<UnknownIdError>(m, "UnknownIdError", PyExc_KeyError);
  py::register_exception<TrainingError>(m, "TrainingError", PyExc_RuntimeError);
  py::register_exception<UnsupportedPolicyError>(m, "UnsupportedPolicyError", PyExc_RuntimeError);
  py::register_exception<MetricError>(m, "MetricError", PyExc_ArithmeticError);

  py::class_<PolicySpec>(m, "PolicySpec")
      .def_static("from_json", [](const std::string& text) { return load_policy_spec(Json::parse(text)); })
      .def("to_json", [](const PolicySpec& s) { return s.to_json().dump(); })
      .def_property_readonly("contexts", &PolicySpec::contexts)
      .def_property_readonly("actions", &PolicySpec::actions)
      .def_property_readonly("weights", &PolicySpec::weights)
      .def_property_readonly("policy_ids", &PolicySpec::policy_ids)
      .def_property_readonly("num_policies", &PolicySpec::num_policies)
      .def("policy_index", &PolicySpec::policy_index)
      .def("table", &PolicySpec::table)
      .def("fingerprint", &PolicySpec::fingerprint)
      .def("mixture", [](const PolicySpec& s, std::size_t t) { return induced_mixture(s, t).alpha; })
      .def("distance", [](const PolicySpec& s, std::size_t t, std::size_t u) { return policy_distance(s, t, u); });

  py::class_<SyntheticData>(m, "SyntheticData")
      .def_readonly("spec", &SyntheticData::spec)
      .def_readonly("held_out", &SyntheticData::held_out)
      .def_readonly("control", &SyntheticData::control)
      .def_property_readonly("train", [](const SyntheticData& s) { return dataset_to_dict(s.train); })
      .def_property_readonly("test", [](const SyntheticData& s) { return dataset_to_dict(s.test); })
      .def(
          "true_cate",
          [](const SyntheticData& s, const Array& x, std::size_t t1, std::size_t t0) {
            const auto p = static_cast<std::size_t>(x.shape(1));
            Array out(x.shape(0));
            for (py::ssize_t i = 0; i < x.shape(0); ++i) {
              out.mutable_data()[i] = true_cate(*s.oracle, s.spec, std::span<const double>(x.data() + i * p, p), t1, t0);
            }
            return out;
          },
          py::arg("x"), py::arg("t1"), py::arg("t0"));

  m.def(
      "_generate", [](const std::string& cfg) { return generate(GenConfig::from_json(Json::parse(cfg))); },
      py::arg("config_json"));
  m.def("_default_gen_config", [] { return GenConfig{}.to_json().dump(); });
  m.def("_default_train_config", [] { return TrainConfig{}.to_json().dump(); });

  py::class_<UpliftModel>(m, "UpliftModel")
      .def_property_readonly("kind", &UpliftModel::kind)
      .def_readonly("spec", &UpliftModel::spec)
      .def("embeddings", &UpliftModel::embeddings)
      .def("predict_cate", &cate_rows, py::arg("x"), py::arg("t1"), py::arg("t0"))
      .def("to_json", [](const UpliftModel& mdl, const std::string& cfg) {
        return save_model(mdl, TrainConfig::from_json(Json::parse(cfg))).to_json().dump();
      })
      .def_static("from_json", [](const std::string& text, const PolicySpec& spec) {
        return load_model(ParameterCheckpoint::from_json(Json::parse(text)), spec);
      });

  m.def(
      "_train",
      [](const std::string& kind, const Array& x, const IndexArray& t, const Array& y, const PolicySpec& spec,
         const std::string& cfg) {
        const auto data = dataset_from_arrays(x, t, y, spec);
        const auto c = TrainConfig::from_json(Json::parse(cfg));
        TrainResult r;
        {
          py::gil_scoped_release release;
          r = kind == "categorical" ? train_categorical(data, spec, c) : train_crossfit(data, spec, c);
        }
        return py::make_tuple(std::move(r.model), r.stage1_loss, r.stage2_loss);
      },
      py::arg("kind"), py::arg("x"), py::arg("t"), py::arg("y"), py::arg("spec"), py::arg("config_json"));

  m.def(
      "auuc", [](const Array& s, const py::array_t<bool>& tr, const Array& y) { return auuc(scored(s, tr, y)); },
      py::arg("score"), py::arg("treated"), py::arg("y"));
  m.def(
      "mape",
      [](const Array& s, const py::array_t<bool>& tr, const Array& y, std::size_t bins) {
        return mape_binned(scored(s, tr, y), bins).mape;
      },
      py::arg("score"), py::arg("treated"), py::arg("y"), py::arg("bins") = 10);
  m.def(
      "pehe",
      [](const Array& pred, const Array& truth) {
        return pehe(std::span<const double>(pred.data(), static_cast<std::size_t>(pred.size())),
                    std::span<const double>(truth.data(), static_cast<std::size_t>(truth.size())));
      },
      py::arg("predicted"), py::arg("truth"));

  m.def(
      "run_cli",
      [](const std::vector<std::string>& args) {
        std::vector<std::string> full{"poul"};
        full.insert(full.end(), args.begin(), args.end());
        std::vector<const char*> argv;
        for (const auto& a : full) argv.push_back(a.c_str());
        std::ostringstream out, err;
        const int code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
        return py::make_tuple(code, out.str(), err.str());
      },
      py::arg("args"));
}
