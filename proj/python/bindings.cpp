#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "cascade_guard/attacks.hpp"
#include "cascade_guard/dataset.hpp"
#include "cascade_guard/detector.hpp"
#include "cascade_guard/error.hpp"
#include "cascade_guard/recovery.hpp"
#include "cascade_guard/selfaware.hpp"
#include "cascade_guard/serialize.hpp"
#include "cascade_guard/statistics.hpp"

namespace py = pybind11;
using namespace cguard;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

// (H, W) or (H, W, C) array to a tensor.
Tensor to_tensor(const Array& a) {
  if (a.ndim() != 2 && a.ndim() != 3) throw ShapeError("image must have shape (H, W) or (H, W, C)");
  const auto h = static_cast<std::size_t>(a.shape(0)), w = static_cast<std::size_t>(a.shape(1));
  const auto c = a.ndim() == 3 ? static_cast<std::size_t>(a.shape(2)) : 1;
  return Tensor(h, w, c, std::vector<double>(a.data(), a.data() + a.size()));
}

Array from_tensor(const Tensor& t) {
  Array out({t.height(), t.width(), t.channels()});
  std::copy(t.data().begin(), t.data().end(), out.mutable_data());
  return out;
}

// (N, H, W) or (N, H, W, C) array to a list of tensors.
std::vector<Tensor> to_tensors(const Array& a) {
  if (a.ndim() != 3 && a.ndim() != 4) throw ShapeError("image batch must have shape (N, H, W) or (N, H, W, C)");
  const auto n = static_cast<std::size_t>(a.shape(0));
  const auto h = static_cast<std::size_t>(a.shape(1)), w = static_cast<std::size_t>(a.shape(2));
  const auto c = a.ndim() == 4 ? static_cast<std::size_t>(a.shape(3)) : 1;
  const std::size_t per = h * w * c;
  std::vector<Tensor> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i)
    out.emplace_back(h, w, c, std::vector<double>(a.data() + i * per, a.data() + (i + 1) * per));
  return out;
}

Array from_tensors(const std::vector<Tensor>& ts) {
  if (ts.empty()) return Array(std::vector<py::ssize_t>{0, 0, 0, 0});
  const Tensor& f = ts.front();
  Array out({ts.size(), f.height(), f.width(), f.channels()});
  double* p = out.mutable_data();
  for (const auto& t : ts) p = std::copy(t.data().begin(), t.data().end(), p);
  return out;
}

py::array_t<double> vec(const std::vector<double>& v) { return py::array_t<double>(v.size(), v.data()); }

Dataset make_dataset(const Array& images, const std::vector<int>& labels, const std::vector<std::string>& splits,
                     std::size_t classes) {
  Dataset d;
  d.images = to_tensors(images);
  d.labels = labels;
  for (const auto& s : splits) d.splits.push_back(parse_split(s));
  d.classes = classes;
  d.validate();
  return d;
}

AttackConfig attack_config(const std::string& kind, double c, double step, std::size_t max_iterations,
                           double max_linf, double confidence_goal, std::uint64_t seed,
                           const std::string& target_policy, int fixed_target, std::size_t generations,
                           std::size_t population) {
  AttackConfig cfg;
  cfg.kind = parse_attack_kind(kind);
  cfg.c = c;
  cfg.step = step;
  cfg.max_iterations = max_iterations;
  cfg.max_linf = max_linf;
  cfg.confidence_goal = confidence_goal;
  cfg.seed = seed;
  cfg.target_policy = parse_target_policy(target_policy);
  cfg.fixed_target = fixed_target;
  cfg.ga.generations = generations;
  cfg.ga.population = population;
  cfg.validate();
  return cfg;
}

py::dict evaluation_dict(const DetectorEvaluation& e) {
  py::dict d;
  d["auc"] = e.roc.auc;
  d["scores"] = vec(e.scores);
  d["labels"] = e.labels;
  d["fpr"] = e.overall.fpr;
  d["tpr"] = e.overall.tpr;
  d["composed_fpr"] = e.composed.fpr;
  d["composed_tpr"] = e.composed.tpr;
  d["accuracy"] = e.accuracy;
  d["best_accuracy"] = e.best_accuracy;
  py::list stages;
  for (const auto& s : e.stages) {
    py::dict sd;
    sd["normals_in"] = s.normals_in;
    sd["normals_passed"] = s.normals_passed;
    sd["adversarials_in"] = s.adversarials_in;
    sd["adversarials_passed"] = s.adversarials_passed;
    stages.append(sd);
  }
  d["stages"] = stages;
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Adversarial detection from convolutional filter statistics.";

  py::register_exception<ArgumentError>(m, "ArgumentError", PyExc_ValueError);
  py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);
  py::register_exception<FormatError>(m, "FormatError", PyExc_RuntimeError);
  py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);

  py::class_<Dataset>(m, "Dataset")
      .def(py::init(&make_dataset), py::arg("images"), py::arg("labels"), py::arg("splits"),
           py::arg("classes") = 10)
      .def("__len__", &Dataset::size)
      .def_property_readonly("images", [](const Dataset& d) { return from_tensors(d.images); })
      .def_readonly("labels", &Dataset::labels)
      .def_property_readonly("splits",
                             [](const Dataset& d) {
                               std::vector<std::string> s;
                               for (Split x : d.splits) s.push_back(to_string(x));
                               return s;
                             })
      .def_readonly("classes", &Dataset::classes)
      .def("subset", [](const Dataset& d, const std::string& s) { return d.subset(parse_split(s)); });

  m.def("synth_dataset", [](std::uint64_t seed, std::size_t per_class) { return synth_dataset(seed, per_class); },
        py::arg("seed"), py::arg("per_class"));
  m.def("load_idx",
        [](const std::filesystem::path& images, const std::filesystem::path& labels, const std::string& split) {
          return load_idx(images, labels, parse_split(split));
        },
        py::arg("images"), py::arg("labels"), py::arg("split") = "test");

  py::class_<PredictionRecord>(m, "Prediction")
      .def_readonly("label", &PredictionRecord::label)
      .def_property_readonly("raw", [](const PredictionRecord& p) { return vec(p.raw); })
      .def_property_readonly("probabilities", [](const PredictionRecord& p) { return vec(p.probabilities); });

  py::class_<Network>(m, "Network")
      .def_static("load", &load_network, py::arg("path"))
      .def_static("from_json", &network_from_json, py::arg("text"))
      .def("save", [](const Network& n, const std::filesystem::path& p) { save_network(p, n); }, py::arg("path"))
      .def("to_json", &network_to_json)
      .def_property_readonly("fingerprint", &network_fingerprint)
      .def_property_readonly("parameter_count", &Network::parameter_count)
      .def_property_readonly("spec", [](const Network& n) { return spec_to_json(n.spec); })
      .def_property_readonly("train_accuracy", [](const Network& n) { return n.training.train_accuracy; })
      .def_property_readonly("test_accuracy", [](const Network& n) { return n.training.test_accuracy; })
      .def("predict", [](const Network& n, const Array& image) { return predict(n, to_tensor(image)); },
           py::arg("image"))
      .def("layer_outputs",
           [](const Network& n, const Array& image) {
             std::vector<Array> out;
             for (const auto& t : layer_outputs(n, to_tensor(image))) out.push_back(from_tensor(t));
             return out;
           },
           py::arg("image"))
      .def("accuracy",
           [](const Network& n, const Array& images, const std::vector<int>& labels) {
             return accuracy(n, to_tensors(images), labels);
           },
           py::arg("images"), py::arg("labels"))
      .def("__eq__", [](const Network& a, const Network& b) { return a == b; });

  m.def("train_victim",
        [](const Dataset& data, std::size_t epochs, double learning_rate, std::size_t batch_size,
           std::uint64_t seed) {
          TrainHyper h;
          h.epochs = epochs;
          h.learning_rate = learning_rate;
          h.batch_size = batch_size;
          h.seed = seed;
          py::gil_scoped_release release;
          return train_victim(data, NetworkSpec::default_victim(), h);
        },
        py::arg("data"), py::arg("epochs") = 6, py::arg("learning_rate") = 0.01, py::arg("batch_size") = 32,
        py::arg("seed") = 1);

  py::class_<AdversarialRecord>(m, "AdversarialRecord")
      .def_property_readonly("image", [](const AdversarialRecord& r) { return from_tensor(r.image); })
      .def_readonly("source_id", &AdversarialRecord::source_id)
      .def_readonly("original_label", &AdversarialRecord::original_label)
      .def_readonly("target_label", &AdversarialRecord::target_label)
      .def_property_readonly("kind", [](const AdversarialRecord& r) { return to_string(r.kind); })
      .def_readonly("confidence", &AdversarialRecord::confidence)
      .def_readonly("l1", &AdversarialRecord::l1)
      .def_readonly("linf", &AdversarialRecord::linf)
      .def_readonly("iterations", &AdversarialRecord::iterations)
      .def_readonly("success", &AdversarialRecord::success);

  m.def("attack",
        [](const Network& net, const Array& images, const std::vector<int>& labels, std::vector<std::size_t> ids,
           const std::string& kind, double c, double step, std::size_t max_iterations, double max_linf,
           double confidence_goal, std::uint64_t seed, const std::string& target_policy, int fixed_target,
           std::size_t threads) {
          const auto imgs = to_tensors(images);
          if (ids.empty())
            for (std::size_t i = 0; i < imgs.size(); ++i) ids.push_back(i);
          const auto cfg = attack_config(kind, c, step, max_iterations, max_linf, confidence_goal, seed,
                                         target_policy, fixed_target, 500, 50);
          py::gil_scoped_release release;
          return run_attacks(net, imgs, labels, ids, cfg, threads);
        },
        py::arg("net"), py::arg("images"), py::arg("labels"), py::arg("ids") = std::vector<std::size_t>{},
        py::arg("kind") = "gradient-box", py::arg("c") = 0.01, py::arg("step") = 0.02,
        py::arg("max_iterations") = 300, py::arg("max_linf") = 0.2, py::arg("confidence_goal") = 0.9,
        py::arg("seed") = 1, py::arg("target_policy") = "random-other", py::arg("fixed_target") = 0,
        py::arg("threads") = 1);

  m.def("evolve",
        [](const Network& net, std::size_t count, std::uint64_t seed, std::size_t generations, std::size_t population,
           double confidence_goal, std::size_t threads) {
          const auto cfg = attack_config("evolutionary", 0.01, 0.02, 300, 0.2, confidence_goal, seed, "random-other",
                                         0, generations, population);
          py::gil_scoped_release release;
          return run_evolutionary(net, count, cfg, threads);
        },
        py::arg("net"), py::arg("count"), py::arg("seed") = 1, py::arg("generations") = 500,
        py::arg("population") = 50, py::arg("confidence_goal") = 0.9, py::arg("threads") = 1);

  m.def("save_adversarials",
        [](const std::filesystem::path& dir, const std::vector<AdversarialRecord>& recs) {
          save_adversarial_batch(dir, recs);
        },
        py::arg("dir"), py::arg("records"));
  m.def("load_adversarials", &load_adversarial_batch, py::arg("dir"));

  py::class_<CascadeDecision>(m, "CascadeDecision")
      .def_readonly("adversarial", &CascadeDecision::adversarial)
      .def_readonly("exit_stage", &CascadeDecision::exit_stage)
      .def_property_readonly("decisions", [](const CascadeDecision& d) { return vec(d.decisions); });

  py::class_<CascadeModel>(m, "Detector")
      .def_static("load", &load_cascade, py::arg("path"))
      .def_static("from_json", &cascade_from_json, py::arg("text"))
      .def("save", [](const CascadeModel& c, const std::filesystem::path& p) { save_cascade(p, c); }, py::arg("path"))
      .def("to_json", &cascade_to_json)
      .def_property_readonly("stage_count", [](const CascadeModel& c) { return c.stages.size(); })
      .def_property_readonly("thresholds",
                             [](const CascadeModel& c) {
                               std::vector<double> t;
                               for (const auto& s : c.stages) t.push_back(s.threshold);
                               return t;
                             })
      .def("predict",
           [](const CascadeModel& c, const Network& net, const Array& image) {
             return cascade_predict(c, net, to_tensor(image));
           },
           py::arg("net"), py::arg("image"))
      .def("score",
           [](const CascadeModel& c, const Network& net, const Array& image) {
             return detector_score(c, net, to_tensor(image));
           },
           py::arg("net"), py::arg("image"))
      .def("evaluate",
           [](const CascadeModel& c, const Network& net, const Array& normals, const Array& adversarials,
              std::size_t threads) {
             const auto n = to_tensors(normals), a = to_tensors(adversarials);
             DetectorEvaluation e;
             {
               py::gil_scoped_release release;
               e = evaluate_detector(c, net, n, a, threads);
             }
             return evaluation_dict(e);
           },
           py::arg("net"), py::arg("normals"), py::arg("adversarials"), py::arg("threads") = 1)
      .def("__eq__", [](const CascadeModel& a, const CascadeModel& b) { return a == b; });

  m.def("fit_detector",
        [](const Network& net, const Array& normals, const Array& adversarials, double target_tpr, double c,
           std::uint64_t seed, std::size_t max_stages, std::size_t threads) {
          CascadeConfig cfg;
          cfg.target_tpr = target_tpr;
          cfg.c = c;
          cfg.seed = seed;
          cfg.max_stages = max_stages;
          cfg.threads = threads;
          const auto n = to_tensors(normals), a = to_tensors(adversarials);
          py::gil_scoped_release release;
          auto model = train_cascade(net, n, a, cfg);
          model.network_fingerprint = network_fingerprint(net);
          return model;
        },
        py::arg("net"), py::arg("normals"), py::arg("adversarials"), py::arg("target_tpr") = 0.97,
        py::arg("c") = 0.005, py::arg("seed") = 1, py::arg("max_stages") = 0, py::arg("threads") = 1);

  m.def("roc_auc",
        [](const std::vector<double>& scores, const std::vector<int>& labels) { return roc_auc(scores, labels).auc; },
        py::arg("scores"), py::arg("labels"));

  m.def("extremal_stats", [](const Array& t) { return vec(extremal_stats(to_tensor(t))); }, py::arg("output"));
  m.def("percentile_stats", [](const Array& t) { return vec(percentile_stats(to_tensor(t))); }, py::arg("output"));
  m.def("feature_names", &feature_names, py::arg("channels"));

  m.def("average_filter",
        [](const Array& image, std::size_t k) { return from_tensor(average_filter(to_tensor(image), k)); },
        py::arg("image"), py::arg("k") = 3);
  m.def("recovery_accuracy",
        [](const Network& net, const std::vector<AdversarialRecord>& recs, std::size_t k) {
          const auto r = recovery_eval(net, recs, k);
          return py::make_tuple(r.pre_accuracy, r.post_accuracy, r.n);
        },
        py::arg("net"), py::arg("records"), py::arg("k") = 3);

  py::class_<OmegaCalibration>(m, "OmegaCalibration")
      .def(py::init([](double a, double b) { return OmegaCalibration{a, b}; }), py::arg("intercept"),
           py::arg("slope"))
      .def_readonly("intercept", &OmegaCalibration::intercept)
      .def_readonly("slope", &OmegaCalibration::slope)
      .def("probability_normal", &OmegaCalibration::probability_normal, py::arg("score"));
  m.def("calibrate_omega",
        [](const std::vector<double>& s, const std::vector<int>& l) { return calibrate_omega(s, l); },
        py::arg("scores"), py::arg("labels"));
  m.def("should_predict",
        [](double p_normal, double p_err, double e_q, double e_a) {
          return abstain_decide(p_normal, p_err, e_q, e_a) == Action::predict;
        },
        py::arg("p_normal"), py::arg("p_err"), py::arg("e_q"), py::arg("e_a"));
}
