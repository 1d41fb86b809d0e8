// Python surface over the core operations: affine flows, combinations,
// push-forward retrieval, prior composition, and the experiment pipeline.

#include <pybind11/eigen.h>
#include <pybind11/functional.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "ceip/dataset.hpp"
#include "ceip/errors.hpp"
#include "ceip/flow.hpp"
#include "ceip/harness.hpp"
#include "ceip/mixture.hpp"
#include "ceip/retrieval.hpp"
#include "ceip/rl.hpp"
#include "ceip/rng.hpp"

namespace py = pybind11;
using namespace ceip;

PYBIND11_MODULE(_ceip, m) {
  m.doc() = "RL-from-demonstrations priors: conditional affine flows, "
            "flow combinations, and push-forward transition retrieval";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<NumericError>(m, "NumericError",
                                       PyExc_ArithmeticError);
  py::register_exception<IoError>(m, "IoError", PyExc_OSError);

  m.def("derive_seed", &derive_seed, py::arg("base"), py::arg("tag"),
        py::arg("index") = 0,
        "Deterministic child seed from a base seed and a stage tag");

  // ---- affine maps ----

  py::class_<AffineMap>(m, "AffineMap")
      .def(py::init([](Vec scale, Vec shift) {
             AffineMap map{std::move(scale), std::move(shift)};
             map.validate();
             return map;
           }),
           py::arg("scale"), py::arg("shift"))
      .def_readonly("scale", &AffineMap::scale)
      .def_readonly("shift", &AffineMap::shift)
      .def("__repr__", [](const AffineMap& map) {
        return "AffineMap(dim=" + std::to_string(map.scale.size()) + ")";
      });

  m.def("affine_forward", &affine_forward, py::arg("map"), py::arg("z"));
  m.def("affine_inverse", &affine_inverse, py::arg("map"), py::arg("a"));
  m.def("affine_log_likelihood", &affine_log_likelihood, py::arg("map"),
        py::arg("a"),
        "Log density of a under scale*z + shift with standard-normal z");

  // ---- specs, training knobs, pairs ----

  py::class_<MlpSpec>(m, "MlpSpec")
      .def(py::init([](int input_dim, std::vector<int> hidden, int output_dim,
                       bool batchnorm) {
             MlpSpec spec;
             spec.input_dim = input_dim;
             spec.hidden_widths = std::move(hidden);
             spec.output_dim = output_dim;
             spec.batchnorm = batchnorm;
             spec.validate();
             return spec;
           }),
           py::arg("input_dim"), py::arg("hidden"), py::arg("output_dim"),
           py::arg("batchnorm") = false)
      .def_readonly("input_dim", &MlpSpec::input_dim)
      .def_readonly("hidden", &MlpSpec::hidden_widths)
      .def_readonly("output_dim", &MlpSpec::output_dim)
      .def_readonly("batchnorm", &MlpSpec::batchnorm);

  py::class_<TrainConfig>(m, "TrainConfig")
      .def(py::init<>())
      .def_readwrite("epochs", &TrainConfig::epochs)
      .def_readwrite("batch_size", &TrainConfig::batch_size)
      .def_readwrite("lr", &TrainConfig::lr)
      .def_readwrite("clip_norm", &TrainConfig::clip_norm)
      .def_readwrite("val_ratio", &TrainConfig::val_ratio)
      .def_readwrite("seed", &TrainConfig::seed);

  py::class_<TrainReport>(m, "TrainReport")
      .def_readonly("best_val", &TrainReport::best_val)
      .def_readonly("best_epoch", &TrainReport::best_epoch)
      .def_readonly("batches_fed", &TrainReport::batches_fed)
      .def_readonly("early_stopped", &TrainReport::early_stopped)
      .def_readonly("aborted_nonfinite", &TrainReport::aborted_nonfinite)
      .def_readonly("train_history", &TrainReport::train_history)
      .def_readonly("val_history", &TrainReport::val_history);

  py::class_<UaPair>(m, "UaPair")
      .def(py::init([](Vec u, Vec a) {
             return UaPair{std::move(u), std::move(a)};
           }),
           py::arg("u"), py::arg("a"))
      .def_readonly("u", &UaPair::u)
      .def_readonly("a", &UaPair::a);

  m.def(
      "make_pairs",
      [](const Mat& us, const Mat& actions) {
        if (us.rows() != actions.rows())
          throw ShapeError("make_pairs: row counts differ");
        std::vector<UaPair> pairs;
        pairs.reserve(static_cast<std::size_t>(us.rows()));
        for (Eigen::Index i = 0; i < us.rows(); ++i)
          pairs.push_back({us.row(i).transpose(), actions.row(i).transpose()});
        return pairs;
      },
      py::arg("conditions"), py::arg("actions"),
      "Rows of two matching arrays into a list of (u, a) training pairs");

  // ---- single conditional flow ----

  py::class_<ConditionedAffineFlow>(m, "ConditionedAffineFlow")
      .def(py::init<MlpSpec, MlpSpec, std::uint64_t>(), py::arg("c_spec"),
           py::arg("d_spec"), py::arg("seed"))
      .def_static("identity", &ConditionedAffineFlow::identity,
                  py::arg("condition_dim"), py::arg("action_dim"))
      .def_property_readonly("condition_dim",
                             &ConditionedAffineFlow::condition_dim)
      .def_property_readonly("action_dim", &ConditionedAffineFlow::action_dim)
      .def("effective_affine", &ConditionedAffineFlow::effective_affine,
           py::arg("u"))
      .def(
          "fit",
          [](ConditionedAffineFlow& flow, const std::vector<UaPair>& pairs,
             const TrainConfig& cfg) {
            return train_single_flow(flow, pairs, cfg);
          },
          py::arg("pairs"), py::arg("config"),
          "Maximum-likelihood training; leaves the flow at its best-"
          "validation snapshot")
      .def("digest",
           [](const ConditionedAffineFlow& flow) { return flow_digest(flow); })
      .def("save",
           [](const ConditionedAffineFlow& flow, const std::string& path) {
             save_flow(path, flow);
           },
           py::arg("path"))
      .def_static(
          "load",
          [](const std::string& path) { return load_flow(path); },
          py::arg("path"));

  m.def(
      "flow_nll",
      [](ConditionedAffineFlow& flow, const std::vector<UaPair>& batch) {
        return flow_loss_grad(flow, batch, nullptr);
      },
      py::arg("flow"), py::arg("pairs"),
      "Mean negative log-likelihood of the pairs under the flow");

  // ---- combination of frozen bases ----

  py::class_<CombinedFlow>(m, "CombinedFlow")
      .def(py::init<std::vector<ConditionedAffineFlow>, MlpSpec,
                    std::uint64_t>(),
           py::arg("bases"), py::arg("coeff_spec"), py::arg("seed"))
      .def_property_readonly("n_flows", &CombinedFlow::n_flows)
      .def_property_readonly("condition_dim", &CombinedFlow::condition_dim)
      .def_property_readonly("action_dim", &CombinedFlow::action_dim)
      .def(
          "coefficients",
          [](const CombinedFlow& cf, const Vec& u) {
            Vec mu, lambda;
            cf.coefficients(u, mu, lambda);
            return py::make_tuple(mu, lambda);
          },
          py::arg("u"), "(mu, lambda) emitted for a condition")
      .def("effective_affine", &CombinedFlow::effective_affine, py::arg("u"))
      .def("inject_coefficients", &CombinedFlow::inject_coefficients,
           py::arg("mu"), py::arg("lam"),
           "Bypass the coefficient net with fixed coefficients")
      .def("clear_injection", &CombinedFlow::clear_injection)
      .def_property_readonly("injected", &CombinedFlow::injected)
      .def("base_digests", &CombinedFlow::base_digests)
      .def(
          "fit",
          [](CombinedFlow& cf, const std::vector<UaPair>& pairs,
             const TrainConfig& cfg) {
            return train_combination(cf, pairs, cfg);
          },
          py::arg("pairs"), py::arg("config"),
          "Trains the coefficient net only; base flows stay frozen")
      .def(
          "eval_nll",
          [](const CombinedFlow& cf, const std::vector<UaPair>& pairs) {
            return combination_eval_nll(cf, pairs);
          },
          py::arg("pairs"));

  // ---- explicit prior ----

  py::class_<TransitionTriple>(m, "TransitionTriple")
      .def(py::init([](Vec s, Vec a, Vec s_next, int traj_id, int step_index) {
             TransitionTriple t;
             t.s = std::move(s);
             t.a = std::move(a);
             t.s_next = std::move(s_next);
             t.traj_id = traj_id;
             t.step_index = step_index;
             return t;
           }),
           py::arg("s"), py::arg("a"), py::arg("s_next"),
           py::arg("traj_id") = 0, py::arg("step_index") = 0)
      .def_readonly("s", &TransitionTriple::s)
      .def_readonly("a", &TransitionTriple::a)
      .def_readonly("s_next", &TransitionTriple::s_next)
      .def_readonly("traj_id", &TransitionTriple::traj_id)
      .def_readonly("step_index", &TransitionTriple::step_index);

  py::class_<RetrievedTransition>(m, "RetrievedTransition")
      .def_readonly("s_next", &RetrievedTransition::s_next)
      .def_readonly("traj_id", &RetrievedTransition::traj_id)
      .def_readonly("step_index", &RetrievedTransition::step_index);

  py::class_<RetrievalDatabase>(m, "RetrievalDatabase")
      .def(py::init<std::vector<TransitionTriple>, double>(),
           py::arg("transitions"), py::arg("penalty") = 1.0)
      .def_property_readonly("size", &RetrievalDatabase::size)
      .def_property_readonly("penalty", &RetrievalDatabase::penalty)
      .def_property_readonly("state_dim", &RetrievalDatabase::state_dim)
      .def_property_readonly("markers", &RetrievalDatabase::markers)
      .def("reset_episode", &RetrievalDatabase::reset_episode)
      .def("retrieve_next", &RetrievalDatabase::retrieve_next, py::arg("s"),
           "Nearest transition under the push-forward penalty; advances the "
           "winning trajectory's marker");

  m.def("make_condition", &make_condition, py::arg("s"), py::arg("s_next_hat"),
        "Concatenated condition [s, s_next_hat] for explicit-prior flows");

  // ---- deployment prior ----

  py::class_<PriorBundle>(m, "PriorBundle")
      .def(py::init([](CombinedFlow flow,
                       std::optional<RetrievalDatabase> db, bool use_ts_flow,
                       bool use_explicit, bool use_forward) {
             PriorBundle b;
             b.flow = std::move(flow);
             b.db = std::move(db);
             b.use_ts_flow = use_ts_flow;
             b.use_explicit = use_explicit;
             b.use_forward = use_forward;
             return b;
           }),
           py::arg("flow"), py::arg("db") = std::nullopt,
           py::arg("use_ts_flow") = false, py::arg("use_explicit") = false,
           py::arg("use_forward") = false)
      .def_readonly("use_ts_flow", &PriorBundle::use_ts_flow)
      .def_readonly("use_explicit", &PriorBundle::use_explicit)
      .def_readonly("use_forward", &PriorBundle::use_forward)
      .def("reset_episode", &PriorBundle::reset_episode)
      .def("step", &prior_step, py::arg("s"), py::arg("z"),
           "Latent z in [-3,3]^q to a clipped environment action");

  // ---- datasets ----

  py::class_<Trajectory>(m, "Trajectory")
      .def(py::init([](std::vector<Vec> states, std::vector<Vec> actions,
                       std::string task_label) {
             return Trajectory{std::move(states), std::move(actions),
                               std::move(task_label)};
           }),
           py::arg("states"), py::arg("actions"), py::arg("task_label") = "")
      .def_readonly("states", &Trajectory::states)
      .def_readonly("actions", &Trajectory::actions)
      .def_readonly("task_label", &Trajectory::task_label)
      .def("__len__", &Trajectory::length);

  m.def(
      "load_trajectories",
      [](const std::string& path) { return load_trajectories(path); },
      py::arg("path"), "Trajectories from a JSON-lines file");
  m.def("build_condition_pairs", &build_condition_pairs, py::arg("trajs"),
        py::arg("with_explicit"),
        "Training pairs; u = [s, s_next] when with_explicit");
  m.def("collect_transitions", &collect_transitions, py::arg("trajs"));

  py::class_<ClusterAssignment>(m, "ClusterAssignment")
      .def_readonly("k", &ClusterAssignment::k)
      .def_readonly("centroids", &ClusterAssignment::centroids)
      .def_readonly("labels", &ClusterAssignment::labels)
      .def_readonly("objective", &ClusterAssignment::objective);

  m.def("kmeans_cluster", &kmeans_cluster, py::arg("features"), py::arg("k"),
        py::arg("seed"), py::arg("max_iters") = 100);

  // ---- experiment pipeline ----

  py::class_<ExperimentConfig>(m, "ExperimentConfig")
      .def_static("load", &ExperimentConfig::load, py::arg("path"))
      .def_readonly("name", &ExperimentConfig::name)
      .def_readonly("env_kind", &ExperimentConfig::env_kind)
      .def_readwrite("variant", &ExperimentConfig::variant)
      .def_readwrite("seeds", &ExperimentConfig::seeds)
      .def_readwrite("out", &ExperimentConfig::out)
      .def("json_text",
           [](const ExperimentConfig& cfg) { return cfg.to_json().dump(2); },
           "Canonical resolved form, every field present");

  m.def("config_hash", &config_hash, py::arg("config"),
        "Experiment identity hash embedded in every artifact");
  m.def("run_hash", &run_hash, py::arg("config"), py::arg("variant"),
        py::arg("seed"), "Identity hash of one variant/seed run");
  m.def("variant_names", &variant_names,
        py::return_value_policy::reference);

  py::class_<EvalRow>(m, "EvalRow")
      .def_readonly("step", &EvalRow::step)
      .def_readonly("mean_return", &EvalRow::mean_return)
      .def_readonly("std_return", &EvalRow::std_return)
      .def_readonly("mean_length", &EvalRow::mean_length)
      .def_readonly("mean_subtasks", &EvalRow::mean_subtasks);

  py::class_<RunOutcome>(m, "RunOutcome")
      .def_readonly("dir", &RunOutcome::dir)
      .def_readonly("final_return", &RunOutcome::final_return)
      .def_readonly("final_subtasks", &RunOutcome::final_subtasks)
      .def_readonly("reused", &RunOutcome::reused)
      .def_property_readonly(
          "rows", [](const RunOutcome& r) { return r.report.rows; });

  m.def("run_pipeline", &run_pipeline, py::arg("config"),
        py::arg("seeds") = std::vector<std::uint64_t>{},
        py::arg("resume") = false,
        py::call_guard<py::gil_scoped_release>(),
        "Data, flows, combination and policy for config.variant over the "
        "seeds; returns one outcome per seed");
}
