// Python bindings for the simulator, controllers and fault detection.
#include <pybind11/eigen.h>
#include <pybind11/functional.h>
#include <pybind11/operators.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "fqc/experiments.hpp"

namespace py = pybind11;
using namespace fqc;

namespace {

FaultMask mask_from_failed(const std::vector<int>& failed) {
  FaultMask m;
  for (int p : failed) m.fail(p);
  return m;
}

}  // namespace

PYBIND11_MODULE(_fqc, m) {
  m.doc() = "Fault-tolerant quadcopter control";
  m.attr("CONTROL_DT") = kControlDt;

  py::class_<QuadParams>(m, "QuadParams")
      .def(py::init<>())
      .def_readwrite("mass", &QuadParams::mass)
      .def_readwrite("arm_length", &QuadParams::arm_length)
      .def_readwrite("inertia_diag", &QuadParams::inertia_diag)
      .def_readwrite("thrust_coeff", &QuadParams::thrust_coeff)
      .def_readwrite("rotor_torque_coeff", &QuadParams::rotor_torque_coeff)
      .def_readwrite("rot_drag_coeff", &QuadParams::rot_drag_coeff)
      .def_readwrite("gravity", &QuadParams::gravity)
      .def_readwrite("max_rotor_speed", &QuadParams::max_rotor_speed)
      .def("validate", &QuadParams::validate)
      .def("hover_speed", &QuadParams::hover_speed);

  py::class_<QuadState>(m, "QuadState")
      .def(py::init<>())
      .def_readwrite("rotation", &QuadState::rotation)
      .def_readwrite("position", &QuadState::position)
      .def_readwrite("lin_vel", &QuadState::lin_vel)
      .def_readwrite("ang_vel", &QuadState::ang_vel)
      .def("flatten", [](const QuadState& s) { return Eigen::VectorXd(flatten_state(s)); })
      .def_static("unflatten", [](const Eigen::VectorXd& v) {
        if (v.size() != 18) throw py::value_error("state vector must have 18 entries");
        return unflatten_state(StateVec(v));
      });

  py::class_<FaultMask>(m, "FaultMask")
      .def(py::init<>())
      .def(py::init(&mask_from_failed), py::arg("failed"))
      .def("functional", &FaultMask::functional)
      .def("fail", &FaultMask::fail)
      .def("functional_count", &FaultMask::functional_count)
      .def("supported", &FaultMask::supported)
      .def("functional_props", &FaultMask::functional_props)
      .def("failed_props", &FaultMask::failed_props)
      .def("__repr__", &FaultMask::to_string)
      .def(py::self == py::self);
  m.def("supported_masks", &supported_masks);

  py::class_<Wrench>(m, "Wrench")
      .def_readonly("force", &Wrench::force)
      .def_readonly("torque", &Wrench::torque);

  m.def(
      "mix_forces",
      [](const std::array<double, 4>& speeds, const FaultMask& mask, const QuadParams& p, const Vec3& w_body) {
        return mix_forces(RotorCommand{speeds}, mask, p, w_body);
      },
      py::arg("speeds"), py::arg("mask"), py::arg("params") = QuadParams{}, py::arg("w_body") = Vec3::Zero());
  m.def(
      "step",
      [](const QuadState& s, const std::array<double, 4>& speeds, const FaultMask& mask, const QuadParams& p,
         const Vec3& extra_torque, double dt) {
        return step(s, RotorCommand{speeds}, Wrench{Vec3::Zero(), extra_torque}, mask, p, dt);
      },
      py::arg("state"), py::arg("speeds"), py::arg("mask") = FaultMask{}, py::arg("params") = QuadParams{},
      py::arg("extra_torque") = Vec3::Zero(), py::arg("dt") = kControlDt);
  m.def("axis_tilt_angle", py::overload_cast<const QuadState&>(&axis_tilt_angle));
  m.def("pd_torque", [](const QuadState& s) { return pd_torque(s, PdGains{}); });

  m.def("reward", py::overload_cast<const QuadState&, const Vec3&>(&reward), py::arg("state"),
        py::arg("waypoint") = Vec3::Zero());
  m.def("mc_returns", &mc_returns, py::arg("rewards"), py::arg("terminal_value"), py::arg("gamma"));
  m.def("cyclic_assign", &cyclic_assign);
  m.def("waypoint_frame",
        [](const QuadState& s, const Vec3& wp) { return Eigen::VectorXd(waypoint_frame(s, wp)); });

  py::enum_<Scenario>(m, "Scenario")
      .value("FourProp", Scenario::FourProp)
      .value("ThreeProp", Scenario::ThreeProp)
      .value("TwoPropOpposing", Scenario::TwoPropOpposing);
  m.def("parse_scenario", &parse_scenario);

  py::class_<PpoConfig>(m, "PpoConfig")
      .def(py::init<>())
      .def_readwrite("n_traj", &PpoConfig::n_traj)
      .def_readwrite("traj_len", &PpoConfig::traj_len)
      .def_readwrite("epochs_max", &PpoConfig::epochs_max)
      .def_readwrite("exploration_std", &PpoConfig::exploration_std)
      .def_readwrite("exploration_std_final", &PpoConfig::exploration_std_final)
      .def_readwrite("policy_lr", &PpoConfig::policy_lr)
      .def_readwrite("value_lr", &PpoConfig::value_lr)
      .def_readwrite("gamma", &PpoConfig::gamma)
      .def_readwrite("workers", &PpoConfig::workers);

  py::class_<EpochLog>(m, "EpochLog")
      .def_readonly("epoch", &EpochLog::epoch)
      .def_readonly("mean_cost", &EpochLog::mean_cost)
      .def_readonly("value_loss", &EpochLog::value_loss);

  py::class_<ControllerBundle>(m, "ControllerBundle")
      .def_readonly("scenario", &ControllerBundle::scenario)
      .def("arity", &ControllerBundle::arity)
      .def("act", [](const ControllerBundle& b, const Eigen::VectorXd& input) {
        if (input.size() != 18) throw py::value_error("policy input must have 18 entries");
        return policy_mean(b.policy, StateVec(input));
      });
  m.def("load_bundle", &load_bundle);

  m.def(
      "train_controller",
      [](Scenario s, const PpoConfig& cfg, std::uint64_t seed) {
        TrainingResult r;
        {
          py::gil_scoped_release release;
          r = train_controller(s, cfg, SimConfig{}, seed);
        }
        return py::make_tuple(r.bundle, r.log);
      },
      py::arg("scenario"), py::arg("config"), py::arg("seed"));

  py::enum_<FdScenario>(m, "FdScenario")
      .value("FourToThree", FdScenario::FourToThree)
      .value("ThreeToTwo", FdScenario::ThreeToTwo);
  m.def("one_hot", &one_hot);
  m.def(
      "fd_decide",
      [](const std::vector<Eigen::VectorXd>& q, int k, std::int64_t first) -> py::object {
        const auto ev = fd_decide(q, k, first);
        if (!ev) return py::none();
        return py::make_tuple(ev->fault_class, ev->detection_step);
      },
      py::arg("q_stream"), py::arg("persistence") = 10, py::arg("first_step") = 0);
  m.def(
      "offset_correction",
      [](const std::vector<Vec3>& history, const Vec3& actual, int window) {
        return offset_correction(std::deque<Vec3>(history.begin(), history.end()), actual, window);
      },
      py::arg("history"), py::arg("actual"), py::arg("window") = 15);

  py::register_exception<WindowNotReady>(m, "WindowNotReady", PyExc_RuntimeError);
  py::class_<StateWindow>(m, "StateWindow")
      .def(py::init<int, int>(), py::arg("capacity"), py::arg("warmup"))
      .def("push", [](StateWindow& w, const Eigen::VectorXd& v) {
        if (v.size() != 18) throw py::value_error("state vector must have 18 entries");
        w.push(StateVec(v));
      })
      .def("ready", &StateWindow::ready)
      .def("step", &StateWindow::step);
  py::class_<FdModel>(m, "FdModel")
      .def_readonly("scenario", &FdModel::scenario)
      .def("window", &FdModel::window)
      .def("warmup", &FdModel::warmup)
      .def("make_window", &FdModel::make_window)
      .def("classify", [](const FdModel& model, const StateWindow& w) { return fd_classify(model, w); });
  m.def("make_fd_model", [](FdScenario s, std::uint64_t seed) {
    Rng rng(seed);
    return make_fd_model(s, rng);
  });
  m.def("load_fd_model", &load_fd_model);

  m.def("default_config_json", [] { return to_json(ExperimentConfig{}).dump(); });
  m.def("config_hash", [](const std::string& text) {
    return config_hash(to_json(config_from_json(nlohmann::json::parse(text))));
  });
}
