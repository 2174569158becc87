#pragma once

#include <cstdint>
#include <deque>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "fqc/fault_detect.hpp"
#include "fqc/ppo.hpp"

namespace fqc {

// Controllers for each stage. The two-propeller controller is optional; a
// second failure without it is reported as unrecoverable.
struct ControllerSet {
  ControllerBundle four;
  ControllerBundle three;
  std::optional<ControllerBundle> two;
};

// Without a 4->3 model the supervisor flies without fault detection.
struct FdModels {
  std::optional<FdModel> four_to_three;
  std::optional<FdModel> three_to_two;
};

struct SupervisorConfig {
  int persistence = 10;
  int offset_window = 15;
  bool offset_correction = true;
  bool fault_detection = true;
};

struct SupervisorEvent {
  std::int64_t step = 0;
  double time_s = 0.0;
  std::string type;  // waypoint_set, fault_detected, controller_switched, unrecoverable_fault
  nlohmann::json detail = nlohmann::json::object();
};

nlohmann::json to_json(const SupervisorEvent& e);
// One JSON object per line.
std::string to_json_lines(const std::vector<SupervisorEvent>& events);

// Trailing mean of the last min(window, size) samples added to `actual`.
Vec3 offset_correction(const std::deque<Vec3>& history, const Vec3& actual, int window = 15);

struct TickResult {
  ActuatorCommand command;
  StateVec policy_input;  // waypoint-frame state after offset correction
  std::vector<SupervisorEvent> events;
};

class Supervisor {
 public:
  Supervisor(ControllerSet controllers, FdModels models, SimConfig sim, SupervisorConfig config = {});

  // One control step at time step() * dt: observes the true state and returns
  // the actuator command for the detected configuration.
  TickResult tick(const QuadState& true_state);

  void set_waypoint(const Vec3& waypoint);
  // Lets the harness tag detection events with the step at which a propeller
  // actually failed. Has no influence on control.
  void note_true_failure(int prop, std::int64_t step);
  // Applies a detection outcome directly; used by tick() and by tests.
  std::vector<SupervisorEvent> apply_detection(int prop);

  const FaultMask& detected_mask() const { return detected_; }
  const ControllerBundle& active_controller() const;
  int active_arity() const { return active_controller().arity(); }
  // 0 before any detection, 1 after the first, 2 after the second.
  int stage() const { return detected_.failed_count(); }
  bool unrecoverable() const { return unrecoverable_; }
  // Index of the next tick; events are stamped with the tick that raised them.
  std::int64_t step() const { return step_; }
  const Vec3& waypoint() const { return waypoint_; }
  const std::optional<StateWindow>& window() const { return window_; }
  const std::deque<Vec3>& offset_history() const { return history_; }
  const std::vector<SupervisorEvent>& events() const { return log_; }

 private:
  SupervisorEvent make_event(std::string type, nlohmann::json detail) const;
  void emit(std::vector<SupervisorEvent>& out, SupervisorEvent e);

  ControllerSet controllers_;
  FdModels models_;
  SimConfig sim_;
  SupervisorConfig config_;
  FaultMask detected_;
  bool unrecoverable_ = false;
  std::optional<StateWindow> window_;
  std::optional<FaultDecider> decider_;
  Vec3 waypoint_ = Vec3::Zero();
  std::deque<Vec3> history_;
  std::int64_t step_ = 0;
  std::vector<std::int64_t> true_failure_steps_;
  std::vector<int> true_failed_props_;
  std::vector<SupervisorEvent> log_;
};

}  // namespace fqc
