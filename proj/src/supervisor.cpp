#include "fqc/supervisor.hpp"

#include <sstream>
#include <stdexcept>

namespace fqc {

nlohmann::json to_json(const SupervisorEvent& e) {
  return {{"step", e.step}, {"time_s", e.time_s}, {"type", e.type}, {"detail", e.detail}};
}

std::string to_json_lines(const std::vector<SupervisorEvent>& events) {
  std::ostringstream os;
  for (const auto& e : events) os << to_json(e).dump() << '\n';
  return os.str();
}

Vec3 offset_correction(const std::deque<Vec3>& history, const Vec3& actual, int window) {
  if (history.empty()) throw std::invalid_argument("offset_correction: empty history");
  if (window < 1) throw std::invalid_argument("offset_correction: window must be >= 1");
  const std::size_t n = std::min<std::size_t>(static_cast<std::size_t>(window), history.size());
  Vec3 sum = Vec3::Zero();
  for (auto it = history.end() - static_cast<std::ptrdiff_t>(n); it != history.end(); ++it) sum += *it;
  return actual + sum / static_cast<double>(n);
}

Supervisor::Supervisor(ControllerSet controllers, FdModels models, SimConfig sim, SupervisorConfig config)
    : controllers_(std::move(controllers)), models_(std::move(models)), sim_(sim), config_(config) {
  if (controllers_.four.arity() != 4 || controllers_.three.arity() != 3 ||
      (controllers_.two && controllers_.two->arity() != 2))
    throw std::invalid_argument("Supervisor: controller arities must be 4, 3 and 2");
  if ((models_.four_to_three && models_.four_to_three->scenario != FdScenario::FourToThree) ||
      (models_.three_to_two && models_.three_to_two->scenario != FdScenario::ThreeToTwo))
    throw std::invalid_argument("Supervisor: fault-detection models are in the wrong slots");
  if (config_.persistence < 1 || config_.offset_window < 1)
    throw std::invalid_argument("Supervisor: persistence and offset window must be >= 1");
  if (config_.fault_detection && models_.four_to_three) {
    window_ = models_.four_to_three->make_window();
    decider_.emplace(config_.persistence);
  }
}

const ControllerBundle& Supervisor::active_controller() const {
  switch (detected_.functional_count()) {
    case 4: return controllers_.four;
    case 3: return controllers_.three;
    default: return *controllers_.two;
  }
}

SupervisorEvent Supervisor::make_event(std::string type, nlohmann::json detail) const {
  SupervisorEvent e;
  e.step = step_;
  e.time_s = static_cast<double>(step_) * kControlDt;
  e.type = std::move(type);
  e.detail = std::move(detail);
  return e;
}

void Supervisor::emit(std::vector<SupervisorEvent>& out, SupervisorEvent e) {
  log_.push_back(e);
  out.push_back(std::move(e));
}

void Supervisor::set_waypoint(const Vec3& waypoint) {
  waypoint_ = waypoint;
  history_.clear();
  log_.push_back(make_event("waypoint_set", {{"waypoint", {waypoint.x(), waypoint.y(), waypoint.z()}}}));
}

void Supervisor::note_true_failure(int prop, std::int64_t step) {
  true_failed_props_.push_back(prop);
  true_failure_steps_.push_back(step);
}

std::vector<SupervisorEvent> Supervisor::apply_detection(int prop) {
  std::vector<SupervisorEvent> out;
  if (unrecoverable_) return out;
  const std::string from = to_string(active_controller().scenario);
  FaultMask next = detected_;
  next.fail(prop);
  nlohmann::json detail = {{"stage", stage() == 0 ? "first" : "second"},
                           {"prop", prop},
                           {"mask", next.to_string()}};
  const auto idx = static_cast<std::size_t>(stage());
  if (idx < true_failure_steps_.size()) {
    detail["failure_step"] = true_failure_steps_[idx];
    detail["true_prop"] = true_failed_props_[idx];
  }
  emit(out, make_event("fault_detected", detail));

  if (!next.supported() || (next.functional_count() == 2 && !controllers_.two)) {
    unrecoverable_ = true;
    window_.reset();
    decider_.reset();
    emit(out, make_event("unrecoverable_fault", {{"mask", next.to_string()},
                                                  {"active_controller", from}}));
    return out;
  }
  detected_ = next;
  const ControllerBundle& now = active_controller();
  emit(out, make_event("controller_switched", {{"from", from},
                                               {"to", to_string(now.scenario)},
                                               {"arity", now.arity()},
                                               {"functional", detected_.functional_count()},
                                               {"mask", detected_.to_string()}}));
  window_.reset();
  decider_.reset();
  if (config_.fault_detection && stage() == 1 && models_.three_to_two && controllers_.two) {
    window_ = models_.three_to_two->make_window();
    decider_.emplace(config_.persistence);
  }
  return out;
}

TickResult Supervisor::tick(const QuadState& true_state) {
  TickResult result;
  QuadState observed = true_state;
  if (config_.offset_correction) {
    history_.push_back(true_state.position - waypoint_);
    while (static_cast<int>(history_.size()) > config_.offset_window) history_.pop_front();
    observed.position = offset_correction(history_, true_state.position, config_.offset_window);
  }
  result.policy_input = waypoint_frame(observed, waypoint_);

  const ControllerBundle& ctrl = active_controller();
  const Eigen::VectorXd out = policy_mean(ctrl.policy, result.policy_input);
  if (out.size() != detected_.functional_count())
    throw std::logic_error("Supervisor: policy arity does not match the detected mask");
  result.command = combine_actions(out, detected_, true_state, sim_.gains, sim_.vehicle);

  if (window_) {
    window_->push(waypoint_frame(true_state, waypoint_));
    if (window_->ready()) {
      const FdModel& model = stage() == 0 ? *models_.four_to_three : *models_.three_to_two;
      if (auto ev = decider_->update(fd_classify(model, *window_), step_)) {
        const int prop = stage() == 0 ? ev->fault_class : opposite_prop(detected_.failed_props().front());
        result.events = apply_detection(prop);
      }
    }
  }
  ++step_;
  return result;
}

}  // namespace fqc
