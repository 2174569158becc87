#include "fqc/experiments.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <set>
#include <sstream>
#include <stdexcept>

#include "fqc/parallel.hpp"

namespace fqc {

using nlohmann::json;

namespace {

// Reads the keys of `j` into the fields registered with `get`, rejecting
// anything unknown so that typos in config files do not pass silently.
class Reader {
 public:
  Reader(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw std::invalid_argument(where_ + ": expected a JSON object");
  }
  ~Reader() noexcept(false) {
    if (std::uncaught_exceptions()) return;
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.count(it.key())) throw std::invalid_argument(where_ + ": unknown key '" + it.key() + "'");
  }
  template <typename T>
  void get(const char* key, T& value) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      value = j_.at(key).get<T>();
    } catch (const json::exception& e) {
      throw std::invalid_argument(where_ + "." + key + ": " + e.what());
    }
  }
  void get(const char* key, Vec3& value) {
    std::array<double, 3> a{value.x(), value.y(), value.z()};
    get(key, a);
    value = Vec3(a[0], a[1], a[2]);
  }
  void get(const char* key, nn::OptimizerMode& mode) {
    std::string name = nn::to_string(mode);
    get(key, name);
    mode = nn::parse_optimizer_mode(name);
  }
  const json* child(const char* key) {
    seen_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }

 private:
  const json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

json vec(const Vec3& v) { return json::array({v.x(), v.y(), v.z()}); }

void read_vehicle(const json& j, QuadParams& p) {
  Reader r(j, "vehicle");
  r.get("mass", p.mass);
  r.get("arm_length", p.arm_length);
  r.get("inertia_diag", p.inertia_diag);
  r.get("thrust_coeff", p.thrust_coeff);
  r.get("rotor_torque_coeff", p.rotor_torque_coeff);
  r.get("rot_drag_coeff", p.rot_drag_coeff);
  r.get("gravity", p.gravity);
  r.get("max_rotor_speed", p.max_rotor_speed);
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

bool out_of_box(const QuadState& s, const Vec3& waypoint, double half_extent) {
  return (s.position - waypoint).cwiseAbs().maxCoeff() > half_extent;
}

}  // namespace

json to_json(const QuadParams& p) {
  return {{"mass", p.mass},
          {"arm_length", p.arm_length},
          {"inertia_diag", vec(p.inertia_diag)},
          {"thrust_coeff", p.thrust_coeff},
          {"rotor_torque_coeff", p.rotor_torque_coeff},
          {"rot_drag_coeff", p.rot_drag_coeff},
          {"gravity", p.gravity},
          {"max_rotor_speed", p.max_rotor_speed}};
}

QuadParams vehicle_from_json(const json& j) {
  QuadParams p;
  read_vehicle(j, p);
  p.validate();
  return p;
}

void ScenarioConfig::validate() const {
  if (!(duration_s > 0.0)) throw std::invalid_argument("track: duration_s must be > 0");
  const auto steps = static_cast<std::int64_t>(std::llround(duration_s / kControlDt));
  if (failure_step >= steps) throw std::invalid_argument("track: failure_step must be < duration_s * 100");
  if (failure_prop < 0 || failure_prop > kNumProps) throw std::invalid_argument("track: failure_prop must be 0..4");
  FaultMask mask;
  for (int p : initial_failures) {
    if (p < 1 || p > kNumProps) throw std::invalid_argument("track: initial_failures entries must be 1..4");
    mask.fail(p);
  }
  if (!mask.supported())
    throw std::invalid_argument("track: initial_failures " + mask.to_string() + " is not a supported configuration");
}

json to_json(const ExperimentConfig& c) {
  const auto& g = c.sim.gains;
  const auto& p = c.ppo;
  const auto& t = c.track;
  return {
      {"vehicle", to_json(c.sim.vehicle)},
      {"pd_gains", {{"kp_xy", g.kp_xy}, {"kd_xy", g.kd_xy}, {"kp_z", g.kp_z}, {"kd_z", g.kd_z}}},
      {"ppo",
       {{"gamma", p.gamma},
        {"clip_epsilon", p.clip_epsilon},
        {"policy_lr", p.policy_lr},
        {"value_lr", p.value_lr},
        {"policy_optimizer", nn::to_string(p.policy_optimizer)},
        {"value_optimizer", nn::to_string(p.value_optimizer)},
        {"n_value_updates", p.n_value_updates},
        {"exploration_std", p.exploration_std},
        {"exploration_std_final", p.exploration_std_final},
        {"epochs_max", p.epochs_max},
        {"value_loss_stop", p.value_loss_stop},
        {"n_traj", p.n_traj},
        {"traj_len", p.traj_len},
        {"minibatch", p.minibatch},
        {"huber_delta", p.huber_delta},
        {"termination_cost", p.termination_cost},
        {"box_half_extent", p.box_half_extent},
        {"train_altitude", p.train_altitude},
        {"workers", p.workers}}},
      {"fd_gen",
       {{"run_steps", c.fd_gen.run_steps},
        {"harvest_stride", c.fd_gen.harvest_stride},
        {"altitude", c.fd_gen.altitude},
        {"init_position_spread", c.fd_gen.init_position_spread},
        {"init_tilt", c.fd_gen.init_tilt},
        {"max_excursion", c.fd_gen.max_excursion},
        {"workers", c.fd_gen.workers}}},
      {"fd_train",
       {{"minibatch", c.fd_train.minibatch},
        {"heldout_fraction", c.fd_train.heldout_fraction},
        {"learning_rate_4to3", c.fd_train.learning_rate_4to3},
        {"learning_rate_3to2", c.fd_train.learning_rate_3to2}}},
      {"supervisor",
       {{"persistence", c.supervisor.persistence},
        {"offset_window", c.supervisor.offset_window},
        {"offset_correction", c.supervisor.offset_correction},
        {"fault_detection", c.supervisor.fault_detection}}},
      {"track",
       {{"name", t.name},
        {"target_height", t.target_height},
        {"shift_time_s", t.shift_time_s},
        {"shift", vec(t.shift)},
        {"initial_failures", t.initial_failures},
        {"failure_prop", t.failure_prop},
        {"failure_step", t.failure_step},
        {"duration_s", t.duration_s}}},
      {"bench",
       {{"altitude", c.bench.altitude},
        {"first_stage_timeout_s", c.bench.first_stage_timeout_s},
        {"second_stage_timeout_s", c.bench.second_stage_timeout_s},
        {"second_failure_min_delay", c.bench.second_failure_min_delay},
        {"second_failure_max_delay", c.bench.second_failure_max_delay},
        {"workers", c.bench.workers}}},
      {"failure_rate",
       {{"isolated_target", c.failure_rate.isolated_target},
        {"isolated_duration_s", c.failure_rate.isolated_duration_s},
        {"heights", c.failure_rate.heights},
        {"midflight_duration_s", c.failure_rate.midflight_duration_s},
        {"stabilization_band", c.failure_rate.stabilization_band},
        {"stabilization_time_s", c.failure_rate.stabilization_time_s},
        {"workers", c.failure_rate.workers}}},
  };
}

ExperimentConfig config_from_json(const json& j) {
  ExperimentConfig c;
  Reader top(j, "config");
  if (const json* v = top.child("vehicle")) read_vehicle(*v, c.sim.vehicle);
  if (const json* v = top.child("pd_gains")) {
    Reader r(*v, "pd_gains");
    r.get("kp_xy", c.sim.gains.kp_xy);
    r.get("kd_xy", c.sim.gains.kd_xy);
    r.get("kp_z", c.sim.gains.kp_z);
    r.get("kd_z", c.sim.gains.kd_z);
  }
  if (const json* v = top.child("ppo")) {
    Reader r(*v, "ppo");
    auto& p = c.ppo;
    r.get("gamma", p.gamma);
    r.get("clip_epsilon", p.clip_epsilon);
    r.get("policy_lr", p.policy_lr);
    r.get("value_lr", p.value_lr);
    r.get("policy_optimizer", p.policy_optimizer);
    r.get("value_optimizer", p.value_optimizer);
    r.get("n_value_updates", p.n_value_updates);
    r.get("exploration_std", p.exploration_std);
    r.get("exploration_std_final", p.exploration_std_final);
    r.get("epochs_max", p.epochs_max);
    r.get("value_loss_stop", p.value_loss_stop);
    r.get("n_traj", p.n_traj);
    r.get("traj_len", p.traj_len);
    r.get("minibatch", p.minibatch);
    r.get("huber_delta", p.huber_delta);
    r.get("termination_cost", p.termination_cost);
    r.get("box_half_extent", p.box_half_extent);
    r.get("train_altitude", p.train_altitude);
    r.get("workers", p.workers);
  }
  if (const json* v = top.child("fd_gen")) {
    Reader r(*v, "fd_gen");
    r.get("run_steps", c.fd_gen.run_steps);
    r.get("harvest_stride", c.fd_gen.harvest_stride);
    r.get("altitude", c.fd_gen.altitude);
    r.get("init_position_spread", c.fd_gen.init_position_spread);
    r.get("init_tilt", c.fd_gen.init_tilt);
    r.get("max_excursion", c.fd_gen.max_excursion);
    r.get("workers", c.fd_gen.workers);
  }
  if (const json* v = top.child("fd_train")) {
    Reader r(*v, "fd_train");
    r.get("minibatch", c.fd_train.minibatch);
    r.get("heldout_fraction", c.fd_train.heldout_fraction);
    r.get("learning_rate_4to3", c.fd_train.learning_rate_4to3);
    r.get("learning_rate_3to2", c.fd_train.learning_rate_3to2);
  }
  if (const json* v = top.child("supervisor")) {
    Reader r(*v, "supervisor");
    r.get("persistence", c.supervisor.persistence);
    r.get("offset_window", c.supervisor.offset_window);
    r.get("offset_correction", c.supervisor.offset_correction);
    r.get("fault_detection", c.supervisor.fault_detection);
  }
  if (const json* v = top.child("track")) {
    Reader r(*v, "track");
    auto& t = c.track;
    r.get("name", t.name);
    r.get("target_height", t.target_height);
    r.get("shift_time_s", t.shift_time_s);
    r.get("shift", t.shift);
    r.get("initial_failures", t.initial_failures);
    r.get("failure_prop", t.failure_prop);
    r.get("failure_step", t.failure_step);
    r.get("duration_s", t.duration_s);
  }
  if (const json* v = top.child("bench")) {
    Reader r(*v, "bench");
    r.get("altitude", c.bench.altitude);
    r.get("first_stage_timeout_s", c.bench.first_stage_timeout_s);
    r.get("second_stage_timeout_s", c.bench.second_stage_timeout_s);
    r.get("second_failure_min_delay", c.bench.second_failure_min_delay);
    r.get("second_failure_max_delay", c.bench.second_failure_max_delay);
    r.get("workers", c.bench.workers);
  }
  if (const json* v = top.child("failure_rate")) {
    Reader r(*v, "failure_rate");
    auto& f = c.failure_rate;
    r.get("isolated_target", f.isolated_target);
    r.get("isolated_duration_s", f.isolated_duration_s);
    r.get("heights", f.heights);
    r.get("midflight_duration_s", f.midflight_duration_s);
    r.get("stabilization_band", f.stabilization_band);
    r.get("stabilization_time_s", f.stabilization_time_s);
    r.get("workers", f.workers);
  }
  c.sim.vehicle.validate();
  c.ppo.validate();
  c.track.validate();
  if (c.bench.second_failure_max_delay < c.bench.second_failure_min_delay || c.bench.second_failure_min_delay < 0)
    throw std::invalid_argument("bench: need 0 <= second_failure_min_delay <= second_failure_max_delay");
  return c;
}

ExperimentConfig load_config(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open config " + path.string());
  json j;
  try {
    is >> j;
  } catch (const json::exception& e) {
    throw std::invalid_argument(path.string() + ": " + e.what());
  }
  return config_from_json(j);
}

std::string config_hash(const json& j) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : j.dump()) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

fs::path bundle_dir(const fs::path& root, Scenario scenario) { return root / to_string(scenario); }
fs::path fd_model_path(const fs::path& root, FdScenario s) { return root / ("fd_" + to_string(s) + ".fqnn"); }
fs::path fd_dataset_path(const fs::path& root, FdScenario s) { return root / ("fd_" + to_string(s) + ".fqfd"); }

void save_bundle(const ControllerBundle& bundle, const fs::path& dir, const std::string& hash, int epochs) {
  fs::create_directories(dir);
  nn::save_weights(bundle.policy, dir / "policy.fqnn");
  nn::save_weights(bundle.value, dir / "value.fqnn");
  const json manifest = {{"scenario", to_string(bundle.scenario)},
                         {"config_hash", hash},
                         {"epochs", epochs},
                         {"policy", bundle.policy.arch()},
                         {"value", bundle.value.arch()}};
  write_text(dir / "manifest.json", manifest.dump(2) + "\n");
}

ControllerBundle load_bundle(const fs::path& dir, Scenario scenario) {
  const json manifest = json::parse(read_text(dir / "manifest.json"));
  if (manifest.at("scenario").get<std::string>() != to_string(scenario))
    throw std::runtime_error(dir.string() + ": manifest scenario is " + manifest.at("scenario").get<std::string>() +
                             ", expected " + to_string(scenario));
  ControllerBundle b;
  b.scenario = scenario;
  b.policy = nn::load_mlp(dir / "policy.fqnn");
  b.value = nn::load_mlp(dir / "value.fqnn");
  if (b.arity() != functional_count(scenario))
    throw std::runtime_error(dir.string() + ": policy arity does not match " + to_string(scenario));
  return b;
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
  os << text;
  if (!os) throw std::runtime_error("failed writing " + path.string());
}

std::string read_text(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

std::string trajectory_csv_header() {
  return "t_s,x,y,z,vx,vy,vz,wx,wy,wz,alpha,rotor1,rotor2,rotor3,rotor4,active_controller,reward";
}

std::string to_csv(const TrajectoryLog& log) {
  std::string out = trajectory_csv_header() + "\n";
  for (const auto& r : log.rows) {
    out += fmt(r.t_s);
    for (const Vec3* v : {&r.position, &r.lin_vel, &r.ang_vel})
      for (int i = 0; i < 3; ++i) out += "," + fmt((*v)(i));
    out += "," + fmt(r.alpha);
    for (double w : r.rotor_speeds) out += "," + fmt(w);
    out += "," + r.active_controller + "," + fmt(r.reward) + "\n";
  }
  return out;
}

TrajectoryLog trajectory_from_csv(const std::string& text) {
  std::istringstream is(text);
  std::string line;
  if (!std::getline(is, line) || line != trajectory_csv_header())
    throw std::runtime_error("trajectory CSV: unexpected header");
  TrajectoryLog log;
  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ls(line);
    for (std::string cell; std::getline(ls, cell, ',');) f.push_back(cell);
    if (f.size() != 17) throw std::runtime_error("trajectory CSV line " + std::to_string(lineno) + ": expected 17 fields");
    auto num = [&](std::size_t i) {
      std::size_t used = 0;
      const double v = std::stod(f[i], &used);
      if (used != f[i].size()) throw std::runtime_error("trajectory CSV line " + std::to_string(lineno) + ": bad number");
      return v;
    };
    TrajectoryRow r;
    r.t_s = num(0);
    for (int i = 0; i < 3; ++i) {
      r.position(i) = num(1 + i);
      r.lin_vel(i) = num(4 + i);
      r.ang_vel(i) = num(7 + i);
    }
    r.alpha = num(10);
    for (int i = 0; i < kNumProps; ++i) r.rotor_speeds[static_cast<std::size_t>(i)] = num(11 + static_cast<std::size_t>(i));
    r.active_controller = f[15];
    r.reward = num(16);
    log.rows.push_back(r);
  }
  return log;
}

std::string training_log_csv(const std::vector<EpochLog>& log, bool include_wall_time) {
  std::string out = "epoch,mean_cost,value_loss,surrogate_loss,wall_time_s\n";
  for (const auto& e : log)
    out += std::to_string(e.epoch) + "," + fmt(e.mean_cost) + "," + fmt(e.value_loss) + "," + fmt(e.surrogate_loss) +
           "," + fmt(include_wall_time ? e.wall_time_s : 0.0) + "\n";
  return out;
}

TrainOutcome cmd_train(Scenario scenario, const ExperimentConfig& config, std::uint64_t seed, const fs::path& out,
                       bool record_wall_time) {
  TrainOutcome o;
  o.result = train_controller(scenario, config.ppo, config.sim, seed);
  o.bundle_dir = bundle_dir(out, scenario);
  json cfg = to_json(config);
  cfg["seed"] = seed;
  save_bundle(o.result.bundle, o.bundle_dir, config_hash(cfg), static_cast<int>(o.result.log.size()));
  o.log_path = o.bundle_dir / "training_log.csv";
  write_text(o.log_path, training_log_csv(o.result.log, record_wall_time));
  return o;
}

FdDataOutcome cmd_gen_fd_data(FdScenario scenario, const ExperimentConfig& config, int runs, std::uint64_t seed,
                              const fs::path& models, const fs::path& out) {
  const Scenario controller = scenario == FdScenario::FourToThree ? Scenario::FourProp : Scenario::ThreeProp;
  const ControllerBundle bundle = load_bundle(bundle_dir(models, controller), controller);
  FdDataOutcome o;
  o.dataset = generate_fd_dataset(scenario, bundle, config.sim, runs, seed, config.fd_gen);
  o.path = fd_dataset_path(out, scenario);
  fs::create_directories(out);
  save_fd_dataset(o.dataset, o.path);
  return o;
}

FdTrainOutcome cmd_train_fd(FdScenario scenario, const ExperimentConfig& config, const fs::path& dataset, int epochs,
                            std::uint64_t seed, const fs::path& out) {
  const FdDataset data = load_fd_dataset(dataset);
  if (data.scenario != scenario)
    throw std::invalid_argument(dataset.string() + " holds a " + to_string(data.scenario) + " dataset, not " +
                                to_string(scenario));
  FdTrainOutcome o;
  o.result = train_fd(data, scenario, epochs, seed, config.fd_train);
  o.model_path = fd_model_path(out, scenario);
  save_fd_model(o.result.model, o.model_path);
  std::string csv = "epoch,loss,train_accuracy,heldout_accuracy\n";
  csv += "0,," + fmt(o.result.initial_train_accuracy) + "," + fmt(o.result.initial_heldout_accuracy) + "\n";
  for (const auto& e : o.result.history)
    csv += std::to_string(e.epoch) + "," + fmt(e.loss) + "," + fmt(e.train_accuracy) + "," + fmt(e.heldout_accuracy) +
           "\n";
  o.log_path = out / ("fd_" + to_string(scenario) + "_log.csv");
  write_text(o.log_path, csv);
  return o;
}

ControllerSet load_controllers(const fs::path& models) {
  ControllerSet set;
  set.four = load_bundle(bundle_dir(models, Scenario::FourProp), Scenario::FourProp);
  set.three = load_bundle(bundle_dir(models, Scenario::ThreeProp), Scenario::ThreeProp);
  const fs::path two = bundle_dir(models, Scenario::TwoPropOpposing);
  if (fs::exists(two / "manifest.json")) set.two = load_bundle(two, Scenario::TwoPropOpposing);
  return set;
}

FdModels load_fd_models(const fs::path& models) {
  FdModels fd;
  const fs::path first = fd_model_path(models, FdScenario::FourToThree);
  const fs::path second = fd_model_path(models, FdScenario::ThreeToTwo);
  if (fs::exists(first)) fd.four_to_three = load_fd_model(first);
  if (fs::exists(second)) fd.three_to_two = load_fd_model(second);
  return fd;
}

json TrackSummary::to_json() const {
  return {{"max_abs_x", max_abs_x},         {"max_abs_y", max_abs_y},   {"max_abs_z_error", max_abs_z_error},
          {"final_distance", final_distance}, {"mean_abs_wz", mean_abs_wz}, {"crashed", crashed},
          {"steps", steps}};
}

TrackOutcome run_track(const ControllerSet& controllers, const FdModels& fd, const ExperimentConfig& config,
                       std::uint64_t seed) {
  const ScenarioConfig& sc = config.track;
  sc.validate();
  Rng rng(derive_seed(seed, 0x7ac));
  const auto steps = static_cast<std::int64_t>(std::llround(sc.duration_s / kControlDt));
  const auto shift_step = static_cast<std::int64_t>(std::llround(sc.shift_time_s / kControlDt));
  std::int64_t failure_step = sc.failure_step;
  if (sc.failure_prop && failure_step < 0)
    failure_step = std::uniform_int_distribution<std::int64_t>(1, std::max<std::int64_t>(1, steps - 1))(rng);

  Supervisor sup(controllers, fd, config.sim, config.supervisor);
  FaultMask actual;
  for (int p : sc.initial_failures) {
    actual.fail(p);
    sup.note_true_failure(p, 0);
    sup.apply_detection(p);
  }
  Vec3 waypoint(0.0, 0.0, sc.target_height);
  sup.set_waypoint(waypoint);

  TrackOutcome o;
  QuadState state;  // at rest at the origin
  double wz_sum = 0.0;
  std::int64_t wz_n = 0;
  const double settle_s = std::min(5.0, 0.5 * sc.duration_s);
  for (std::int64_t k = 0; k < steps; ++k) {
    if (k == shift_step && k > 0) {
      waypoint += sc.shift;
      sup.set_waypoint(waypoint);
    }
    if (sc.failure_prop && k == failure_step) {
      actual.fail(sc.failure_prop);
      sup.note_true_failure(sc.failure_prop, k);
    }
    const std::string active = to_string(sup.active_controller().scenario);
    const TickResult tr = sup.tick(state);

    TrajectoryRow row;
    row.t_s = static_cast<double>(k) * kControlDt;
    row.position = state.position;
    row.lin_vel = state.lin_vel;
    row.ang_vel = state.ang_vel;
    row.alpha = axis_tilt_angle(state);
    for (int i = 0; i < kNumProps; ++i)
      row.rotor_speeds[static_cast<std::size_t>(i)] = actual.functional(i) ? tr.command.rotors.speeds[static_cast<std::size_t>(i)] : 0.0;
    row.active_controller = active;
    row.reward = reward(state, waypoint);
    o.log.rows.push_back(row);

    const Vec3 err = state.position - waypoint;
    if (row.t_s >= settle_s) {
      o.summary.max_abs_x = std::max(o.summary.max_abs_x, std::abs(err.x()));
      o.summary.max_abs_y = std::max(o.summary.max_abs_y, std::abs(err.y()));
      o.summary.max_abs_z_error = std::max(o.summary.max_abs_z_error, std::abs(err.z()));
    }
    if (2 * k >= steps) {
      wz_sum += std::abs(state.ang_vel.z());
      ++wz_n;
    }
    state = step(state, tr.command.rotors, tr.command.extra(), actual, config.sim.vehicle);
    if (state.position.z() <= 0.0 || out_of_box(state, waypoint, config.ppo.box_half_extent)) {
      o.summary.crashed = true;
      break;
    }
  }
  o.events = sup.events();
  o.summary.steps = static_cast<std::int64_t>(o.log.rows.size());
  o.summary.final_distance = (state.position - waypoint).norm();
  o.summary.mean_abs_wz = wz_n ? wz_sum / static_cast<double>(wz_n) : 0.0;
  return o;
}

TrackOutcome cmd_track(const ExperimentConfig& config, std::uint64_t seed, const fs::path& models,
                       const fs::path& out) {
  const ControllerSet controllers = load_controllers(models);
  const FdModels fd = load_fd_models(models);
  TrackOutcome o = run_track(controllers, fd, config, seed);
  const std::string name = config.track.name;
  write_text(out / (name + "_trajectory.csv"), to_csv(o.log));
  write_text(out / (name + "_events.jsonl"), to_json_lines(o.events));
  json cfg = to_json(config);
  json summary = o.summary.to_json();
  summary["seed"] = seed;
  summary["config_hash"] = config_hash(cfg);
  write_text(out / (name + "_summary.json"), summary.dump(2) + "\n");
  return o;
}

namespace {

bool events_respect_arity(const std::vector<SupervisorEvent>& events) {
  for (const auto& e : events)
    if (e.type == "controller_switched" && e.detail.at("arity") != e.detail.at("functional")) return false;
  return true;
}

BenchRun bench_run(const ControllerSet& controllers, const FdModels& fd, const ExperimentConfig& config, int run,
                   std::uint64_t seed, bool second_stage) {
  const BenchConfig& bc = config.bench;
  Rng rng(seed);
  BenchRun r;
  r.run = run;
  r.first_prop = std::uniform_int_distribution<int>(1, kNumProps)(rng);
  const int warm1 = fd_spec(FdScenario::FourToThree).warmup;
  r.first_failure_step = std::uniform_int_distribution<std::int64_t>(warm1 + 1, warm1 + 200)(rng);
  const int second_offset = std::uniform_int_distribution<int>(bc.second_failure_min_delay, bc.second_failure_max_delay)(rng);
  const Vec3 waypoint(0.0, 0.0, bc.altitude);
  QuadState state = sample_hover_state(rng, waypoint, 0.0, 0.0);

  Supervisor sup(controllers, fd, config.sim, config.supervisor);
  sup.set_waypoint(waypoint);
  FaultMask actual;
  const auto first_timeout = static_cast<std::int64_t>(std::llround(bc.first_stage_timeout_s / kControlDt));
  const auto second_timeout = static_cast<std::int64_t>(std::llround(bc.second_stage_timeout_s / kControlDt));
  const int warm2 = fd_spec(FdScenario::ThreeToTwo).warmup;
  const bool can_second = second_stage && fd.three_to_two && controllers.two;

  for (std::int64_t k = 0;; ++k) {
    if (k == r.first_failure_step) {
      actual.fail(r.first_prop);
      sup.note_true_failure(r.first_prop, k);
    }
    if (r.second_failure_step >= 0 && k == r.second_failure_step) {
      actual.fail(opposite_prop(r.first_prop));
      sup.note_true_failure(opposite_prop(r.first_prop), k);
    }
    const TickResult tr = sup.tick(state);
    for (const auto& e : tr.events) {
      if (e.type != "fault_detected") continue;
      if (e.detail.at("stage") == "first") {
        r.first_detection_step = e.step;
        r.first_detected_prop = e.detail.at("prop").get<int>();
        if (can_second && !sup.unrecoverable()) r.second_failure_step = e.step + warm2 + second_offset;
      } else {
        r.second_detection_step = e.step;
      }
    }
    state = step(state, tr.command.rotors, tr.command.extra(), actual, config.sim.vehicle);
    if (state.position.z() <= 0.0 || out_of_box(state, waypoint, config.ppo.box_half_extent)) {
      r.crashed = true;
      break;
    }
    if (!r.first_detection_step) {
      if (k >= r.first_failure_step + first_timeout) break;
    } else if (r.second_failure_step < 0) {
      break;
    } else if (r.second_detection_step || k >= r.second_failure_step + second_timeout) {
      break;
    }
  }
  r.events = sup.events();
  r.arity_ok = events_respect_arity(r.events);
  return r;
}

StageReport summarize_stage(const std::string& name, const std::vector<BenchRun>& runs, bool second) {
  StageReport s;
  s.stage = name;
  std::vector<double> latencies;
  for (const auto& r : runs) {
    const std::int64_t fail = second ? r.second_failure_step : r.first_failure_step;
    if (fail < 0) continue;
    ++s.runs;
    const auto& det = second ? r.second_detection_step : r.first_detection_step;
    // A detection before the failure is a false alarm and counts as a miss.
    if (!det || *det < fail) continue;
    ++s.detected;
    if (second || r.first_detected_prop == r.first_prop) ++s.correct;
    latencies.push_back(static_cast<double>(*det - fail) * kControlDt);
  }
  if (!latencies.empty())
    s.mean_latency_s = std::accumulate(latencies.begin(), latencies.end(), 0.0) / static_cast<double>(latencies.size());
  s.median_latency_s = median(latencies);
  s.miss_rate = s.runs ? 1.0 - static_cast<double>(s.detected) / s.runs : 0.0;
  return s;
}

}  // namespace

json BenchReport::to_json() const {
  json j;
  j["arity_ok"] = arity_ok;
  for (const auto& s : stages)
    j["stages"].push_back({{"stage", s.stage},
                           {"runs", s.runs},
                           {"detected", s.detected},
                           {"correct", s.correct},
                           {"mean_latency_s", s.mean_latency_s},
                           {"median_latency_s", s.median_latency_s},
                           {"miss_rate", s.miss_rate}});
  for (const auto& r : runs) {
    json row = {{"run", r.run},
                {"first_prop", r.first_prop},
                {"first_failure_step", r.first_failure_step},
                {"first_detection_step", r.first_detection_step ? json(*r.first_detection_step) : json()},
                {"first_detected_prop", r.first_detected_prop},
                {"second_failure_step", r.second_failure_step},
                {"second_detection_step", r.second_detection_step ? json(*r.second_detection_step) : json()},
                {"crashed", r.crashed}};
    j["runs"].push_back(row);
  }
  return j;
}

BenchReport run_detect_bench(const ControllerSet& controllers, const FdModels& fd, const ExperimentConfig& config,
                             int n_runs, std::uint64_t seed, bool second_stage) {
  if (!fd.four_to_three) throw std::invalid_argument("detect-bench needs a 4to3 fault-detection model");
  if (n_runs < 1) throw std::invalid_argument("detect-bench: runs must be >= 1");
  BenchReport report;
  report.runs.resize(static_cast<std::size_t>(n_runs));
  parallel_for(report.runs.size(), config.bench.workers, [&](std::size_t i) {
    report.runs[i] = bench_run(controllers, fd, config, static_cast<int>(i), derive_seed(seed, i), second_stage);
  });
  report.stages.push_back(summarize_stage("first", report.runs, false));
  report.stages.push_back(summarize_stage("second", report.runs, true));
  for (const auto& r : report.runs) report.arity_ok = report.arity_ok && r.arity_ok;
  return report;
}

BenchReport cmd_detect_bench(const ExperimentConfig& config, int n_runs, std::uint64_t seed, const fs::path& models,
                             const fs::path& out) {
  const BenchReport report = run_detect_bench(load_controllers(models), load_fd_models(models), config, n_runs, seed);
  json j = report.to_json();
  j["seed"] = seed;
  j["config_hash"] = config_hash(to_json(config));
  write_text(out / "detect_bench.json", j.dump(2) + "\n");
  std::string csv = "stage,runs,detected,correct,mean_latency_s,median_latency_s,miss_rate\n";
  for (const auto& s : report.stages)
    csv += s.stage + "," + std::to_string(s.runs) + "," + std::to_string(s.detected) + "," + std::to_string(s.correct) +
           "," + fmt(s.mean_latency_s) + "," + fmt(s.median_latency_s) + "," + fmt(s.miss_rate) + "\n";
  write_text(out / "detect_bench.csv", csv);
  std::string events;
  for (const auto& r : report.runs)
    for (const auto& e : r.events) {
      json line = to_json(e);
      line["run"] = r.run;
      events += line.dump() + "\n";
    }
  write_text(out / "detect_bench_events.jsonl", events);
  return report;
}

FailureMode parse_failure_mode(const std::string& name) {
  if (name == "isolated") return FailureMode::Isolated;
  if (name == "midflight") return FailureMode::Midflight;
  throw std::invalid_argument("unknown failure-rate mode '" + name + "' (expected isolated or midflight)");
}

namespace {

// Isolated: the controller flies from a uniformly random state with its own
// failure pattern known in advance. Returns true on a ground hit.
bool isolated_run(const ControllerSet& controllers, const ExperimentConfig& config, Scenario scenario,
                  std::uint64_t seed) {
  const FailureRateConfig& fc = config.failure_rate;
  Rng rng(seed);
  const FaultMask mask = training_mask(scenario, rng);
  const Vec3 waypoint(0.0, 0.0, fc.isolated_target);
  QuadState state = sample_initial_state(rng, InitMode::Uniform);
  state.position += waypoint;
  SupervisorConfig sc = config.supervisor;
  sc.fault_detection = false;
  Supervisor sup(controllers, {}, config.sim, sc);
  for (int p : mask.failed_props()) sup.apply_detection(p);
  sup.set_waypoint(waypoint);
  const auto steps = static_cast<std::int64_t>(std::llround(fc.isolated_duration_s / kControlDt));
  for (std::int64_t k = 0; k < steps; ++k) {
    const TickResult tr = sup.tick(state);
    state = step(state, tr.command.rotors, tr.command.extra(), mask, config.sim.vehicle);
    if (state.position.z() <= 0.0) return true;
    if (out_of_box(state, waypoint, config.ppo.box_half_extent)) return false;
  }
  return false;
}

// Mid-flight: hover at `height`, lose a propeller (stage 1) or the opposing
// second propeller (stage 2) and rely on detection to switch controllers.
bool midflight_run(const ControllerSet& controllers, const FdModels& fd, const ExperimentConfig& config, int stage,
                   double height, std::uint64_t seed) {
  const FailureRateConfig& fc = config.failure_rate;
  Rng rng(seed);
  const Vec3 waypoint(0.0, 0.0, height);
  QuadState state = sample_hover_state(rng, waypoint, 0.0, 0.0);
  Supervisor sup(controllers, fd, config.sim, config.supervisor);
  FaultMask actual;
  const int first = std::uniform_int_distribution<int>(1, kNumProps)(rng);
  int inject_prop = first;
  int warm = fd_spec(FdScenario::FourToThree).warmup;
  if (stage == 2) {
    actual.fail(first);
    sup.note_true_failure(first, 0);
    sup.apply_detection(first);
    inject_prop = opposite_prop(first);
    warm = fd_spec(FdScenario::ThreeToTwo).warmup;
  }
  sup.set_waypoint(waypoint);
  const std::int64_t inject = std::uniform_int_distribution<std::int64_t>(warm + 1, warm + 100)(rng);
  const auto steps = static_cast<std::int64_t>(std::llround(fc.midflight_duration_s / kControlDt));
  const auto settle = static_cast<std::int64_t>(std::llround(fc.stabilization_time_s / kControlDt));
  std::int64_t in_band = 0;
  for (std::int64_t k = 0; k < std::max(steps, inject + 1); ++k) {
    if (k == inject) {
      actual.fail(inject_prop);
      sup.note_true_failure(inject_prop, k);
    }
    const TickResult tr = sup.tick(state);
    state = step(state, tr.command.rotors, tr.command.extra(), actual, config.sim.vehicle);
    if (state.position.z() <= 0.0) return true;
    if (out_of_box(state, waypoint, config.ppo.box_half_extent)) return false;
    const bool switched = sup.stage() == stage;
    if (k > inject && switched && std::abs(state.position.z() - height) < fc.stabilization_band) {
      if (++in_band >= settle) return false;
    } else {
      in_band = 0;
    }
  }
  return false;
}

}  // namespace

std::vector<FailureRateRow> run_failure_rate(const ControllerSet& controllers, const FdModels& fd,
                                             const ExperimentConfig& config, FailureMode mode, int n_runs,
                                             std::uint64_t seed) {
  if (n_runs < 1) throw std::invalid_argument("failure-rate: runs must be >= 1");
  std::vector<FailureRateRow> rows;
  if (mode == FailureMode::Isolated) {
    std::vector<Scenario> scenarios{Scenario::FourProp, Scenario::ThreeProp};
    if (controllers.two) scenarios.push_back(Scenario::TwoPropOpposing);
    for (std::size_t s = 0; s < scenarios.size(); ++s) {
      std::vector<char> failed(static_cast<std::size_t>(n_runs));
      parallel_for(failed.size(), config.failure_rate.workers, [&](std::size_t i) {
        failed[i] = isolated_run(controllers, config, scenarios[s], derive_seed(seed, s, i));
      });
      rows.push_back({to_string(scenarios[s]), config.failure_rate.isolated_target, n_runs,
                      static_cast<int>(std::count(failed.begin(), failed.end(), 1))});
    }
    return rows;
  }
  if (!fd.four_to_three) throw std::invalid_argument("midflight failure rate needs a 4to3 fault-detection model");
  const bool second = fd.three_to_two && controllers.two;
  for (int stage = 1; stage <= (second ? 2 : 1); ++stage) {
    for (std::size_t h = 0; h < config.failure_rate.heights.size(); ++h) {
      const double height = config.failure_rate.heights[h];
      std::vector<char> failed(static_cast<std::size_t>(n_runs));
      parallel_for(failed.size(), config.failure_rate.workers, [&](std::size_t i) {
        failed[i] = midflight_run(controllers, fd, config, stage, height,
                                  derive_seed(seed, static_cast<std::uint64_t>(stage) * 1000 + h, i));
      });
      rows.push_back({stage == 1 ? "first" : "second", height, n_runs,
                      static_cast<int>(std::count(failed.begin(), failed.end(), 1))});
    }
  }
  return rows;
}

std::vector<FailureRateRow> cmd_failure_rate(const ExperimentConfig& config, FailureMode mode, int n_runs,
                                             std::uint64_t seed, const fs::path& models, const fs::path& out) {
  const auto rows = run_failure_rate(load_controllers(models), load_fd_models(models), config, mode, n_runs, seed);
  const std::string name = mode == FailureMode::Isolated ? "isolated" : "midflight";
  std::string csv = "# seed=" + std::to_string(seed) + " config_hash=" + config_hash(to_json(config)) + "\n";
  csv += "controller,height_m,runs,failures,failure_rate\n";
  for (const auto& r : rows)
    csv += r.controller + "," + fmt(r.height) + "," + std::to_string(r.runs) + "," + std::to_string(r.failures) + "," +
           fmt(r.rate()) + "\n";
  write_text(out / ("failure_rate_" + name + ".csv"), csv);
  return rows;
}

}  // namespace fqc
