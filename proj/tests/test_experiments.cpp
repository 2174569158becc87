#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "fqc/experiments.hpp"
#include "generators.hpp"

using namespace fqc;
using nlohmann::json;

namespace {

fs::path fresh_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("fqc_test_exp_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

ExperimentConfig tiny() {
  ExperimentConfig c;
  c.ppo.n_traj = 2;
  c.ppo.traj_len = 30;
  c.ppo.epochs_max = 2;
  c.ppo.workers = 2;
  c.track.duration_s = 3.0;
  c.track.shift_time_s = 1.0;
  c.failure_rate.isolated_duration_s = 1.0;
  c.failure_rate.midflight_duration_s = 1.0;
  c.failure_rate.heights = {1.0};
  return c;
}

}  // namespace

TEST_CASE("config JSON round trip") {
  ExperimentConfig c;
  c.ppo.n_traj = 7;
  c.ppo.policy_optimizer = nn::OptimizerMode::SgdMomentum;
  c.sim.vehicle.mass = 0.5;
  c.track.initial_failures = {2};
  c.track.shift = Vec3(1, 2, 3);
  c.failure_rate.heights = {0.25, 2.0};
  c.supervisor.offset_correction = false;
  const json j = to_json(c);
  const ExperimentConfig back = config_from_json(j);
  CHECK(to_json(back) == j);
  CHECK(back.ppo.n_traj == 7);
  CHECK(back.sim.vehicle.mass == 0.5);
  CHECK(back.track.shift == Vec3(1, 2, 3));
  CHECK(config_hash(to_json(back)) == config_hash(j));
  CHECK(config_hash(j).size() == 16);
  CHECK(config_hash(j) != config_hash(to_json(ExperimentConfig{})));
}

TEST_CASE("partial configs keep defaults") {
  const ExperimentConfig c = config_from_json(json::parse(R"({"ppo": {"n_traj": 3}})"));
  CHECK(c.ppo.n_traj == 3);
  CHECK(c.ppo.traj_len == PpoConfig{}.traj_len);
  CHECK(config_from_json(json::object()).supervisor.persistence == 10);
}

TEST_CASE("config errors") {
  CHECK_THROWS_AS(config_from_json(json::parse(R"({"ppo": {"n_trajs": 3}})")), std::invalid_argument);
  CHECK_THROWS_AS(config_from_json(json::parse(R"({"rl": {}})")), std::invalid_argument);
  CHECK_THROWS_AS(config_from_json(json::parse(R"({"ppo": {"n_traj": "x"}})")), std::invalid_argument);
  CHECK_THROWS_AS(config_from_json(json::parse(R"({"vehicle": {"mass": -1}})")), std::invalid_argument);
  CHECK_THROWS_AS(config_from_json(json::parse(R"({"ppo": {"policy_optimizer": "rmsprop"}})")),
                  std::invalid_argument);
  CHECK_THROWS_AS(config_from_json(json::parse(R"({"track": {"failure_prop": 5}})")), std::invalid_argument);

  const fs::path dir = fresh_dir("cfg");
  write_text(dir / "bad.json", "{ not json");
  CHECK_THROWS_AS(load_config(dir / "bad.json"), std::invalid_argument);
  CHECK_THROWS_AS(load_config(dir / "missing.json"), std::runtime_error);
}

TEST_CASE("vehicle JSON") {
  QuadParams p;
  p.arm_length = 0.2;
  p.inertia_diag = Vec3(1e-2, 2e-2, 3e-2);
  const QuadParams back = vehicle_from_json(to_json(p));
  CHECK(back.arm_length == 0.2);
  CHECK(back.inertia_diag == p.inertia_diag);
  CHECK(back.thrust_coeff == p.thrust_coeff);
  CHECK_THROWS_AS(vehicle_from_json(json::parse(R"({"inertia_diag": [1, 2]})")), std::invalid_argument);
  CHECK_THROWS_AS(vehicle_from_json(json::parse(R"({"arm": 1})")), std::invalid_argument);
}

TEST_CASE("trajectory CSV round trip") {
  Rng rng(1);
  TrajectoryLog log;
  for (int i = 0; i < 50; ++i) {
    TrajectoryRow r;
    r.t_s = i * kControlDt;
    r.position = gen::vec3(rng, 10.0);
    r.lin_vel = gen::vec3(rng, 1e-7);
    r.ang_vel = gen::vec3(rng, 1e6);
    r.alpha = gen::uniform(rng, 0.0, 3.14);
    for (double& w : r.rotor_speeds) w = gen::uniform(rng, 0.0, 800.0);
    r.active_controller = i < 25 ? "4prop" : "3prop";
    r.reward = gen::uniform(rng, 0.0, 1.0);
    log.rows.push_back(r);
  }
  const std::string csv = to_csv(log);
  CHECK(csv.substr(0, csv.find('\n')) == trajectory_csv_header());
  CHECK(trajectory_from_csv(csv) == log);
  CHECK_THROWS_AS(trajectory_from_csv("t,x\n"), std::runtime_error);
  CHECK_THROWS_AS(trajectory_from_csv(trajectory_csv_header() + "\n1,2,3\n"), std::runtime_error);
}

TEST_CASE("training log CSV leaves wall time out unless asked") {
  std::vector<EpochLog> log{{1, 0.5, 0.25, -0.1, 12.5}, {2, 0.4, 0.2, -0.2, 30.0}};
  const std::string csv = training_log_csv(log, false);
  CHECK(csv == "epoch,mean_cost,value_loss,surrogate_loss,wall_time_s\n"
               "1,0.5,0.25,-0.10000000000000001,0\n"
               "2,0.40000000000000002,0.20000000000000001,-0.20000000000000001,0\n");
  CHECK(training_log_csv(log, true).find(",12.5\n") != std::string::npos);
}

TEST_CASE("bundle save/load round trip and mismatch checks") {
  const fs::path dir = fresh_dir("bundle");
  Rng rng(2);
  const ControllerBundle b = make_bundle(Scenario::ThreeProp, rng);
  save_bundle(b, bundle_dir(dir, b.scenario), "abc", 3);
  const ControllerBundle back = load_bundle(bundle_dir(dir, Scenario::ThreeProp), Scenario::ThreeProp);
  CHECK(back.policy.tensors == b.policy.tensors);
  CHECK(back.value.tensors == b.value.tensors);
  const json manifest = json::parse(read_text(bundle_dir(dir, Scenario::ThreeProp) / "manifest.json"));
  CHECK(manifest["config_hash"] == "abc");
  CHECK(manifest["epochs"] == 3);
  CHECK_THROWS_AS(load_bundle(bundle_dir(dir, Scenario::ThreeProp), Scenario::FourProp), std::runtime_error);
  CHECK_THROWS_AS(load_controllers(dir), std::runtime_error);
}

TEST_CASE("command pipeline is deterministic") {
  const ExperimentConfig c = tiny();
  const fs::path a = fresh_dir("pipe_a");
  const fs::path b = fresh_dir("pipe_b");
  for (const fs::path& out : {a, b}) {
    for (Scenario s : {Scenario::FourProp, Scenario::ThreeProp, Scenario::TwoPropOpposing}) cmd_train(s, c, 5, out);
    const auto data = cmd_gen_fd_data(FdScenario::FourToThree, c, 5, 5, out, out);
    CHECK(fs::exists(data.path));
    cmd_train_fd(FdScenario::FourToThree, c, data.path, 1, 5, out);
    cmd_track(c, 5, out, out);
    cmd_detect_bench(c, 2, 5, out, out);
    cmd_failure_rate(c, FailureMode::Isolated, 2, 5, out, out);
    cmd_failure_rate(c, FailureMode::Midflight, 2, 5, out, out);
  }
  std::size_t files = 0;
  for (const auto& e : fs::recursive_directory_iterator(a)) {
    if (!e.is_regular_file()) continue;
    ++files;
    const fs::path rel = fs::relative(e.path(), a);
    CAPTURE(rel.string());
    REQUIRE(fs::exists(b / rel));
    CHECK(read_text(e.path()) == read_text(b / rel));
  }
  CHECK(files >= 15);

  const TrajectoryLog log = trajectory_from_csv(read_text(a / "track_trajectory.csv"));
  CHECK(log.rows.size() == 300);
  const json summary = json::parse(read_text(a / "track_summary.json"));
  CHECK(summary["seed"] == 5);
  CHECK(summary["config_hash"] == config_hash(to_json(c)));
  const json bench = json::parse(read_text(a / "detect_bench.json"));
  CHECK(bench["stages"].size() == 2);
}

TEST_CASE("track run reports the waypoint shift and crash flag") {
  const fs::path dir = fresh_dir("track");
  ExperimentConfig c = tiny();
  for (Scenario s : {Scenario::FourProp, Scenario::ThreeProp}) cmd_train(s, c, 1, dir);
  const ControllerSet ctl = load_controllers(dir);
  CHECK_FALSE(ctl.two.has_value());
  c.track.initial_failures = {3};
  const TrackOutcome o = run_track(ctl, load_fd_models(dir), c, 1);
  REQUIRE_FALSE(o.log.rows.empty());
  CHECK(o.log.rows.front().active_controller == "3prop");
  CHECK(o.log.rows.front().rotor_speeds[2] == 0.0);
  int shifts = 0;
  for (const auto& e : o.events) shifts += e.type == "waypoint_set";
  CHECK(shifts == (o.summary.crashed && o.summary.steps <= 100 ? 1 : 2));

  c.track.initial_failures = {1, 2};
  CHECK_THROWS_AS(run_track(ctl, {}, c, 1), std::invalid_argument);
}

TEST_CASE("failure mode names") {
  CHECK(parse_failure_mode("isolated") == FailureMode::Isolated);
  CHECK(parse_failure_mode("midflight") == FailureMode::Midflight);
  CHECK_THROWS_AS(parse_failure_mode("sometimes"), std::invalid_argument);
}
