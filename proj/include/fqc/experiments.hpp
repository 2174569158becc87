#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "fqc/fault_detect.hpp"
#include "fqc/ppo.hpp"
#include "fqc/supervisor.hpp"

namespace fqc {

namespace fs = std::filesystem;

// Settings for the waypoint-tracking run.
struct ScenarioConfig {
  std::string name = "track";
  double target_height = 5.0;
  double shift_time_s = 10.0;
  Vec3 shift{0.0, 1.0, 0.0};
  // Propellers already failed (and known to the supervisor) at t = 0.
  std::vector<int> initial_failures;
  // Mid-flight failure: 0 = none; step < 0 picks a random step.
  int failure_prop = 0;
  std::int64_t failure_step = -1;
  double duration_s = 20.0;

  void validate() const;
};

struct BenchConfig {
  double altitude = 5.0;
  // Seconds after which a run without detection counts as a miss.
  double first_stage_timeout_s = 8.0;
  double second_stage_timeout_s = 10.0;
  // Second failure is injected this many steps after the first detection
  // plus the 3->2 warm-up.
  int second_failure_min_delay = 0;
  int second_failure_max_delay = 200;
  int workers = 0;
};

struct FailureRateConfig {
  double isolated_target = 5.0;
  double isolated_duration_s = 10.0;
  std::vector<double> heights{0.5, 0.75, 1.0, 1.25, 1.5};
  double midflight_duration_s = 10.0;
  double stabilization_band = 0.25;
  double stabilization_time_s = 2.0;
  int workers = 0;
};

struct ExperimentConfig {
  SimConfig sim;
  PpoConfig ppo;
  FdGenConfig fd_gen;
  FdTrainConfig fd_train;
  SupervisorConfig supervisor;
  ScenarioConfig track;
  BenchConfig bench;
  FailureRateConfig failure_rate;
};

nlohmann::json to_json(const ExperimentConfig& config);
// Missing keys keep their defaults; unknown keys are rejected.
ExperimentConfig config_from_json(const nlohmann::json& j);
ExperimentConfig load_config(const fs::path& path);
nlohmann::json to_json(const QuadParams& params);
QuadParams vehicle_from_json(const nlohmann::json& j);
// FNV-1a 64 of the canonical JSON dump, as 16 hex digits.
std::string config_hash(const nlohmann::json& j);

// Bundles live in <dir>/<scenario>/{policy.fqnn, value.fqnn, manifest.json}.
void save_bundle(const ControllerBundle& bundle, const fs::path& dir, const std::string& hash, int epochs);
ControllerBundle load_bundle(const fs::path& dir, Scenario scenario);
fs::path bundle_dir(const fs::path& root, Scenario scenario);
fs::path fd_model_path(const fs::path& root, FdScenario scenario);
fs::path fd_dataset_path(const fs::path& root, FdScenario scenario);

struct TrajectoryRow {
  double t_s = 0.0;
  Vec3 position = Vec3::Zero();
  Vec3 lin_vel = Vec3::Zero();
  Vec3 ang_vel = Vec3::Zero();
  double alpha = 0.0;
  std::array<double, kNumProps> rotor_speeds{};
  std::string active_controller;
  double reward = 0.0;

  bool operator==(const TrajectoryRow&) const = default;
};

struct TrajectoryLog {
  std::vector<TrajectoryRow> rows;
  bool operator==(const TrajectoryLog&) const = default;
};

std::string trajectory_csv_header();
std::string to_csv(const TrajectoryLog& log);
TrajectoryLog trajectory_from_csv(const std::string& text);
void write_text(const fs::path& path, const std::string& text);
std::string read_text(const fs::path& path);

std::string training_log_csv(const std::vector<EpochLog>& log, bool include_wall_time);

struct TrainOutcome {
  TrainingResult result;
  fs::path bundle_dir;
  fs::path log_path;
};

TrainOutcome cmd_train(Scenario scenario, const ExperimentConfig& config, std::uint64_t seed,
                       const fs::path& out, bool record_wall_time = false);

struct FdDataOutcome {
  FdDataset dataset;
  fs::path path;
};

FdDataOutcome cmd_gen_fd_data(FdScenario scenario, const ExperimentConfig& config, int runs,
                              std::uint64_t seed, const fs::path& models, const fs::path& out);

struct FdTrainOutcome {
  FdTrainingResult result;
  fs::path model_path;
  fs::path log_path;
};

FdTrainOutcome cmd_train_fd(FdScenario scenario, const ExperimentConfig& config, const fs::path& dataset,
                            int epochs, std::uint64_t seed, const fs::path& out);

struct TrackSummary {
  double max_abs_x = 0.0;
  double max_abs_y = 0.0;
  double max_abs_z_error = 0.0;
  double final_distance = 0.0;
  double mean_abs_wz = 0.0;  // over the second half of the run
  bool crashed = false;
  std::int64_t steps = 0;
  nlohmann::json to_json() const;
};

struct TrackOutcome {
  TrajectoryLog log;
  std::vector<SupervisorEvent> events;
  TrackSummary summary;
};

// Loads whatever FD models are present under `models`; detection is off
// when the 4->3 model is missing.
ControllerSet load_controllers(const fs::path& models);
FdModels load_fd_models(const fs::path& models);

TrackOutcome run_track(const ControllerSet& controllers, const FdModels& fd, const ExperimentConfig& config,
                       std::uint64_t seed);
TrackOutcome cmd_track(const ExperimentConfig& config, std::uint64_t seed, const fs::path& models,
                       const fs::path& out);

struct BenchRun {
  int run = 0;
  int first_prop = 0;
  std::int64_t first_failure_step = 0;
  std::optional<std::int64_t> first_detection_step;
  int first_detected_prop = 0;
  std::int64_t second_failure_step = -1;
  std::optional<std::int64_t> second_detection_step;
  bool crashed = false;
  bool arity_ok = true;
  std::vector<SupervisorEvent> events;
};

struct StageReport {
  std::string stage;
  int runs = 0;
  int detected = 0;
  int correct = 0;
  double mean_latency_s = 0.0;
  double median_latency_s = 0.0;
  double miss_rate = 0.0;
};

struct BenchReport {
  std::vector<BenchRun> runs;
  std::vector<StageReport> stages;  // first, second
  bool arity_ok = true;
  nlohmann::json to_json() const;
};

BenchReport run_detect_bench(const ControllerSet& controllers, const FdModels& fd, const ExperimentConfig& config,
                             int n_runs, std::uint64_t seed, bool second_stage = true);
BenchReport cmd_detect_bench(const ExperimentConfig& config, int n_runs, std::uint64_t seed,
                             const fs::path& models, const fs::path& out);

struct FailureRateRow {
  std::string controller;  // scenario or stage name
  double height = 0.0;
  int runs = 0;
  int failures = 0;
  double rate() const { return runs ? static_cast<double>(failures) / runs : 0.0; }
};

enum class FailureMode { Isolated, Midflight };
FailureMode parse_failure_mode(const std::string& name);

std::vector<FailureRateRow> run_failure_rate(const ControllerSet& controllers, const FdModels& fd,
                                             const ExperimentConfig& config, FailureMode mode, int n_runs,
                                             std::uint64_t seed);
std::vector<FailureRateRow> cmd_failure_rate(const ExperimentConfig& config, FailureMode mode, int n_runs,
                                             std::uint64_t seed, const fs::path& models, const fs::path& out);

}  // namespace fqc
