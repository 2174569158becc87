// fqc: command-line driver for training, fault detection and benchmarks.
#include <iostream>

#include <CLI11.hpp>

#include "fqc/experiments.hpp"

using namespace fqc;

int main(int argc, char** argv) {
  CLI::App app{"Fault-tolerant quadcopter control experiments"};
  app.require_subcommand(1);
  app.fallthrough();

  std::string config_path;
  std::uint64_t seed = 1;
  std::string out = "out";
  std::string models;
  app.add_option("--config", config_path, "JSON configuration file")->check(CLI::ExistingFile);
  app.add_option("--seed", seed, "Random seed");
  app.add_option("--out", out, "Output directory");
  app.add_option("--models", models, "Directory holding trained controllers and FD models (default: --out)");

  std::string scenario;
  int epochs = -1;
  int runs = 50;
  bool wall_time = false;
  std::string dataset;
  std::string mode = "isolated";

  auto* train = app.add_subcommand("train", "Train an RL controller");
  train->add_option("--scenario", scenario, "4prop, 3prop or 2prop-opposing")->required();
  train->add_option("--epochs", epochs, "Maximum training epochs (default: ppo.epochs_max)");
  train->add_flag("--wall-time", wall_time, "Record wall-clock time in the training log");

  auto* gen = app.add_subcommand("gen-fd-data", "Generate a fault-detection dataset");
  gen->add_option("--scenario", scenario, "4to3 or 3to2")->required();
  gen->add_option("--runs", runs, "Number of simulated runs");

  auto* train_fd_cmd = app.add_subcommand("train-fd", "Train a fault-detection LSTM");
  train_fd_cmd->add_option("--scenario", scenario, "4to3 or 3to2")->required();
  train_fd_cmd->add_option("--epochs", epochs, "Training epochs (default 20)");
  train_fd_cmd->add_option("--data", dataset, "Dataset file (default: <out>/fd_<scenario>.fqfd)");

  auto* track = app.add_subcommand("track", "Fly the waypoint-tracking scenario under the supervisor");
  std::string track_name;
  int failure_prop = -1;
  std::int64_t failure_step = -2;
  double duration = -1.0;
  std::vector<int> initial_failures;
  track->add_option("--name", track_name, "Scenario name used for output files");
  track->add_option("--failure-prop", failure_prop, "Propeller that fails mid-flight (0 = none)");
  track->add_option("--failure-step", failure_step, "Step of the mid-flight failure (-1 = random)");
  track->add_option("--initial-failures", initial_failures, "Propellers failed from the start");
  track->add_option("--duration", duration, "Duration in seconds");

  auto* bench = app.add_subcommand("detect-bench", "Measure fault-detection latency");
  bench->add_option("--runs", runs, "Number of runs");

  auto* rate = app.add_subcommand("failure-rate", "Count crashes over many runs");
  rate->add_option("--mode", mode, "isolated or midflight");
  rate->add_option("--runs", runs, "Runs per row");
  std::vector<double> heights;
  rate->add_option("--heights", heights, "Target heights for midflight mode");

  CLI11_PARSE(app, argc, argv);

  try {
    ExperimentConfig config = config_path.empty() ? ExperimentConfig{} : load_config(config_path);
    const fs::path out_dir = out;
    const fs::path model_dir = models.empty() ? out_dir : fs::path(models);

    if (train->parsed()) {
      if (epochs > 0) config.ppo.epochs_max = epochs;
      config.ppo.validate();
      const Scenario s = parse_scenario(scenario);
      const TrainOutcome o = cmd_train(s, config, seed, out_dir, wall_time);
      const auto& log = o.result.log;
      std::cout << "trained " << to_string(s) << " for " << log.size() << " epochs; mean cost "
                << log.front().mean_cost << " -> " << log.back().mean_cost << "\n"
                << "bundle: " << o.bundle_dir.string() << "\nlog: " << o.log_path.string() << "\n";
    } else if (gen->parsed()) {
      const FdDataOutcome o = cmd_gen_fd_data(parse_fd_scenario(scenario), config, runs, seed, model_dir, out_dir);
      std::cout << "wrote " << o.dataset.samples.size() << " windows (" << o.dataset.classes << " classes:";
      for (auto c : o.dataset.class_counts()) std::cout << " " << c;
      std::cout << ") to " << o.path.string() << "\n";
      if (o.dataset.samples.empty())
        std::cerr << "warning: no windows harvested; every run left the box before its window filled\n";
    } else if (train_fd_cmd->parsed()) {
      const FdScenario s = parse_fd_scenario(scenario);
      const fs::path data = dataset.empty() ? fd_dataset_path(out_dir, s) : fs::path(dataset);
      const FdTrainOutcome o = cmd_train_fd(s, config, data, epochs > 0 ? epochs : 20, seed, out_dir);
      std::cout << "final train accuracy " << o.result.final_train_accuracy() << ", held-out accuracy "
                << o.result.final_heldout_accuracy() << "\nmodel: " << o.model_path.string() << "\n";
    } else if (track->parsed()) {
      if (!track_name.empty()) config.track.name = track_name;
      if (failure_prop >= 0) config.track.failure_prop = failure_prop;
      if (failure_step >= -1) config.track.failure_step = failure_step;
      if (!initial_failures.empty()) config.track.initial_failures = initial_failures;
      if (duration > 0) config.track.duration_s = duration;
      const TrackOutcome o = cmd_track(config, seed, model_dir, out_dir);
      std::cout << o.summary.to_json().dump(2) << "\n";
    } else if (bench->parsed()) {
      const BenchReport r = cmd_detect_bench(config, runs, seed, model_dir, out_dir);
      for (const auto& s : r.stages)
        std::cout << s.stage << ": runs " << s.runs << ", detected " << s.detected << ", correct " << s.correct
                  << ", mean " << s.mean_latency_s << " s, median " << s.median_latency_s << " s, miss rate "
                  << s.miss_rate << "\n";
    } else if (rate->parsed()) {
      if (!heights.empty()) config.failure_rate.heights = heights;
      const auto rows = cmd_failure_rate(config, parse_failure_mode(mode), runs, seed, model_dir, out_dir);
      for (const auto& r : rows)
        std::cout << r.controller << " height " << r.height << ": " << r.failures << "/" << r.runs << "\n";
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
