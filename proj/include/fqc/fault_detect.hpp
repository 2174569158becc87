#pragma once

#include <cstdint>
#include <deque>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "fqc/nn.hpp"
#include "fqc/ppo.hpp"
#include "fqc/sim.hpp"

namespace fqc {

// 4to3: healthy quadcopter loses one propeller (classes none, prop1..prop4).
// 3to2: three-propeller quadcopter loses the propeller opposite the first
// failure (classes none, opposing-failed).
enum class FdScenario { FourToThree, ThreeToTwo };

std::string to_string(FdScenario s);
FdScenario parse_fd_scenario(const std::string& name);

struct FdSpec {
  int window = 0;
  int warmup = 0;
  int classes = 0;
  int hidden1 = 0;
  int hidden2 = 0;
  nn::OptimizerMode optimizer = nn::OptimizerMode::Sgd;
  double learning_rate = 1e-4;
};

// Architecture and schedule fixed by the scenario tag:
// 4to3 -> T=100, warm-up 150, 96/64/5, SGD momentum; 3to2 -> T=200, warm-up 250, 96/32/2, Adam.
FdSpec fd_spec(FdScenario s);

class WindowNotReady : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Ring buffer of the most recent flattened states. Classification is legal
// once the buffer is full and more than `warmup` states have been pushed.
class StateWindow {
 public:
  StateWindow(int capacity, int warmup);

  void push(const StateVec& state);
  void clear();

  bool full() const { return static_cast<int>(buffer_.size()) == capacity_; }
  bool ready() const { return full() && pushed_ > warmup_; }
  int capacity() const { return capacity_; }
  int warmup() const { return warmup_; }
  // 1-based index of the most recently pushed state.
  std::int64_t step() const { return pushed_; }
  // Oldest first.
  std::vector<StateVec> contents() const { return {buffer_.begin(), buffer_.end()}; }

 private:
  int capacity_;
  int warmup_;
  std::int64_t pushed_ = 0;
  std::deque<StateVec> buffer_;
};

Eigen::VectorXd one_hot(int class_index, int classes);

struct FdSample {
  std::vector<StateVec> window;  // oldest first
  int label = 0;
  std::int32_t run = 0;  // originating simulation, used for the held-out split
  // Construction metadata: last step covered by the window and the run's
  // (possibly sham) injection step. Failure windows start at or after it.
  std::int32_t end_step = 0;
  std::int32_t injection_step = 0;
};

struct FdDataset {
  FdScenario scenario = FdScenario::FourToThree;
  int classes = 0;
  int window = 0;
  std::vector<FdSample> samples;

  std::vector<std::size_t> class_counts() const;
};

struct FdGenConfig {
  int run_steps = 0;            // simulated steps per run; 0 = warm-up + 3 windows
  int harvest_stride = 5;       // keep one window every `stride` steps
  double altitude = 5.0;        // waypoint height
  double init_position_spread = 0.5;
  double init_tilt = 0.1;
  // A run stops once any waypoint-frame coordinate exceeds this (m).
  double max_excursion = 25.0;
  int workers = 0;
};

// Level-ish start at rest near the waypoint: position uniform within
// +-position_spread per axis, roll and pitch ~ N(0, tilt_std).
QuadState sample_hover_state(Rng& rng, const Vec3& waypoint, double position_spread, double tilt_std);

// Flies n_runs simulations under `controller`, injects a stratified failure
// (or none) at a uniformly drawn step after warm-up, and harvests labelled
// windows. Windows that straddle the injection step are discarded. Healthy
// windows of a failing run are capped at the number of its failure windows.
FdDataset generate_fd_dataset(FdScenario scenario, const ControllerBundle& controller,
                              const SimConfig& sim, int n_runs, std::uint64_t seed,
                              const FdGenConfig& config = {});

// "FQFD" binary: u32 version, u32 scenario, u32 classes, u32 window, u64 samples,
// then per sample window*18 f64 values, u32 label, u32 run, i32 end step,
// i32 injection step.
void save_fd_dataset(const FdDataset& data, const std::filesystem::path& path);
FdDataset load_fd_dataset(const std::filesystem::path& path);

struct FdModel {
  FdScenario scenario = FdScenario::FourToThree;
  nn::LstmParams params;

  int window() const { return params.window; }
  int warmup() const { return fd_spec(scenario).warmup; }
  int classes() const { return params.classes; }
  StateWindow make_window() const { return {window(), warmup()}; }
};

FdModel make_fd_model(FdScenario scenario, Rng& rng);

struct FdEpoch {
  int epoch = 0;
  double loss = 0.0;
  double train_accuracy = 0.0;
  double heldout_accuracy = 0.0;
};

struct FdTrainConfig {
  int minibatch = 64;
  double heldout_fraction = 0.2;
  // Desk-scale rates. The fd_spec rate of 1e-4 needs far more optimizer steps
  // than a few thousand windows provide; <= 0 falls back to it.
  double learning_rate_4to3 = 1e-2;
  double learning_rate_3to2 = 1e-3;
  double learning_rate(FdScenario s) const;
};

struct FdSplit {
  std::vector<std::size_t> train;
  std::vector<std::size_t> heldout;
};

struct FdTrainingResult {
  FdModel model;
  FdSplit split;
  std::vector<FdEpoch> history;
  double initial_train_accuracy = 0.0;
  double initial_heldout_accuracy = 0.0;
  double final_train_accuracy() const;
  double final_heldout_accuracy() const;
};

// Runs in `dataset` are split 80/20 by run index before training.
FdTrainingResult train_fd(const FdDataset& dataset, FdScenario tag, int epochs, std::uint64_t seed,
                          const FdTrainConfig& config = {});

// Fraction of the selected samples whose argmax matches the label.
double fd_accuracy(const FdModel& model, const FdDataset& data, const std::vector<std::size_t>& indices);

FdSplit split_by_run(const FdDataset& data, double heldout_fraction, std::uint64_t seed);

// Class probabilities for the current window. Throws WindowNotReady before
// the window is full and the warm-up has elapsed.
Eigen::VectorXd fd_classify(const FdModel& model, const StateWindow& window);

struct FaultEvent {
  int fault_class = 0;
  std::int64_t detection_step = 0;
};

// Persistence filter: fires once argmax(Q) has been the same non-"none"
// class (index != 0) for K consecutive steps.
class FaultDecider {
 public:
  explicit FaultDecider(int persistence = 10);

  std::optional<FaultEvent> update(const Eigen::VectorXd& q, std::int64_t step);
  void reset();
  int persistence() const { return persistence_; }

 private:
  int persistence_;
  int current_ = 0;
  int streak_ = 0;
};

// Batch form over a stream: q_stream[i] is observed at step first_step + i.
std::optional<FaultEvent> fd_decide(const std::vector<Eigen::VectorXd>& q_stream, int persistence,
                                    std::int64_t first_step = 0);

void save_fd_model(const FdModel& model, const std::filesystem::path& path);
FdModel load_fd_model(const std::filesystem::path& path);

}  // namespace fqc
