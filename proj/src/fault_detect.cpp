#include "fqc/fault_detect.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <numeric>

#include "fqc/parallel.hpp"

namespace fqc {

std::string to_string(FdScenario s) { return s == FdScenario::FourToThree ? "4to3" : "3to2"; }

FdScenario parse_fd_scenario(const std::string& name) {
  if (name == "4to3") return FdScenario::FourToThree;
  if (name == "3to2") return FdScenario::ThreeToTwo;
  throw std::invalid_argument("unknown fault-detection scenario '" + name + "' (expected 4to3 or 3to2)");
}

FdSpec fd_spec(FdScenario s) {
  if (s == FdScenario::FourToThree) return {100, 150, 5, 96, 64, nn::OptimizerMode::SgdMomentum, 1e-4};
  return {200, 250, 2, 96, 32, nn::OptimizerMode::Adam, 1e-4};
}

StateWindow::StateWindow(int capacity, int warmup) : capacity_(capacity), warmup_(warmup) {
  if (capacity < 1) throw std::invalid_argument("StateWindow: capacity must be >= 1");
  if (warmup < 0) throw std::invalid_argument("StateWindow: warm-up must be >= 0");
}

void StateWindow::push(const StateVec& state) {
  buffer_.push_back(state);
  if (static_cast<int>(buffer_.size()) > capacity_) buffer_.pop_front();
  ++pushed_;
}

void StateWindow::clear() {
  buffer_.clear();
  pushed_ = 0;
}

Eigen::VectorXd one_hot(int class_index, int classes) {
  if (classes < 1 || class_index < 0 || class_index >= classes)
    throw std::out_of_range("one_hot: class " + std::to_string(class_index) + " out of range for " +
                            std::to_string(classes) + " classes");
  Eigen::VectorXd v = Eigen::VectorXd::Zero(classes);
  v(class_index) = 1.0;
  return v;
}

std::vector<std::size_t> FdDataset::class_counts() const {
  std::vector<std::size_t> counts(static_cast<std::size_t>(classes), 0);
  for (const auto& s : samples) ++counts.at(static_cast<std::size_t>(s.label));
  return counts;
}

namespace {

struct RunPlan {
  FaultMask start_mask;
  int fault_class = 0;  // 0 = no failure injected
  int failed_prop = 0;  // propeller turned off at injection, 0 if none
  int injection_step = 0;
};

RunPlan plan_run(FdScenario scenario, int run, int run_steps, Rng& rng) {
  const FdSpec spec = fd_spec(scenario);
  RunPlan plan;
  plan.fault_class = run % spec.classes;
  const int lo = spec.warmup + 1;
  const int hi = std::max(lo, run_steps - spec.window - 1);
  plan.injection_step = std::uniform_int_distribution<int>(lo, hi)(rng);
  if (scenario == FdScenario::FourToThree) {
    plan.failed_prop = plan.fault_class;
  } else {
    const int first = (run / spec.classes) % kNumProps + 1;
    plan.start_mask = FaultMask::with_failed({first});
    plan.failed_prop = plan.fault_class ? opposite_prop(first) : 0;
  }
  return plan;
}

std::vector<FdSample> simulate_run(FdScenario scenario, const ControllerBundle& controller,
                                   const SimConfig& sim, int run, std::uint64_t seed,
                                   const FdGenConfig& config) {
  const FdSpec spec = fd_spec(scenario);
  const int run_steps = config.run_steps > 0 ? config.run_steps : spec.warmup + 3 * spec.window;
  Rng rng(seed);
  const RunPlan plan = plan_run(scenario, run, run_steps, rng);
  const Vec3 waypoint(0.0, 0.0, config.altitude);
  QuadState state = sample_hover_state(rng, waypoint, config.init_position_spread, config.init_tilt);
  FaultMask actual = plan.start_mask;
  const FaultMask control_mask = plan.start_mask;

  // Record relative states s_1..s_n (s_k is the state after k control steps).
  std::vector<StateVec> states;
  states.reserve(static_cast<std::size_t>(run_steps));
  for (int k = 1; k <= run_steps; ++k) {
    if (k == plan.injection_step && plan.failed_prop) actual.fail(plan.failed_prop);
    const Eigen::VectorXd out = policy_mean(controller.policy, waypoint_frame(state, waypoint));
    const ActuatorCommand cmd = combine_actions(out, control_mask, state, sim.gains, sim.vehicle);
    state = step(state, cmd.rotors, cmd.extra(), actual, sim.vehicle);
    states.push_back(waypoint_frame(state, waypoint));
    // The ground plane is ignored so post-failure windows exist even when the
    // vehicle would have landed; only a runaway state ends the run.
    if ((state.position - waypoint).cwiseAbs().maxCoeff() > config.max_excursion) break;
  }

  // A window ending at step e covers steps e-T+1..e. States recorded at step
  // >= injection_step are produced with the failed propeller.
  const int n = static_cast<int>(states.size());
  const int first_end = std::max(spec.window, spec.warmup + 1);
  std::vector<int> none_ends;
  std::vector<int> fault_ends;
  for (int e = first_end; e <= n; e += config.harvest_stride) {
    const int start = e - spec.window + 1;
    if (!plan.failed_prop) {
      // Negative runs harvest the same post-injection region a failing run would.
      if (start >= plan.injection_step) none_ends.push_back(e);
    } else if (e < plan.injection_step) {
      none_ends.push_back(e);
    } else if (start >= plan.injection_step) {
      fault_ends.push_back(e);
    }
  }
  if (plan.failed_prop && none_ends.size() > fault_ends.size()) {
    // Keep the healthy windows closest to the injection so the classes stay balanced.
    none_ends.erase(none_ends.begin(), none_ends.end() - static_cast<std::ptrdiff_t>(fault_ends.size()));
  }

  std::vector<FdSample> out;
  auto harvest = [&](int end, int label) {
    FdSample s;
    s.window.assign(states.begin() + (end - spec.window), states.begin() + end);
    s.label = label;
    s.run = run;
    s.end_step = end;
    s.injection_step = plan.injection_step;
    out.push_back(std::move(s));
  };
  for (int e : none_ends) harvest(e, 0);
  for (int e : fault_ends) harvest(e, plan.fault_class);
  return out;
}

void write_u32(std::ostream& os, std::uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); }
void write_u64(std::ostream& os, std::uint64_t v) { os.write(reinterpret_cast<const char*>(&v), 8); }

template <typename T>
T read_pod(std::istream& is, const std::filesystem::path& path) {
  T v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(T)))
    throw std::runtime_error(path.string() + ": dataset file truncated");
  return v;
}

constexpr std::uint32_t kDatasetVersion = 1;

std::vector<Eigen::MatrixXd> batch_sequence(const FdDataset& data, const std::vector<std::size_t>& idx,
                                            std::size_t begin, std::size_t end) {
  const auto b = static_cast<Eigen::Index>(end - begin);
  std::vector<Eigen::MatrixXd> seq(static_cast<std::size_t>(data.window), Eigen::MatrixXd(18, b));
  for (std::size_t k = begin; k < end; ++k) {
    const FdSample& s = data.samples[idx[k]];
    for (int t = 0; t < data.window; ++t)
      seq[static_cast<std::size_t>(t)].col(static_cast<Eigen::Index>(k - begin)) = s.window[static_cast<std::size_t>(t)];
  }
  return seq;
}

}  // namespace

QuadState sample_hover_state(Rng& rng, const Vec3& waypoint, double position_spread, double tilt_std) {
  QuadState s;
  s.position = waypoint;
  if (position_spread > 0.0) {
    std::uniform_real_distribution<double> pos(-position_spread, position_spread);
    for (int i = 0; i < 3; ++i) s.position(i) += pos(rng);
  }
  if (tilt_std > 0.0) {
    std::normal_distribution<double> tilt(0.0, tilt_std);
    const double roll = tilt(rng);
    const double pitch = tilt(rng);
    s.rotation = so3_exp(Vec3(roll, pitch, 0.0));
  }
  return s;
}

FdDataset generate_fd_dataset(FdScenario scenario, const ControllerBundle& controller,
                              const SimConfig& sim, int n_runs, std::uint64_t seed,
                              const FdGenConfig& config) {
  const int expected = scenario == FdScenario::FourToThree ? 4 : 3;
  if (controller.arity() != expected)
    throw std::invalid_argument(to_string(scenario) + " data generation needs the " +
                                std::to_string(expected) + "-propeller controller, got arity " +
                                std::to_string(controller.arity()));
  if (n_runs < 1) throw std::invalid_argument("generate_fd_dataset: n_runs must be >= 1");
  const FdSpec spec = fd_spec(scenario);
  std::vector<std::vector<FdSample>> per_run(static_cast<std::size_t>(n_runs));
  parallel_for(per_run.size(), config.workers, [&](std::size_t r) {
    per_run[r] = simulate_run(scenario, controller, sim, static_cast<int>(r), derive_seed(seed, r), config);
  });
  FdDataset data;
  data.scenario = scenario;
  data.classes = spec.classes;
  data.window = spec.window;
  for (auto& run : per_run)
    for (auto& s : run) data.samples.push_back(std::move(s));
  return data;
}

void save_fd_dataset(const FdDataset& data, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
  os.write("FQFD", 4);
  write_u32(os, kDatasetVersion);
  write_u32(os, static_cast<std::uint32_t>(data.scenario));
  write_u32(os, static_cast<std::uint32_t>(data.classes));
  write_u32(os, static_cast<std::uint32_t>(data.window));
  write_u64(os, data.samples.size());
  for (const auto& s : data.samples) {
    if (static_cast<int>(s.window.size()) != data.window)
      throw std::invalid_argument("save_fd_dataset: sample window length mismatch");
    for (const auto& st : s.window) os.write(reinterpret_cast<const char*>(st.data()), 18 * sizeof(double));
    write_u32(os, static_cast<std::uint32_t>(s.label));
    write_u32(os, static_cast<std::uint32_t>(s.run));
    write_u32(os, static_cast<std::uint32_t>(s.end_step));
    write_u32(os, static_cast<std::uint32_t>(s.injection_step));
  }
  if (!os) throw std::runtime_error("failed writing " + path.string());
}

FdDataset load_fd_dataset(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, "FQFD", 4) != 0)
    throw std::runtime_error(path.string() + ": bad magic header (not an FQFD dataset)");
  const auto version = read_pod<std::uint32_t>(is, path);
  if (version != kDatasetVersion)
    throw std::runtime_error(path.string() + ": unsupported dataset version " + std::to_string(version));
  FdDataset data;
  const auto scenario = read_pod<std::uint32_t>(is, path);
  if (scenario > 1) throw std::runtime_error(path.string() + ": unknown scenario id");
  data.scenario = static_cast<FdScenario>(scenario);
  data.classes = static_cast<int>(read_pod<std::uint32_t>(is, path));
  data.window = static_cast<int>(read_pod<std::uint32_t>(is, path));
  const FdSpec spec = fd_spec(data.scenario);
  if (data.classes != spec.classes || data.window != spec.window)
    throw std::runtime_error(path.string() + ": header shape does not match scenario " + to_string(data.scenario));
  const auto n = read_pod<std::uint64_t>(is, path);
  data.samples.resize(n);
  for (auto& s : data.samples) {
    s.window.resize(static_cast<std::size_t>(data.window));
    for (auto& st : s.window)
      if (!is.read(reinterpret_cast<char*>(st.data()), 18 * sizeof(double)))
        throw std::runtime_error(path.string() + ": dataset file truncated");
    s.label = static_cast<int>(read_pod<std::uint32_t>(is, path));
    s.run = static_cast<std::int32_t>(read_pod<std::uint32_t>(is, path));
    s.end_step = read_pod<std::int32_t>(is, path);
    s.injection_step = read_pod<std::int32_t>(is, path);
    if (s.label >= data.classes) throw std::runtime_error(path.string() + ": label out of range");
  }
  return data;
}

FdModel make_fd_model(FdScenario scenario, Rng& rng) {
  const FdSpec spec = fd_spec(scenario);
  FdModel m;
  m.scenario = scenario;
  m.params = nn::init_lstm(18, spec.hidden1, spec.hidden2, spec.classes, rng, spec.window);
  return m;
}

FdSplit split_by_run(const FdDataset& data, double heldout_fraction, std::uint64_t seed) {
  std::vector<std::int32_t> runs;
  for (const auto& s : data.samples) runs.push_back(s.run);
  std::sort(runs.begin(), runs.end());
  runs.erase(std::unique(runs.begin(), runs.end()), runs.end());
  Rng rng(seed);
  std::shuffle(runs.begin(), runs.end(), rng);
  const auto n_held = static_cast<std::size_t>(std::llround(heldout_fraction * static_cast<double>(runs.size())));
  std::vector<std::int32_t> held(runs.begin(), runs.begin() + static_cast<std::ptrdiff_t>(std::min(n_held, runs.size())));
  std::sort(held.begin(), held.end());
  FdSplit split;
  for (std::size_t i = 0; i < data.samples.size(); ++i) {
    if (std::binary_search(held.begin(), held.end(), data.samples[i].run))
      split.heldout.push_back(i);
    else
      split.train.push_back(i);
  }
  return split;
}

double fd_accuracy(const FdModel& model, const FdDataset& data, const std::vector<std::size_t>& indices) {
  if (indices.empty()) return 0.0;
  std::size_t correct = 0;
  constexpr std::size_t kChunk = 256;
  for (std::size_t b = 0; b < indices.size(); b += kChunk) {
    const std::size_t e = std::min(indices.size(), b + kChunk);
    const Eigen::MatrixXd probs = nn::lstm_forward(model.params, batch_sequence(data, indices, b, e));
    for (std::size_t k = b; k < e; ++k) {
      Eigen::Index arg = 0;
      probs.col(static_cast<Eigen::Index>(k - b)).maxCoeff(&arg);
      if (arg == data.samples[indices[k]].label) ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(indices.size());
}

double FdTrainingResult::final_train_accuracy() const {
  return history.empty() ? initial_train_accuracy : history.back().train_accuracy;
}

double FdTrainingResult::final_heldout_accuracy() const {
  return history.empty() ? initial_heldout_accuracy : history.back().heldout_accuracy;
}

double FdTrainConfig::learning_rate(FdScenario s) const {
  const double lr = s == FdScenario::FourToThree ? learning_rate_4to3 : learning_rate_3to2;
  return lr > 0.0 ? lr : fd_spec(s).learning_rate;
}

FdTrainingResult train_fd(const FdDataset& dataset, FdScenario tag, int epochs, std::uint64_t seed,
                          const FdTrainConfig& config) {
  const FdSpec spec = fd_spec(tag);
  if (dataset.samples.empty()) throw std::invalid_argument("train_fd: empty dataset");
  if (dataset.classes != spec.classes || dataset.window != spec.window)
    throw std::invalid_argument("train_fd: dataset shape does not match model tag " + to_string(tag));

  Rng rng(derive_seed(seed, 0xfd));
  FdTrainingResult result;
  result.model = make_fd_model(tag, rng);
  result.split = split_by_run(dataset, config.heldout_fraction, derive_seed(seed, 0x5911));
  const FdSplit& split = result.split;
  nn::OptimizerState opt(spec.optimizer, config.learning_rate(tag));

  result.initial_train_accuracy = fd_accuracy(result.model, dataset, split.train);
  result.initial_heldout_accuracy = fd_accuracy(result.model, dataset, split.heldout);

  std::vector<std::size_t> order = split.train;
  const std::size_t mb = static_cast<std::size_t>(std::max(1, config.minibatch));
  for (int epoch = 1; epoch <= epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss = 0.0;
    for (std::size_t b = 0; b < order.size(); b += mb) {
      const std::size_t e = std::min(order.size(), b + mb);
      nn::LstmCache cache;
      nn::lstm_forward(result.model.params, batch_sequence(dataset, order, b, e), &cache);
      Eigen::MatrixXd labels = Eigen::MatrixXd::Zero(spec.classes, static_cast<Eigen::Index>(e - b));
      for (std::size_t k = b; k < e; ++k)
        labels(dataset.samples[order[k]].label, static_cast<Eigen::Index>(k - b)) = 1.0;
      nn::LstmGradient g = nn::lstm_gradient(result.model.params, cache, labels);
      nn::scale(g.params, 1.0 / static_cast<double>(e - b));
      loss += g.loss;
      opt.step(result.model.params.tensors, g.params);
    }
    FdEpoch row;
    row.epoch = epoch;
    row.loss = loss / static_cast<double>(order.size());
    row.train_accuracy = fd_accuracy(result.model, dataset, split.train);
    row.heldout_accuracy = fd_accuracy(result.model, dataset, split.heldout);
    result.history.push_back(row);
  }
  return result;
}

Eigen::VectorXd fd_classify(const FdModel& model, const StateWindow& window) {
  if (window.capacity() != model.window())
    throw std::invalid_argument("fd_classify: window capacity does not match model");
  if (!window.ready())
    throw WindowNotReady("fd_classify: window not ready at step " + std::to_string(window.step()) +
                         " (needs a full window and step > " + std::to_string(window.warmup()) + ")");
  return nn::lstm_forward(model.params, window.contents());
}

FaultDecider::FaultDecider(int persistence) : persistence_(persistence) {
  if (persistence < 1) throw std::invalid_argument("FaultDecider: persistence must be >= 1");
}

std::optional<FaultEvent> FaultDecider::update(const Eigen::VectorXd& q, std::int64_t step) {
  Eigen::Index arg = 0;
  q.maxCoeff(&arg);
  const int cls = static_cast<int>(arg);
  if (cls == 0) {
    current_ = 0;
    streak_ = 0;
    return std::nullopt;
  }
  streak_ = cls == current_ ? streak_ + 1 : 1;
  current_ = cls;
  if (streak_ == persistence_) return FaultEvent{cls, step};
  return std::nullopt;
}

void FaultDecider::reset() {
  current_ = 0;
  streak_ = 0;
}

std::optional<FaultEvent> fd_decide(const std::vector<Eigen::VectorXd>& q_stream, int persistence,
                                    std::int64_t first_step) {
  FaultDecider decider(persistence);
  for (std::size_t i = 0; i < q_stream.size(); ++i)
    if (auto ev = decider.update(q_stream[i], first_step + static_cast<std::int64_t>(i))) return ev;
  return std::nullopt;
}

void save_fd_model(const FdModel& model, const std::filesystem::path& path) {
  nn::save_weights(model.params, path);
}

FdModel load_fd_model(const std::filesystem::path& path) {
  FdModel m;
  m.params = nn::load_lstm(path);
  if (m.params.classes == 5 && m.params.window == 100)
    m.scenario = FdScenario::FourToThree;
  else if (m.params.classes == 2 && m.params.window == 200)
    m.scenario = FdScenario::ThreeToTwo;
  else
    throw std::runtime_error(path.string() + ": weights do not match a known fault-detection model");
  const FdSpec spec = fd_spec(m.scenario);
  if (m.params.hidden1 != spec.hidden1 || m.params.hidden2 != spec.hidden2)
    throw std::runtime_error(path.string() + ": layer sizes do not match the " + to_string(m.scenario) + " model");
  return m;
}

}  // namespace fqc
