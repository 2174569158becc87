#include "fqc/ppo.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numbers>
#include <numeric>
#include <stdexcept>

#include "fqc/parallel.hpp"

namespace fqc {

std::string to_string(Scenario s) {
  switch (s) {
    case Scenario::FourProp:
      return "4prop";
    case Scenario::ThreeProp:
      return "3prop";
    case Scenario::TwoPropOpposing:
      return "2prop-opposing";
  }
  return "?";
}

Scenario parse_scenario(const std::string& name) {
  if (name == "4prop") return Scenario::FourProp;
  if (name == "3prop") return Scenario::ThreeProp;
  if (name == "2prop-opposing") return Scenario::TwoPropOpposing;
  throw std::invalid_argument("unknown scenario '" + name +
                              "' (expected one of: 4prop, 3prop, 2prop-opposing)");
}

int functional_count(Scenario s) {
  switch (s) {
    case Scenario::FourProp:
      return 4;
    case Scenario::ThreeProp:
      return 3;
    case Scenario::TwoPropOpposing:
      return 2;
  }
  return 0;
}

Scenario scenario_for(const FaultMask& mask) {
  if (!mask.supported()) throw std::invalid_argument("unsupported fault mask " + mask.to_string());
  switch (mask.functional_count()) {
    case 4:
      return Scenario::FourProp;
    case 3:
      return Scenario::ThreeProp;
    default:
      return Scenario::TwoPropOpposing;
  }
}

FaultMask training_mask(Scenario s, Rng& rng) {
  switch (s) {
    case Scenario::FourProp:
      return FaultMask::healthy();
    case Scenario::ThreeProp:
      return FaultMask::with_failed({static_cast<int>(rng() % 4) + 1});
    case Scenario::TwoPropOpposing:
      return rng() % 2 ? FaultMask::with_failed({2, 4}) : FaultMask::with_failed({1, 3});
  }
  return {};
}

void PpoConfig::validate() const {
  if (!(gamma > 0.0 && gamma <= 1.0)) throw std::invalid_argument("PpoConfig: gamma must be in (0, 1]");
  if (!(clip_epsilon > 0.0)) throw std::invalid_argument("PpoConfig: clip_epsilon must be > 0");
  if (!(exploration_std >= 0.0)) throw std::invalid_argument("PpoConfig: exploration_std must be >= 0");
  if (std::isnan(exploration_std_final) || exploration_std_final == 0.0)
    throw std::invalid_argument("PpoConfig: exploration_std_final must be > 0, or < 0 to disable decay");
  if (n_traj < 1 || traj_len < 1) throw std::invalid_argument("PpoConfig: n_traj and traj_len must be >= 1");
  if (minibatch < 1) throw std::invalid_argument("PpoConfig: minibatch must be >= 1");
  if (n_value_updates < 0) throw std::invalid_argument("PpoConfig: n_value_updates must be >= 0");
}

ControllerBundle make_bundle(Scenario s, Rng& rng) {
  ControllerBundle b;
  b.scenario = s;
  b.policy = nn::init_mlp({18, 64, 64, functional_count(s)}, rng);
  b.value = nn::init_mlp({18, 64, 64, 1}, rng);
  return b;
}

double reward(const QuadState& s) {
  return 2e-3 * s.position.norm() + 1e-4 * s.ang_vel.norm() + 5e-4 * axis_tilt_angle(s);
}

double reward(const QuadState& state, const Vec3& waypoint) {
  QuadState rel = state;
  rel.position -= waypoint;
  return reward(rel);
}

std::vector<double> mc_returns(const std::vector<double>& rewards, double terminal_value, double gamma) {
  if (rewards.empty()) throw std::invalid_argument("mc_returns: empty trajectory");
  std::vector<double> v(rewards.size());
  double acc = terminal_value;
  for (std::size_t t = rewards.size(); t-- > 0;) {
    acc = rewards[t] + gamma * acc;
    v[t] = acc;
  }
  return v;
}

std::array<double, kNumProps> cyclic_assign(const Eigen::VectorXd& outputs, const FaultMask& mask) {
  const std::vector<int> props = mask.functional_props();
  if (static_cast<std::size_t>(outputs.size()) != props.size())
    throw std::invalid_argument("cyclic_assign: " + std::to_string(outputs.size()) +
                                " outputs for " + std::to_string(props.size()) +
                                " functional propellers");
  std::array<double, kNumProps> slots{};
  for (std::size_t k = 0; k < props.size(); ++k) slots[props[k] - 1] = outputs(static_cast<Eigen::Index>(k));
  return slots;
}

RotorCommand policy_to_rotors(const Eigen::VectorXd& outputs, const FaultMask& mask,
                              const QuadParams& params) {
  const double hover = params.hover_speed();
  const std::vector<int> props = mask.functional_props();
  if (static_cast<std::size_t>(outputs.size()) != props.size())
    throw std::invalid_argument("policy_to_rotors: arity mismatch");
  Eigen::VectorXd speeds(outputs.size());
  for (Eigen::Index k = 0; k < outputs.size(); ++k)
    speeds(k) = std::clamp(hover * (1.0 + 0.5 * outputs(k)), 0.0, params.max_rotor_speed);
  RotorCommand cmd;
  cmd.speeds = cyclic_assign(speeds, mask);
  return cmd;
}

ActuatorCommand combine_actions(const Eigen::VectorXd& policy_out, const FaultMask& mask,
                                const QuadState& state, const PdGains& gains,
                                const QuadParams& params) {
  if (!policy_out.allFinite()) throw std::invalid_argument("combine_actions: non-finite policy output");
  ActuatorCommand out;
  out.rotors = policy_to_rotors(policy_out, mask, params);
  out.pd_torque = pd_torque(state, gains);
  out.total = mix_forces(out.rotors, mask, params, state.body_ang_vel());
  out.total.torque += out.pd_torque;
  return out;
}

StateVec waypoint_frame(const QuadState& state, const Vec3& waypoint) {
  StateVec s = flatten_state(state);
  s.segment<3>(9) -= waypoint;
  return s;
}

StateVec network_input(const StateVec& state) {
  StateVec x = state;
  x.segment<6>(12) /= kRateInputScale;
  return x;
}

Eigen::VectorXd policy_mean(const nn::MlpParams& policy, const StateVec& input) {
  return nn::mlp_forward(policy, Eigen::VectorXd(network_input(input))).array().tanh().matrix();
}

double gaussian_log_prob(const Eigen::VectorXd& action, const Eigen::VectorXd& mean, double sigma) {
  if (!(sigma > 0.0)) return 0.0;
  const double n = static_cast<double>(action.size());
  return -(action - mean).squaredNorm() / (2.0 * sigma * sigma) -
         n * (std::log(sigma) + 0.5 * std::log(2.0 * std::numbers::pi));
}

std::size_t RolloutBatch::total_steps() const {
  std::size_t n = 0;
  for (const auto& t : trajectories) n += t.length();
  return n;
}

double RolloutBatch::mean_cost() const {
  double sum = 0.0;
  for (const auto& t : trajectories) sum += std::accumulate(t.rewards.begin(), t.rewards.end(), 0.0);
  const std::size_t n = total_steps();
  return n ? sum / static_cast<double>(n) : 0.0;
}

namespace {

bool outside_bounds(const QuadState& world, const Vec3& waypoint, const PpoConfig& config) {
  if (world.position.z() <= 0.0) return true;
  return ((world.position - waypoint).cwiseAbs().array() > config.box_half_extent).any();
}

Trajectory run_episode(const ControllerBundle& bundle, const PpoConfig& config, const SimConfig& sim,
                       std::uint64_t seed) {
  Rng rng(seed);
  Trajectory traj;
  traj.mask = training_mask(bundle.scenario, rng);
  const Vec3 waypoint(0.0, 0.0, config.train_altitude);
  QuadState state = sample_initial_state(rng, InitMode::Gaussian3Sigma);
  state.position += waypoint;

  std::normal_distribution<double> noise(0.0, 1.0);
  traj.states.reserve(config.traj_len);
  traj.actions.reserve(config.traj_len);
  traj.rewards.reserve(config.traj_len);
  traj.log_probs.reserve(config.traj_len);
  for (int t = 0; t < config.traj_len; ++t) {
    const StateVec input = waypoint_frame(state, waypoint);
    const Eigen::VectorXd mean = policy_mean(bundle.policy, input);
    Eigen::VectorXd action = mean;
    if (config.exploration_std > 0.0)
      for (Eigen::Index k = 0; k < action.size(); ++k) action(k) += config.exploration_std * noise(rng);

    const ActuatorCommand cmd = combine_actions(action, traj.mask, state, sim.gains, sim.vehicle);
    state = step(state, cmd.rotors, cmd.extra(), traj.mask, sim.vehicle);

    double cost = reward(state, waypoint);
    const bool done = outside_bounds(state, waypoint, config);
    if (done) cost += config.termination_cost;

    traj.states.push_back(input);
    traj.log_probs.push_back(gaussian_log_prob(action, mean, config.exploration_std));
    traj.actions.push_back(std::move(action));
    traj.rewards.push_back(cost);
    if (done) {
      traj.terminated_early = true;
      break;
    }
  }
  traj.terminal_state = waypoint_frame(state, waypoint);
  return traj;
}

struct FlatBatch {
  Eigen::MatrixXd states;   // 18 x N
  Eigen::MatrixXd actions;  // n x N
  Eigen::VectorXd log_probs;
  Eigen::VectorXd targets;
};

FlatBatch flatten_batch(const ControllerBundle& bundle, const RolloutBatch& batch, double gamma) {
  const auto n = static_cast<Eigen::Index>(batch.total_steps());
  FlatBatch fb;
  fb.states.resize(18, n);
  fb.actions.resize(bundle.arity(), n);
  fb.log_probs.resize(n);
  fb.targets.resize(n);
  Eigen::Index col = 0;
  for (const auto& traj : batch.trajectories) {
    if (traj.length() == 0) continue;
    const double tail = traj.terminated_early
                            ? 0.0
                            : nn::mlp_forward(bundle.value, Eigen::VectorXd(network_input(traj.terminal_state)))(0);
    const std::vector<double> v = mc_returns(traj.rewards, tail, gamma);
    for (std::size_t t = 0; t < traj.length(); ++t, ++col) {
      fb.states.col(col) = network_input(traj.states[t]);
      fb.actions.col(col) = traj.actions[t];
      fb.log_probs(col) = traj.log_probs[t];
      fb.targets(col) = v[t];
    }
  }
  return fb;
}

double mean_huber(const nn::MlpParams& value, const Eigen::MatrixXd& states, const Eigen::VectorXd& targets,
                  double delta) {
  const Eigen::MatrixXd pred = nn::mlp_forward(value, states);
  double sum = 0.0;
  for (Eigen::Index i = 0; i < targets.size(); ++i) sum += nn::huber_loss(pred(0, i), targets(i), delta).loss;
  return sum / static_cast<double>(targets.size());
}

}  // namespace

RolloutBatch collect_rollouts(const ControllerBundle& bundle, const PpoConfig& config,
                              const SimConfig& sim, std::uint64_t seed) {
  config.validate();
  RolloutBatch batch;
  batch.trajectories.resize(config.n_traj);
  parallel_for(static_cast<std::size_t>(config.n_traj), config.workers, [&](std::size_t i) {
    batch.trajectories[i] = run_episode(bundle, config, sim, derive_seed(seed, i));
  });
  return batch;
}

PpoOptimizers PpoOptimizers::from(const PpoConfig& config) {
  return {nn::OptimizerState(config.policy_optimizer, config.policy_lr),
          nn::OptimizerState(config.value_optimizer, config.value_lr)};
}

PpoUpdateResult ppo_update(ControllerBundle& bundle, const RolloutBatch& batch, const PpoConfig& config,
                           PpoOptimizers& optimizers, std::uint64_t seed) {
  const FlatBatch fb = flatten_batch(bundle, batch, config.gamma);
  const Eigen::Index n = fb.targets.size();
  if (n == 0) throw std::invalid_argument("ppo_update: empty batch");
  if (!(config.exploration_std > 0.0))
    throw std::invalid_argument("ppo_update: exploration_std must be > 0");

  // Advantages against the pre-update baseline, normalized per batch.
  Eigen::VectorXd adv = fb.targets - nn::mlp_forward(bundle.value, fb.states).row(0).transpose();
  const double mean = adv.mean();
  const double stdev = std::sqrt((adv.array() - mean).square().mean());
  if (stdev > 1e-12)
    adv = (adv.array() - mean) / stdev;
  else
    adv.setZero();

  PpoUpdateResult result;
  Rng rng(seed);
  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  const Eigen::Index mb = std::min<Eigen::Index>(config.minibatch, n);
  for (int u = 0; u < config.n_value_updates; ++u) {
    result.value_loss_history.push_back(mean_huber(bundle.value, fb.states, fb.targets, config.huber_delta));
    std::shuffle(order.begin(), order.end(), rng);
    for (Eigen::Index start = 0; start < n; start += mb) {
      const Eigen::Index len = std::min(mb, n - start);
      Eigen::MatrixXd xs(18, len);
      Eigen::VectorXd ys(len);
      for (Eigen::Index k = 0; k < len; ++k) {
        xs.col(k) = fb.states.col(order[start + k]);
        ys(k) = fb.targets(order[start + k]);
      }
      nn::MlpCache cache;
      const Eigen::MatrixXd pred = nn::mlp_forward(bundle.value, xs, &cache);
      Eigen::MatrixXd grad(1, len);
      for (Eigen::Index k = 0; k < len; ++k)
        grad(0, k) = nn::huber_loss(pred(0, k), ys(k), config.huber_delta).grad / static_cast<double>(len);
      optimizers.value.step(bundle.value.tensors, nn::mlp_gradient(bundle.value, cache, grad).params);
    }
  }
  result.value_loss = mean_huber(bundle.value, fb.states, fb.targets, config.huber_delta);
  result.value_loss_history.push_back(result.value_loss);

  // One pass of minibatch steps on the clipped surrogate. The objective is
  // written for costs, so it is minimized.
  const double sigma = config.exploration_std;
  const double eps = config.clip_epsilon;
  const int arity = bundle.arity();
  double surrogate = 0.0;
  std::shuffle(order.begin(), order.end(), rng);
  for (Eigen::Index start = 0; start < n; start += mb) {
    const Eigen::Index len = std::min(mb, n - start);
    Eigen::MatrixXd xs(18, len);
    for (Eigen::Index k = 0; k < len; ++k) xs.col(k) = fb.states.col(order[start + k]);
    nn::MlpCache cache;
    const Eigen::MatrixXd mu = nn::mlp_forward(bundle.policy, xs, &cache).array().tanh().matrix();
    Eigen::MatrixXd out_grad = Eigen::MatrixXd::Zero(arity, len);
    for (Eigen::Index k = 0; k < len; ++k) {
      const Eigen::Index i = order[start + k];
      const Eigen::VectorXd action = fb.actions.col(i);
      const double logp = gaussian_log_prob(action, mu.col(k), sigma);
      const double ratio = std::exp(logp - fb.log_probs(i));
      const double clipped = std::clamp(ratio, 1.0 - eps, 1.0 + eps);
      const double a = adv(i);
      const bool unclipped_active = ratio * a >= clipped * a;
      surrogate += unclipped_active ? ratio * a : clipped * a;
      if (!unclipped_active || a == 0.0) continue;
      // d(ratio * a)/d mu = a * ratio * (action - mu) / sigma^2, then through tanh.
      const Eigen::ArrayXd dmu = a * ratio * (action - mu.col(k)).array() / (sigma * sigma);
      out_grad.col(k) = (dmu * (1.0 - mu.col(k).array().square())).matrix() / static_cast<double>(len);
    }
    if (!out_grad.isZero(0.0))
      optimizers.policy.step(bundle.policy.tensors, nn::mlp_gradient(bundle.policy, cache, out_grad).params);
  }
  result.surrogate_loss = surrogate / static_cast<double>(n);
  return result;
}

double PpoConfig::exploration_std_at(int epoch) const {
  if (exploration_std_final < 0.0 || epochs_max <= 1) return exploration_std;
  const double f = std::clamp(static_cast<double>(epoch - 1) / (epochs_max - 1), 0.0, 1.0);
  return exploration_std + f * (exploration_std_final - exploration_std);
}

TrainingResult train_controller(Scenario scenario, const PpoConfig& config, const SimConfig& sim,
                                std::uint64_t seed, const EpochCallback& on_epoch) {
  config.validate();
  sim.vehicle.validate();
  Rng init_rng(derive_seed(seed, 0xb0d1e));
  TrainingResult result;
  result.bundle = make_bundle(scenario, init_rng);
  PpoOptimizers optimizers = PpoOptimizers::from(config);
  const auto start = std::chrono::steady_clock::now();
  PpoConfig epoch_config = config;
  for (int epoch = 1; epoch <= config.epochs_max; ++epoch) {
    epoch_config.exploration_std = config.exploration_std_at(epoch);
    const RolloutBatch batch = collect_rollouts(result.bundle, epoch_config, sim, derive_seed(seed, 1, epoch));
    const PpoUpdateResult upd =
        ppo_update(result.bundle, batch, epoch_config, optimizers, derive_seed(seed, 2, epoch));
    EpochLog row;
    row.epoch = epoch;
    row.mean_cost = batch.mean_cost();
    row.value_loss = upd.value_loss;
    row.surrogate_loss = upd.surrogate_loss;
    row.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    result.log.push_back(row);
    if (on_epoch) on_epoch(row);
    if (upd.value_loss < config.value_loss_stop) break;
  }
  return result;
}

}  // namespace fqc
