#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "fqc/nn.hpp"
#include "fqc/pd.hpp"
#include "fqc/sim.hpp"

namespace fqc {

// Controller classes: 4, 3 or 2 (opposing) functional propellers.
enum class Scenario { FourProp, ThreeProp, TwoPropOpposing };

std::string to_string(Scenario s);
// Accepts "4prop", "3prop", "2prop-opposing".
Scenario parse_scenario(const std::string& name);
int functional_count(Scenario s);
Scenario scenario_for(const FaultMask& mask);
// Uniform draw over the supported masks with the scenario's functional count.
FaultMask training_mask(Scenario s, Rng& rng);

// Plant constants shared by training, data generation and runtime.
struct SimConfig {
  QuadParams vehicle;
  PdGains gains;
};

struct PpoConfig {
  double gamma = 0.99;
  double clip_epsilon = 0.2;
  double policy_lr = 3e-4;
  double value_lr = 1e-3;
  nn::OptimizerMode policy_optimizer = nn::OptimizerMode::Adam;
  nn::OptimizerMode value_optimizer = nn::OptimizerMode::Adam;
  int n_value_updates = 5;
  // Normalized action units. Smaller values gave no measurable learning signal
  // at desk-scale batch sizes.
  double exploration_std = 1.0;
  // When >= 0, sigma decays linearly from exploration_std at epoch 1 to this
  // value at epochs_max.
  double exploration_std_final = -1.0;
  int epochs_max = 300;
  double value_loss_stop = 1e-4;
  int n_traj = 16;
  int traj_len = 200;
  int minibatch = 64;
  double huber_delta = 1.0;
  double termination_cost = 10.0;
  // Episodes end when any waypoint-frame coordinate exceeds this magnitude.
  double box_half_extent = 25.0;
  // Height of the training waypoint above the ground plane.
  double train_altitude = 5.0;
  int workers = 0;

  void validate() const;
  double exploration_std_at(int epoch) const;
};

struct ControllerBundle {
  Scenario scenario = Scenario::FourProp;
  nn::MlpParams policy;
  nn::MlpParams value;

  int arity() const { return policy.output_size(); }
};

ControllerBundle make_bundle(Scenario s, Rng& rng);

// Running cost of a waypoint-frame state: position error,
// angular rate and tilt, weighted 2e-3, 1e-4 and 5e-4.
double reward(const QuadState& relative_state);
double reward(const QuadState& state, const Vec3& waypoint);

// Discounted cost-to-go with a bootstrapped tail:
// v_t = sum_{i=t}^{T-1} gamma^(i-t) r_i + gamma^(T-t) terminal_value.
std::vector<double> mc_returns(const std::vector<double>& rewards, double terminal_value, double gamma);

// Spreads n policy outputs over the functional propellers in ascending index
// order; failed slots receive 0.
std::array<double, kNumProps> cyclic_assign(const Eigen::VectorXd& outputs, const FaultMask& mask);

// Maps normalized outputs to rotor speeds around hover: w = w_hover (1 + 0.5 o).
RotorCommand policy_to_rotors(const Eigen::VectorXd& outputs, const FaultMask& mask,
                              const QuadParams& params);

struct ActuatorCommand {
  RotorCommand rotors;
  Vec3 pd_torque = Vec3::Zero();
  Wrench total;  // mixer output with the mask applied, plus the PD torque
  Wrench extra() const { return {Vec3::Zero(), pd_torque}; }
};

ActuatorCommand combine_actions(const Eigen::VectorXd& policy_out, const FaultMask& mask,
                                const QuadState& state, const PdGains& gains,
                                const QuadParams& params);

// Policy input: the flattened state with position re-expressed relative to the waypoint.
StateVec waypoint_frame(const QuadState& state, const Vec3& waypoint);
// Linear and angular velocity channels are divided by this before entering
// the policy and value networks (the spread of the initial-state velocities).
constexpr double kRateInputScale = 5.0;
StateVec network_input(const StateVec& state);

// Deterministic policy mean, tanh-squashed to [-1, 1]. `input` is the raw
// waypoint-frame state.
Eigen::VectorXd policy_mean(const nn::MlpParams& policy, const StateVec& input);

struct Trajectory {
  std::vector<StateVec> states;          // waypoint-frame inputs s_0..s_{T-1}
  std::vector<Eigen::VectorXd> actions;  // sampled normalized actions
  std::vector<double> log_probs;         // log density under the behaviour policy
  std::vector<double> rewards;           // cost of each transition
  StateVec terminal_state;
  bool terminated_early = false;
  FaultMask mask;

  std::size_t length() const { return rewards.size(); }
};

struct RolloutBatch {
  std::vector<Trajectory> trajectories;

  std::size_t total_steps() const;
  double mean_cost() const;
};

RolloutBatch collect_rollouts(const ControllerBundle& bundle, const PpoConfig& config,
                              const SimConfig& sim, std::uint64_t seed);

// Gaussian log-density of `action` around `mean` with isotropic std sigma.
double gaussian_log_prob(const Eigen::VectorXd& action, const Eigen::VectorXd& mean, double sigma);

struct PpoUpdateResult {
  double value_loss = 0.0;      // mean Huber loss after the value updates
  double surrogate_loss = 0.0;  // clipped surrogate before the policy step
  std::vector<double> value_loss_history;  // before each value update, then final
};

// Optimizer states persist across epochs and are owned by the caller.
struct PpoOptimizers {
  nn::OptimizerState policy;
  nn::OptimizerState value;
  static PpoOptimizers from(const PpoConfig& config);
};

PpoUpdateResult ppo_update(ControllerBundle& bundle, const RolloutBatch& batch, const PpoConfig& config,
                           PpoOptimizers& optimizers, std::uint64_t seed);

struct EpochLog {
  int epoch = 0;
  double mean_cost = 0.0;
  double value_loss = 0.0;
  double surrogate_loss = 0.0;
  double wall_time_s = 0.0;
};

struct TrainingResult {
  ControllerBundle bundle;
  std::vector<EpochLog> log;
};

using EpochCallback = std::function<void(const EpochLog&)>;

TrainingResult train_controller(Scenario scenario, const PpoConfig& config, const SimConfig& sim,
                                std::uint64_t seed, const EpochCallback& on_epoch = {});

}  // namespace fqc
