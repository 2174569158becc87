#pragma once

#include <array>
#include <cstdint>
#include <initializer_list>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

namespace fqc {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using StateVec = Eigen::Matrix<double, 18, 1>;
using Rng = std::mt19937_64;

constexpr int kNumProps = 4;
constexpr double kControlDt = 0.01;  // 100 Hz

// Vehicle constants. Defaults are the 0.4 kg test vehicle; c_T is chosen so
// that hover sits at 400 rad/s per rotor.
struct QuadParams {
  double mass = 0.4;
  double arm_length = 0.17;
  Vec3 inertia_diag{7e-3, 7e-3, 12e-3};
  double thrust_coeff = 0.4 * 9.81 / (4.0 * 400.0 * 400.0);
  double rotor_torque_coeff = 0.016 * 0.4 * 9.81 / (4.0 * 400.0 * 400.0);
  double rot_drag_coeff = 16e-3;
  double gravity = 9.81;
  double max_rotor_speed = 800.0;

  // Throws std::invalid_argument if any invariant is violated.
  void validate() const;
  // Speed at which every rotor carries a quarter of the weight.
  double hover_speed() const;
};

struct QuadState {
  Mat3 rotation = Mat3::Identity();  // body -> inertial
  Vec3 position = Vec3::Zero();
  Vec3 lin_vel = Vec3::Zero();
  Vec3 ang_vel = Vec3::Zero();  // inertial frame

  Vec3 body_ang_vel() const { return rotation.transpose() * ang_vel; }
  bool operator==(const QuadState&) const = default;
};

// Which propellers produce thrust. Index 0..3 corresponds to propellers 1..4.
class FaultMask {
 public:
  FaultMask() { functional_.fill(true); }
  explicit FaultMask(std::array<bool, kNumProps> functional) : functional_(functional) {}

  static FaultMask healthy() { return {}; }
  // prop is 1-based.
  static FaultMask with_failed(std::initializer_list<int> props);

  bool functional(int index) const { return functional_.at(index); }
  void fail(int prop);  // 1-based
  int functional_count() const;
  int failed_count() const { return kNumProps - functional_count(); }
  // Healthy, one failed, or an opposing pair ({1,3} or {2,4}) failed.
  bool supported() const;
  // 1-based propeller indices, ascending.
  std::vector<int> functional_props() const;
  std::vector<int> failed_props() const;
  std::string to_string() const;

  bool operator==(const FaultMask&) const = default;

 private:
  std::array<bool, kNumProps> functional_;
};

// Every supported configuration: healthy, four single failures, two opposing pairs.
std::vector<FaultMask> supported_masks();

// The propeller mounted opposite `prop` (1<->3, 2<->4).
int opposite_prop(int prop);

struct RotorCommand {
  std::array<double, kNumProps> speeds{};
};

struct Wrench {
  Vec3 force = Vec3::Zero();
  Vec3 torque = Vec3::Zero();
};

// Plus-configuration mixer. Propellers 1/3 sit on the body +x/-x axis and
// propellers 2/4 on +y/-y. Reaction torque is +c_Q w^2 about body z for 1/3
// and -c_Q w^2 for 2/4. Rotational drag -rot_drag * w_body is added to the
// torque. Both vectors are in the body frame.
Wrench mix_forces(const RotorCommand& cmd, const FaultMask& mask, const QuadParams& params,
                  const Vec3& w_body = Vec3::Zero());

// One semi-implicit Euler step of the Newton-Euler equations. `extra` is a
// body-frame wrench added to the mixer output (the PD torque at runtime).
QuadState step(const QuadState& state, const RotorCommand& cmd, const Wrench& extra,
               const FaultMask& mask, const QuadParams& params, double dt = kControlDt);

// [R row-major x9, position x3, lin_vel x3, ang_vel x3]
StateVec flatten_state(const QuadState& state);
QuadState unflatten_state(const StateVec& flat);

// Angle between the body z-axis and the inertial z-axis, in [0, pi].
double axis_tilt_angle(const QuadState& state);
double axis_tilt_angle(const Mat3& rotation);

// d n / dt = -w_body x n for a body-fixed unit axis n.
Vec3 n_vector_derivative(const Vec3& n, const Vec3& w_body);
// Exact propagation of n over dt under constant w_body (norm-preserving).
Vec3 integrate_n_vector(const Vec3& n, const Vec3& w_body, double dt);

enum class InitMode { Gaussian3Sigma, Uniform };

QuadState sample_initial_state(Rng& rng, InitMode mode);

// Nearest proper rotation to `m` (polar decomposition).
Mat3 orthonormalize(const Mat3& m);
// Rotation from a (not necessarily unit) quaternion w, x, y, z.
Mat3 quaternion_to_rotation(double w, double x, double y, double z);
Mat3 skew(const Vec3& v);
// exp([v]x) via Rodrigues.
Mat3 so3_exp(const Vec3& v);

// Draw from N(0, sigma^2) truncated to [-3 sigma, 3 sigma] by rejection.
double truncated_normal(Rng& rng, double sigma);

}  // namespace fqc
