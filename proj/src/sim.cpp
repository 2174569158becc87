#include "fqc/sim.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>
#include <stdexcept>

namespace fqc {

namespace {

void require_finite(const Eigen::Ref<const Eigen::MatrixXd>& m, const char* what) {
  if (!m.allFinite()) throw std::invalid_argument(std::string("non-finite value in ") + what);
}

void check_prop(int prop) {
  if (prop < 1 || prop > kNumProps)
    throw std::out_of_range("propeller index must be in 1..4, got " + std::to_string(prop));
}

}  // namespace

void QuadParams::validate() const {
  if (!(mass > 0)) throw std::invalid_argument("QuadParams: mass must be > 0");
  if (!(arm_length > 0)) throw std::invalid_argument("QuadParams: arm_length must be > 0");
  if (!(inertia_diag.array() > 0).all())
    throw std::invalid_argument("QuadParams: inertia entries must be > 0");
  if (!(thrust_coeff > 0)) throw std::invalid_argument("QuadParams: thrust_coeff must be > 0");
  if (!(max_rotor_speed > 0)) throw std::invalid_argument("QuadParams: max_rotor_speed must be > 0");
}

double QuadParams::hover_speed() const {
  return std::sqrt(mass * gravity / (kNumProps * thrust_coeff));
}

FaultMask FaultMask::with_failed(std::initializer_list<int> props) {
  FaultMask m;
  for (int p : props) m.fail(p);
  return m;
}

void FaultMask::fail(int prop) {
  check_prop(prop);
  functional_[prop - 1] = false;
}

int FaultMask::functional_count() const {
  return static_cast<int>(std::count(functional_.begin(), functional_.end(), true));
}

bool FaultMask::supported() const {
  switch (failed_count()) {
    case 0:
    case 1:
      return true;
    case 2:
      return functional_[0] == functional_[2] && functional_[1] == functional_[3];
    default:
      return false;
  }
}

std::vector<int> FaultMask::functional_props() const {
  std::vector<int> out;
  for (int i = 0; i < kNumProps; ++i)
    if (functional_[i]) out.push_back(i + 1);
  return out;
}

std::vector<int> FaultMask::failed_props() const {
  std::vector<int> out;
  for (int i = 0; i < kNumProps; ++i)
    if (!functional_[i]) out.push_back(i + 1);
  return out;
}

std::string FaultMask::to_string() const {
  std::string s;
  for (bool f : functional_) s += f ? '1' : '0';
  return s;
}

std::vector<FaultMask> supported_masks() {
  return {FaultMask::healthy(),          FaultMask::with_failed({1}),
          FaultMask::with_failed({2}),   FaultMask::with_failed({3}),
          FaultMask::with_failed({4}),   FaultMask::with_failed({1, 3}),
          FaultMask::with_failed({2, 4})};
}

int opposite_prop(int prop) {
  check_prop(prop);
  return (prop + 1) % kNumProps + 1;
}

Wrench mix_forces(const RotorCommand& cmd, const FaultMask& mask, const QuadParams& params,
                  const Vec3& w_body) {
  for (int i = 0; i < kNumProps; ++i) {
    const double w = cmd.speeds[i];
    if (!(w >= 0.0 && w <= params.max_rotor_speed)) {
      std::ostringstream os;
      os << "rotor " << i + 1 << " speed " << w << " outside [0, " << params.max_rotor_speed << "]";
      throw std::invalid_argument(os.str());
    }
  }
  std::array<double, kNumProps> thrust{};
  std::array<double, kNumProps> reaction{};
  for (int i = 0; i < kNumProps; ++i) {
    if (!mask.functional(i)) continue;
    const double w2 = cmd.speeds[i] * cmd.speeds[i];
    thrust[i] = params.thrust_coeff * w2;
    reaction[i] = params.rotor_torque_coeff * w2;
  }
  const double l = params.arm_length;
  Wrench out;
  out.force = Vec3(0.0, 0.0, thrust[0] + thrust[1] + thrust[2] + thrust[3]);
  out.torque = Vec3(l * (thrust[1] - thrust[3]), l * (thrust[2] - thrust[0]),
                    reaction[0] - reaction[1] + reaction[2] - reaction[3]);
  out.torque -= params.rot_drag_coeff * w_body;
  return out;
}

Mat3 skew(const Vec3& v) {
  Mat3 m;
  m << 0.0, -v.z(), v.y(), v.z(), 0.0, -v.x(), -v.y(), v.x(), 0.0;
  return m;
}

Mat3 so3_exp(const Vec3& v) {
  const double theta = v.norm();
  const Mat3 k = skew(v);
  if (theta < 1e-12) return Mat3::Identity() + k;
  const double a = std::sin(theta) / theta;
  const double b = (1.0 - std::cos(theta)) / (theta * theta);
  return Mat3::Identity() + a * k + b * k * k;
}

Mat3 orthonormalize(const Mat3& m) {
  Eigen::JacobiSVD<Mat3> svd(m, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Mat3 u = svd.matrixU();
  const Mat3& v = svd.matrixV();
  if ((u * v.transpose()).determinant() < 0.0) u.col(2) *= -1.0;
  return u * v.transpose();
}

Mat3 quaternion_to_rotation(double w, double x, double y, double z) {
  const double n = std::sqrt(w * w + x * x + y * y + z * z);
  if (!(n > 0.0)) throw std::invalid_argument("zero quaternion");
  return Eigen::Quaterniond(w / n, x / n, y / n, z / n).toRotationMatrix();
}

QuadState step(const QuadState& state, const RotorCommand& cmd, const Wrench& extra,
               const FaultMask& mask, const QuadParams& params, double dt) {
  if (!(dt > 0.0)) throw std::invalid_argument("step: dt must be > 0");
  require_finite(state.rotation, "rotation");
  require_finite(state.position, "position");
  require_finite(state.lin_vel, "lin_vel");
  require_finite(state.ang_vel, "ang_vel");
  require_finite(extra.force, "extra force");
  require_finite(extra.torque, "extra torque");

  const Mat3& r = state.rotation;
  const Vec3 w_body = r.transpose() * state.ang_vel;
  Wrench body = mix_forces(cmd, mask, params, w_body);
  body.force += extra.force;
  body.torque += extra.torque;

  QuadState next;
  const Vec3 force = r * body.force + Vec3(0.0, 0.0, -params.mass * params.gravity);
  next.lin_vel = state.lin_vel + (force / params.mass) * dt;
  next.position = state.position + next.lin_vel * dt;

  const Vec3& inertia = params.inertia_diag;
  const Vec3 momentum = inertia.cwiseProduct(w_body);
  const Vec3 w_dot = (body.torque - w_body.cross(momentum)).cwiseQuotient(inertia);
  const Vec3 w_body_next = w_body + w_dot * dt;
  next.ang_vel = r * w_body_next;
  next.rotation = orthonormalize(so3_exp(next.ang_vel * dt) * r);
  return next;
}

StateVec flatten_state(const QuadState& state) {
  StateVec s;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) s(3 * i + j) = state.rotation(i, j);
  s.segment<3>(9) = state.position;
  s.segment<3>(12) = state.lin_vel;
  s.segment<3>(15) = state.ang_vel;
  return s;
}

QuadState unflatten_state(const StateVec& flat) {
  QuadState state;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) state.rotation(i, j) = flat(3 * i + j);
  state.position = flat.segment<3>(9);
  state.lin_vel = flat.segment<3>(12);
  state.ang_vel = flat.segment<3>(15);
  return state;
}

double axis_tilt_angle(const Mat3& rotation) {
  return std::acos(std::clamp(rotation(2, 2), -1.0, 1.0));
}

double axis_tilt_angle(const QuadState& state) { return axis_tilt_angle(state.rotation); }

Vec3 n_vector_derivative(const Vec3& n, const Vec3& w_body) { return -w_body.cross(n); }

Vec3 integrate_n_vector(const Vec3& n, const Vec3& w_body, double dt) {
  return so3_exp(-w_body * dt) * n;
}

double truncated_normal(Rng& rng, double sigma) {
  std::normal_distribution<double> dist(0.0, sigma);
  for (;;) {
    const double x = dist(rng);
    if (std::abs(x) <= 3.0 * sigma) return x;
  }
}

QuadState sample_initial_state(Rng& rng, InitMode mode) {
  QuadState s;
  if (mode == InitMode::Gaussian3Sigma) {
    for (int i = 0; i < 3; ++i) s.position(i) = truncated_normal(rng, 1.0);
    double q[4];
    do {
      for (double& e : q) e = truncated_normal(rng, 1.0);
    } while (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3] < 1e-12);
    s.rotation = quaternion_to_rotation(q[0], q[1], q[2], q[3]);
    for (int i = 0; i < 3; ++i) s.ang_vel(i) = truncated_normal(rng, 5.0);
    for (int i = 0; i < 3; ++i) s.lin_vel(i) = truncated_normal(rng, 5.0);
    return s;
  }
  // A normalized 4-D standard normal is uniform on S^3, hence uniform on SO(3).
  std::normal_distribution<double> normal(0.0, 1.0);
  double q[4];
  do {
    for (double& e : q) e = normal(rng);
  } while (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3] < 1e-12);
  s.rotation = quaternion_to_rotation(q[0], q[1], q[2], q[3]);
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  for (int i = 0; i < 3; ++i) s.position(i) = unit(rng);
  for (int i = 0; i < 3; ++i) s.lin_vel(i) = unit(rng);
  for (int i = 0; i < 3; ++i) s.ang_vel(i) = unit(rng);
  return s;
}

}  // namespace fqc
