#pragma once

#include "fqc/sim.hpp"

namespace fqc {

// Inner-loop attitude gains. The z gains are one sixth of the x/y gains.
struct PdGains {
  double kp_xy = -0.2;
  double kd_xy = -0.06;
  double kp_z = -0.033;
  double kd_z = -0.01;
};

// Roll, pitch, yaw (ZYX convention) of a body->inertial rotation.
Vec3 euler_zyx(const Mat3& rotation);

// tau_b = kp * R^T q + kd * R^T w, gains applied per body axis.
Vec3 pd_torque(const Mat3& rotation, const Vec3& euler, const Vec3& ang_vel, const PdGains& gains);

inline Vec3 pd_torque(const QuadState& state, const PdGains& gains) {
  return pd_torque(state.rotation, euler_zyx(state.rotation), state.ang_vel, gains);
}

}  // namespace fqc
