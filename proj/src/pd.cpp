#include "fqc/pd.hpp"

#include <algorithm>
#include <cmath>

namespace fqc {

Vec3 euler_zyx(const Mat3& r) {
  const double roll = std::atan2(r(2, 1), r(2, 2));
  const double pitch = std::asin(std::clamp(-r(2, 0), -1.0, 1.0));
  const double yaw = std::atan2(r(1, 0), r(0, 0));
  return {roll, pitch, yaw};
}

Vec3 pd_torque(const Mat3& rotation, const Vec3& euler, const Vec3& ang_vel, const PdGains& gains) {
  const Vec3 q_body = rotation.transpose() * euler;
  const Vec3 w_body = rotation.transpose() * ang_vel;
  const Vec3 kp(gains.kp_xy, gains.kp_xy, gains.kp_z);
  const Vec3 kd(gains.kd_xy, gains.kd_xy, gains.kd_z);
  return kp.cwiseProduct(q_body) + kd.cwiseProduct(w_body);
}

}  // namespace fqc
