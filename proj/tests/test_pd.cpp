#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <numbers>

#include "fqc/pd.hpp"
#include "generators.hpp"

using namespace fqc;

TEST_CASE("default gains") {
  PdGains g;
  CHECK(g.kp_xy == -0.2);
  CHECK(g.kd_xy == -0.06);
  CHECK(g.kp_z == -0.033);
  CHECK(g.kd_z == -0.01);
  CHECK(g.kp_z == doctest::Approx(g.kp_xy / 6).epsilon(0.01));
  CHECK(g.kd_z == doctest::Approx(g.kd_xy / 6).epsilon(0.01));
}

TEST_CASE("hand examples") {
  PdGains g;
  const Mat3 I = Mat3::Identity();
  CHECK(pd_torque(I, Vec3::Zero(), Vec3::Zero(), g) == Vec3::Zero());
  CHECK((pd_torque(I, Vec3(0.1, 0, 0), Vec3::Zero(), g) - Vec3(-0.02, 0, 0)).norm() < 1e-15);
  CHECK((pd_torque(I, Vec3::Zero(), Vec3(0, 0, 1), g) - Vec3(0, 0, -0.01)).norm() < 1e-15);
}

TEST_CASE("euler_zyx recovers the angles it was built from") {
  Rng rng(21);
  for (int trial = 0; trial < 1000; ++trial) {
    const double roll = gen::uniform(rng, -3.1, 3.1);
    const double pitch = gen::uniform(rng, -1.5, 1.5);
    const double yaw = gen::uniform(rng, -3.1, 3.1);
    const Mat3 r = (Eigen::AngleAxisd(yaw, Vec3::UnitZ()) * Eigen::AngleAxisd(pitch, Vec3::UnitY()) *
                    Eigen::AngleAxisd(roll, Vec3::UnitX()))
                       .toRotationMatrix();
    const Vec3 e = euler_zyx(r);
    CHECK(std::abs(e.x() - roll) < 1e-9);
    CHECK(std::abs(e.y() - pitch) < 1e-9);
    CHECK(std::abs(e.z() - yaw) < 1e-9);
  }
}

TEST_CASE("per-axis formula against an element-wise oracle") {
  Rng rng(22);
  PdGains g;
  for (int trial = 0; trial < 500; ++trial) {
    const Mat3 r = gen::rotation(rng);
    const Vec3 q = gen::vec3(rng, 1.0);
    const Vec3 w = gen::vec3(rng, 5.0);
    const Vec3 t = pd_torque(r, q, w, g);
    const double kp[3] = {g.kp_xy, g.kp_xy, g.kp_z};
    const double kd[3] = {g.kd_xy, g.kd_xy, g.kd_z};
    for (int i = 0; i < 3; ++i) {
      double rq = 0, rw = 0;
      for (int k = 0; k < 3; ++k) {
        rq += r(k, i) * q(k);
        rw += r(k, i) * w(k);
      }
      CHECK(std::abs(t(i) - (kp[i] * rq + kd[i] * rw)) < 1e-14);
    }
  }
}

TEST_CASE("linear in (q, w) for fixed R") {
  Rng rng(23);
  PdGains g;
  for (int trial = 0; trial < 200; ++trial) {
    const Mat3 r = gen::rotation(rng);
    const Vec3 q = gen::vec3(rng, 1.0);
    const Vec3 w = gen::vec3(rng, 5.0);
    const double a = gen::uniform(rng, -3, 3);
    CHECK((pd_torque(r, a * q, a * w, g) - a * pd_torque(r, q, w, g)).norm() < 1e-13);
  }
}

TEST_CASE("state overload is zero at level hover") {
  QuadState s;
  s.position = Vec3(3, 4, 5);
  CHECK(pd_torque(s, PdGains{}) == Vec3::Zero());
}
