#include <Eigen/Eigenvalues>
#include <algorithm>

#include "avatar/geom.hpp"
#include "test_util.hpp"

using namespace avatar;
using namespace avatar::test;

TEST_CASE("quaternion product with identity") {
  std::mt19937_64 rng(7);
  const Quaternion q = random_unit_quaternion(rng);
  CHECK(quat_mul(q, Quaternion::identity()) == q);
  CHECK(quat_mul(Quaternion::identity(), q) == q);
}

TEST_CASE("quaternion product matches rotation matrix product") {
  const Quaternion a = Quaternion::from_axis_angle(Vec3::UnitZ(), kPi / 2);
  CHECK(max_abs_diff(quat_to_rotmat(quat_mul(a, a)), rot_z(kPi / 2) * rot_z(kPi / 2)) < 1e-12);
  CHECK(max_abs_diff(quat_to_rotmat(quat_mul(a, a)), rot_z(kPi)) < 1e-12);
  std::mt19937_64 rng(3);
  for (int i = 0; i < 20; ++i) {
    const Quaternion p = random_unit_quaternion(rng), q = random_unit_quaternion(rng);
    CHECK(max_abs_diff(quat_to_rotmat(quat_mul(p, q)), quat_to_rotmat(p) * quat_to_rotmat(q)) < 1e-12);
  }
}

TEST_CASE("left and right product matrices") {
  std::mt19937_64 rng(5);
  const Quaternion a = random_unit_quaternion(rng), b = random_unit_quaternion(rng);
  const Vec4 ab = quat_mul(a, b).vec();
  CHECK((quat_left_matrix(a) * b.vec() - ab).norm() < 1e-14);
  CHECK((quat_right_matrix(b) * a.vec() - ab).norm() < 1e-14);
}

TEST_CASE("slerp endpoints and midpoint") {
  const Quaternion q0 = Quaternion::identity();
  const Quaternion q1 = Quaternion::from_axis_angle(Vec3::UnitZ(), kPi / 2);
  CHECK(slerp(q0, q1, 0.0) == q0);
  CHECK(slerp(q0, q1, 1.0) == q1);
  const Quaternion mid = slerp(q0, q1, 0.5);
  const Eigen::Quaterniond oracle(Eigen::AngleAxisd(kPi / 4, Vec3::UnitZ()));
  CHECK(std::abs(mid.w - oracle.w()) < 1e-9);
  CHECK(std::abs(mid.z - oracle.z()) < 1e-9);
  CHECK(std::abs(mid.x) < 1e-15);
}

TEST_CASE("slerp takes the shortest arc") {
  const Quaternion q0 = Quaternion::identity();
  const Quaternion q1 = -Quaternion::from_axis_angle(Vec3::UnitY(), 0.4);
  const Quaternion mid = slerp(q0, q1, 0.5);
  CHECK(rotation_angle_between(mid, q0) == doctest::Approx(0.2).epsilon(1e-12));
}

TEST_CASE("slerp falls back to normalized lerp for nearly equal rotations") {
  const Quaternion q0 = Quaternion::from_axis_angle(Vec3::UnitX(), 0.3);
  const Quaternion q1 = quat_mul(q0, Quaternion::from_axis_angle(Vec3::UnitZ(), 1e-7));
  const Quaternion s = slerp(q0, q1, 0.25);
  const Vec4 lerp = (0.75 * q0.vec() + 0.25 * q1.vec()).normalized();
  CHECK((s.vec() - lerp).norm() < 1e-15);
}

TEST_CASE("slerp is continuous across the fallback switch") {
  const double phi_switch = std::asin(kSlerpLinearThreshold);
  const Quaternion q0 = Quaternion::from_axis_angle(Vec3(1, 2, 3).normalized(), 0.7);
  for (double u : {0.1, 0.5, 0.9}) {
    // quaternion half-angle phi corresponds to rotation angle 2 phi
    const Quaternion below = quat_mul(q0, Quaternion::from_axis_angle(Vec3::UnitZ(), 2 * phi_switch * 0.999));
    const Quaternion above = quat_mul(q0, Quaternion::from_axis_angle(Vec3::UnitZ(), 2 * phi_switch * 1.001));
    CHECK(max_abs_diff(slerp(q0, below, u), slerp(q0, above, u)) < 1e-5);
  }
}

TEST_CASE("covariance from scale and rotation") {
  CHECK(max_abs_diff(build_covariance(Vec3::Zero(), Quaternion::identity()), Mat3::Identity()) == 0.0);
  const Mat3 s = build_covariance(Vec3(std::log(2.0), 0, 0), Quaternion::identity());
  CHECK(max_abs_diff(s, Vec3(4, 1, 1).asDiagonal().toDenseMatrix()) < 1e-15);

  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (int i = 0; i < 20; ++i) {
    const Vec3 ls(u(rng), u(rng), u(rng));
    const Mat3 cov = build_covariance(ls, random_unit_quaternion(rng));
    Eigen::SelfAdjointEigenSolver<Mat3> es(cov);
    std::vector<double> got(es.eigenvalues().data(), es.eigenvalues().data() + 3);
    std::vector<double> want{std::exp(2 * ls[0]), std::exp(2 * ls[1]), std::exp(2 * ls[2])};
    std::sort(got.begin(), got.end());
    std::sort(want.begin(), want.end());
    for (int k = 0; k < 3; ++k) CHECK(got[k] == doctest::Approx(want[k]).epsilon(1e-12));
  }
}

TEST_CASE("rigid transforms") {
  const Vec3 p(0.3, -1.2, 2.0);
  CHECK(apply_rigid(RigidTransform::identity(), p) == p);
  const Vec3 t(1, 2, 3);
  CHECK((apply_rigid(RigidTransform::from_translation(t), p) - (p + t)).norm() == 0.0);
  std::mt19937_64 rng(13);
  const RigidTransform a{quat_to_rotmat(random_unit_quaternion(rng)), Vec3(1, 0, -1)};
  CHECK((apply_rigid(a.inverse(), apply_rigid(a, p)) - p).norm() < 1e-14);
  const RigidTransform b{quat_to_rotmat(random_unit_quaternion(rng)), Vec3(0, 2, 1)};
  CHECK((apply_rigid(a.compose(b), p) - apply_rigid(a, apply_rigid(b, p))).norm() < 1e-14);
}

TEST_CASE("covariance backward matches finite differences") {
  std::mt19937_64 rng(17);
  const Vec3 ls(0.1, -0.3, 0.2);
  const Quaternion q{0.9, 0.2, -0.3, 0.1};  // unnormalized on purpose
  Mat3 w;
  for (int i = 0; i < 9; ++i) w.data()[i] = std::normal_distribution<double>(0, 1)(rng);
  auto f = [&](const Vec3& l, const Quaternion& r) { return (w.array() * build_covariance(l, r).array()).sum(); };
  const CovarianceGrad g = build_covariance_backward(ls, q, w);
  const double h = 1e-6;
  for (int k = 0; k < 3; ++k) {
    Vec3 lp = ls, lm = ls;
    lp[k] += h;
    lm[k] -= h;
    CHECK(g.d_log_scale[k] == doctest::Approx((f(lp, q) - f(lm, q)) / (2 * h)).epsilon(1e-7));
  }
  for (int k = 0; k < 4; ++k) {
    Vec4 vp = q.vec(), vm = q.vec();
    vp[k] += h;
    vm[k] -= h;
    const double num = (f(ls, Quaternion::from_vec(vp)) - f(ls, Quaternion::from_vec(vm))) / (2 * h);
    CHECK(g.d_rotation[k] == doctest::Approx(num).epsilon(1e-6).scale(1.0));
  }
}
