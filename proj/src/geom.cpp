#include "avatar/geom.hpp"

#include <algorithm>
#include <cmath>

namespace avatar {

Quaternion Quaternion::from_axis_angle(const Vec3& axis, double angle) {
  const Vec3 a = axis.normalized();
  const double s = std::sin(0.5 * angle);
  return {std::cos(0.5 * angle), a.x() * s, a.y() * s, a.z() * s};
}

double Quaternion::norm() const { return std::sqrt(w * w + x * x + y * y + z * z); }

Quaternion Quaternion::normalized() const {
  const double n = norm();
  return {w / n, x / n, y / n, z / n};
}

double dot(const Quaternion& a, const Quaternion& b) {
  return a.w * b.w + a.x * b.x + a.y * b.y + a.z * b.z;
}

Quaternion quat_mul(const Quaternion& a, const Quaternion& b) {
  return {a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
          a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
          a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
          a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w};
}

Mat4 quat_left_matrix(const Quaternion& a) {
  Mat4 m;
  m << a.w, -a.x, -a.y, -a.z,
       a.x,  a.w, -a.z,  a.y,
       a.y,  a.z,  a.w, -a.x,
       a.z, -a.y,  a.x,  a.w;
  return m;
}

Mat4 quat_right_matrix(const Quaternion& b) {
  Mat4 m;
  m << b.w, -b.x, -b.y, -b.z,
       b.x,  b.w,  b.z, -b.y,
       b.y, -b.z,  b.w,  b.x,
       b.z,  b.y, -b.x,  b.w;
  return m;
}

namespace {

Mat3 unit_quat_to_rotmat(double w, double x, double y, double z) {
  Mat3 r;
  r << 1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
       2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
       2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y);
  return r;
}

}  // namespace

Mat3 quat_to_rotmat(const Quaternion& q) {
  const Quaternion u = q.normalized();
  return unit_quat_to_rotmat(u.w, u.x, u.y, u.z);
}

Vec4 quat_to_rotmat_backward(const Quaternion& q, const Mat3& g) {
  const double n = q.norm();
  const double w = q.w / n, x = q.x / n, y = q.y / n, z = q.z / n;
  Vec4 du;
  du[0] = 2 * (-z * g(0, 1) + y * g(0, 2) + z * g(1, 0) - x * g(1, 2) - y * g(2, 0) + x * g(2, 1));
  du[1] = 2 * (y * g(0, 1) + z * g(0, 2) + y * g(1, 0) - 2 * x * g(1, 1) - w * g(1, 2) +
               z * g(2, 0) + w * g(2, 1) - 2 * x * g(2, 2));
  du[2] = 2 * (-2 * y * g(0, 0) + x * g(0, 1) + w * g(0, 2) + x * g(1, 0) + z * g(1, 2) -
               w * g(2, 0) + z * g(2, 1) - 2 * y * g(2, 2));
  du[3] = 2 * (-2 * z * g(0, 0) - w * g(0, 1) + x * g(0, 2) + w * g(1, 0) - 2 * z * g(1, 1) +
               y * g(1, 2) + x * g(2, 0) + y * g(2, 1));
  // Project through q -> q / |q|.
  const Vec4 u(w, x, y, z);
  return (du - u * u.dot(du)) / n;
}

double rotation_angle_between(const Quaternion& a, const Quaternion& b) {
  const double d = std::abs(dot(a.normalized(), b.normalized()));
  return 2.0 * std::acos(std::clamp(d, -1.0, 1.0));
}

Quaternion slerp(const Quaternion& q0, const Quaternion& q1_in, double u) {
  if (u == 0.0 || q0 == q1_in) return q0;
  if (u == 1.0) return q1_in;
  Quaternion q1 = q1_in;
  double cos_phi = dot(q0, q1);
  if (cos_phi < 0.0) {
    q1 = -q1;
    cos_phi = -cos_phi;
  }
  const double phi = std::acos(std::clamp(cos_phi, -1.0, 1.0));
  const double sin_phi = std::sin(phi);
  if (sin_phi < kSlerpLinearThreshold) {
    const Vec4 v = (1.0 - u) * q0.vec() + u * q1.vec();
    return Quaternion::from_vec(v.normalized());
  }
  const double a = std::sin((1.0 - u) * phi) / sin_phi;
  const double b = std::sin(u * phi) / sin_phi;
  return Quaternion::from_vec(a * q0.vec() + b * q1.vec());
}

RigidTransform RigidTransform::compose(const RigidTransform& other) const {
  return {rotation * other.rotation, rotation * other.translation + translation};
}

RigidTransform RigidTransform::inverse() const {
  const Mat3 rt = rotation.transpose();
  return {rt, -(rt * translation)};
}

Vec3 apply_rigid(const RigidTransform& transform, const Vec3& p) {
  return transform.rotation * p + transform.translation;
}

Mat3 build_covariance(const Vec3& log_scale, const Quaternion& q) {
  const Mat3 r = quat_to_rotmat(q);
  const Vec3 s2 = (2.0 * log_scale).array().exp();
  return r * s2.asDiagonal() * r.transpose();
}

CovarianceGrad build_covariance_backward(const Vec3& log_scale, const Quaternion& q,
                                         const Mat3& d_cov) {
  const Mat3 r = quat_to_rotmat(q);
  const Vec3 s2 = (2.0 * log_scale).array().exp();
  const Mat3 g = 0.5 * (d_cov + d_cov.transpose());
  CovarianceGrad out;
  const Mat3 rgr = r.transpose() * g * r;
  for (int k = 0; k < 3; ++k) out.d_log_scale[k] = 2.0 * s2[k] * rgr(k, k);
  const Mat3 d_rot = 2.0 * g * r * s2.asDiagonal();
  out.d_rotation = quat_to_rotmat_backward(q, d_rot);
  return out;
}

}  // namespace avatar
