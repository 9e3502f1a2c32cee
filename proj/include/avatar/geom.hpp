// Quaternion, rigid-transform and covariance primitives.
#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>

namespace avatar {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Vec4 = Eigen::Vector4d;
using Mat2 = Eigen::Matrix2d;
using Mat3 = Eigen::Matrix3d;
using Mat4 = Eigen::Matrix4d;

/// Scalar-first quaternion. Unit quaternions represent rotations; [1,0,0,0] is
/// the identity.
struct Quaternion {
  double w = 1.0;
  double x = 0.0;
  double y = 0.0;
  double z = 0.0;

  static Quaternion identity() { return {}; }
  static Quaternion from_axis_angle(const Vec3& axis, double angle);
  static Quaternion from_vec(const Vec4& v) { return {v[0], v[1], v[2], v[3]}; }

  Vec4 vec() const { return {w, x, y, z}; }
  double norm() const;
  Quaternion normalized() const;
  Quaternion conjugate() const { return {w, -x, -y, -z}; }
  Quaternion operator-() const { return {-w, -x, -y, -z}; }

  bool operator==(const Quaternion&) const = default;
};

double dot(const Quaternion& a, const Quaternion& b);

/// Hamilton product a * b.
Quaternion quat_mul(const Quaternion& a, const Quaternion& b);

/// Rotation matrix of q / |q|.
Mat3 quat_to_rotmat(const Quaternion& q);

/// Gradient of a scalar loss w.r.t. the raw (unnormalized) quaternion given
/// dL/dR for R = quat_to_rotmat(q).
Vec4 quat_to_rotmat_backward(const Quaternion& q, const Mat3& d_rot);

/// Rotation angle between two unit quaternions, in [0, pi].
double rotation_angle_between(const Quaternion& a, const Quaternion& b);

/// Below this value of sin(phi), slerp falls back to normalized lerp.
inline constexpr double kSlerpLinearThreshold = 1e-6;

/// Endpoint-correct spherical interpolation along the shortest arc.
Quaternion slerp(const Quaternion& q0, const Quaternion& q1, double u);

/// 4x4 matrices M_L(a), M_R(b) such that vec(a*b) = M_L(a) vec(b) = M_R(b) vec(a).
Mat4 quat_left_matrix(const Quaternion& a);
Mat4 quat_right_matrix(const Quaternion& b);

struct RigidTransform {
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();

  static RigidTransform identity() { return {}; }
  static RigidTransform from_translation(const Vec3& t) { return {Mat3::Identity(), t}; }
  static RigidTransform from_rotation(const Quaternion& q) { return {quat_to_rotmat(q), Vec3::Zero()}; }

  /// this ∘ other
  RigidTransform compose(const RigidTransform& other) const;
  RigidTransform inverse() const;
};

Vec3 apply_rigid(const RigidTransform& transform, const Vec3& p);

/// Sigma = R S S^T R^T with S = diag(exp(log_scale)).
Mat3 build_covariance(const Vec3& log_scale, const Quaternion& q);

struct CovarianceGrad {
  Vec3 d_log_scale = Vec3::Zero();
  Vec4 d_rotation = Vec4::Zero();
};

/// Backward of build_covariance; q may be unnormalized.
CovarianceGrad build_covariance_backward(const Vec3& log_scale, const Quaternion& q,
                                         const Mat3& d_cov);

inline double sigmoid(double v) { return 1.0 / (1.0 + std::exp(-v)); }
inline double logit(double p) { return std::log(p / (1.0 - p)); }

}  // namespace avatar
