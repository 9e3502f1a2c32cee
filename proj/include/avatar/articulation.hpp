// Kinematic chain, forward kinematics, skinning and Gaussian deformation from
// canonical space to observation space.
#pragma once

#include <Eigen/Core>
#include <filesystem>
#include <nlohmann/json_fwd.hpp>
#include <vector>

#include "avatar/geom.hpp"
#include "avatar/tinynet.hpp"

namespace avatar {

/// A capsule is the set of points within `radius` of the segment [a, b].
struct Capsule {
  Vec3 a;
  Vec3 b;
  double radius;

  double area() const;
  double distance_to_axis(const Vec3& p) const;
};

/// Joint tree with rest offsets. Joint 0 is the root; parents[0] == -1 and
/// every other joint's parent has a smaller index. Bone k is the capsule from
/// joint k's rest position to that position plus tips[k].
struct KinematicChain {
  std::vector<int> parents;
  std::vector<Vec3> offsets;
  std::vector<Vec3> tips;
  std::vector<double> radii;

  std::size_t size() const { return parents.size(); }

  /// Throws std::invalid_argument when the parent graph is not a tree rooted
  /// at joint 0, sizes disagree, or radii are not positive.
  void validate() const;

  std::vector<Vec3> rest_joint_positions() const;
  Capsule bone(std::size_t k) const;
  std::vector<Capsule> bones() const;
  double diameter() const;

  /// Torso root, head, and two 2-bone arms (K = 6).
  static KinematicChain default_humanoid();
};

/// Root translation + root orientation (about the root joint) + local joint
/// rotations relative to the parent.
struct Pose {
  Vec3 root_translation = Vec3::Zero();
  Quaternion root_orientation;
  std::vector<Quaternion> joints;

  static Pose rest(std::size_t joint_count);

  /// [t(3), root q(4), joint q(4K)], scalar-first quaternions.
  static std::size_t flat_size(std::size_t joint_count) { return 7 + 4 * joint_count; }
  std::vector<double> flatten() const;
  static Pose unflatten(std::span<const double> values, std::size_t joint_count);

  /// Flattened local joint quaternions (4K), the pose-encoder input.
  Eigen::VectorXd joint_feature() const;

  void normalize();
  bool operator==(const Pose&) const = default;
};

/// Skinning transforms T_k = world_k ∘ rest_k⁻¹ for every joint.
std::vector<RigidTransform> forward_kinematics(const KinematicChain& chain, const Pose& pose);

/// World-space joint positions for a pose.
std::vector<Vec3> posed_joint_positions(const KinematicChain& chain, const Pose& pose);

using SkinningWeights = Eigen::VectorXd;

/// softmax over -d_k^2 / (2 r_k^2), d_k the distance to bone k's axis and r_k
/// its capsule radius.
SkinningWeights prior_skin_weights(const KinematicChain& chain, const Vec3& point);

/// Softmax of the skinning network output at `point`.
SkinningWeights skinning_weights_learned(const DenseNet& net, const Vec3& point);

/// Column-wise softmax.
Eigen::MatrixXd softmax_columns(const Eigen::MatrixXd& logits);
/// Backward of softmax_columns given its output and dL/doutput.
Eigen::MatrixXd softmax_columns_backward(const Eigen::MatrixXd& weights,
                                         const Eigen::MatrixXd& d_weights);

struct NonrigidOffsets {
  Vec3 d_position = Vec3::Zero();
  Vec3 d_log_scale = Vec3::Zero();
  Vec3 d_rotation = Vec3::Zero();
};

/// Runs the non-rigid network on [x_c ‖ latent] and splits the 9 outputs.
NonrigidOffsets nonrigid_deform(const DenseNet& net, const Vec3& canonical_position,
                                const Eigen::VectorXd& latent);

struct Gaussian {
  Vec3 position = Vec3::Zero();
  Vec3 log_scale = Vec3::Zero();
  Quaternion rotation;
};

/// x + dx, log s + ds, r ⊗ normalize([1, dr]).
Gaussian apply_nonrigid(const Gaussian& g, const NonrigidOffsets& offsets);

/// Quaternion normalize([1, dr]).
Quaternion rotation_offset(const Vec3& d_rotation);

/// Gaussian after linear blend skinning. `linear` is the blended 3x3 part of
/// the skinning transform and need not be orthonormal.
struct PosedGaussian {
  Vec3 position;
  Mat3 linear;
  Vec3 translation;
  Mat3 rotation;    // linear * R_nr
  Mat3 covariance;  // linear * Σ_nr * linearᵀ
};

/// Blended transform Σ_k w_k T_k, as (linear, translation).
RigidTransform blend_transforms(const SkinningWeights& weights,
                                const std::vector<RigidTransform>& transforms);

PosedGaussian apply_rigid_lbs(const Gaussian& g, const SkinningWeights& weights,
                              const std::vector<RigidTransform>& transforms);

void to_json(nlohmann::json& j, const KinematicChain& chain);
void from_json(const nlohmann::json& j, KinematicChain& chain);
void to_json(nlohmann::json& j, const Pose& pose);
void from_json(const nlohmann::json& j, Pose& pose);

KinematicChain read_chain(const std::filesystem::path& path);
void write_chain(const std::filesystem::path& path, const KinematicChain& chain);

/// Pose sequence file: {"poses": [pose, ...]}.
std::vector<Pose> read_pose_sequence(const std::filesystem::path& path);
void write_pose_sequence(const std::filesystem::path& path, const std::vector<Pose>& poses);

}  // namespace avatar
