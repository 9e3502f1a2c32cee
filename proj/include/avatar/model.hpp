// The articulated avatar: canonical Gaussians, pose encoder, non-rigid,
// skinning, color and fusion networks, and per-frame embeddings. Provides the
// canonical -> observation forward pass and its exact backward.
#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <filesystem>
#include <nlohmann/json_fwd.hpp>
#include <vector>

#include "avatar/articulation.hpp"
#include "avatar/blur.hpp"
#include "avatar/render.hpp"
#include "avatar/scene.hpp"
#include "avatar/tinynet.hpp"

namespace avatar {

struct ModelConfig {
  int feature_width = kDefaultFeatureWidth;
  int latent_width = 16;
  int embedding_width = 16;
  std::vector<int> nonrigid_hidden{128, 128, 128};
  std::vector<int> skinning_hidden{128, 128, 128, 128};
  std::vector<int> color_hidden{64};
  std::vector<int> fusion_hidden{64, 64, 64, 64};
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

struct AvatarModel {
  ModelConfig config;
  KinematicChain chain;
  GaussianCloud cloud;
  DenseNet pose_encoder;  // 4K -> latent, one linear layer
  DenseNet nonrigid;      // [x_c ‖ latent] -> (Δx, Δs, Δr)
  DenseNet skinning;      // x_nr -> K logits
  DenseNet color;         // [feature ‖ view dir ‖ latent] -> RGB logits
  DenseNet fusion;        // [l_pose ‖ l_j ‖ l_x ‖ l_rgb] -> mask logit
  Eigen::MatrixXd frame_embeddings;  // embedding_width x frames

  static AvatarModel create(const KinematicChain& chain, const ModelConfig& config,
                            std::size_t gaussian_count, std::size_t frame_count,
                            std::uint64_t seed);

  std::size_t joint_count() const { return chain.size(); }
  int fusion_input_width() const {
    return config.latent_width + config.embedding_width + kPositionEncodingWidth + 3;
  }
};

/// Canonical -> non-rigid stage for one pose-conditioning latent; shared by
/// all virtual poses of a frame.
struct CanonicalDeformation {
  Eigen::VectorXd pose_input;
  Eigen::VectorXd latent;
  NetTape encoder_tape;
  NetTape nonrigid_tape;
  NetTape skinning_tape;
  std::vector<Vec3> positions;       // x_nr
  std::vector<Vec3> log_scales;      // log s_nr
  std::vector<Vec3> rotation_offsets;    // Δr
  std::vector<Quaternion> rotations;     // r_c ⊗ normalize([1, Δr]), not renormalized
  std::vector<Mat3> covariances;     // Σ_nr
  Eigen::MatrixXd weights;           // K x N skinning weights
};

CanonicalDeformation deform_canonical(const AvatarModel& model, const Pose& conditioning_pose);

/// One pose of the deformed cloud in observation space.
struct PosedCloud {
  std::vector<RigidTransform> transforms;  // per-joint skinning transforms
  ObservedGaussians observed;
  std::vector<Mat3> linear;       // blended 3x3 skinning part
  std::vector<Vec3> view_offset;  // x_o - camera center
  std::vector<Vec3> canonical_dir;  // linearᵀ · normalized view offset (not normalized)
  NetTape color_tape;
};

PosedCloud pose_cloud(const AvatarModel& model, const CanonicalDeformation& deformation,
                      const std::vector<RigidTransform>& transforms, const Camera& cam);

/// Sharp inference render at `pose`; never touches trajectory or fusion code.
ImageBuffer render_pose(const AvatarModel& model, const Pose& pose, const Camera& cam,
                        const RenderOptions& options = {});

struct ModelGrad {
  ModelGrad() = default;
  explicit ModelGrad(const AvatarModel& model);

  std::vector<Vec3> positions;
  std::vector<Vec3> log_scales;
  std::vector<Vec4> rotations;
  std::vector<double> opacity_logits;
  Eigen::MatrixXd features;
  NetGrad pose_encoder;
  NetGrad nonrigid;
  NetGrad skinning;
  NetGrad color;
  NetGrad fusion;
  Eigen::MatrixXd frame_embeddings;
};

/// Gradients w.r.t. the outputs of deform_canonical, accumulated over the
/// virtual poses of a frame.
struct DeformationGrad {
  explicit DeformationGrad(const AvatarModel& model);

  std::vector<Vec3> positions;
  std::vector<Mat3> covariances;
  Eigen::MatrixXd weights;
  Eigen::VectorXd latent;
};

struct TransformGrad {
  Mat3 rotation = Mat3::Zero();
  Vec3 translation = Vec3::Zero();
};

/// Upstream gradients on a PosedCloud's observed Gaussians.
struct ObservedGrad {
  explicit ObservedGrad(std::size_t n = 0)
      : positions(n, Vec3::Zero()), covariances(n, Mat3::Zero()), colors(n, Vec3::Zero()),
        opacities(n, 0.0) {}
  std::vector<Vec3> positions;
  std::vector<Mat3> covariances;
  std::vector<Vec3> colors;
  std::vector<double> opacities;

  void add(const RenderGrads& g);
};

/// Backward through pose_cloud. Accumulates into `deformation_grad` and
/// `grad` (color net, features, opacities) and returns dL/dT_k per joint.
std::vector<TransformGrad> pose_cloud_backward(const AvatarModel& model,
                                               const CanonicalDeformation& deformation,
                                               const PosedCloud& posed, const ObservedGrad& upstream,
                                               DeformationGrad& deformation_grad, ModelGrad& grad);

/// Backward through deform_canonical into the cloud and the encoder,
/// non-rigid and skinning networks.
void deform_canonical_backward(const AvatarModel& model, const CanonicalDeformation& deformation,
                               const DeformationGrad& upstream, ModelGrad& grad);

/// Chain rule from per-virtual-pose joint transform gradients to trajectory
/// parameters: finite differences of the linear surrogate
/// Σ_l Σ_k <T_k(traj.sample(u_l)), dL/dT_k^l>.
std::vector<double> trajectory_gradients_from_transforms(
    const KinematicChain& chain, const ExposureTrajectory& traj, const std::vector<double>& times,
    const std::vector<std::vector<TransformGrad>>& transform_grads, double step = 1e-4);

void to_json(nlohmann::json& j, const DenseNet& net);
void from_json(const nlohmann::json& j, DenseNet& net);

/// Model checkpoint: model, per-frame trajectories, and bookkeeping.
struct Checkpoint {
  AvatarModel model;
  std::vector<ExposureTrajectory> trajectories;
  std::int64_t iteration = 0;
};

inline constexpr int kCheckpointFormatVersion = 1;
void write_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
Checkpoint read_checkpoint(const std::filesystem::path& path);

}  // namespace avatar
