// Exposure trajectories, virtual pose sampling, blur synthesis by averaging,
// and the pose-dependent fusion mask.
#pragma once

#include <atomic>
#include <functional>
#include <span>
#include <vector>

#include "avatar/articulation.hpp"
#include "avatar/image.hpp"
#include "avatar/tinynet.hpp"

namespace avatar {

enum class Interpolation { slerp, cubic_spline };

std::string to_string(Interpolation mode);
Interpolation interpolation_from_string(const std::string& s);

/// Learnable pose path across one frame's exposure, normalized to u ∈ [0, 1].
/// Slerp trajectories have two knots (start, end); cubic-spline trajectories
/// have four Bézier control knots.
struct ExposureTrajectory {
  Interpolation mode = Interpolation::slerp;
  std::vector<Pose> knots;

  /// All knots set to `pose`.
  static ExposureTrajectory from_pose(const Pose& pose, Interpolation mode = Interpolation::slerp);

  const Pose& start() const { return knots.front(); }
  const Pose& end() const { return knots.back(); }
  std::size_t joint_count() const { return knots.front().joints.size(); }

  std::size_t parameter_count() const;
  std::vector<double> flatten() const;
  void assign(std::span<const double> values);
  void normalize();

  /// Pose at normalized exposure time u.
  Pose sample(double u) const;
};

/// Counters incremented by the training-only blur machinery; inference code
/// paths must leave them untouched.
struct BlurInstrumentation {
  std::atomic<long> virtual_pose_samples{0};
  std::atomic<long> fusion_evaluations{0};
};
BlurInstrumentation& blur_instrumentation();

/// Pose at u for a two-pose Slerp trajectory: per-joint and root-orientation
/// Slerp, linear root translation.
Pose interpolate_pose(const Pose& start, const Pose& end, double u);

/// n poses at u = l / (n - 1). n = 1 returns the start pose only.
std::vector<Pose> sample_virtual_poses(const ExposureTrajectory& traj, int n);

/// Exposure times used by sample_virtual_poses.
std::vector<double> virtual_times(int n);

/// Per-pixel mean of RGB and alpha.
ImageBuffer synthesize_blur(std::span<const ImageBuffer> images);

inline constexpr int kPositionEncodingBands = 4;
inline constexpr int kPositionEncodingWidth = 4 * kPositionEncodingBands;

/// sin/cos of 2^b·π·p for the pixel center normalized to [0, 1], b = 0..3.
Eigen::VectorXd position_encoding(int x, int y, int width, int height);

struct FusionInputs {
  Eigen::VectorXd pose_latent;      // l_pose
  Eigen::VectorXd frame_embedding;  // l_j
  Eigen::VectorXd position;         // l_x
  Vec3 color = Vec3::Zero();        // l_rgb

  Eigen::VectorXd concat() const;
};

/// sigmoid(f_fuse([l_pose, l_j, l_x, l_rgb])).
double fusion_mask(const DenseNet& net, const FusionInputs& inputs);

/// Mask for every pixel of `sharp`, which supplies l_rgb.
struct FusionTape {
  NetTape net;
  std::vector<double> mask;
};
std::vector<double> fusion_mask_image(const DenseNet& net, const Eigen::VectorXd& pose_latent,
                                      const Eigen::VectorXd& frame_embedding,
                                      const ImageBuffer& sharp, FusionTape* tape = nullptr);

struct FusionGrads {
  Eigen::VectorXd d_pose_latent;
  Eigen::VectorXd d_frame_embedding;
  std::vector<Vec3> d_color;  // per pixel
};

/// Backward of fusion_mask_image given dL/dmask per pixel.
FusionGrads fusion_mask_image_backward(const DenseNet& net, const FusionTape& tape,
                                       std::span<const double> d_mask, int latent_width,
                                       int embedding_width, NetGrad& grad);

/// (1 - M) sharp + M blurred, per pixel, on RGB and alpha.
ImageBuffer blend(const ImageBuffer& sharp, const ImageBuffer& blurred, std::span<const double> mask);

/// Central finite differences of `loss` w.r.t. every trajectory scalar.
/// Quaternions are renormalized inside each probe.
std::vector<double> trajectory_gradients(
    const std::function<double(const ExposureTrajectory&)>& loss, const ExposureTrajectory& traj,
    double step = 1e-3);

}  // namespace avatar
