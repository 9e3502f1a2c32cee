// Ground-truth avatar scenes, dense motion scripts, and the blur oracle that
// averages subframe renders into motion-blurred training frames.
#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "avatar/articulation.hpp"
#include "avatar/blur.hpp"
#include "avatar/image.hpp"
#include "avatar/render.hpp"
#include "avatar/scene.hpp"

namespace avatar {

struct SceneConfig {
  std::size_t gaussians = 1500;
  int width = 64;
  int height = 64;
  double focal = 120.0;
  double camera_distance = 3.0;
  double eval_camera_angle_deg = 35.0;
  int eval_cameras = 1;
};

struct GroundTruthScene {
  KinematicChain chain;
  GaussianCloud cloud;       // feature width 0; colors are stored explicitly
  std::vector<Vec3> colors;  // per Gaussian
  std::vector<int> bones;    // bone each Gaussian is rigidly attached to
  Camera train_camera;
  std::vector<Camera> eval_cameras;
};

GroundTruthScene make_scene(std::uint64_t seed, const SceneConfig& config = {});

/// Train camera followed by the eval cameras of `config`.
std::vector<Camera> scene_cameras(const SceneConfig& config);

/// Observation-space Gaussians of the ground-truth scene at `pose`.
ObservedGaussians pose_ground_truth(const GroundTruthScene& scene, const Pose& pose);
ImageBuffer render_ground_truth(const GroundTruthScene& scene, const Pose& pose, const Camera& cam);

struct MotionConfig {
  /// Peak joint-angle amplitude (radians) per joint, before velocity capping.
  std::vector<double> joint_amplitude{0.12, 0.38, 1.05, 1.05, 1.05, 1.05};
  double root_yaw_amplitude = 0.08;
  double root_sway = 0.03;
  /// Base angular frequency in radians per subframe.
  double frequency = 0.06;
  /// Subframes between consecutive output-frame centers.
  int frame_stride = 16;
  /// Upper bound on any joint's rotation between consecutive subframes.
  double max_subframe_rotation = 0.08;
};

struct MotionScript {
  int blur_size = 1;                        // m, odd
  std::vector<std::vector<Pose>> subframes;  // per frame, m poses in time order

  std::size_t frame_count() const { return subframes.size(); }
  const Pose& center(std::size_t frame) const {
    return subframes[frame][static_cast<std::size_t>(blur_size / 2)];
  }
};

/// Band-limited random joint motion sampled at m subframes per frame. Throws
/// std::invalid_argument for an even m or frames < 1.
MotionScript make_motion(std::uint64_t seed, int frames, int blur_size,
                         std::size_t joint_count = 6, const MotionConfig& config = {});

/// Largest rotation of any joint (or the root) between consecutive subframes.
double max_subframe_rotation(const MotionScript& script);

struct OracleFrame {
  ImageBuffer blurred;
  ImageBuffer sharp;          // center subframe render
  std::vector<double> mask;   // 1 where the center render's alpha > 0.5
};

/// Renders every subframe pose of `frame` and averages them.
OracleFrame blur_oracle_frame(const GroundTruthScene& scene, const MotionScript& script,
                              std::size_t frame, const Camera& cam);

struct DatasetFrame {
  Pose input_pose;   // center pose plus estimator noise
  Pose center_pose;  // ground truth
  ImageBuffer blurred;
  ImageBuffer sharp;
  std::vector<double> mask;
  std::vector<ImageBuffer> eval_sharp;  // one per eval camera
};

struct Dataset {
  KinematicChain chain;
  Camera train_camera;
  std::vector<Camera> eval_cameras;
  int blur_size = 1;
  std::uint64_t seed = 0;
  double pose_noise = 0.0;
  SceneConfig scene;  // regenerates the ground-truth scene together with `seed`
  std::vector<DatasetFrame> frames;
};

struct SynthConfig {
  std::uint64_t seed = 1;
  int frames = 60;
  int blur_size = 17;
  double pose_noise = 0.01;
  SceneConfig scene;
  MotionConfig motion;
};

/// Blur oracle over all frames: blurred and sharp center frames from the
/// train camera, sharp center frames from the eval cameras, masks and noisy
/// input poses. Images are rounded to float precision so they survive the
/// PFM round trip exactly.
Dataset blur_oracle(const GroundTruthScene& scene, const MotionScript& script, double pose_noise,
                    std::uint64_t noise_seed);

Dataset synthesize_dataset(const SynthConfig& config);

void write_dataset(const std::filesystem::path& dir, const Dataset& dataset);
Dataset read_dataset(const std::filesystem::path& dir);

}  // namespace avatar
