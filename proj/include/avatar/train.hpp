// Joint optimization of the avatar, per-frame exposure trajectories and the
// fusion network from blurred frames, plus evaluation.
#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <nlohmann/json_fwd.hpp>
#include <string>
#include <vector>

#include "avatar/blur.hpp"
#include "avatar/image.hpp"
#include "avatar/model.hpp"
#include "avatar/synthdata.hpp"

namespace avatar {

struct LossWeights {
  double percept = 0.01;  // published weight; the perceptual term is not evaluated
  double mask = 0.1;
  double skin_start = 10.0;  // λ3 decays exponentially to skin_end
  double skin_end = 0.1;
  double isopos = 1.0;
  double isocov = 100.0;

  double skin_at(std::int64_t iteration, std::int64_t total) const;
};

struct TrainConfig {
  std::int64_t iterations = 15000;
  std::int64_t trajectory_start = 3000;
  std::int64_t fusion_start = 7000;
  int virtual_poses = 5;
  bool motion_model = true;
  bool fusion = true;
  Interpolation interpolation = Interpolation::slerp;

  LossWeights weights;
  int isometric_neighbors = 5;

  std::int64_t densify_from = 500;
  std::int64_t densify_until = 10000;
  std::int64_t densify_interval = 500;
  DensifyConfig densify;

  // Position learning rates are multiplied by the chain diameter.
  double lr_position_init = 1.6e-4;
  double lr_position_final = 1.6e-6;
  double lr_feature = 2.5e-3;
  double lr_opacity = 0.05;
  double lr_scaling = 5e-3;
  double lr_rotation = 1e-3;
  double lr_network = 1e-3;
  double lr_embedding = 1e-3;
  double lr_trajectory = 1e-4;
  /// Rotation (radians) of the random offset that separates trajectory
  /// endpoints when the trajectory stage starts.
  double trajectory_init_spread = 0.01;
  double trajectory_fd_step = 1e-4;

  std::size_t gaussians = 1000;
  ModelConfig model;
  std::uint64_t seed = 0;
  Vec3 background = Vec3::Zero();
  std::int64_t checkpoint_every = 1000;

  /// Throws std::invalid_argument for inconsistent settings.
  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

// Losses. Each returns the value and accumulates dL/dinput scaled by `scale`.

/// Mean absolute RGB error.
double loss_rgb(const ImageBuffer& prediction, const ImageBuffer& target, ImageBuffer* grad = nullptr,
                double scale = 1.0);
/// Mean absolute difference between the alpha channel and a {0, 1} mask.
double loss_mask(const ImageBuffer& prediction, std::span<const double> mask, ImageBuffer* grad = nullptr,
                 double scale = 1.0);
/// Mean squared difference between predicted and prior weights (K x N).
double loss_skin(const Eigen::MatrixXd& predicted, const Eigen::MatrixXd& prior,
                 Eigen::MatrixXd* grad = nullptr, double scale = 1.0);

struct IsometricEdge {
  std::size_t i, j;
};
std::vector<IsometricEdge> isometric_edges(const std::vector<Vec3>& positions, int k);

struct IsometricLoss {
  double position = 0.0;    // mean (‖x_o,i - x_o,j‖ - ‖x_c,i - x_c,j‖)²
  double covariance = 0.0;  // mean ‖(Σ_o,i - Σ_o,j) - (Σ_c,i - Σ_c,j)‖²_F
};
struct IsometricGrad {
  std::vector<Vec3> canonical_positions, posed_positions;
  std::vector<Mat3> canonical_covariances, posed_covariances;
};
/// Gradients are scaled by `position_scale` and `covariance_scale` respectively.
IsometricLoss loss_isometric(const std::vector<Vec3>& canonical_positions,
                             const std::vector<Mat3>& canonical_covariances,
                             const std::vector<Vec3>& posed_positions,
                             const std::vector<Mat3>& posed_covariances,
                             const std::vector<IsometricEdge>& edges, IsometricGrad* grad = nullptr,
                             double position_scale = 1.0, double covariance_scale = 1.0);

struct LossParts {
  double rgb = 0.0;
  double mask = 0.0;
  double skin = 0.0;
  double isopos = 0.0;
  double isocov = 0.0;
  double skin_weight = 0.0;
};
double total_loss(const LossParts& parts, const LossWeights& weights);

enum class Stage { warmup, trajectory, fusion };
std::string to_string(Stage stage);

/// One frame of the training objective. Warmup renders the input pose only;
/// the trajectory stage averages `virtual_poses` renders along `trajectory`;
/// the fusion stage blends that average with the render at u = 0.5.
struct FrameSpec {
  const Pose* input_pose = nullptr;
  const ExposureTrajectory* trajectory = nullptr;  // required unless warmup
  std::size_t frame_index = 0;                     // column of the frame embedding
  const Camera* camera = nullptr;
  Stage stage = Stage::warmup;
  int virtual_poses = 5;
  RenderOptions options;
};

/// Image term of the objective: returns its value and accumulates dL/doutput.
using ImageLoss = std::function<double(const ImageBuffer& output, ImageBuffer& d_output)>;

struct Regularization {
  const Eigen::MatrixXd* skin_prior = nullptr;  // K x N; skipped when null
  double skin_weight = 0.0;
  const std::vector<IsometricEdge>* edges = nullptr;  // skipped when null
  double isopos_weight = 0.0;
  double isocov_weight = 0.0;
};

struct FrameObjective {
  ImageBuffer output;
  double image_loss = 0.0;
  double skin = 0.0;
  double isopos = 0.0;
  double isocov = 0.0;
  double total = 0.0;
  std::vector<double> trajectory_grad;  // empty in warmup
  std::vector<double> view_gradient;    // per Gaussian, |dL/dmean2d| in NDC, summed over renders
  std::vector<int> observations;        // per Gaussian, renders it was visible in
};

/// Forward pass of one frame's objective and, when `grad` is given, its
/// gradient w.r.t. every model parameter (accumulated into `grad`) and the
/// trajectory.
FrameObjective frame_objective(const AvatarModel& model, const FrameSpec& spec, const ImageLoss& image_loss,
                               const Regularization& reg, ModelGrad* grad = nullptr,
                               double trajectory_fd_step = 1e-4);

struct LogRecord {
  std::int64_t iteration = 0;
  std::size_t frame = 0;
  Stage stage = Stage::warmup;
  LossParts parts;
  double total = 0.0;
  std::size_t gaussians = 0;
};

struct TrainState {
  Checkpoint checkpoint;
  std::vector<LogRecord> log;
};

struct TrainCallbacks {
  std::function<void(const LogRecord&)> on_iteration;
};

/// Trains from scratch. With a non-empty `out_dir`, writes loss.csv,
/// config.json and periodic checkpoints there. Throws std::runtime_error on a
/// non-finite loss after writing a diagnostic dump.
TrainState train(const Dataset& dataset, const TrainConfig& config,
                 const std::filesystem::path& out_dir = {}, const TrainCallbacks& callbacks = {});

void write_loss_log(const std::filesystem::path& path, const std::vector<LogRecord>& log);

struct FrameScore {
  double psnr = 0.0;
  double ssim = 0.0;
};
struct EvalReport {
  std::vector<FrameScore> train_view;  // against sharp center frames
  std::vector<FrameScore> eval_view;   // against held-out camera frames
  double mean_psnr = 0.0;
  double mean_ssim = 0.0;
  double eval_mean_psnr = 0.0;
  double eval_mean_ssim = 0.0;
};

using PoseRenderer = std::function<ImageBuffer(const Pose&, const Camera&)>;

/// Renders every frame at its input pose and scores it against the sharp
/// references. Throws std::logic_error if rendering touched the trajectory or
/// fusion machinery.
EvalReport evaluate(const PoseRenderer& renderer, const Dataset& dataset, bool use_input_pose = true);
EvalReport evaluate(const AvatarModel& model, const Dataset& dataset);

void to_json(nlohmann::json& j, const EvalReport& r);

}  // namespace avatar
