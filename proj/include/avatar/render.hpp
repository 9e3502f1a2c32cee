// Pinhole projection, EWA splat formation, depth-sorted alpha compositing and
// the analytic backward pass.
//
// Pixel (x, y) is sampled at image-plane coordinates (x, y). Camera space is
// x right, y down, z forward.
#pragma once

#include <optional>
#include <span>
#include <vector>

#include "avatar/geom.hpp"
#include "avatar/image.hpp"
#include "avatar/tinynet.hpp"

namespace avatar {

inline constexpr double kNearPlane = 0.01;
inline constexpr double kLowPassDilation = 0.3;
inline constexpr double kMaxAlpha = 0.99;
inline constexpr double kMinTransmittance = 1e-4;
inline constexpr double kMinConicDeterminant = 1e-12;
/// Contributions with 0.5 dᵀΣ'⁻¹d above this are skipped (6σ footprint).
inline constexpr double kMaxGaussianPower = 18.0;
inline constexpr int kTileSize = 16;

struct Camera {
  double fx = 1.0;
  double fy = 1.0;
  double cx = 0.0;
  double cy = 0.0;
  RigidTransform world_to_camera;
  int width = 1;
  int height = 1;

  void validate() const;
  Vec3 center() const;

  static Camera look_at(const Vec3& eye, const Vec3& target, const Vec3& up, double focal,
                        int width, int height);
};

struct Splat2D {
  Vec2 mean;
  Mat2 cov;    // Σ' including the low-pass dilation
  Mat2 conic;  // Σ'⁻¹
  double depth = 0.0;
  int index = 0;  // source Gaussian
  Vec3 camera_point;
  Eigen::Matrix<double, 2, 3> jacobian;
  double radius = 0.0;  // footprint radius in pixels
};

/// Returns std::nullopt when the Gaussian is behind the near plane or its
/// projected covariance is singular.
std::optional<Splat2D> project_gaussian(const Camera& cam, const Vec3& position,
                                        const Mat3& covariance, int index = 0);

/// Observation-space Gaussians ready for rasterization.
struct ObservedGaussians {
  std::vector<Vec3> positions;
  std::vector<Mat3> covariances;
  std::vector<Vec3> colors;
  std::vector<double> opacities;  // in (0, 1)

  std::size_t size() const { return positions.size(); }
};

struct RenderOptions {
  Vec3 background = Vec3::Zero();
  bool tile_binning = true;
  bool early_termination = true;
};

/// Everything render_backward needs to recompute per-pixel contributions.
struct RenderTape {
  int width = 0;
  int height = 0;
  int tile_size = kTileSize;
  int tiles_x = 0;
  RenderOptions options;
  Mat3 camera_rotation = Mat3::Identity();
  double fx = 1.0;
  double fy = 1.0;
  std::size_t gaussian_count = 0;
  std::vector<Splat2D> splats;               // sorted by (depth, index)
  std::vector<Mat3> covariances;             // Σ_o per splat
  std::vector<Vec3> colors;                  // per splat
  std::vector<double> opacities;             // per splat
  std::vector<std::vector<int>> tile_lists;  // splat indices, front to back
  std::vector<int> contributors;             // per pixel: tile-list entries visited
  std::vector<double> final_transmittance;   // per pixel
};

/// Front-to-back compositing of depth-sorted splats. `colors` and `opacities`
/// are indexed by splat position.
ImageBuffer composite(std::span<const Splat2D> sorted, std::span<const Vec3> colors,
                      std::span<const double> opacities, int width, int height,
                      const RenderOptions& options = {}, RenderTape* tape = nullptr);

/// Projects, culls, sorts and composites. Throws std::invalid_argument for an
/// empty set of Gaussians.
ImageBuffer render(const ObservedGaussians& gaussians, const Camera& cam,
                   const RenderOptions& options = {}, RenderTape* tape = nullptr);

struct RenderGrads {
  std::vector<Vec3> d_position;
  std::vector<Mat3> d_covariance;
  std::vector<Vec3> d_color;
  std::vector<double> d_opacity;
  std::vector<Vec2> d_mean2d;  // view-space positional gradient
  std::vector<bool> visible;
};

/// Gradients of L given dL/dimage. `d_image.rgb` and `d_image.alpha` hold
/// dL/dC and dL/d(alpha channel).
RenderGrads render_backward(const RenderTape& tape, const ImageBuffer& d_image);

/// normalize(linearᵀ · view_dir): the view direction expressed in the frame
/// the Gaussian had before skinning.
Vec3 canonical_view_direction(const Mat3& linear, const Vec3& view_dir);

/// Color network evaluation for one Gaussian: input
/// [feature ‖ canonical view dir ‖ pose feature], sigmoid output.
Vec3 eval_color(const DenseNet& net, const Eigen::VectorXd& feature, const Vec3& view_dir,
                const Mat3& linear, const Eigen::VectorXd& pose_feature);

}  // namespace avatar
