// Canonical-space Gaussian cloud: storage, surface initialization, and
// densify/prune.
#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <filesystem>
#include <nlohmann/json_fwd.hpp>
#include <vector>

#include "avatar/articulation.hpp"
#include "avatar/geom.hpp"

namespace avatar {

inline constexpr int kDefaultFeatureWidth = 16;

struct GaussianCloud {
  std::vector<Vec3> positions;
  std::vector<Vec3> log_scales;
  std::vector<Quaternion> rotations;
  std::vector<double> opacity_logits;
  Eigen::MatrixXd features;  // F x N

  std::size_t size() const { return positions.size(); }
  int feature_width() const { return static_cast<int>(features.rows()); }

  Gaussian gaussian(std::size_t i) const { return {positions[i], log_scales[i], rotations[i]}; }
  double opacity(std::size_t i) const { return sigmoid(opacity_logits[i]); }

  /// Throws std::invalid_argument if the arrays disagree in length or the cloud is empty.
  void validate() const;
  void normalize_rotations();

  /// Keeps the Gaussians listed in `order` (indices may repeat).
  GaussianCloud gather(const std::vector<std::size_t>& order) const;
};

/// Per-Gaussian accumulators for densification.
struct DensifyStats {
  std::vector<double> view_gradient_sum;  // sum of |dL/d mean2d| in NDC units
  std::vector<int> observations;
  std::vector<Vec3> position_gradient_sum;  // canonical dL/dx, gives the clone direction

  explicit DensifyStats(std::size_t n = 0)
      : view_gradient_sum(n, 0.0), observations(n, 0), position_gradient_sum(n, Vec3::Zero()) {}
  std::size_t size() const { return view_gradient_sum.size(); }
  void reset(std::size_t n) { *this = DensifyStats(n); }
};

struct DensifyConfig {
  double gradient_threshold = 2e-4;
  double min_opacity = 0.005;
  /// Split instead of clone above this max scale, as a fraction of the scene diameter.
  double split_scale_fraction = 0.01;
  /// Prune above this max scale, as a fraction of the scene diameter.
  double max_scale_fraction = 0.3;
  double split_scale_divisor = 1.6;
  double scene_diameter = 1.0;
};

struct DensifyResult {
  GaussianCloud cloud;
  /// For each output Gaussian, the input index it came from, or -1 for a newly
  /// created child or clone.
  std::vector<long> origin;
  std::size_t cloned = 0;
  std::size_t split = 0;
  std::size_t pruned = 0;
};

/// Uniform-by-area samples on the rest-pose capsules of `chain`.
GaussianCloud init_from_chain_surface(const KinematicChain& chain, std::size_t count,
                                      std::uint64_t seed, int feature_width = kDefaultFeatureWidth);

/// Index of the bone whose capsule surface each sample was drawn from.
std::vector<int> sample_capsule_surface(const std::vector<Capsule>& capsules, std::size_t count,
                                        std::uint64_t seed, std::vector<Vec3>& points);

/// Mean distance to the k nearest neighbours of every point (brute force).
std::vector<double> mean_neighbor_distance(const std::vector<Vec3>& points, int k);

/// k nearest neighbours of every point, excluding itself.
std::vector<std::vector<std::size_t>> nearest_neighbors(const std::vector<Vec3>& points, int k);

DensifyResult densify_and_prune(const GaussianCloud& cloud, DensifyStats& stats,
                                const DensifyConfig& cfg);

void to_json(nlohmann::json& j, const GaussianCloud& cloud);
void from_json(const nlohmann::json& j, GaussianCloud& cloud);

/// Cloud checkpoint: JSON with {"format_version", "N", "F", arrays...}.
inline constexpr int kCloudFormatVersion = 1;
void write_cloud(const std::filesystem::path& path, const GaussianCloud& cloud);
GaussianCloud read_cloud(const std::filesystem::path& path);

}  // namespace avatar
