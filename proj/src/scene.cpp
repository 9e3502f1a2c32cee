#include "avatar/scene.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <nlohmann/json.hpp>
#include <numbers>
#include <random>
#include <stdexcept>

namespace avatar {

void GaussianCloud::validate() const {
  const std::size_t n = positions.size();
  if (n == 0) throw std::invalid_argument("empty cloud");
  if (log_scales.size() != n || rotations.size() != n || opacity_logits.size() != n ||
      static_cast<std::size_t>(features.cols()) != n) {
    throw std::invalid_argument("Gaussian cloud arrays have different lengths");
  }
}

void GaussianCloud::normalize_rotations() {
  for (auto& q : rotations) q = q.normalized();
}

GaussianCloud GaussianCloud::gather(const std::vector<std::size_t>& order) const {
  GaussianCloud out;
  out.features.resize(features.rows(), static_cast<Eigen::Index>(order.size()));
  for (std::size_t i = 0; i < order.size(); ++i) {
    const std::size_t s = order[i];
    out.positions.push_back(positions[s]);
    out.log_scales.push_back(log_scales[s]);
    out.rotations.push_back(rotations[s]);
    out.opacity_logits.push_back(opacity_logits[s]);
    out.features.col(static_cast<Eigen::Index>(i)) = features.col(static_cast<Eigen::Index>(s));
  }
  return out;
}

std::vector<int> sample_capsule_surface(const std::vector<Capsule>& capsules, std::size_t count,
                                        std::uint64_t seed, std::vector<Vec3>& points) {
  std::mt19937_64 rng(seed);
  std::vector<double> areas;
  for (const auto& c : capsules) areas.push_back(c.area());
  std::discrete_distribution<int> pick(areas.begin(), areas.end());
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  std::normal_distribution<double> normal(0.0, 1.0);

  points.clear();
  std::vector<int> bone_of;
  for (std::size_t i = 0; i < count; ++i) {
    const int k = pick(rng);
    const Capsule& c = capsules[k];
    const Vec3 axis_vec = c.b - c.a;
    const double len = axis_vec.norm();
    const Vec3 axis = len > 0 ? Vec3(axis_vec / len) : Vec3::UnitY();
    // Orthonormal frame around the axis.
    const Vec3 helper = std::abs(axis.x()) < 0.9 ? Vec3::UnitX() : Vec3::UnitY();
    const Vec3 e1 = axis.cross(helper).normalized();
    const Vec3 e2 = axis.cross(e1);
    const double side = 2.0 * std::numbers::pi * c.radius * len;
    Vec3 p;
    if (uni(rng) * c.area() < side) {
      const double t = uni(rng);
      const double phi = 2.0 * std::numbers::pi * uni(rng);
      p = c.a + t * axis_vec + c.radius * (std::cos(phi) * e1 + std::sin(phi) * e2);
    } else {
      Vec3 d(normal(rng), normal(rng), normal(rng));
      d.normalize();
      // Hemisphere caps: fold the direction to the outer side of each end.
      const double along = d.dot(axis);
      p = along >= 0 ? Vec3(c.b + c.radius * d) : Vec3(c.a + c.radius * d);
    }
    points.push_back(p);
    bone_of.push_back(k);
  }
  return bone_of;
}

std::vector<std::vector<std::size_t>> nearest_neighbors(const std::vector<Vec3>& points, int k) {
  const std::size_t n = points.size();
  const std::size_t kk = std::min<std::size_t>(static_cast<std::size_t>(std::max(k, 0)),
                                               n > 0 ? n - 1 : 0);
  std::vector<std::vector<std::size_t>> out(n);
  std::vector<std::pair<double, std::size_t>> dist;
  for (std::size_t i = 0; i < n; ++i) {
    dist.clear();
    for (std::size_t j = 0; j < n; ++j) {
      if (j != i) dist.emplace_back((points[i] - points[j]).squaredNorm(), j);
    }
    std::partial_sort(dist.begin(), dist.begin() + static_cast<long>(kk), dist.end());
    for (std::size_t m = 0; m < kk; ++m) out[i].push_back(dist[m].second);
  }
  return out;
}

std::vector<double> mean_neighbor_distance(const std::vector<Vec3>& points, int k) {
  const auto nn = nearest_neighbors(points, k);
  std::vector<double> out(points.size(), 0.0);
  for (std::size_t i = 0; i < points.size(); ++i) {
    if (nn[i].empty()) continue;
    double s = 0.0;
    for (std::size_t j : nn[i]) s += (points[i] - points[j]).norm();
    out[i] = s / static_cast<double>(nn[i].size());
  }
  return out;
}

GaussianCloud init_from_chain_surface(const KinematicChain& chain, std::size_t count,
                                      std::uint64_t seed, int feature_width) {
  if (count == 0) throw std::invalid_argument("init_from_chain_surface: count must be >= 1");
  chain.validate();
  const auto capsules = chain.bones();
  GaussianCloud cloud;
  sample_capsule_surface(capsules, count, seed, cloud.positions);

  const auto nn = mean_neighbor_distance(cloud.positions, 3);
  double min_radius = capsules.front().radius;
  for (const auto& c : capsules) min_radius = std::min(min_radius, c.radius);
  for (std::size_t i = 0; i < count; ++i) {
    const double d = nn[i] > 0.0 ? nn[i] : 0.1 * min_radius;
    cloud.log_scales.push_back(Vec3::Constant(std::log(d)));
  }
  cloud.rotations.assign(count, Quaternion::identity());
  cloud.opacity_logits.assign(count, logit(0.1));

  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
  std::normal_distribution<double> normal(0.0, 0.1);
  cloud.features.resize(feature_width, static_cast<Eigen::Index>(count));
  for (Eigen::Index c = 0; c < cloud.features.cols(); ++c)
    for (Eigen::Index r = 0; r < cloud.features.rows(); ++r) cloud.features(r, c) = normal(rng);
  return cloud;
}

DensifyResult densify_and_prune(const GaussianCloud& cloud, DensifyStats& stats,
                                const DensifyConfig& cfg) {
  cloud.validate();
  if (stats.size() != cloud.size()) {
    throw std::invalid_argument("densify statistics are not aligned with the cloud");
  }
  const double split_above = cfg.split_scale_fraction * cfg.scene_diameter;
  const double prune_above = cfg.max_scale_fraction * cfg.scene_diameter;
  const double shrink = std::log(cfg.split_scale_divisor);

  DensifyResult res;
  GaussianCloud& out = res.cloud;
  std::vector<Eigen::VectorXd> feats;
  auto push = [&](const Vec3& x, const Vec3& ls, const Quaternion& q, double logit_v,
                  const Eigen::VectorXd& f, long origin) {
    out.positions.push_back(x);
    out.log_scales.push_back(ls);
    out.rotations.push_back(q);
    out.opacity_logits.push_back(logit_v);
    feats.push_back(f);
    res.origin.push_back(origin);
  };

  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const Vec3 scale = cloud.log_scales[i].array().exp();
    const double max_scale = scale.maxCoeff();
    if (cloud.opacity(i) < cfg.min_opacity || max_scale > prune_above) {
      ++res.pruned;
      continue;
    }
    const Eigen::VectorXd f = cloud.features.col(static_cast<Eigen::Index>(i));
    const double mean_grad =
        stats.observations[i] > 0 ? stats.view_gradient_sum[i] / stats.observations[i] : 0.0;
    if (mean_grad <= cfg.gradient_threshold) {
      push(cloud.positions[i], cloud.log_scales[i], cloud.rotations[i], cloud.opacity_logits[i],
           f, static_cast<long>(i));
      continue;
    }
    if (max_scale > split_above) {
      // Two children at ±0.5σ along the major axis.
      int major = 0;
      scale.maxCoeff(&major);
      const Vec3 axis = quat_to_rotmat(cloud.rotations[i]).col(major);
      const Vec3 offset = 0.5 * max_scale * axis;
      const Vec3 ls = cloud.log_scales[i] - Vec3::Constant(shrink);
      push(cloud.positions[i] + offset, ls, cloud.rotations[i], cloud.opacity_logits[i], f, -1);
      push(cloud.positions[i] - offset, ls, cloud.rotations[i], cloud.opacity_logits[i], f, -1);
      ++res.split;
    } else {
      push(cloud.positions[i], cloud.log_scales[i], cloud.rotations[i], cloud.opacity_logits[i],
           f, static_cast<long>(i));
      const Vec3 g = stats.position_gradient_sum[i];
      const Vec3 dir = g.norm() > 0.0 ? Vec3(-g.normalized()) : Vec3::Zero();
      push(cloud.positions[i] + 0.5 * max_scale * dir, cloud.log_scales[i], cloud.rotations[i],
           cloud.opacity_logits[i], f, -1);
      ++res.cloned;
    }
  }
  if (out.positions.empty()) throw std::runtime_error("empty cloud: densify_and_prune removed every Gaussian");
  out.features.resize(cloud.features.rows(), static_cast<Eigen::Index>(feats.size()));
  for (std::size_t i = 0; i < feats.size(); ++i) out.features.col(static_cast<Eigen::Index>(i)) = feats[i];
  stats.reset(out.size());
  return res;
}

void to_json(nlohmann::json& j, const GaussianCloud& cloud) {
  cloud.validate();
  const std::size_t n = cloud.size();
  std::vector<double> pos, ls, rot, feat(cloud.features.data(),
                                         cloud.features.data() + cloud.features.size());
  for (std::size_t i = 0; i < n; ++i) {
    pos.insert(pos.end(), cloud.positions[i].data(), cloud.positions[i].data() + 3);
    ls.insert(ls.end(), cloud.log_scales[i].data(), cloud.log_scales[i].data() + 3);
    const auto& q = cloud.rotations[i];
    rot.insert(rot.end(), {q.w, q.x, q.y, q.z});
  }
  j = {{"format_version", kCloudFormatVersion},
       {"N", n},
       {"F", cloud.feature_width()},
       {"positions", pos},
       {"log_scales", ls},
       {"rotations", rot},
       {"opacity_logits", cloud.opacity_logits},
       {"features", feat}};
}

void from_json(const nlohmann::json& j, GaussianCloud& cloud) {
  if (j.at("format_version").get<int>() != kCloudFormatVersion) {
    throw std::runtime_error("unsupported cloud format version");
  }
  const auto n = j.at("N").get<std::size_t>();
  const auto f = j.at("F").get<int>();
  const auto pos = j.at("positions").get<std::vector<double>>();
  const auto ls = j.at("log_scales").get<std::vector<double>>();
  const auto rot = j.at("rotations").get<std::vector<double>>();
  const auto feat = j.at("features").get<std::vector<double>>();
  cloud = {};
  cloud.opacity_logits = j.at("opacity_logits").get<std::vector<double>>();
  if (pos.size() != 3 * n || ls.size() != 3 * n || rot.size() != 4 * n ||
      cloud.opacity_logits.size() != n || feat.size() != static_cast<std::size_t>(f) * n) {
    throw std::runtime_error("cloud checkpoint arrays do not match header N/F");
  }
  for (std::size_t i = 0; i < n; ++i) {
    cloud.positions.emplace_back(pos[3 * i], pos[3 * i + 1], pos[3 * i + 2]);
    cloud.log_scales.emplace_back(ls[3 * i], ls[3 * i + 1], ls[3 * i + 2]);
    cloud.rotations.push_back({rot[4 * i], rot[4 * i + 1], rot[4 * i + 2], rot[4 * i + 3]});
  }
  cloud.features = Eigen::Map<const Eigen::MatrixXd>(feat.data(), f, static_cast<Eigen::Index>(n));
  cloud.validate();
}

void write_cloud(const std::filesystem::path& path, const GaussianCloud& cloud) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << nlohmann::json(cloud).dump() << '\n';
}

GaussianCloud read_cloud(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open cloud checkpoint " + path.string());
  try {
    return nlohmann::json::parse(in).get<GaussianCloud>();
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("corrupt cloud checkpoint " + path.string() + ": " + e.what());
  }
}

}  // namespace avatar
