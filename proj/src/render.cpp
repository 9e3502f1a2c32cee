#include "avatar/render.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "avatar/parallel.hpp"

namespace avatar {

void Camera::validate() const {
  if (!(fx > 0.0) || !(fy > 0.0)) throw std::invalid_argument("camera focal lengths must be positive");
  if (width <= 0 || height <= 0) throw std::invalid_argument("camera image size must be positive");
}

Vec3 Camera::center() const { return -(world_to_camera.rotation.transpose() * world_to_camera.translation); }

Camera Camera::look_at(const Vec3& eye, const Vec3& target, const Vec3& up, double focal,
                       int width, int height) {
  const Vec3 forward = (target - eye).normalized();
  const Vec3 right = forward.cross(up).normalized();
  const Vec3 down = forward.cross(right);
  Camera cam;
  cam.fx = cam.fy = focal;
  cam.cx = 0.5 * (width - 1);
  cam.cy = 0.5 * (height - 1);
  cam.width = width;
  cam.height = height;
  cam.world_to_camera.rotation.row(0) = right.transpose();
  cam.world_to_camera.rotation.row(1) = down.transpose();
  cam.world_to_camera.rotation.row(2) = forward.transpose();
  cam.world_to_camera.translation = -(cam.world_to_camera.rotation * eye);
  return cam;
}

std::optional<Splat2D> project_gaussian(const Camera& cam, const Vec3& position,
                                        const Mat3& covariance, int index) {
  const Mat3& rot = cam.world_to_camera.rotation;
  const Vec3 p = rot * position + cam.world_to_camera.translation;
  if (!(p.z() > kNearPlane)) return std::nullopt;
  const double inv_z = 1.0 / p.z();
  Splat2D s;
  s.index = index;
  s.depth = p.z();
  s.camera_point = p;
  s.mean = {cam.fx * p.x() * inv_z + cam.cx, cam.fy * p.y() * inv_z + cam.cy};
  s.jacobian << cam.fx * inv_z, 0.0, -cam.fx * p.x() * inv_z * inv_z,
                0.0, cam.fy * inv_z, -cam.fy * p.y() * inv_z * inv_z;
  const Eigen::Matrix<double, 2, 3> m = s.jacobian * rot;
  s.cov = m * covariance * m.transpose();
  s.cov(0, 1) = s.cov(1, 0) = 0.5 * (s.cov(0, 1) + s.cov(1, 0));
  s.cov += kLowPassDilation * Mat2::Identity();
  const double det = s.cov.determinant();
  if (!(det > kMinConicDeterminant)) return std::nullopt;
  s.conic << s.cov(1, 1) / det, -s.cov(0, 1) / det, -s.cov(1, 0) / det, s.cov(0, 0) / det;
  const double mid = 0.5 * (s.cov(0, 0) + s.cov(1, 1));
  const double lambda_max = mid + std::sqrt(std::max(mid * mid - det, 0.0));
  s.radius = std::sqrt(2.0 * kMaxGaussianPower * lambda_max);
  return s;
}

namespace {

inline double gaussian_power(const Splat2D& s, double dx, double dy) {
  return 0.5 * (s.conic(0, 0) * dx * dx + 2.0 * s.conic(0, 1) * dx * dy + s.conic(1, 1) * dy * dy);
}

void bin_splats(RenderTape& tape) {
  const int ts = tape.tile_size;
  tape.tiles_x = (tape.width + ts - 1) / ts;
  const int tiles_y = (tape.height + ts - 1) / ts;
  tape.tile_lists.assign(static_cast<std::size_t>(tape.tiles_x) * tiles_y, {});
  for (std::size_t k = 0; k < tape.splats.size(); ++k) {
    const Splat2D& s = tape.splats[k];
    if (!std::isfinite(s.radius)) continue;
    const double x0 = std::ceil(s.mean.x() - s.radius), x1 = std::floor(s.mean.x() + s.radius);
    const double y0 = std::ceil(s.mean.y() - s.radius), y1 = std::floor(s.mean.y() + s.radius);
    if (x1 < 0 || y1 < 0 || x0 > tape.width - 1 || y0 > tape.height - 1) continue;
    const int px0 = static_cast<int>(std::max(x0, 0.0));
    const int px1 = static_cast<int>(std::min(x1, tape.width - 1.0));
    const int py0 = static_cast<int>(std::max(y0, 0.0));
    const int py1 = static_cast<int>(std::min(y1, tape.height - 1.0));
    for (int ty = py0 / ts; ty <= py1 / ts; ++ty)
      for (int tx = px0 / ts; tx <= px1 / ts; ++tx)
        tape.tile_lists[static_cast<std::size_t>(ty) * tape.tiles_x + tx].push_back(static_cast<int>(k));
  }
}

template <typename Fn>
void for_each_tile_pixel(const RenderTape& tape, std::size_t tile, Fn&& fn) {
  const int ts = tape.tile_size;
  const int tx = static_cast<int>(tile % tape.tiles_x), ty = static_cast<int>(tile / tape.tiles_x);
  for (int y = ty * ts; y < std::min((ty + 1) * ts, tape.height); ++y)
    for (int x = tx * ts; x < std::min((tx + 1) * ts, tape.width); ++x) fn(x, y);
}

}  // namespace

ImageBuffer composite(std::span<const Splat2D> sorted, std::span<const Vec3> colors,
                      std::span<const double> opacities, int width, int height,
                      const RenderOptions& options, RenderTape* tape_out) {
  if (colors.size() != sorted.size() || opacities.size() != sorted.size()) {
    throw std::invalid_argument("composite: colors/opacities must match the splat list");
  }
  RenderTape local;
  RenderTape& tape = tape_out ? *tape_out : local;
  tape.width = width;
  tape.height = height;
  tape.options = options;
  tape.tile_size = options.tile_binning ? kTileSize : std::max(width, height);
  tape.splats.clear();
  tape.colors.clear();
  tape.opacities.clear();
  for (std::size_t i = 0; i < sorted.size(); ++i) {
    if (!(sorted[i].cov.determinant() > kMinConicDeterminant)) continue;
    tape.splats.push_back(sorted[i]);
    tape.colors.push_back(colors[i]);
    tape.opacities.push_back(opacities[i]);
  }
  bin_splats(tape);

  ImageBuffer image(width, height);
  tape.contributors.assign(image.pixel_count(), 0);
  tape.final_transmittance.assign(image.pixel_count(), 1.0);
  const Vec3 bg = options.background;

  parallel_for(tape.tile_lists.size(), [&](int, std::size_t begin, std::size_t end) {
    for (std::size_t tile = begin; tile < end; ++tile) {
      const auto& list = tape.tile_lists[tile];
      for_each_tile_pixel(tape, tile, [&](int x, int y) {
        double t = 1.0;
        Vec3 c = Vec3::Zero();
        int last = 0;
        for (std::size_t k = 0; k < list.size(); ++k) {
          const Splat2D& s = tape.splats[list[k]];
          const double power = gaussian_power(s, x - s.mean.x(), y - s.mean.y());
          if (power > kMaxGaussianPower || power < 0.0) continue;
          const double a = std::min(kMaxAlpha, tape.opacities[list[k]] * std::exp(-power));
          c += tape.colors[list[k]] * (a * t);
          t *= 1.0 - a;
          last = static_cast<int>(k) + 1;
          if (options.early_termination && t < kMinTransmittance) break;
        }
        const std::size_t p = image.index(x, y);
        image.set_color(x, y, c + bg * t);
        image.alpha[p] = 1.0 - t;
        tape.contributors[p] = last;
        tape.final_transmittance[p] = t;
      });
    }
  });
  return image;
}

ImageBuffer render(const ObservedGaussians& g, const Camera& cam, const RenderOptions& options,
                   RenderTape* tape_out) {
  cam.validate();
  if (g.size() == 0) throw std::invalid_argument("render: empty cloud");
  if (g.covariances.size() != g.size() || g.colors.size() != g.size() ||
      g.opacities.size() != g.size()) {
    throw std::invalid_argument("render: Gaussian arrays differ in length");
  }
  std::vector<Splat2D> splats;
  splats.reserve(g.size());
  for (std::size_t i = 0; i < g.size(); ++i) {
    if (auto s = project_gaussian(cam, g.positions[i], g.covariances[i], static_cast<int>(i))) {
      splats.push_back(*s);
    }
  }
  std::sort(splats.begin(), splats.end(), [](const Splat2D& a, const Splat2D& b) {
    return a.depth < b.depth || (a.depth == b.depth && a.index < b.index);
  });
  std::vector<Vec3> colors;
  std::vector<double> opacities;
  for (const auto& s : splats) {
    colors.push_back(g.colors[s.index]);
    opacities.push_back(g.opacities[s.index]);
  }
  RenderTape local;
  RenderTape& tape = tape_out ? *tape_out : local;
  ImageBuffer image = composite(splats, colors, opacities, cam.width, cam.height, options, &tape);
  tape.camera_rotation = cam.world_to_camera.rotation;
  tape.fx = cam.fx;
  tape.fy = cam.fy;
  tape.gaussian_count = g.size();
  tape.covariances.clear();
  for (const auto& s : tape.splats) tape.covariances.push_back(g.covariances[s.index]);
  return image;
}

namespace {

struct SplatAccum {
  std::vector<Vec2> mean;
  std::vector<std::array<double, 3>> conic;  // xx, xy, yy of dL/dQ
  std::vector<double> opacity;
  std::vector<Vec3> color;

  explicit SplatAccum(std::size_t n)
      : mean(n, Vec2::Zero()), conic(n, {0.0, 0.0, 0.0}), opacity(n, 0.0), color(n, Vec3::Zero()) {}
};

}  // namespace

RenderGrads render_backward(const RenderTape& tape, const ImageBuffer& d_image) {
  if (d_image.width != tape.width || d_image.height != tape.height ||
      tape.contributors.size() != d_image.pixel_count()) {
    throw std::invalid_argument("render_backward: tape does not match the upstream gradient");
  }
  if (tape.covariances.size() != tape.splats.size()) {
    throw std::invalid_argument("render_backward: tape was not produced by render");
  }
  const bool has_alpha_grad = d_image.alpha.size() == d_image.pixel_count();
  const std::size_t ns = tape.splats.size();
  const Vec3 bg = tape.options.background;

  const int chunks = std::max(1, chunk_count(tape.tile_lists.size()));
  std::vector<SplatAccum> partial(static_cast<std::size_t>(chunks), SplatAccum(ns));

  parallel_for(tape.tile_lists.size(), [&](int chunk, std::size_t begin, std::size_t end) {
    SplatAccum& acc = partial[static_cast<std::size_t>(chunk)];
    for (std::size_t tile = begin; tile < end; ++tile) {
      const auto& list = tape.tile_lists[tile];
      for_each_tile_pixel(tape, tile, [&](int x, int y) {
        const std::size_t p = d_image.index(x, y);
        const Vec3 g_c = d_image.color(x, y);
        const double g_a = has_alpha_grad ? d_image.alpha[p] : 0.0;
        const double t_final = tape.final_transmittance[p];
        double t = t_final;
        Vec3 behind = bg * t_final;
        for (int k = tape.contributors[p] - 1; k >= 0; --k) {
          const int si = list[static_cast<std::size_t>(k)];
          const Splat2D& s = tape.splats[si];
          const double dx = x - s.mean.x(), dy = y - s.mean.y();
          const double power = gaussian_power(s, dx, dy);
          if (power > kMaxGaussianPower || power < 0.0) continue;
          const double gauss = std::exp(-power);
          const double raw = tape.opacities[si] * gauss;
          const double a = std::min(kMaxAlpha, raw);
          const double t_before = t / (1.0 - a);
          const Vec3& col = tape.colors[si];
          acc.color[si] += g_c * (a * t_before);
          const double g_alpha = t_before * col.dot(g_c) - behind.dot(g_c) / (1.0 - a) +
                                 g_a * t_final / (1.0 - a);
          behind += col * (a * t_before);
          t = t_before;
          if (raw > kMaxAlpha) continue;
          acc.opacity[si] += g_alpha * gauss;
          const double g_power = -g_alpha * raw;
          // power = 0.5 dᵀ Q d with d = pixel - mean
          acc.mean[si] -= g_power * (s.conic * Vec2(dx, dy));
          acc.conic[si][0] += g_power * 0.5 * dx * dx;
          acc.conic[si][1] += g_power * 0.5 * dx * dy;
          acc.conic[si][2] += g_power * 0.5 * dy * dy;
        }
      });
    }
  });

  SplatAccum total(ns);
  for (const auto& part : partial) {
    for (std::size_t s = 0; s < ns; ++s) {
      total.mean[s] += part.mean[s];
      for (int c = 0; c < 3; ++c) total.conic[s][c] += part.conic[s][c];
      total.opacity[s] += part.opacity[s];
      total.color[s] += part.color[s];
    }
  }

  RenderGrads out;
  const std::size_t n = tape.gaussian_count;
  out.d_position.assign(n, Vec3::Zero());
  out.d_covariance.assign(n, Mat3::Zero());
  out.d_color.assign(n, Vec3::Zero());
  out.d_opacity.assign(n, 0.0);
  out.d_mean2d.assign(n, Vec2::Zero());
  out.visible.assign(n, false);
  const Mat3& rot = tape.camera_rotation;
  for (std::size_t si = 0; si < ns; ++si) {
    const Splat2D& s = tape.splats[si];
    const auto gi = static_cast<std::size_t>(s.index);
    out.visible[gi] = true;
    out.d_color[gi] = total.color[si];
    out.d_opacity[gi] = total.opacity[si];
    out.d_mean2d[gi] = total.mean[si];

    Mat2 g_conic;
    g_conic << total.conic[si][0], total.conic[si][1], total.conic[si][1], total.conic[si][2];
    const Mat2 g_cov2 = -(s.conic * g_conic * s.conic);
    const Eigen::Matrix<double, 2, 3> m = s.jacobian * rot;
    const Mat3& cov = tape.covariances[si];
    out.d_covariance[gi] = m.transpose() * g_cov2 * m;
    const Eigen::Matrix<double, 2, 3> g_m = 2.0 * g_cov2 * m * cov;
    const Eigen::Matrix<double, 2, 3> g_j = g_m * rot.transpose();

    const Vec3& p = s.camera_point;
    const double iz = 1.0 / p.z(), iz2 = iz * iz, iz3 = iz2 * iz;
    Vec3 g_p = s.jacobian.transpose() * total.mean[si];
    g_p.x() += g_j(0, 2) * (-tape.fx * iz2);
    g_p.y() += g_j(1, 2) * (-tape.fy * iz2);
    g_p.z() += g_j(0, 0) * (-tape.fx * iz2) + g_j(0, 2) * (2.0 * tape.fx * p.x() * iz3) +
               g_j(1, 1) * (-tape.fy * iz2) + g_j(1, 2) * (2.0 * tape.fy * p.y() * iz3);
    out.d_position[gi] = rot.transpose() * g_p;
  }
  return out;
}

Vec3 canonical_view_direction(const Mat3& linear, const Vec3& view_dir) {
  return (linear.transpose() * view_dir).normalized();
}

Vec3 eval_color(const DenseNet& net, const Eigen::VectorXd& feature, const Vec3& view_dir,
                const Mat3& linear, const Eigen::VectorXd& pose_feature) {
  const Eigen::Index width = feature.size() + 3 + pose_feature.size();
  if (net.input_width() != width || net.output_width() != 3) {
    throw std::invalid_argument("color network width does not match its inputs");
  }
  Eigen::MatrixXd in(width, 1);
  in.col(0) << feature, canonical_view_direction(linear, view_dir.normalized()), pose_feature;
  const Eigen::VectorXd z = forward(net, in).col(0);
  return {sigmoid(z[0]), sigmoid(z[1]), sigmoid(z[2])};
}

}  // namespace avatar
