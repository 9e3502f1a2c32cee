#include "avatar/blur.hpp"

#include <array>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace avatar {

std::string to_string(Interpolation mode) {
  return mode == Interpolation::slerp ? "slerp" : "spline";
}

Interpolation interpolation_from_string(const std::string& s) {
  if (s == "slerp") return Interpolation::slerp;
  if (s == "spline" || s == "cubic_spline") return Interpolation::cubic_spline;
  throw std::invalid_argument("unknown interpolation '" + s + "' (expected slerp or spline)");
}

ExposureTrajectory ExposureTrajectory::from_pose(const Pose& pose, Interpolation mode) {
  ExposureTrajectory t;
  t.mode = mode;
  t.knots.assign(mode == Interpolation::slerp ? 2 : 4, pose);
  return t;
}

std::size_t ExposureTrajectory::parameter_count() const {
  return knots.size() * Pose::flat_size(joint_count());
}

std::vector<double> ExposureTrajectory::flatten() const {
  std::vector<double> v;
  for (const auto& k : knots) {
    const auto f = k.flatten();
    v.insert(v.end(), f.begin(), f.end());
  }
  return v;
}

void ExposureTrajectory::assign(std::span<const double> values) {
  if (values.size() != parameter_count()) {
    throw std::invalid_argument("ExposureTrajectory::assign: size mismatch");
  }
  const std::size_t k = joint_count();
  const std::size_t stride = Pose::flat_size(k);
  for (std::size_t i = 0; i < knots.size(); ++i) {
    knots[i] = Pose::unflatten(values.subspan(i * stride, stride), k);
  }
}

void ExposureTrajectory::normalize() {
  for (auto& k : knots) k.normalize();
}

Pose interpolate_pose(const Pose& start, const Pose& end, double u) {
  if (start.joints.size() != end.joints.size()) {
    throw std::invalid_argument("interpolate_pose: joint counts differ");
  }
  Pose p;
  p.root_translation = (1.0 - u) * start.root_translation + u * end.root_translation;
  p.root_orientation = slerp(start.root_orientation, end.root_orientation, u);
  p.joints.resize(start.joints.size());
  for (std::size_t k = 0; k < start.joints.size(); ++k) {
    p.joints[k] = slerp(start.joints[k], end.joints[k], u);
  }
  return p;
}

namespace {

// Cubic Bézier on quaternion components, sign-aligned to the first knot and
// renormalized.
Quaternion bezier_quat(const std::array<Quaternion, 4>& q, double u) {
  const double v = 1.0 - u;
  const double b[4] = {v * v * v, 3 * v * v * u, 3 * v * u * u, u * u * u};
  Vec4 acc = Vec4::Zero();
  for (int i = 0; i < 4; ++i) {
    const Vec4 qi = dot(q[0], q[i]) < 0.0 ? Vec4(-q[i].vec()) : q[i].vec();
    acc += b[i] * qi;
  }
  return Quaternion::from_vec(acc.normalized());
}

Pose spline_pose(const std::vector<Pose>& k, double u) {
  const double v = 1.0 - u;
  const double b[4] = {v * v * v, 3 * v * v * u, 3 * v * u * u, u * u * u};
  Pose p;
  p.root_translation = Vec3::Zero();
  for (int i = 0; i < 4; ++i) p.root_translation += b[i] * k[i].root_translation;
  p.root_orientation = bezier_quat({k[0].root_orientation, k[1].root_orientation,
                                    k[2].root_orientation, k[3].root_orientation}, u);
  p.joints.resize(k[0].joints.size());
  for (std::size_t j = 0; j < p.joints.size(); ++j) {
    p.joints[j] = bezier_quat({k[0].joints[j], k[1].joints[j], k[2].joints[j], k[3].joints[j]}, u);
  }
  return p;
}

}  // namespace

Pose ExposureTrajectory::sample(double u) const {
  if (mode == Interpolation::slerp) {
    if (knots.size() != 2) throw std::invalid_argument("slerp trajectory needs 2 knots");
    return interpolate_pose(knots[0], knots[1], u);
  }
  if (knots.size() != 4) throw std::invalid_argument("spline trajectory needs 4 knots");
  return spline_pose(knots, u);
}

BlurInstrumentation& blur_instrumentation() {
  static BlurInstrumentation counters;
  return counters;
}

std::vector<double> virtual_times(int n) {
  if (n <= 0) throw std::invalid_argument("number of virtual poses must be >= 1");
  if (n == 1) return {0.0};
  std::vector<double> u(static_cast<std::size_t>(n));
  for (int l = 0; l < n; ++l) u[static_cast<std::size_t>(l)] = static_cast<double>(l) / (n - 1);
  return u;
}

std::vector<Pose> sample_virtual_poses(const ExposureTrajectory& traj, int n) {
  const auto times = virtual_times(n);
  ++blur_instrumentation().virtual_pose_samples;
  std::vector<Pose> out;
  out.reserve(times.size());
  for (double u : times) out.push_back(traj.sample(u));
  return out;
}

ImageBuffer synthesize_blur(std::span<const ImageBuffer> images) {
  if (images.empty()) throw std::invalid_argument("synthesize_blur: no images");
  ImageBuffer out(images[0].width, images[0].height);
  for (const auto& img : images) {
    require_same_shape(images[0], img, "synthesize_blur");
    for (std::size_t i = 0; i < out.rgb.size(); ++i) out.rgb[i] += img.rgb[i];
    for (std::size_t i = 0; i < out.alpha.size(); ++i) out.alpha[i] += img.alpha[i];
  }
  const double n = static_cast<double>(images.size());
  for (double& v : out.rgb) v /= n;
  for (double& v : out.alpha) v /= n;
  return out;
}

Eigen::VectorXd position_encoding(int x, int y, int width, int height) {
  const double px = (x + 0.5) / width, py = (y + 0.5) / height;
  Eigen::VectorXd e(kPositionEncodingWidth);
  int at = 0;
  for (int b = 0; b < kPositionEncodingBands; ++b) {
    const double f = std::ldexp(std::numbers::pi, b);
    e[at++] = std::sin(f * px);
    e[at++] = std::cos(f * px);
    e[at++] = std::sin(f * py);
    e[at++] = std::cos(f * py);
  }
  return e;
}

Eigen::VectorXd FusionInputs::concat() const {
  Eigen::VectorXd v(pose_latent.size() + frame_embedding.size() + position.size() + 3);
  v << pose_latent, frame_embedding, position, color;
  return v;
}

double fusion_mask(const DenseNet& net, const FusionInputs& inputs) {
  const Eigen::VectorXd in = inputs.concat();
  if (net.input_width() != in.size() || net.output_width() != 1) {
    throw std::invalid_argument("fusion network width " + std::to_string(net.input_width()) +
                                " does not match fusion inputs " + std::to_string(in.size()));
  }
  ++blur_instrumentation().fusion_evaluations;
  const Eigen::MatrixXd col = in;
  return sigmoid(forward(net, col)(0, 0));
}

std::vector<double> fusion_mask_image(const DenseNet& net, const Eigen::VectorXd& pose_latent,
                                      const Eigen::VectorXd& frame_embedding,
                                      const ImageBuffer& sharp, FusionTape* tape) {
  const Eigen::Index width = pose_latent.size() + frame_embedding.size() + kPositionEncodingWidth + 3;
  if (net.input_width() != width || net.output_width() != 1) {
    throw std::invalid_argument("fusion network width does not match fusion inputs");
  }
  ++blur_instrumentation().fusion_evaluations;
  const auto n = static_cast<Eigen::Index>(sharp.pixel_count());
  Eigen::MatrixXd in(width, n);
  for (int y = 0; y < sharp.height; ++y) {
    for (int x = 0; x < sharp.width; ++x) {
      const auto c = static_cast<Eigen::Index>(sharp.index(x, y));
      in.col(c) << pose_latent, frame_embedding, position_encoding(x, y, sharp.width, sharp.height),
          sharp.color(x, y);
    }
  }
  NetTape local;
  const Eigen::MatrixXd z = forward(net, in, tape ? &tape->net : &local);
  std::vector<double> mask(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) mask[static_cast<std::size_t>(i)] = sigmoid(z(0, i));
  if (tape) tape->mask = mask;
  return mask;
}

FusionGrads fusion_mask_image_backward(const DenseNet& net, const FusionTape& tape,
                                       std::span<const double> d_mask, int latent_width,
                                       int embedding_width, NetGrad& grad) {
  const auto n = static_cast<Eigen::Index>(tape.mask.size());
  if (static_cast<Eigen::Index>(d_mask.size()) != n) {
    throw std::invalid_argument("fusion backward: gradient size mismatch");
  }
  Eigen::MatrixXd dz(1, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double m = tape.mask[static_cast<std::size_t>(i)];
    dz(0, i) = d_mask[static_cast<std::size_t>(i)] * m * (1.0 - m);
  }
  const Eigen::MatrixXd din = backward(net, tape.net, dz, grad);
  FusionGrads g;
  const Eigen::VectorXd total = din.rowwise().sum();
  g.d_pose_latent = total.head(latent_width);
  g.d_frame_embedding = total.segment(latent_width, embedding_width);
  const Eigen::Index color_row = latent_width + embedding_width + kPositionEncodingWidth;
  g.d_color.resize(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) {
    g.d_color[static_cast<std::size_t>(i)] = din.block<3, 1>(color_row, i);
  }
  return g;
}

ImageBuffer blend(const ImageBuffer& sharp, const ImageBuffer& blurred, std::span<const double> mask) {
  require_same_shape(sharp, blurred, "blend");
  if (mask.size() != sharp.pixel_count()) {
    throw std::invalid_argument("blend: mask size does not match the images");
  }
  ImageBuffer out(sharp.width, sharp.height);
  for (std::size_t p = 0; p < sharp.pixel_count(); ++p) {
    const double m = mask[p];
    for (int c = 0; c < 3; ++c) {
      out.rgb[3 * p + c] = (1.0 - m) * sharp.rgb[3 * p + c] + m * blurred.rgb[3 * p + c];
    }
    out.alpha[p] = (1.0 - m) * sharp.alpha[p] + m * blurred.alpha[p];
  }
  return out;
}

std::vector<double> trajectory_gradients(
    const std::function<double(const ExposureTrajectory&)>& loss, const ExposureTrajectory& traj,
    double step) {
  if (!(step > 0.0)) throw std::invalid_argument("finite-difference step must be positive");
  const std::vector<double> base = traj.flatten();
  std::vector<double> grad(base.size(), 0.0);
  ExposureTrajectory probe = traj;
  for (std::size_t i = 0; i < base.size(); ++i) {
    std::vector<double> v = base;
    v[i] = base[i] + step;
    probe.assign(v);
    probe.normalize();
    const double up = loss(probe);
    v[i] = base[i] - step;
    probe.assign(v);
    probe.normalize();
    const double down = loss(probe);
    grad[i] = (up - down) / (2.0 * step);
  }
  return grad;
}

}  // namespace avatar
