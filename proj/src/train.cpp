#include "avatar/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <nlohmann/json.hpp>
#include <random>
#include <stdexcept>

#include "avatar/metrics.hpp"

namespace avatar {

double LossWeights::skin_at(std::int64_t iteration, std::int64_t total) const {
  if (total <= 0) return skin_start;
  const double t = std::clamp(static_cast<double>(iteration) / static_cast<double>(total), 0.0, 1.0);
  return skin_start * std::pow(skin_end / skin_start, t);
}

void TrainConfig::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("train config: " + m); };
  if (iterations < 0) fail("iterations must be >= 0");
  if (virtual_poses < 1) fail("virtual_poses must be >= 1");
  if (trajectory_start < 0 || fusion_start < trajectory_start) {
    fail("stage starts must satisfy 0 <= trajectory_start <= fusion_start");
  }
  if (gaussians < 1) fail("gaussians must be >= 1");
  if (isometric_neighbors < 1) fail("isometric_neighbors must be >= 1");
  if (densify_interval < 1) fail("densify_interval must be >= 1");
  for (double lr : {lr_position_init, lr_position_final, lr_feature, lr_opacity, lr_scaling, lr_rotation,
                    lr_network, lr_embedding, lr_trajectory}) {
    if (!(lr >= 0.0)) fail("learning rates must be non-negative");
  }
  if (!(lr_position_final > 0.0) || !(lr_position_init > 0.0)) fail("position learning rates must be positive");
  if (!(trajectory_fd_step > 0.0)) fail("trajectory_fd_step must be positive");
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"iterations", c.iterations},
       {"trajectory_start", c.trajectory_start},
       {"fusion_start", c.fusion_start},
       {"virtual_poses", c.virtual_poses},
       {"motion_model", c.motion_model},
       {"fusion", c.fusion},
       {"interpolation", to_string(c.interpolation)},
       {"weights",
        {{"percept", c.weights.percept},
         {"mask", c.weights.mask},
         {"skin_start", c.weights.skin_start},
         {"skin_end", c.weights.skin_end},
         {"isopos", c.weights.isopos},
         {"isocov", c.weights.isocov}}},
       {"isometric_neighbors", c.isometric_neighbors},
       {"densify_from", c.densify_from},
       {"densify_until", c.densify_until},
       {"densify_interval", c.densify_interval},
       {"densify",
        {{"gradient_threshold", c.densify.gradient_threshold},
         {"min_opacity", c.densify.min_opacity},
         {"split_scale_fraction", c.densify.split_scale_fraction},
         {"max_scale_fraction", c.densify.max_scale_fraction},
         {"split_scale_divisor", c.densify.split_scale_divisor}}},
       {"lr_position_init", c.lr_position_init},
       {"lr_position_final", c.lr_position_final},
       {"lr_feature", c.lr_feature},
       {"lr_opacity", c.lr_opacity},
       {"lr_scaling", c.lr_scaling},
       {"lr_rotation", c.lr_rotation},
       {"lr_network", c.lr_network},
       {"lr_embedding", c.lr_embedding},
       {"lr_trajectory", c.lr_trajectory},
       {"trajectory_init_spread", c.trajectory_init_spread},
       {"trajectory_fd_step", c.trajectory_fd_step},
       {"gaussians", c.gaussians},
       {"model", c.model},
       {"seed", c.seed},
       {"background", {c.background.x(), c.background.y(), c.background.z()}},
       {"checkpoint_every", c.checkpoint_every}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  c = {};
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
  };
  get("iterations", c.iterations);
  get("trajectory_start", c.trajectory_start);
  get("fusion_start", c.fusion_start);
  get("virtual_poses", c.virtual_poses);
  get("motion_model", c.motion_model);
  get("fusion", c.fusion);
  if (j.contains("interpolation")) c.interpolation = interpolation_from_string(j.at("interpolation").get<std::string>());
  if (j.contains("weights")) {
    const auto& w = j.at("weights");
    c.weights.percept = w.value("percept", c.weights.percept);
    c.weights.mask = w.value("mask", c.weights.mask);
    c.weights.skin_start = w.value("skin_start", c.weights.skin_start);
    c.weights.skin_end = w.value("skin_end", c.weights.skin_end);
    c.weights.isopos = w.value("isopos", c.weights.isopos);
    c.weights.isocov = w.value("isocov", c.weights.isocov);
  }
  get("isometric_neighbors", c.isometric_neighbors);
  get("densify_from", c.densify_from);
  get("densify_until", c.densify_until);
  get("densify_interval", c.densify_interval);
  if (j.contains("densify")) {
    const auto& d = j.at("densify");
    c.densify.gradient_threshold = d.value("gradient_threshold", c.densify.gradient_threshold);
    c.densify.min_opacity = d.value("min_opacity", c.densify.min_opacity);
    c.densify.split_scale_fraction = d.value("split_scale_fraction", c.densify.split_scale_fraction);
    c.densify.max_scale_fraction = d.value("max_scale_fraction", c.densify.max_scale_fraction);
    c.densify.split_scale_divisor = d.value("split_scale_divisor", c.densify.split_scale_divisor);
  }
  get("lr_position_init", c.lr_position_init);
  get("lr_position_final", c.lr_position_final);
  get("lr_feature", c.lr_feature);
  get("lr_opacity", c.lr_opacity);
  get("lr_scaling", c.lr_scaling);
  get("lr_rotation", c.lr_rotation);
  get("lr_network", c.lr_network);
  get("lr_embedding", c.lr_embedding);
  get("lr_trajectory", c.lr_trajectory);
  get("trajectory_init_spread", c.trajectory_init_spread);
  get("trajectory_fd_step", c.trajectory_fd_step);
  get("gaussians", c.gaussians);
  get("model", c.model);
  get("seed", c.seed);
  if (j.contains("background")) {
    const auto b = j.at("background").get<std::vector<double>>();
    if (b.size() != 3) throw std::invalid_argument("train config: background needs 3 values");
    c.background = Vec3(b[0], b[1], b[2]);
  }
  get("checkpoint_every", c.checkpoint_every);
}

namespace {

double sign(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

}  // namespace

double loss_rgb(const ImageBuffer& prediction, const ImageBuffer& target, ImageBuffer* grad, double scale) {
  require_same_shape(prediction, target, "loss_rgb");
  const double inv = 1.0 / static_cast<double>(prediction.rgb.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < prediction.rgb.size(); ++i) {
    const double d = prediction.rgb[i] - target.rgb[i];
    sum += std::abs(d);
    if (grad) grad->rgb[i] += scale * sign(d) * inv;
  }
  return sum * inv;
}

double loss_mask(const ImageBuffer& prediction, std::span<const double> mask, ImageBuffer* grad, double scale) {
  if (mask.size() != prediction.pixel_count()) throw std::invalid_argument("loss_mask: mask size mismatch");
  const double inv = 1.0 / static_cast<double>(mask.size());
  double sum = 0.0;
  for (std::size_t p = 0; p < mask.size(); ++p) {
    const double d = prediction.alpha[p] - mask[p];
    sum += std::abs(d);
    if (grad) grad->alpha[p] += scale * sign(d) * inv;
  }
  return sum * inv;
}

double loss_skin(const Eigen::MatrixXd& predicted, const Eigen::MatrixXd& prior, Eigen::MatrixXd* grad,
                 double scale) {
  if (predicted.rows() != prior.rows() || predicted.cols() != prior.cols()) {
    throw std::invalid_argument("loss_skin: shape mismatch");
  }
  const Eigen::MatrixXd diff = predicted - prior;
  const double inv = 1.0 / static_cast<double>(diff.size());
  if (grad) *grad += (2.0 * scale * inv) * diff;
  return diff.squaredNorm() * inv;
}

std::vector<IsometricEdge> isometric_edges(const std::vector<Vec3>& positions, int k) {
  std::vector<IsometricEdge> edges;
  if (positions.size() < 2) {
    std::fprintf(stderr, "warning: isometric regularization needs at least 2 Gaussians; skipped\n");
    return edges;
  }
  k = std::min<int>(k, static_cast<int>(positions.size()) - 1);
  const auto nn = nearest_neighbors(positions, k);
  for (std::size_t i = 0; i < nn.size(); ++i)
    for (std::size_t j : nn[i]) edges.push_back({i, j});
  return edges;
}

IsometricLoss loss_isometric(const std::vector<Vec3>& xc, const std::vector<Mat3>& sc,
                             const std::vector<Vec3>& xo, const std::vector<Mat3>& so,
                             const std::vector<IsometricEdge>& edges, IsometricGrad* grad,
                             double position_scale, double covariance_scale) {
  IsometricLoss loss;
  if (edges.empty()) return loss;
  const double inv = 1.0 / static_cast<double>(edges.size());
  if (grad) {
    grad->canonical_positions.assign(xc.size(), Vec3::Zero());
    grad->posed_positions.assign(xo.size(), Vec3::Zero());
    grad->canonical_covariances.assign(sc.size(), Mat3::Zero());
    grad->posed_covariances.assign(so.size(), Mat3::Zero());
  }
  for (const auto& e : edges) {
    const Vec3 dc = xc[e.i] - xc[e.j];
    const Vec3 dox = xo[e.i] - xo[e.j];
    const double lc = dc.norm(), lo = dox.norm();
    const double r = lo - lc;
    loss.position += r * r;
    const Mat3 d = (so[e.i] - so[e.j]) - (sc[e.i] - sc[e.j]);
    loss.covariance += d.squaredNorm();
    if (!grad) continue;
    const double g = 2.0 * r * inv * position_scale;
    if (lo > 0.0) {
      grad->posed_positions[e.i] += g * dox / lo;
      grad->posed_positions[e.j] -= g * dox / lo;
    }
    if (lc > 0.0) {
      grad->canonical_positions[e.i] -= g * dc / lc;
      grad->canonical_positions[e.j] += g * dc / lc;
    }
    const Mat3 gd = (2.0 * inv * covariance_scale) * d;
    grad->posed_covariances[e.i] += gd;
    grad->posed_covariances[e.j] -= gd;
    grad->canonical_covariances[e.i] -= gd;
    grad->canonical_covariances[e.j] += gd;
  }
  loss.position *= inv;
  loss.covariance *= inv;
  return loss;
}

double total_loss(const LossParts& p, const LossWeights& w) {
  return p.rgb + w.mask * p.mask + p.skin_weight * p.skin + w.isopos * p.isopos + w.isocov * p.isocov;
}

std::string to_string(Stage stage) {
  switch (stage) {
    case Stage::warmup: return "warmup";
    case Stage::trajectory: return "trajectory";
    case Stage::fusion: return "fusion";
  }
  return "unknown";
}

FrameObjective frame_objective(const AvatarModel& m, const FrameSpec& spec, const ImageLoss& image_loss,
                               const Regularization& reg, ModelGrad* grad, double trajectory_fd_step) {
  if (!spec.input_pose || !spec.camera) throw std::invalid_argument("frame_objective: missing pose or camera");
  if (spec.stage != Stage::warmup && !spec.trajectory) {
    throw std::invalid_argument("frame_objective: blur stages need a trajectory");
  }
  const Camera& cam = *spec.camera;
  const std::size_t n_gauss = m.cloud.size();

  std::vector<Pose> poses;
  std::vector<double> times;
  std::size_t virtual_count = 1;
  std::size_t center = 0;
  if (spec.stage == Stage::warmup) {
    poses.push_back(*spec.input_pose);
  } else {
    poses = sample_virtual_poses(*spec.trajectory, spec.virtual_poses);
    times = virtual_times(spec.virtual_poses);
    virtual_count = poses.size();
    center = virtual_count / 2;
    if (spec.stage == Stage::fusion && virtual_count % 2 == 0) {
      poses.push_back(spec.trajectory->sample(0.5));
      times.push_back(0.5);
      center = virtual_count;
    }
  }

  const CanonicalDeformation d = deform_canonical(m, *spec.input_pose);
  std::vector<PosedCloud> posed;
  std::vector<RenderTape> tapes(poses.size());
  std::vector<ImageBuffer> renders;
  for (std::size_t l = 0; l < poses.size(); ++l) {
    posed.push_back(pose_cloud(m, d, forward_kinematics(m.chain, poses[l]), cam));
    renders.push_back(render(posed.back().observed, cam, spec.options, grad ? &tapes[l] : nullptr));
  }

  FrameObjective obj;
  const ImageBuffer blurred =
      spec.stage == Stage::warmup ? renders[0]
                                  : synthesize_blur(std::span<const ImageBuffer>(renders.data(), virtual_count));
  FusionTape ftape;
  std::vector<double> mask;
  const auto col = static_cast<Eigen::Index>(spec.frame_index);
  if (spec.stage == Stage::fusion) {
    mask = fusion_mask_image(m.fusion, d.latent, m.frame_embeddings.col(col), renders[center], &ftape);
    obj.output = blend(renders[center], blurred, mask);
  } else {
    obj.output = blurred;
  }

  ImageBuffer g_out(obj.output.width, obj.output.height);
  obj.image_loss = image_loss(obj.output, g_out);

  DeformationGrad dg(m);
  if (reg.skin_prior) obj.skin = loss_skin(d.weights, *reg.skin_prior, &dg.weights, reg.skin_weight);
  std::vector<Mat3> canonical_cov;
  IsometricGrad iso_grad;
  if (reg.edges) {
    canonical_cov.resize(n_gauss);
    for (std::size_t i = 0; i < n_gauss; ++i) {
      canonical_cov[i] = build_covariance(m.cloud.log_scales[i], m.cloud.rotations[i]);
    }
    const IsometricLoss iso = loss_isometric(m.cloud.positions, canonical_cov, posed[center].observed.positions,
                                             posed[center].observed.covariances, *reg.edges, &iso_grad,
                                             reg.isopos_weight, reg.isocov_weight);
    obj.isopos = iso.position;
    obj.isocov = iso.covariance;
  }
  obj.total = obj.image_loss + reg.skin_weight * obj.skin + reg.isopos_weight * obj.isopos +
              reg.isocov_weight * obj.isocov;
  if (!grad) return obj;

  // Image gradient of each render.
  std::vector<ImageBuffer> g_render(poses.size(), ImageBuffer(obj.output.width, obj.output.height));
  if (spec.stage == Stage::warmup) {
    g_render[0] = g_out;
  } else {
    ImageBuffer g_blur = g_out;
    if (spec.stage == Stage::fusion) {
      const ImageBuffer& c = renders[center];
      ImageBuffer& g_c = g_render[center];
      std::vector<double> d_mask(mask.size());
      for (std::size_t p = 0; p < mask.size(); ++p) {
        double dm = g_out.alpha[p] * (blurred.alpha[p] - c.alpha[p]);
        for (int ch = 0; ch < 3; ++ch) {
          const std::size_t i = 3 * p + static_cast<std::size_t>(ch);
          dm += g_out.rgb[i] * (blurred.rgb[i] - c.rgb[i]);
          g_c.rgb[i] += (1.0 - mask[p]) * g_out.rgb[i];
          g_blur.rgb[i] = mask[p] * g_out.rgb[i];
        }
        d_mask[p] = dm;
        g_c.alpha[p] += (1.0 - mask[p]) * g_out.alpha[p];
        g_blur.alpha[p] = mask[p] * g_out.alpha[p];
      }
      const FusionGrads fg = fusion_mask_image_backward(m.fusion, ftape, d_mask, m.config.latent_width,
                                                        m.config.embedding_width, grad->fusion);
      dg.latent += fg.d_pose_latent;
      grad->frame_embeddings.col(col) += fg.d_frame_embedding;
      for (std::size_t p = 0; p < mask.size(); ++p)
        for (int ch = 0; ch < 3; ++ch) g_c.rgb[3 * p + static_cast<std::size_t>(ch)] += fg.d_color[p][ch];
    }
    const double inv = 1.0 / static_cast<double>(virtual_count);
    for (std::size_t l = 0; l < virtual_count; ++l) {
      for (std::size_t i = 0; i < g_blur.rgb.size(); ++i) g_render[l].rgb[i] += inv * g_blur.rgb[i];
      for (std::size_t i = 0; i < g_blur.alpha.size(); ++i) g_render[l].alpha[i] += inv * g_blur.alpha[i];
    }
  }

  obj.view_gradient.assign(n_gauss, 0.0);
  obj.observations.assign(n_gauss, 0);
  const double ndc_x = 0.5 * cam.width, ndc_y = 0.5 * cam.height;
  std::vector<std::vector<TransformGrad>> transform_grads;
  for (std::size_t l = 0; l < poses.size(); ++l) {
    const RenderGrads rg = render_backward(tapes[l], g_render[l]);
    ObservedGrad og(n_gauss);
    og.add(rg);
    if (reg.edges && l == center) {
      for (std::size_t i = 0; i < n_gauss; ++i) {
        og.positions[i] += iso_grad.posed_positions[i];
        og.covariances[i] += iso_grad.posed_covariances[i];
      }
    }
    transform_grads.push_back(pose_cloud_backward(m, d, posed[l], og, dg, *grad));
    for (std::size_t i = 0; i < n_gauss; ++i) {
      if (!rg.visible[i]) continue;
      obj.view_gradient[i] += Vec2(rg.d_mean2d[i].x() * ndc_x, rg.d_mean2d[i].y() * ndc_y).norm();
      ++obj.observations[i];
    }
  }
  deform_canonical_backward(m, d, dg, *grad);
  if (reg.edges) {
    for (std::size_t i = 0; i < n_gauss; ++i) {
      grad->positions[i] += iso_grad.canonical_positions[i];
      const CovarianceGrad cg =
          build_covariance_backward(m.cloud.log_scales[i], m.cloud.rotations[i], iso_grad.canonical_covariances[i]);
      grad->log_scales[i] += cg.d_log_scale;
      grad->rotations[i] += cg.d_rotation;
    }
  }
  if (spec.stage != Stage::warmup) {
    obj.trajectory_grad =
        trajectory_gradients_from_transforms(m.chain, *spec.trajectory, times, transform_grads, trajectory_fd_step);
  }
  return obj;
}

namespace {

template <class T, int S>
std::vector<double> pack(const std::vector<T>& v) {
  std::vector<double> out(v.size() * S);
  for (std::size_t i = 0; i < v.size(); ++i)
    for (int c = 0; c < S; ++c) out[i * S + c] = v[i][c];
  return out;
}

template <class T, int S>
void unpack(const std::vector<double>& flat, std::vector<T>& v) {
  for (std::size_t i = 0; i < v.size(); ++i)
    for (int c = 0; c < S; ++c) v[i][c] = flat[i * S + c];
}

std::vector<double> pack_quats(const std::vector<Quaternion>& q) {
  std::vector<double> out(4 * q.size());
  for (std::size_t i = 0; i < q.size(); ++i) {
    const Vec4 v = q[i].vec();
    for (int c = 0; c < 4; ++c) out[4 * i + c] = v[c];
  }
  return out;
}

void remap_moments(AdamState& state, const std::vector<long>& origin, std::size_t stride) {
  if (state.first_moment.empty()) return;
  std::vector<double> m(origin.size() * stride, 0.0), v(origin.size() * stride, 0.0);
  for (std::size_t i = 0; i < origin.size(); ++i) {
    if (origin[i] < 0) continue;
    const std::size_t o = static_cast<std::size_t>(origin[i]);
    for (std::size_t c = 0; c < stride; ++c) {
      m[i * stride + c] = state.first_moment[o * stride + c];
      v[i * stride + c] = state.second_moment[o * stride + c];
    }
  }
  state.first_moment = std::move(m);
  state.second_moment = std::move(v);
}

Quaternion from_rotation_vector(const Vec3& r) {
  const double angle = r.norm();
  if (angle < 1e-15) return Quaternion::identity();
  return Quaternion::from_axis_angle(r / angle, angle);
}

struct CloudOptimizer {
  AdamState positions, log_scales, rotations, opacity, features;

  void remap(const std::vector<long>& origin, std::size_t feature_width) {
    remap_moments(positions, origin, 3);
    remap_moments(log_scales, origin, 3);
    remap_moments(rotations, origin, 4);
    remap_moments(opacity, origin, 1);
    remap_moments(features, origin, feature_width);
  }
};

class Trainer {
 public:
  Trainer(TrainState& state, const Dataset& dataset, const TrainConfig& config,
          std::filesystem::path out_dir, const TrainCallbacks& callbacks)
      : state_(state), data_(dataset), cfg_(config), out_(std::move(out_dir)), callbacks_(callbacks) {
    AvatarModel& m = model();
    diameter_ = m.chain.diameter();
    cfg_.densify.scene_diameter = diameter_;
    embedding_opt_.resize(data_.frames.size());
    trajectory_opt_.resize(data_.frames.size());
    refresh_cloud_tables();
  }

  void run(std::int64_t until) {
    if (!out_.empty()) {
      std::filesystem::create_directories(out_ / "checkpoints");
      std::ofstream cfg(out_ / "config.json");
      cfg << nlohmann::json(cfg_).dump(2) << '\n';
    }
    for (std::int64_t it = state_.checkpoint.iteration; it < until; ++it) {
      const LogRecord rec = step(it, frame_for(it));
      state_.log.push_back(rec);
      if (callbacks_.on_iteration) callbacks_.on_iteration(rec);
      state_.checkpoint.iteration = it + 1;
      maybe_densify(it + 1);
      if (!out_.empty() && cfg_.checkpoint_every > 0 && (it + 1) % cfg_.checkpoint_every == 0) {
        char name[64];
        std::snprintf(name, sizeof(name), "iter_%06lld.json", static_cast<long long>(it + 1));
        write_checkpoint(out_ / "checkpoints" / name, state_.checkpoint);
        write_loss_log(out_ / "loss.csv", state_.log);
      }
    }
    if (!out_.empty()) {
      write_checkpoint(out_ / "checkpoint.json", state_.checkpoint);
      write_loss_log(out_ / "loss.csv", state_.log);
    }
  }

 private:
  AvatarModel& model() { return state_.checkpoint.model; }

  std::size_t frame_for(std::int64_t it) {
    const std::size_t frames = data_.frames.size();
    const std::int64_t epoch = it / static_cast<std::int64_t>(frames);
    if (epoch != order_epoch_) {
      order_.resize(frames);
      std::iota(order_.begin(), order_.end(), std::size_t{0});
      std::mt19937_64 rng(cfg_.seed * 0x9E3779B97F4A7C15ULL + static_cast<std::uint64_t>(epoch));
      std::shuffle(order_.begin(), order_.end(), rng);
      order_epoch_ = epoch;
    }
    return order_[static_cast<std::size_t>(it % static_cast<std::int64_t>(frames))];
  }

  Stage stage_at(std::int64_t it) const {
    if (!cfg_.motion_model || it < cfg_.trajectory_start) return Stage::warmup;
    if (!cfg_.fusion || it < cfg_.fusion_start) return Stage::trajectory;
    return Stage::fusion;
  }

  void refresh_cloud_tables() {
    const AvatarModel& m = model();
    const auto n = static_cast<Eigen::Index>(m.cloud.size());
    prior_.resize(static_cast<Eigen::Index>(m.joint_count()), n);
    for (Eigen::Index i = 0; i < n; ++i) {
      prior_.col(i) = prior_skin_weights(m.chain, m.cloud.positions[static_cast<std::size_t>(i)]);
    }
    edges_ = isometric_edges(m.cloud.positions, cfg_.isometric_neighbors);
    stats_.reset(m.cloud.size());
  }

  // Splits the start and end knots symmetrically around the input pose so the
  // two endpoints receive different gradients.
  void separate_trajectory(std::size_t frame) {
    ExposureTrajectory& traj = state_.checkpoint.trajectories[frame];
    if (!(traj.knots.front() == traj.knots.back())) return;
    std::mt19937_64 rng(cfg_.seed * 0xD1B54A32D192ED03ULL + 7919 * (frame + 1));
    std::normal_distribution<double> normal(0.0, 1.0);
    const Pose base = traj.knots.front();
    const std::size_t k = base.joints.size();
    std::vector<Vec3> offsets(k + 1);
    for (auto& o : offsets) {
      Vec3 r(normal(rng), normal(rng), normal(rng));
      o = cfg_.trajectory_init_spread * r.normalized();
    }
    const std::size_t knots = traj.knots.size();
    for (std::size_t i = 0; i < knots; ++i) {
      const double s = 1.0 - 2.0 * static_cast<double>(i) / static_cast<double>(knots - 1);
      Pose p = base;
      p.root_orientation = quat_mul(base.root_orientation, from_rotation_vector(s * offsets[k]));
      for (std::size_t j = 0; j < k; ++j) p.joints[j] = quat_mul(base.joints[j], from_rotation_vector(s * offsets[j]));
      traj.knots[i] = p;
    }
  }

  LogRecord step(std::int64_t it, std::size_t j) {
    AvatarModel& m = model();
    const DatasetFrame& frame = data_.frames[j];
    const Stage stage = stage_at(it);
    if (stage != Stage::warmup) separate_trajectory(j);

    FrameSpec spec;
    spec.input_pose = &frame.input_pose;
    spec.trajectory = &state_.checkpoint.trajectories[j];
    spec.frame_index = j;
    spec.camera = &data_.train_camera;
    spec.stage = stage;
    spec.virtual_poses = cfg_.virtual_poses;
    spec.options.background = cfg_.background;

    LogRecord rec;
    rec.iteration = it;
    rec.frame = j;
    rec.stage = stage;
    rec.gaussians = m.cloud.size();
    LossParts& parts = rec.parts;
    const ImageLoss image_loss = [&](const ImageBuffer& out, ImageBuffer& g) {
      parts.rgb = loss_rgb(out, frame.blurred, &g, 1.0);
      parts.mask = loss_mask(out, frame.mask, &g, cfg_.weights.mask);
      return parts.rgb + cfg_.weights.mask * parts.mask;
    };
    parts.skin_weight = cfg_.weights.skin_at(it, cfg_.iterations);
    Regularization reg;
    reg.skin_prior = &prior_;
    reg.skin_weight = parts.skin_weight;
    reg.edges = &edges_;
    reg.isopos_weight = cfg_.weights.isopos;
    reg.isocov_weight = cfg_.weights.isocov;

    ModelGrad grad(m);
    const FrameObjective obj = frame_objective(m, spec, image_loss, reg, &grad, cfg_.trajectory_fd_step);
    parts.skin = obj.skin;
    parts.isopos = obj.isopos;
    parts.isocov = obj.isocov;
    rec.total = total_loss(parts, cfg_.weights);
    if (!std::isfinite(rec.total) || !std::isfinite(obj.total)) abort_non_finite(rec);

    for (std::size_t i = 0; i < rec.gaussians; ++i) {
      stats_.view_gradient_sum[i] += obj.view_gradient[i];
      stats_.observations[i] += obj.observations[i];
      stats_.position_gradient_sum[i] += grad.positions[i];
    }
    if (stage != Stage::warmup) {
      ExposureTrajectory& traj = state_.checkpoint.trajectories[j];
      std::vector<double> params = traj.flatten();
      adam_step(trajectory_opt_[j], params, obj.trajectory_grad, cfg_.lr_trajectory);
      traj.assign(params);
      traj.normalize();
    }
    apply_updates(it, j, stage, grad);
    return rec;
  }

  void apply_updates(std::int64_t it, std::size_t j, Stage stage, const ModelGrad& grad) {
    AvatarModel& m = model();
    GaussianCloud& c = m.cloud;
    const double t = cfg_.iterations > 0 ? std::clamp(static_cast<double>(it) / cfg_.iterations, 0.0, 1.0) : 0.0;
    const double lr_pos = diameter_ * std::exp((1.0 - t) * std::log(cfg_.lr_position_init) +
                                               t * std::log(cfg_.lr_position_final));
    {
      auto p = pack<Vec3, 3>(c.positions);
      adam_step(cloud_opt_.positions, p, pack<Vec3, 3>(grad.positions), lr_pos);
      unpack<Vec3, 3>(p, c.positions);
    }
    {
      auto p = pack<Vec3, 3>(c.log_scales);
      adam_step(cloud_opt_.log_scales, p, pack<Vec3, 3>(grad.log_scales), cfg_.lr_scaling);
      unpack<Vec3, 3>(p, c.log_scales);
    }
    {
      auto p = pack_quats(c.rotations);
      adam_step(cloud_opt_.rotations, p, pack<Vec4, 4>(grad.rotations), cfg_.lr_rotation);
      for (std::size_t i = 0; i < c.rotations.size(); ++i) {
        c.rotations[i] = Quaternion::from_vec(Vec4(p[4 * i], p[4 * i + 1], p[4 * i + 2], p[4 * i + 3]));
      }
      c.normalize_rotations();
    }
    adam_step(cloud_opt_.opacity, c.opacity_logits, grad.opacity_logits, cfg_.lr_opacity);
    adam_step(cloud_opt_.features, std::span<double>(c.features.data(), static_cast<std::size_t>(c.features.size())),
              std::span<const double>(grad.features.data(), static_cast<std::size_t>(grad.features.size())),
              cfg_.lr_feature);

    adam_step(net_opt_[0], m.pose_encoder, grad.pose_encoder, cfg_.lr_network);
    adam_step(net_opt_[1], m.nonrigid, grad.nonrigid, cfg_.lr_network);
    adam_step(net_opt_[2], m.skinning, grad.skinning, cfg_.lr_network);
    adam_step(net_opt_[3], m.color, grad.color, cfg_.lr_network);
    if (stage == Stage::fusion) {
      adam_step(net_opt_[4], m.fusion, grad.fusion, cfg_.lr_network);
      const auto col = static_cast<Eigen::Index>(j);
      Eigen::VectorXd e = m.frame_embeddings.col(col);
      const Eigen::VectorXd g = grad.frame_embeddings.col(col);
      adam_step(embedding_opt_[j], std::span<double>(e.data(), static_cast<std::size_t>(e.size())),
                std::span<const double>(g.data(), static_cast<std::size_t>(g.size())), cfg_.lr_embedding);
      m.frame_embeddings.col(col) = e;
    }
  }

  void maybe_densify(std::int64_t done) {
    if (done < cfg_.densify_from || done > cfg_.densify_until || done % cfg_.densify_interval != 0) return;
    AvatarModel& m = model();
    DensifyResult res = densify_and_prune(m.cloud, stats_, cfg_.densify);
    cloud_opt_.remap(res.origin, static_cast<std::size_t>(m.cloud.feature_width()));
    m.cloud = std::move(res.cloud);
    refresh_cloud_tables();
  }

  [[noreturn]] void abort_non_finite(const LogRecord& rec) {
    const nlohmann::json dump = {{"iteration", rec.iteration}, {"frame", rec.frame},
                                 {"stage", to_string(rec.stage)}, {"rgb", rec.parts.rgb},
                                 {"mask", rec.parts.mask},        {"skin", rec.parts.skin},
                                 {"isopos", rec.parts.isopos},    {"isocov", rec.parts.isocov},
                                 {"gaussians", rec.gaussians}};
    if (!out_.empty()) {
      std::ofstream f(out_ / "nonfinite_dump.json");
      f << dump.dump(2) << '\n';
    }
    throw std::runtime_error("non-finite loss at iteration " + std::to_string(rec.iteration) + ": " + dump.dump());
  }

  TrainState& state_;
  const Dataset& data_;
  TrainConfig cfg_;
  std::filesystem::path out_;
  const TrainCallbacks& callbacks_;
  double diameter_ = 1.0;
  Eigen::MatrixXd prior_;
  std::vector<IsometricEdge> edges_;
  DensifyStats stats_;
  CloudOptimizer cloud_opt_;
  AdamState net_opt_[5];
  std::vector<AdamState> embedding_opt_;
  std::vector<AdamState> trajectory_opt_;
  std::vector<std::size_t> order_;
  std::int64_t order_epoch_ = -1;
};

}  // namespace

TrainState train(const Dataset& dataset, const TrainConfig& config, const std::filesystem::path& out_dir,
                 const TrainCallbacks& callbacks) {
  config.validate();
  if (dataset.frames.empty()) throw std::invalid_argument("train: dataset has no frames");
  TrainState state;
  state.checkpoint.model =
      AvatarModel::create(dataset.chain, config.model, config.gaussians, dataset.frames.size(), config.seed);
  for (const auto& f : dataset.frames) {
    state.checkpoint.trajectories.push_back(ExposureTrajectory::from_pose(f.input_pose, config.interpolation));
  }
  Trainer trainer(state, dataset, config, out_dir, callbacks);
  trainer.run(config.iterations);
  return state;
}

void write_loss_log(const std::filesystem::path& path, const std::vector<LogRecord>& log) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "iteration,frame,stage,rgb,mask,skin,skin_weight,isopos,isocov,total,gaussians\n";
  char line[512];
  for (const auto& r : log) {
    std::snprintf(line, sizeof(line), "%lld,%zu,%s,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%zu\n",
                  static_cast<long long>(r.iteration), r.frame, to_string(r.stage).c_str(), r.parts.rgb,
                  r.parts.mask, r.parts.skin, r.parts.skin_weight, r.parts.isopos, r.parts.isocov, r.total,
                  r.gaussians);
    out << line;
  }
}

EvalReport evaluate(const PoseRenderer& renderer, const Dataset& dataset, bool use_input_pose) {
  auto& counters = blur_instrumentation();
  const long samples_before = counters.virtual_pose_samples.load();
  const long fusion_before = counters.fusion_evaluations.load();
  EvalReport r;
  for (const auto& f : dataset.frames) {
    const Pose& pose = use_input_pose ? f.input_pose : f.center_pose;
    const ImageBuffer img = renderer(pose, dataset.train_camera);
    r.train_view.push_back({psnr(img, f.sharp), ssim(img, f.sharp)});
    for (std::size_t e = 0; e < dataset.eval_cameras.size() && e < f.eval_sharp.size(); ++e) {
      const ImageBuffer ev = renderer(pose, dataset.eval_cameras[e]);
      r.eval_view.push_back({psnr(ev, f.eval_sharp[e]), ssim(ev, f.eval_sharp[e])});
    }
  }
  if (counters.virtual_pose_samples.load() != samples_before || counters.fusion_evaluations.load() != fusion_before) {
    throw std::logic_error("evaluation invoked trajectory sampling or the fusion network");
  }
  auto mean = [](const std::vector<FrameScore>& v, double FrameScore::*field) {
    if (v.empty()) return 0.0;
    double s = 0.0;
    for (const auto& x : v) s += x.*field;
    return s / static_cast<double>(v.size());
  };
  r.mean_psnr = mean(r.train_view, &FrameScore::psnr);
  r.mean_ssim = mean(r.train_view, &FrameScore::ssim);
  r.eval_mean_psnr = mean(r.eval_view, &FrameScore::psnr);
  r.eval_mean_ssim = mean(r.eval_view, &FrameScore::ssim);
  return r;
}

EvalReport evaluate(const AvatarModel& model, const Dataset& dataset) {
  return evaluate([&](const Pose& p, const Camera& c) { return render_pose(model, p, c); }, dataset, true);
}

void to_json(nlohmann::json& j, const EvalReport& r) {
  auto list = [](const std::vector<FrameScore>& v) {
    nlohmann::json a = nlohmann::json::array();
    for (const auto& s : v) a.push_back({{"psnr", s.psnr}, {"ssim", s.ssim}});
    return a;
  };
  j = {{"mean_psnr", r.mean_psnr},         {"mean_ssim", r.mean_ssim},
       {"eval_mean_psnr", r.eval_mean_psnr}, {"eval_mean_ssim", r.eval_mean_ssim},
       {"train_view", list(r.train_view)},   {"eval_view", list(r.eval_view)}};
}

}  // namespace avatar
