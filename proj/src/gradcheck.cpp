#include "avatar/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <random>
#include <stdexcept>

#include "avatar/render.hpp"
#include "avatar/tinynet.hpp"
#include "avatar/train.hpp"

namespace avatar {

GradcheckModule gradcheck_module_from_string(const std::string& s) {
  if (s == "all") return GradcheckModule::all;
  if (s == "tinynet") return GradcheckModule::tinynet;
  if (s == "render") return GradcheckModule::render;
  if (s == "model") return GradcheckModule::model;
  throw std::invalid_argument("unknown gradcheck module '" + s + "' (expected all, tinynet, render or model)");
}

bool GradcheckReport::passed() const {
  return std::all_of(groups.begin(), groups.end(), [](const GradcheckStats& g) { return g.failures == 0; });
}

double GradcheckReport::max_rel_error() const {
  double m = 0.0;
  for (const auto& g : groups) m = std::max(m, g.max_rel_error);
  return m;
}

std::size_t GradcheckReport::checked() const {
  std::size_t n = 0;
  for (const auto& g : groups) n += g.checked;
  return n;
}

void compare_gradient(GradcheckStats& stats, const std::string& label, std::span<double> params,
                      std::span<const double> analytic, const std::function<double()>& f,
                      const GradcheckConfig& config) {
  if (params.size() != analytic.size()) throw std::invalid_argument("compare_gradient: size mismatch");
  const double h = config.step;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double saved = params[i];
    auto at = [&](double offset) {
      params[i] = saved + offset;
      const double v = f();
      params[i] = saved;
      return v;
    };
    const double c1 = (at(h) - at(-h)) / (2.0 * h);
    const double c2 = (at(2.0 * h) - at(-2.0 * h)) / (4.0 * h);
    // A kink inside the stencil makes the two central estimates disagree.
    if (std::abs(c1 - c2) > 1e-4 * std::max(std::abs(c1), std::abs(c2)) + 1e-9) {
      ++stats.skipped_kinks;
      continue;
    }
    const double numeric = (4.0 * c1 - c2) / 3.0;
    const double a = analytic[i];
    const double scale = std::max(std::abs(a), std::abs(numeric));
    if (scale <= config.min_magnitude) continue;
    ++stats.checked;
    const double rel = std::abs(a - numeric) / scale;
    if (rel > stats.max_rel_error) {
      stats.max_rel_error = rel;
      char buf[160];
      std::snprintf(buf, sizeof(buf), "%s[%zu]: analytic %.9g numeric %.9g", label.c_str(), i, a, numeric);
      stats.worst = buf;
    }
    if (rel > config.tolerance) ++stats.failures;
  }
}

namespace {

GradcheckStats& group(GradcheckReport& r, const std::string& name) {
  for (auto& g : r.groups)
    if (g.name == name) return g;
  r.groups.push_back({});
  r.groups.back().name = name;
  return r.groups.back();
}

Quaternion random_rotation(std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  return Quaternion{n(rng), n(rng), n(rng), n(rng)}.normalized();
}

Quaternion small_rotation(std::mt19937_64& rng, double angle) {
  std::normal_distribution<double> n(0.0, 1.0);
  const Vec3 axis = Vec3(n(rng), n(rng), n(rng)).normalized();
  return Quaternion::from_axis_angle(axis, angle);
}

void check_tinynet(GradcheckReport& report, std::uint64_t seed, const GradcheckConfig& cfg) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> width(2, 6);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  const int in = width(rng), out = width(rng);
  const std::vector<int> hidden{width(rng), width(rng)};
  DenseNet net = DenseNet::make(in, hidden, out, rng);
  for (auto& l : net.layers) l.bias = l.bias.unaryExpr([&](double) { return 0.3 * u(rng); });
  Eigen::MatrixXd x = Eigen::MatrixXd::NullaryExpr(in, 3, [&]() { return u(rng); });
  const Eigen::MatrixXd w = Eigen::MatrixXd::NullaryExpr(out, 3, [&]() { return u(rng); });

  NetTape tape;
  forward(net, x, &tape);
  NetGrad grad(net);
  const Eigen::MatrixXd dx = backward(net, tape, w, grad);

  std::vector<double> params = net.flatten();
  const std::vector<double> g = grad.flatten();
  auto loss_params = [&]() {
    DenseNet probe = net;
    probe.assign(params);
    return (forward(probe, x).array() * w.array()).sum();
  };
  compare_gradient(group(report, "tinynet.params"), "params", params, g, loss_params, cfg);
  std::vector<double> dxv(dx.data(), dx.data() + dx.size());
  auto loss_input = [&]() { return (forward(net, x).array() * w.array()).sum(); };
  compare_gradient(group(report, "tinynet.input"), "input", std::span<double>(x.data(), static_cast<std::size_t>(x.size())),
                   dxv, loss_input, cfg);
}

Camera small_camera(const Vec3& eye, const Vec3& target, double focal) {
  return Camera::look_at(eye, target, Vec3(0, 1, 0), focal, 8, 8);
}

void check_render(GradcheckReport& report, std::uint64_t seed, const GradcheckConfig& cfg) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::uniform_int_distribution<int> count(1, 5);
  const Camera cam = small_camera(Vec3(0, 0, 3), Vec3::Zero(), 10.0);
  ObservedGaussians g;
  const int n = count(rng);
  for (int i = 0; i < n; ++i) {
    g.positions.push_back(Vec3(1.0 * u(rng) - 0.5, 1.0 * u(rng) - 0.5, u(rng) - 0.5));
    const Vec3 ls(std::log(0.15 + 0.3 * u(rng)), std::log(0.15 + 0.3 * u(rng)), std::log(0.15 + 0.3 * u(rng)));
    g.covariances.push_back(build_covariance(ls, random_rotation(rng)));
    g.colors.push_back(Vec3(u(rng), u(rng), u(rng)));
    g.opacities.push_back(0.3 + 0.6 * u(rng));
  }
  ImageBuffer weights(cam.width, cam.height);
  for (double& v : weights.rgb) v = 2.0 * u(rng) - 1.0;
  for (double& v : weights.alpha) v = 2.0 * u(rng) - 1.0;
  auto loss = [&]() {
    const ImageBuffer img = render(g, cam);
    double s = 0.0;
    for (std::size_t i = 0; i < img.rgb.size(); ++i) s += weights.rgb[i] * img.rgb[i];
    for (std::size_t i = 0; i < img.alpha.size(); ++i) s += weights.alpha[i] * img.alpha[i];
    return s;
  };
  RenderTape tape;
  render(g, cam, {}, &tape);
  const RenderGrads rg = render_backward(tape, weights);

  for (int i = 0; i < n; ++i) {
    const auto k = static_cast<std::size_t>(i);
    compare_gradient(group(report, "render.position"), "position", std::span<double>(g.positions[k].data(), 3),
                     std::span<const double>(rg.d_position[k].data(), 3), loss, cfg);
    compare_gradient(group(report, "render.color"), "color", std::span<double>(g.colors[k].data(), 3),
                     std::span<const double>(rg.d_color[k].data(), 3), loss, cfg);
    compare_gradient(group(report, "render.opacity"), "opacity", std::span<double>(&g.opacities[k], 1),
                     std::span<const double>(&rg.d_opacity[k], 1), loss, cfg);
    // Symmetric covariance perturbations: (a, b) and (b, a) move together.
    for (int a = 0; a < 3; ++a) {
      for (int b = a; b < 3; ++b) {
        double t = 0.0;
        const double analytic = a == b ? rg.d_covariance[k](a, b) : rg.d_covariance[k](a, b) + rg.d_covariance[k](b, a);
        auto sym_loss = [&]() {
          const double base = g.covariances[k](a, b);
          g.covariances[k](a, b) = base + t;
          if (a != b) g.covariances[k](b, a) = base + t;
          const double v = loss();
          g.covariances[k](a, b) = base;
          if (a != b) g.covariances[k](b, a) = base;
          return v;
        };
        compare_gradient(group(report, "render.covariance"), "covariance", std::span<double>(&t, 1),
                         std::span<const double>(&analytic, 1), sym_loss, cfg);
      }
    }
  }
}

void randomize_net(DenseNet& net, std::mt19937_64& rng, double scale) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (auto& l : net.layers) {
    l.weight = l.weight.unaryExpr([&](double) { return scale * u(rng) / std::sqrt(static_cast<double>(l.weight.cols())); });
    l.bias = l.bias.unaryExpr([&](double) { return 0.2 * scale * u(rng); });
  }
}

void check_model(GradcheckReport& report, std::uint64_t seed, const GradcheckConfig& cfg) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::uniform_int_distribution<int> count(2, 5);
  ModelConfig mc;
  mc.feature_width = 4;
  mc.latent_width = 4;
  mc.embedding_width = 3;
  mc.nonrigid_hidden = {6};
  mc.skinning_hidden = {6};
  mc.color_hidden = {6};
  mc.fusion_hidden = {6};
  const KinematicChain chain = KinematicChain::default_humanoid();
  AvatarModel m = AvatarModel::create(chain, mc, static_cast<std::size_t>(count(rng)), 1, seed);
  randomize_net(m.nonrigid, rng, 0.1);
  randomize_net(m.fusion, rng, 1.0);
  randomize_net(m.skinning, rng, 1.0);
  m.frame_embeddings = Eigen::MatrixXd::NullaryExpr(mc.embedding_width, 1, [&]() { return u(rng) - 0.5; });
  for (std::size_t i = 0; i < m.cloud.size(); ++i) {
    m.cloud.log_scales[i] = Vec3(std::log(0.12 + 0.2 * u(rng)), std::log(0.12 + 0.2 * u(rng)), std::log(0.12 + 0.2 * u(rng)));
    m.cloud.rotations[i] = random_rotation(rng);
    m.cloud.opacity_logits[i] = logit(0.3 + 0.6 * u(rng));
  }

  Pose input = Pose::rest(chain.size());
  input.root_orientation = small_rotation(rng, 0.2);
  for (auto& q : input.joints) q = small_rotation(rng, 0.3);
  ExposureTrajectory traj = ExposureTrajectory::from_pose(input, Interpolation::slerp);
  for (auto& knot : traj.knots) {
    knot.root_translation += Vec3(0.05 * u(rng), 0.05 * u(rng), 0.05 * u(rng));
    knot.root_orientation = quat_mul(knot.root_orientation, small_rotation(rng, 0.05));
    for (auto& q : knot.joints) q = quat_mul(q, small_rotation(rng, 0.15));
  }
  const Camera cam = small_camera(Vec3(0, 0.3, 3), Vec3(0, 0.3, 0), 16.0);

  Eigen::MatrixXd prior(static_cast<Eigen::Index>(chain.size()), static_cast<Eigen::Index>(m.cloud.size()));
  for (std::size_t i = 0; i < m.cloud.size(); ++i) {
    prior.col(static_cast<Eigen::Index>(i)) = prior_skin_weights(chain, m.cloud.positions[i]);
  }
  const auto edges = isometric_edges(m.cloud.positions, 2);
  Regularization reg;
  reg.skin_prior = &prior;
  reg.skin_weight = 0.7;
  reg.edges = &edges;
  reg.isopos_weight = 1.0;
  reg.isocov_weight = 100.0;

  ImageBuffer weights(cam.width, cam.height);
  for (double& v : weights.rgb) v = 2.0 * u(rng) - 1.0;
  for (double& v : weights.alpha) v = 2.0 * u(rng) - 1.0;
  const ImageLoss image_loss = [&](const ImageBuffer& out, ImageBuffer& g) {
    double s = 0.0;
    for (std::size_t i = 0; i < out.rgb.size(); ++i) {
      s += weights.rgb[i] * out.rgb[i];
      g.rgb[i] += weights.rgb[i];
    }
    for (std::size_t i = 0; i < out.alpha.size(); ++i) {
      s += weights.alpha[i] * out.alpha[i];
      g.alpha[i] += weights.alpha[i];
    }
    return s;
  };

  const Stage stages[] = {Stage::warmup, Stage::trajectory, Stage::fusion};
  for (Stage stage : stages) {
    FrameSpec spec;
    spec.input_pose = &input;
    spec.trajectory = &traj;
    spec.camera = &cam;
    spec.stage = stage;
    spec.virtual_poses = 2 + static_cast<int>(seed % 2);
    const std::string prefix = "model." + to_string(stage) + ".";

    ModelGrad grad(m);
    const FrameObjective obj = frame_objective(m, spec, image_loss, reg, &grad);
    auto loss = [&]() { return frame_objective(m, spec, image_loss, reg).total; };

    GaussianCloud& c = m.cloud;
    const std::size_t n = c.size();
    for (std::size_t i = 0; i < n; ++i) {
      compare_gradient(group(report, prefix + "position"), "position", std::span<double>(c.positions[i].data(), 3),
                       std::span<const double>(grad.positions[i].data(), 3), loss, cfg);
      compare_gradient(group(report, prefix + "log_scale"), "log_scale", std::span<double>(c.log_scales[i].data(), 3),
                       std::span<const double>(grad.log_scales[i].data(), 3), loss, cfg);
      Vec4 q = c.rotations[i].vec();
      auto rot_loss = [&]() {
        c.rotations[i] = Quaternion::from_vec(q);
        return loss();
      };
      compare_gradient(group(report, prefix + "rotation"), "rotation", std::span<double>(q.data(), 4),
                       std::span<const double>(grad.rotations[i].data(), 4), rot_loss, cfg);
      c.rotations[i] = Quaternion::from_vec(q);
      compare_gradient(group(report, prefix + "opacity"), "opacity", std::span<double>(&c.opacity_logits[i], 1),
                       std::span<const double>(&grad.opacity_logits[i], 1), loss, cfg);
    }
    compare_gradient(group(report, prefix + "features"), "features",
                     std::span<double>(c.features.data(), static_cast<std::size_t>(c.features.size())),
                     std::span<const double>(grad.features.data(), static_cast<std::size_t>(grad.features.size())),
                     loss, cfg);

    struct NetRef {
      const char* name;
      DenseNet* net;
      const NetGrad* grad;
    };
    const NetRef nets[] = {{"pose_encoder", &m.pose_encoder, &grad.pose_encoder},
                           {"nonrigid", &m.nonrigid, &grad.nonrigid},
                           {"skinning", &m.skinning, &grad.skinning},
                           {"color", &m.color, &grad.color},
                           {"fusion", &m.fusion, &grad.fusion}};
    for (const auto& ref : nets) {
      std::vector<double> params = ref.net->flatten();
      const std::vector<double> analytic = ref.grad->flatten();
      const DenseNet original = *ref.net;
      auto net_loss = [&]() {
        ref.net->assign(params);
        return loss();
      };
      compare_gradient(group(report, prefix + ref.name), ref.name, params, analytic, net_loss, cfg);
      *ref.net = original;
    }
    compare_gradient(group(report, prefix + "frame_embedding"), "frame_embedding",
                     std::span<double>(m.frame_embeddings.data(), static_cast<std::size_t>(m.frame_embeddings.size())),
                     std::span<const double>(grad.frame_embeddings.data(), static_cast<std::size_t>(grad.frame_embeddings.size())),
                     loss, cfg);

    if (stage != Stage::warmup) {
      std::vector<double> params = traj.flatten();
      const ExposureTrajectory original = traj;
      auto traj_loss = [&]() {
        traj.assign(params);
        traj.normalize();
        return loss();
      };
      compare_gradient(group(report, prefix + "trajectory"), "trajectory", params, obj.trajectory_grad, traj_loss, cfg);
      traj = original;
    }
  }
}

}  // namespace

GradcheckReport run_gradcheck(GradcheckModule module, const GradcheckConfig& config) {
  GradcheckReport report;
  for (int s = 0; s < config.seeds; ++s) {
    const std::uint64_t seed = config.base_seed + static_cast<std::uint64_t>(s);
    if (module == GradcheckModule::all || module == GradcheckModule::tinynet) check_tinynet(report, seed, config);
    if (module == GradcheckModule::all || module == GradcheckModule::render) check_render(report, seed, config);
    if (module == GradcheckModule::all || module == GradcheckModule::model) check_model(report, seed, config);
  }
  return report;
}

}  // namespace avatar
