#include "avatar/model.hpp"

#include <fstream>
#include <nlohmann/json.hpp>
#include <random>
#include <stdexcept>

namespace avatar {

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"feature_width", c.feature_width},     {"latent_width", c.latent_width},
       {"embedding_width", c.embedding_width}, {"nonrigid_hidden", c.nonrigid_hidden},
       {"skinning_hidden", c.skinning_hidden}, {"color_hidden", c.color_hidden},
       {"fusion_hidden", c.fusion_hidden}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  c = {};
  c.feature_width = j.value("feature_width", c.feature_width);
  c.latent_width = j.value("latent_width", c.latent_width);
  c.embedding_width = j.value("embedding_width", c.embedding_width);
  c.nonrigid_hidden = j.value("nonrigid_hidden", c.nonrigid_hidden);
  c.skinning_hidden = j.value("skinning_hidden", c.skinning_hidden);
  c.color_hidden = j.value("color_hidden", c.color_hidden);
  c.fusion_hidden = j.value("fusion_hidden", c.fusion_hidden);
}

AvatarModel AvatarModel::create(const KinematicChain& chain, const ModelConfig& config,
                                std::size_t gaussian_count, std::size_t frame_count,
                                std::uint64_t seed) {
  chain.validate();
  AvatarModel m;
  m.config = config;
  m.chain = chain;
  m.cloud = init_from_chain_surface(chain, gaussian_count, seed, config.feature_width);
  std::mt19937_64 rng(seed * 0x2545F4914F6CDD1DULL + 17);
  const int k = static_cast<int>(chain.size());
  m.pose_encoder = DenseNet::make(4 * k, {}, config.latent_width, rng);
  m.nonrigid = DenseNet::make(3 + config.latent_width, config.nonrigid_hidden, 9, rng, true);
  m.skinning = DenseNet::make(3, config.skinning_hidden, k, rng);
  m.color = DenseNet::make(config.feature_width + 3 + config.latent_width, config.color_hidden, 3, rng);
  m.fusion = DenseNet::make(m.fusion_input_width(), config.fusion_hidden, 1, rng, true);
  m.frame_embeddings = Eigen::MatrixXd::Zero(config.embedding_width,
                                             static_cast<Eigen::Index>(frame_count));
  return m;
}

CanonicalDeformation deform_canonical(const AvatarModel& model, const Pose& pose) {
  const GaussianCloud& cloud = model.cloud;
  cloud.validate();
  if (pose.joints.size() != model.joint_count()) {
    throw std::invalid_argument("pose joint count does not match the model");
  }
  const auto n = static_cast<Eigen::Index>(cloud.size());
  const int lw = model.config.latent_width;
  CanonicalDeformation d;
  d.pose_input = pose.joint_feature();
  d.latent = forward(model.pose_encoder, Eigen::MatrixXd(d.pose_input), &d.encoder_tape).col(0);

  Eigen::MatrixXd nr_in(3 + lw, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    nr_in.block<3, 1>(0, i) = cloud.positions[static_cast<std::size_t>(i)];
    nr_in.block(3, i, lw, 1) = d.latent;
  }
  const Eigen::MatrixXd offsets = forward(model.nonrigid, nr_in, &d.nonrigid_tape);

  d.positions.resize(cloud.size());
  d.log_scales.resize(cloud.size());
  d.rotation_offsets.resize(cloud.size());
  d.rotations.resize(cloud.size());
  d.covariances.resize(cloud.size());
  Eigen::MatrixXd skin_in(3, n);
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const auto c = static_cast<Eigen::Index>(i);
    d.positions[i] = cloud.positions[i] + offsets.block<3, 1>(0, c);
    d.log_scales[i] = cloud.log_scales[i] + offsets.block<3, 1>(3, c);
    d.rotation_offsets[i] = offsets.block<3, 1>(6, c);
    d.rotations[i] = quat_mul(cloud.rotations[i], rotation_offset(d.rotation_offsets[i]));
    d.covariances[i] = build_covariance(d.log_scales[i], d.rotations[i]);
    skin_in.col(c) = d.positions[i];
  }
  d.weights = softmax_columns(forward(model.skinning, skin_in, &d.skinning_tape));
  return d;
}

PosedCloud pose_cloud(const AvatarModel& model, const CanonicalDeformation& d,
                      const std::vector<RigidTransform>& transforms, const Camera& cam) {
  const GaussianCloud& cloud = model.cloud;
  const std::size_t n = cloud.size();
  const std::size_t k = transforms.size();
  if (k != model.joint_count()) throw std::invalid_argument("pose_cloud: transform count mismatch");
  const int fw = model.config.feature_width, lw = model.config.latent_width;
  const Vec3 eye = cam.center();

  PosedCloud p;
  p.transforms = transforms;
  p.observed.positions.resize(n);
  p.observed.covariances.resize(n);
  p.observed.opacities.resize(n);
  p.linear.resize(n);
  p.view_offset.resize(n);
  p.canonical_dir.resize(n);
  Eigen::MatrixXd color_in(fw + 3 + lw, static_cast<Eigen::Index>(n));
  for (std::size_t i = 0; i < n; ++i) {
    const auto c = static_cast<Eigen::Index>(i);
    Mat3 a = Mat3::Zero();
    Vec3 b = Vec3::Zero();
    for (std::size_t j = 0; j < k; ++j) {
      const double w = d.weights(static_cast<Eigen::Index>(j), c);
      a += w * transforms[j].rotation;
      b += w * transforms[j].translation;
    }
    p.linear[i] = a;
    const Vec3 x = a * d.positions[i] + b;
    p.observed.positions[i] = x;
    p.observed.covariances[i] = a * d.covariances[i] * a.transpose();
    p.observed.opacities[i] = sigmoid(cloud.opacity_logits[i]);
    p.view_offset[i] = x - eye;
    p.canonical_dir[i] = a.transpose() * p.view_offset[i].normalized();
    color_in.block(0, c, fw, 1) = cloud.features.col(c);
    color_in.block<3, 1>(fw, c) = p.canonical_dir[i].normalized();
    color_in.block(fw + 3, c, lw, 1) = d.latent;
  }
  const Eigen::MatrixXd z = forward(model.color, color_in, &p.color_tape);
  p.observed.colors.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto c = static_cast<Eigen::Index>(i);
    p.observed.colors[i] = {sigmoid(z(0, c)), sigmoid(z(1, c)), sigmoid(z(2, c))};
  }
  return p;
}

ImageBuffer render_pose(const AvatarModel& model, const Pose& pose, const Camera& cam,
                        const RenderOptions& options) {
  const auto d = deform_canonical(model, pose);
  const auto posed = pose_cloud(model, d, forward_kinematics(model.chain, pose), cam);
  return render(posed.observed, cam, options);
}

ModelGrad::ModelGrad(const AvatarModel& model)
    : positions(model.cloud.size(), Vec3::Zero()),
      log_scales(model.cloud.size(), Vec3::Zero()),
      rotations(model.cloud.size(), Vec4::Zero()),
      opacity_logits(model.cloud.size(), 0.0),
      features(Eigen::MatrixXd::Zero(model.cloud.features.rows(), model.cloud.features.cols())),
      pose_encoder(model.pose_encoder),
      nonrigid(model.nonrigid),
      skinning(model.skinning),
      color(model.color),
      fusion(model.fusion),
      frame_embeddings(Eigen::MatrixXd::Zero(model.frame_embeddings.rows(),
                                             model.frame_embeddings.cols())) {}

DeformationGrad::DeformationGrad(const AvatarModel& model)
    : positions(model.cloud.size(), Vec3::Zero()),
      covariances(model.cloud.size(), Mat3::Zero()),
      weights(Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(model.joint_count()),
                                    static_cast<Eigen::Index>(model.cloud.size()))),
      latent(Eigen::VectorXd::Zero(model.config.latent_width)) {}

void ObservedGrad::add(const RenderGrads& g) {
  if (g.d_position.size() != positions.size()) {
    throw std::invalid_argument("ObservedGrad::add: size mismatch");
  }
  for (std::size_t i = 0; i < positions.size(); ++i) {
    positions[i] += g.d_position[i];
    covariances[i] += g.d_covariance[i];
    colors[i] += g.d_color[i];
    opacities[i] += g.d_opacity[i];
  }
}

std::vector<TransformGrad> pose_cloud_backward(const AvatarModel& model,
                                               const CanonicalDeformation& d, const PosedCloud& p,
                                               const ObservedGrad& up, DeformationGrad& dg,
                                               ModelGrad& grad) {
  const GaussianCloud& cloud = model.cloud;
  const std::size_t n = cloud.size();
  const std::size_t k = model.joint_count();
  const int fw = model.config.feature_width, lw = model.config.latent_width;
  if (up.positions.size() != n) throw std::invalid_argument("pose_cloud_backward: size mismatch");

  Eigen::MatrixXd dz(3, static_cast<Eigen::Index>(n));
  for (std::size_t i = 0; i < n; ++i) {
    const Vec3& c = p.observed.colors[i];
    dz.col(static_cast<Eigen::Index>(i)) = up.colors[i].cwiseProduct(c.cwiseProduct(Vec3::Ones() - c));
  }
  const Eigen::MatrixXd din = backward(model.color, p.color_tape, dz, grad.color);

  std::vector<TransformGrad> tg(k);
  for (std::size_t i = 0; i < n; ++i) {
    const auto c = static_cast<Eigen::Index>(i);
    grad.features.col(c) += din.block(0, c, fw, 1);
    dg.latent += din.block(fw + 3, c, lw, 1);
    const double op = p.observed.opacities[i];
    grad.opacity_logits[i] += up.opacities[i] * op * (1.0 - op);

    const Mat3& a = p.linear[i];
    // Color input direction: normalize(aᵀ normalize(x_o - eye)).
    const Vec3 g_dir_n = din.block<3, 1>(fw, c);
    const Vec3& vc = p.canonical_dir[i];
    const double vc_len = vc.norm();
    const Vec3 vcn = vc / vc_len;
    const Vec3 g_vc = (g_dir_n - vcn * vcn.dot(g_dir_n)) / vc_len;
    const Vec3& off = p.view_offset[i];
    const double off_len = off.norm();
    const Vec3 v = off / off_len;
    Mat3 g_a = v * g_vc.transpose();
    const Vec3 g_v = a * g_vc;
    Vec3 g_x = up.positions[i] + (g_v - v * v.dot(g_v)) / off_len;

    g_a += g_x * d.positions[i].transpose();
    const Vec3 g_b = g_x;
    dg.positions[i] += a.transpose() * g_x;
    const Mat3 g_cov = 0.5 * (up.covariances[i] + up.covariances[i].transpose());
    g_a += 2.0 * g_cov * a * d.covariances[i];
    dg.covariances[i] += a.transpose() * g_cov * a;

    for (std::size_t j = 0; j < k; ++j) {
      const auto jj = static_cast<Eigen::Index>(j);
      const double w = d.weights(jj, c);
      dg.weights(jj, c) += (g_a.cwiseProduct(p.transforms[j].rotation)).sum() +
                           g_b.dot(p.transforms[j].translation);
      tg[j].rotation += w * g_a;
      tg[j].translation += w * g_b;
    }
  }
  return tg;
}

void deform_canonical_backward(const AvatarModel& model, const CanonicalDeformation& d,
                               const DeformationGrad& up, ModelGrad& grad) {
  const GaussianCloud& cloud = model.cloud;
  const std::size_t n = cloud.size();
  const auto nn = static_cast<Eigen::Index>(n);
  const int lw = model.config.latent_width;

  const Eigen::MatrixXd d_logits = softmax_columns_backward(d.weights, up.weights);
  const Eigen::MatrixXd d_skin_in = backward(model.skinning, d.skinning_tape, d_logits, grad.skinning);

  Eigen::MatrixXd d_offsets(9, nn);
  for (std::size_t i = 0; i < n; ++i) {
    const auto c = static_cast<Eigen::Index>(i);
    const Vec3 g_xnr = up.positions[i] + d_skin_in.col(c);
    const CovarianceGrad cg = build_covariance_backward(d.log_scales[i], d.rotations[i], up.covariances[i]);

    const Quaternion q_off = rotation_offset(d.rotation_offsets[i]);
    const Vec4 g_qc = quat_right_matrix(q_off).transpose() * cg.d_rotation;
    const Vec4 g_qoff = quat_left_matrix(cloud.rotations[i]).transpose() * cg.d_rotation;
    const Vec4 raw(1.0, d.rotation_offsets[i].x(), d.rotation_offsets[i].y(), d.rotation_offsets[i].z());
    const double raw_len = raw.norm();
    const Vec4 unit = raw / raw_len;
    const Vec4 g_raw = (g_qoff - unit * unit.dot(g_qoff)) / raw_len;

    grad.positions[i] += g_xnr;
    grad.log_scales[i] += cg.d_log_scale;
    grad.rotations[i] += g_qc;
    d_offsets.block<3, 1>(0, c) = g_xnr;
    d_offsets.block<3, 1>(3, c) = cg.d_log_scale;
    d_offsets.block<3, 1>(6, c) = g_raw.tail<3>();
  }
  const Eigen::MatrixXd d_nr_in = backward(model.nonrigid, d.nonrigid_tape, d_offsets, grad.nonrigid);
  Eigen::VectorXd g_latent = up.latent;
  for (std::size_t i = 0; i < n; ++i) {
    const auto c = static_cast<Eigen::Index>(i);
    grad.positions[i] += d_nr_in.block<3, 1>(0, c);
    g_latent += d_nr_in.block(3, c, lw, 1);
  }
  backward(model.pose_encoder, d.encoder_tape, Eigen::MatrixXd(g_latent), grad.pose_encoder);
}

std::vector<double> trajectory_gradients_from_transforms(
    const KinematicChain& chain, const ExposureTrajectory& traj, const std::vector<double>& times,
    const std::vector<std::vector<TransformGrad>>& transform_grads, double step) {
  if (times.size() != transform_grads.size()) {
    throw std::invalid_argument("one set of transform gradients is needed per exposure time");
  }
  auto surrogate = [&](const ExposureTrajectory& t) {
    double s = 0.0;
    for (std::size_t l = 0; l < times.size(); ++l) {
      const auto transforms = forward_kinematics(chain, t.sample(times[l]));
      for (std::size_t j = 0; j < transforms.size(); ++j) {
        s += transforms[j].rotation.cwiseProduct(transform_grads[l][j].rotation).sum() +
             transforms[j].translation.dot(transform_grads[l][j].translation);
      }
    }
    return s;
  };
  return trajectory_gradients(surrogate, traj, step);
}

void to_json(nlohmann::json& j, const DenseNet& net) {
  j = nlohmann::json::array();
  for (const auto& l : net.layers) {
    j.push_back({{"rows", l.weight.rows()},
                 {"cols", l.weight.cols()},
                 {"activation", to_string(l.activation)},
                 {"weight", std::vector<double>(l.weight.data(), l.weight.data() + l.weight.size())},
                 {"bias", std::vector<double>(l.bias.data(), l.bias.data() + l.bias.size())}});
  }
}

void from_json(const nlohmann::json& j, DenseNet& net) {
  net.layers.clear();
  for (const auto& lj : j) {
    DenseLayer l;
    const auto rows = lj.at("rows").get<Eigen::Index>();
    const auto cols = lj.at("cols").get<Eigen::Index>();
    const auto w = lj.at("weight").get<std::vector<double>>();
    const auto b = lj.at("bias").get<std::vector<double>>();
    if (static_cast<Eigen::Index>(w.size()) != rows * cols || static_cast<Eigen::Index>(b.size()) != rows) {
      throw std::runtime_error("network tensor shape does not match its data");
    }
    if (!net.layers.empty() && net.layers.back().weight.rows() != cols) {
      throw std::runtime_error("network layer widths do not chain");
    }
    l.weight = Eigen::Map<const Eigen::MatrixXd>(w.data(), rows, cols);
    l.bias = Eigen::Map<const Eigen::VectorXd>(b.data(), rows);
    l.activation = activation_from_string(lj.at("activation").get<std::string>());
    net.layers.push_back(std::move(l));
  }
}

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  const AvatarModel& m = ck.model;
  nlohmann::json j;
  j["format_version"] = kCheckpointFormatVersion;
  j["iteration"] = ck.iteration;
  j["config"] = m.config;
  j["chain"] = m.chain;
  j["cloud"] = m.cloud;
  j["nets"] = {{"pose_encoder", m.pose_encoder}, {"nonrigid", m.nonrigid},
               {"skinning", m.skinning},         {"color", m.color},
               {"fusion", m.fusion}};
  j["frame_embeddings"] = {
      {"rows", m.frame_embeddings.rows()},
      {"cols", m.frame_embeddings.cols()},
      {"data", std::vector<double>(m.frame_embeddings.data(),
                                   m.frame_embeddings.data() + m.frame_embeddings.size())}};
  j["trajectories"] = nlohmann::json::array();
  for (const auto& t : ck.trajectories) {
    j["trajectories"].push_back({{"mode", to_string(t.mode)}, {"knots", t.knots}});
  }
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write checkpoint " + path.string());
  out << j.dump() << '\n';
  if (!out) throw std::runtime_error("failed writing checkpoint " + path.string());
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
  try {
    const nlohmann::json j = nlohmann::json::parse(in);
    if (j.at("format_version").get<int>() != kCheckpointFormatVersion) {
      throw std::runtime_error("unsupported checkpoint format version");
    }
    Checkpoint ck;
    ck.iteration = j.at("iteration").get<std::int64_t>();
    AvatarModel& m = ck.model;
    m.config = j.at("config").get<ModelConfig>();
    m.chain = j.at("chain").get<KinematicChain>();
    m.cloud = j.at("cloud").get<GaussianCloud>();
    const auto& nets = j.at("nets");
    m.pose_encoder = nets.at("pose_encoder").get<DenseNet>();
    m.nonrigid = nets.at("nonrigid").get<DenseNet>();
    m.skinning = nets.at("skinning").get<DenseNet>();
    m.color = nets.at("color").get<DenseNet>();
    m.fusion = nets.at("fusion").get<DenseNet>();
    const auto& fe = j.at("frame_embeddings");
    const auto data = fe.at("data").get<std::vector<double>>();
    m.frame_embeddings = Eigen::Map<const Eigen::MatrixXd>(
        data.data(), fe.at("rows").get<Eigen::Index>(), fe.at("cols").get<Eigen::Index>());
    for (const auto& tj : j.at("trajectories")) {
      ExposureTrajectory t;
      t.mode = interpolation_from_string(tj.at("mode").get<std::string>());
      t.knots = tj.at("knots").get<std::vector<Pose>>();
      ck.trajectories.push_back(std::move(t));
    }
    return ck;
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("corrupt checkpoint " + path.string() + ": " + e.what());
  }
}

}  // namespace avatar
