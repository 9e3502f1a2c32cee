#include "avatar/articulation.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <nlohmann/json.hpp>
#include <numbers>
#include <stdexcept>

namespace avatar {

double Capsule::area() const {
  return 2.0 * std::numbers::pi * radius * (b - a).norm() +
         4.0 * std::numbers::pi * radius * radius;
}

double Capsule::distance_to_axis(const Vec3& p) const {
  const Vec3 ab = b - a;
  const double len2 = ab.squaredNorm();
  const double t = len2 > 0.0 ? std::clamp((p - a).dot(ab) / len2, 0.0, 1.0) : 0.0;
  return (p - (a + t * ab)).norm();
}

void KinematicChain::validate() const {
  const std::size_t k = parents.size();
  if (k == 0) throw std::invalid_argument("kinematic chain has no joints");
  if (offsets.size() != k || tips.size() != k || radii.size() != k) {
    throw std::invalid_argument("kinematic chain arrays have different lengths");
  }
  if (parents[0] != -1) throw std::invalid_argument("joint 0 must be the root (parent -1)");
  for (std::size_t j = 1; j < k; ++j) {
    const int p = parents[j];
    if (p < 0 || static_cast<std::size_t>(p) >= k) {
      throw std::invalid_argument("joint " + std::to_string(j) + " has invalid parent");
    }
    // Parent-before-child ordering rules out cycles.
    if (static_cast<std::size_t>(p) >= j) {
      throw std::invalid_argument("joint " + std::to_string(j) +
                                  ": parent graph is cyclic or not topologically ordered");
    }
  }
  for (std::size_t j = 0; j < k; ++j) {
    if (!offsets[j].allFinite() || !tips[j].allFinite()) {
      throw std::invalid_argument("kinematic chain offsets must be finite");
    }
    if (!(radii[j] > 0.0)) throw std::invalid_argument("capsule radii must be positive");
  }
}

std::vector<Vec3> KinematicChain::rest_joint_positions() const {
  std::vector<Vec3> out(size());
  for (std::size_t j = 0; j < size(); ++j) {
    out[j] = parents[j] < 0 ? offsets[j] : Vec3(out[parents[j]] + offsets[j]);
  }
  return out;
}

Capsule KinematicChain::bone(std::size_t k) const {
  const auto joints = rest_joint_positions();
  return {joints[k], joints[k] + tips[k], radii[k]};
}

std::vector<Capsule> KinematicChain::bones() const {
  const auto joints = rest_joint_positions();
  std::vector<Capsule> out;
  for (std::size_t k = 0; k < size(); ++k) out.push_back({joints[k], joints[k] + tips[k], radii[k]});
  return out;
}

double KinematicChain::diameter() const {
  Vec3 lo = Vec3::Constant(1e300), hi = Vec3::Constant(-1e300);
  for (const auto& c : bones()) {
    for (const Vec3& p : {c.a, c.b}) {
      lo = lo.cwiseMin(p - Vec3::Constant(c.radius));
      hi = hi.cwiseMax(p + Vec3::Constant(c.radius));
    }
  }
  return (hi - lo).norm();
}

KinematicChain KinematicChain::default_humanoid() {
  KinematicChain c;
  c.parents = {-1, 0, 0, 2, 0, 4};
  c.offsets = {Vec3(0.0, 0.0, 0.0),    Vec3(0.0, 0.62, 0.0),  Vec3(0.16, 0.46, 0.0),
               Vec3(0.26, 0.0, 0.0),   Vec3(-0.16, 0.46, 0.0), Vec3(-0.26, 0.0, 0.0)};
  c.tips = {Vec3(0.0, 0.5, 0.0),  Vec3(0.0, 0.14, 0.0),  Vec3(0.26, 0.0, 0.0),
            Vec3(0.24, 0.0, 0.0), Vec3(-0.26, 0.0, 0.0), Vec3(-0.24, 0.0, 0.0)};
  c.radii = {0.12, 0.09, 0.05, 0.045, 0.05, 0.045};
  return c;
}

Pose Pose::rest(std::size_t joint_count) {
  Pose p;
  p.joints.assign(joint_count, Quaternion::identity());
  return p;
}

std::vector<double> Pose::flatten() const {
  std::vector<double> v;
  v.reserve(flat_size(joints.size()));
  v.insert(v.end(), {root_translation.x(), root_translation.y(), root_translation.z()});
  v.insert(v.end(), {root_orientation.w, root_orientation.x, root_orientation.y,
                     root_orientation.z});
  for (const auto& q : joints) v.insert(v.end(), {q.w, q.x, q.y, q.z});
  return v;
}

Pose Pose::unflatten(std::span<const double> v, std::size_t joint_count) {
  if (v.size() != flat_size(joint_count)) {
    throw std::invalid_argument("Pose::unflatten: size mismatch");
  }
  Pose p;
  p.root_translation = Vec3(v[0], v[1], v[2]);
  p.root_orientation = {v[3], v[4], v[5], v[6]};
  p.joints.resize(joint_count);
  for (std::size_t k = 0; k < joint_count; ++k) {
    p.joints[k] = {v[7 + 4 * k], v[8 + 4 * k], v[9 + 4 * k], v[10 + 4 * k]};
  }
  return p;
}

Eigen::VectorXd Pose::joint_feature() const {
  Eigen::VectorXd f(4 * joints.size());
  for (std::size_t k = 0; k < joints.size(); ++k) f.segment<4>(4 * k) = joints[k].vec();
  return f;
}

void Pose::normalize() {
  root_orientation = root_orientation.normalized();
  for (auto& q : joints) q = q.normalized();
}

namespace {

std::vector<RigidTransform> world_transforms(const KinematicChain& chain, const Pose& pose) {
  chain.validate();
  if (pose.joints.size() != chain.size()) {
    throw std::invalid_argument("pose joint count does not match chain");
  }
  std::vector<RigidTransform> world(chain.size());
  for (std::size_t j = 0; j < chain.size(); ++j) {
    const RigidTransform local{quat_to_rotmat(pose.joints[j]), chain.offsets[j]};
    if (chain.parents[j] < 0) {
      const RigidTransform root{quat_to_rotmat(pose.root_orientation), pose.root_translation};
      world[j] = RigidTransform::from_translation(chain.offsets[j])
                     .compose(RigidTransform{root.rotation, Vec3::Zero()})
                     .compose(RigidTransform{local.rotation, Vec3::Zero()});
      world[j].translation += pose.root_translation;
    } else {
      world[j] = world[chain.parents[j]].compose(local);
    }
  }
  return world;
}

}  // namespace

std::vector<RigidTransform> forward_kinematics(const KinematicChain& chain, const Pose& pose) {
  auto world = world_transforms(chain, pose);
  const auto rest = chain.rest_joint_positions();
  for (std::size_t j = 0; j < world.size(); ++j) {
    world[j] = world[j].compose(RigidTransform::from_translation(-rest[j]));
  }
  return world;
}

std::vector<Vec3> posed_joint_positions(const KinematicChain& chain, const Pose& pose) {
  const auto world = world_transforms(chain, pose);
  std::vector<Vec3> out;
  for (const auto& t : world) out.push_back(t.translation);
  return out;
}

Eigen::MatrixXd softmax_columns(const Eigen::MatrixXd& logits) {
  Eigen::MatrixXd out(logits.rows(), logits.cols());
  for (Eigen::Index c = 0; c < logits.cols(); ++c) {
    const double m = logits.col(c).maxCoeff();
    const Eigen::VectorXd e = (logits.col(c).array() - m).exp();
    out.col(c) = e / e.sum();
  }
  return out;
}

Eigen::MatrixXd softmax_columns_backward(const Eigen::MatrixXd& w, const Eigen::MatrixXd& dw) {
  Eigen::MatrixXd out(w.rows(), w.cols());
  for (Eigen::Index c = 0; c < w.cols(); ++c) {
    const double inner = w.col(c).dot(dw.col(c));
    out.col(c) = w.col(c).cwiseProduct((dw.col(c).array() - inner).matrix());
  }
  return out;
}

SkinningWeights prior_skin_weights(const KinematicChain& chain, const Vec3& point) {
  const auto bones = chain.bones();
  Eigen::MatrixXd logits(bones.size(), 1);
  for (std::size_t k = 0; k < bones.size(); ++k) {
    const double d = bones[k].distance_to_axis(point);
    const double r = bones[k].radius;
    logits(k, 0) = -d * d / (2.0 * r * r);
  }
  return softmax_columns(logits).col(0);
}

SkinningWeights skinning_weights_learned(const DenseNet& net, const Vec3& point) {
  if (net.input_width() != 3) {
    throw std::invalid_argument("skinning network must take a 3-vector input");
  }
  const Eigen::MatrixXd in = point;
  return softmax_columns(forward(net, in)).col(0);
}

NonrigidOffsets nonrigid_deform(const DenseNet& net, const Vec3& canonical_position,
                                const Eigen::VectorXd& latent) {
  if (net.input_width() != 3 + latent.size() || net.output_width() != 9) {
    throw std::invalid_argument("non-rigid network must map 3+latent inputs to 9 outputs");
  }
  Eigen::MatrixXd in(3 + latent.size(), 1);
  in.col(0) << canonical_position, latent;
  const Eigen::VectorXd out = forward(net, in).col(0);
  return {out.segment<3>(0), out.segment<3>(3), out.segment<3>(6)};
}

Quaternion rotation_offset(const Vec3& d_rotation) {
  return Quaternion{1.0, d_rotation.x(), d_rotation.y(), d_rotation.z()}.normalized();
}

Gaussian apply_nonrigid(const Gaussian& g, const NonrigidOffsets& o) {
  Gaussian out;
  out.position = g.position + o.d_position;
  out.log_scale = g.log_scale + o.d_log_scale;
  out.rotation = quat_mul(g.rotation, rotation_offset(o.d_rotation));
  return out;
}

RigidTransform blend_transforms(const SkinningWeights& weights,
                                const std::vector<RigidTransform>& transforms) {
  if (static_cast<std::size_t>(weights.size()) != transforms.size()) {
    throw std::invalid_argument("skinning weights and transforms differ in length");
  }
  RigidTransform t{Mat3::Zero(), Vec3::Zero()};
  for (std::size_t k = 0; k < transforms.size(); ++k) {
    t.rotation += weights[k] * transforms[k].rotation;
    t.translation += weights[k] * transforms[k].translation;
  }
  return t;
}

PosedGaussian apply_rigid_lbs(const Gaussian& g, const SkinningWeights& weights,
                              const std::vector<RigidTransform>& transforms) {
  const RigidTransform t = blend_transforms(weights, transforms);
  PosedGaussian out;
  out.linear = t.rotation;
  out.translation = t.translation;
  out.position = t.rotation * g.position + t.translation;
  out.rotation = t.rotation * quat_to_rotmat(g.rotation);
  out.covariance = t.rotation * build_covariance(g.log_scale, g.rotation) * t.rotation.transpose();
  return out;
}

namespace {

nlohmann::json vec_json(const Vec3& v) { return {v.x(), v.y(), v.z()}; }
Vec3 json_vec(const nlohmann::json& j) {
  if (!j.is_array() || j.size() != 3) throw std::runtime_error("expected a 3-vector");
  return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>()};
}
nlohmann::json quat_json(const Quaternion& q) { return {q.w, q.x, q.y, q.z}; }
Quaternion json_quat(const nlohmann::json& j) {
  if (!j.is_array() || j.size() != 4) throw std::runtime_error("expected a quaternion [w,x,y,z]");
  return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>(), j[3].get<double>()};
}

nlohmann::json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("malformed JSON in " + path.string() + ": " + e.what());
  }
}

void write_json_file(const std::filesystem::path& path, const nlohmann::json& j) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump(1) << '\n';
}

}  // namespace

void to_json(nlohmann::json& j, const KinematicChain& chain) {
  j = nlohmann::json::object();
  j["parents"] = chain.parents;
  j["radii"] = chain.radii;
  for (const auto& o : chain.offsets) j["offsets"].push_back(vec_json(o));
  for (const auto& t : chain.tips) j["tips"].push_back(vec_json(t));
}

void from_json(const nlohmann::json& j, KinematicChain& chain) {
  chain = {};
  chain.parents = j.at("parents").get<std::vector<int>>();
  chain.radii = j.at("radii").get<std::vector<double>>();
  for (const auto& o : j.at("offsets")) chain.offsets.push_back(json_vec(o));
  for (const auto& t : j.at("tips")) chain.tips.push_back(json_vec(t));
  chain.validate();
}

void to_json(nlohmann::json& j, const Pose& pose) {
  j = nlohmann::json::object();
  j["root_translation"] = vec_json(pose.root_translation);
  j["root_orientation"] = quat_json(pose.root_orientation);
  j["joints"] = nlohmann::json::array();
  for (const auto& q : pose.joints) j["joints"].push_back(quat_json(q));
}

void from_json(const nlohmann::json& j, Pose& pose) {
  pose = {};
  pose.root_translation = json_vec(j.at("root_translation"));
  pose.root_orientation = json_quat(j.at("root_orientation"));
  for (const auto& q : j.at("joints")) pose.joints.push_back(json_quat(q));
}

KinematicChain read_chain(const std::filesystem::path& path) {
  try {
    return read_json_file(path).get<KinematicChain>();
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("invalid chain file " + path.string() + ": " + e.what());
  }
}

void write_chain(const std::filesystem::path& path, const KinematicChain& chain) {
  write_json_file(path, nlohmann::json(chain));
}

std::vector<Pose> read_pose_sequence(const std::filesystem::path& path) {
  try {
    return read_json_file(path).at("poses").get<std::vector<Pose>>();
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("invalid pose file " + path.string() + ": " + e.what());
  }
}

void write_pose_sequence(const std::filesystem::path& path, const std::vector<Pose>& poses) {
  write_json_file(path, nlohmann::json{{"poses", poses}});
}

}  // namespace avatar
