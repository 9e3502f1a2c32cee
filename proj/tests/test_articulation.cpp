#include <Eigen/Eigenvalues>

#include "avatar/articulation.hpp"
#include "test_util.hpp"

using namespace avatar;
using namespace avatar::test;

namespace {

KinematicChain two_joint_chain() {
  KinematicChain c;
  c.parents = {-1, 0};
  c.offsets = {Vec3(0.5, 0, 0), Vec3(1, 0, 0)};
  c.tips = {Vec3(1, 0, 0), Vec3(1, 0, 0)};
  c.radii = {0.1, 0.1};
  return c;
}

DenseNet random_net(int in, std::vector<int> hidden, int out, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return DenseNet::make(in, hidden, out, rng);
}

}  // namespace

TEST_CASE("chain validation") {
  KinematicChain c = two_joint_chain();
  CHECK_NOTHROW(c.validate());
  c.parents = {-1, 1};
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c.parents = {1, 0};
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
}

TEST_CASE("rest pose gives identity skinning transforms") {
  const KinematicChain chain = KinematicChain::default_humanoid();
  for (const auto& t : forward_kinematics(chain, Pose::rest(chain.size()))) {
    CHECK(max_abs_diff(t.rotation, Mat3::Identity()) < 1e-15);
    CHECK(t.translation.norm() < 1e-15);
  }
}

TEST_CASE("root orientation rotates every joint about the root") {
  const KinematicChain chain = two_joint_chain();
  Pose pose = Pose::rest(2);
  pose.root_orientation = Quaternion::from_axis_angle(Vec3::UnitZ(), kPi / 2);
  const auto rest = chain.rest_joint_positions();
  const auto posed = posed_joint_positions(chain, pose);
  for (int k = 0; k < 2; ++k) {
    const Vec3 expected = rest[0] + rot_z(kPi / 2) * (rest[k] - rest[0]);
    CHECK((posed[k] - expected).norm() < 1e-14);
  }
  CHECK((posed[1] - Vec3(0.5, 1, 0)).norm() < 1e-14);
}

TEST_CASE("local joint rotation moves descendants only") {
  KinematicChain chain = two_joint_chain();
  chain.parents = {-1, 0, 1};
  chain.offsets.push_back(Vec3(1, 0, 0));
  chain.tips.push_back(Vec3(0.5, 0, 0));
  chain.radii.push_back(0.1);
  Pose pose = Pose::rest(3);
  pose.joints[1] = Quaternion::from_axis_angle(Vec3::UnitY(), kPi / 2);
  const auto rest = chain.rest_joint_positions();
  const auto posed = posed_joint_positions(chain, pose);
  CHECK((posed[0] - rest[0]).norm() < 1e-15);
  CHECK((posed[1] - rest[1]).norm() < 1e-15);
  CHECK((posed[2] - (rest[1] + rot_y(kPi / 2) * Vec3(1, 0, 0))).norm() < 1e-14);
}

TEST_CASE("prior skinning weights") {
  KinematicChain chain = two_joint_chain();
  const SkinningWeights on_axis = prior_skin_weights(chain, Vec3(2.0, 0, 0));
  CHECK(on_axis[1] > 0.99);
  KinematicChain sym;
  sym.parents = {-1, 0};
  sym.offsets = {Vec3(0, 0, 0), Vec3(0, 0, 0)};
  sym.tips = {Vec3(1, 0, 0), Vec3(-1, 0, 0)};
  sym.radii = {0.2, 0.2};
  const SkinningWeights mid = prior_skin_weights(sym, Vec3(0, 0.3, 0));
  CHECK(mid[0] == doctest::Approx(mid[1]).epsilon(1e-14));
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-1, 1);
  const KinematicChain human = KinematicChain::default_humanoid();
  for (int i = 0; i < 20; ++i) {
    CHECK(prior_skin_weights(human, Vec3(u(rng), u(rng), u(rng))).sum() == doctest::Approx(1.0).epsilon(1e-14));
  }
}

TEST_CASE("learned skinning weights") {
  DenseNet net = random_net(3, {8}, 6, 1);
  net.assign(std::vector<double>(net.parameter_count(), 0.0));
  const SkinningWeights w = skinning_weights_learned(net, Vec3(0.2, 0.4, -0.1));
  for (int k = 0; k < 6; ++k) CHECK(w[k] == doctest::Approx(1.0 / 6).epsilon(1e-15));
  CHECK_THROWS_AS(skinning_weights_learned(random_net(4, {8}, 6, 1), Vec3::Zero()), std::invalid_argument);
}

TEST_CASE("non-rigid deformation") {
  std::mt19937_64 rng(2);
  const DenseNet zero_final = DenseNet::make(3 + 4, std::vector<int>{8}, 9, rng, true);
  const NonrigidOffsets o = nonrigid_deform(zero_final, Vec3(0.1, 0.2, 0.3), Eigen::VectorXd::Ones(4));
  CHECK(o.d_position == Vec3::Zero());
  CHECK(o.d_log_scale == Vec3::Zero());
  CHECK(o.d_rotation == Vec3::Zero());
  const DenseNet net = random_net(7, {8}, 9, 5);
  const Eigen::VectorXd lat = Eigen::VectorXd::LinSpaced(4, -1, 1);
  const NonrigidOffsets a = nonrigid_deform(net, Vec3(0.1, 0.2, 0.3), lat);
  const NonrigidOffsets b = nonrigid_deform(net, Vec3(0.1, 0.2, 0.3), lat);
  CHECK(a.d_position == b.d_position);
  CHECK(a.d_rotation == b.d_rotation);
}

TEST_CASE("apply non-rigid offsets") {
  const Gaussian g{Vec3(1, 2, 3), Vec3(0.1, 0.2, 0.3), Quaternion::from_axis_angle(Vec3::UnitY(), 0.5)};
  const Gaussian same = apply_nonrigid(g, {});
  CHECK(same.position == g.position);
  CHECK(same.log_scale == g.log_scale);
  CHECK(same.rotation == g.rotation);

  NonrigidOffsets o;
  o.d_log_scale = Vec3(std::log(2.0), 0, 0);
  CHECK(std::exp(apply_nonrigid(g, o).log_scale[0]) == doctest::Approx(2 * std::exp(0.1)).epsilon(1e-14));

  const double theta = 0.01;
  o = {};
  o.d_rotation = Vec3(std::tan(theta / 2), 0, 0);
  const Quaternion r = apply_nonrigid(g, o).rotation;
  const Mat3 expected = quat_to_rotmat(g.rotation) * rot_x(theta);
  CHECK(max_abs_diff(quat_to_rotmat(r), expected) < 1e-12);
}

TEST_CASE("linear blend skinning") {
  std::mt19937_64 rng(8);
  const Gaussian g{Vec3(0.3, -0.2, 0.5), Vec3(-1, -2, -1.5), random_unit_quaternion(rng)};
  std::vector<RigidTransform> ts{{quat_to_rotmat(random_unit_quaternion(rng)), Vec3(1, 0, 0)},
                                 {quat_to_rotmat(random_unit_quaternion(rng)), Vec3(0, 1, 2)}};
  const PosedGaussian one = apply_rigid_lbs(g, Eigen::Vector2d(0, 1), ts);
  CHECK((one.position - apply_rigid(ts[1], g.position)).norm() < 1e-14);
  CHECK(max_abs_diff(one.linear, ts[1].rotation) < 1e-15);

  const std::vector<RigidTransform> ident(2);
  const PosedGaussian still = apply_rigid_lbs(g, Eigen::Vector2d(0.3, 0.7), ident);
  CHECK((still.position - g.position).norm() < 1e-15);
  CHECK(max_abs_diff(still.covariance, build_covariance(g.log_scale, g.rotation)) < 1e-15);

  const std::vector<RigidTransform> shifts{RigidTransform::from_translation(Vec3(1, 0, 0)),
                                           RigidTransform::from_translation(Vec3(0, 2, 4))};
  const PosedGaussian half = apply_rigid_lbs(g, Eigen::Vector2d(0.5, 0.5), shifts);
  CHECK((half.position - (g.position + Vec3(0.5, 1, 2))).norm() < 1e-15);

  const PosedGaussian blended = apply_rigid_lbs(g, Eigen::Vector2d(0.5, 0.5), ts);
  Eigen::SelfAdjointEigenSolver<Mat3> es(blended.covariance);
  CHECK(es.eigenvalues().minCoeff() >= 0.0);
}

TEST_CASE("pose flatten round trip") {
  std::mt19937_64 rng(4);
  Pose p = Pose::rest(3);
  p.root_translation = Vec3(1, 2, 3);
  p.root_orientation = random_unit_quaternion(rng);
  for (auto& q : p.joints) q = random_unit_quaternion(rng);
  CHECK(Pose::unflatten(p.flatten(), 3) == p);
  CHECK(p.flatten().size() == Pose::flat_size(3));
}
