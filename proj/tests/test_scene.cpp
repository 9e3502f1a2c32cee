#include <filesystem>

#include "avatar/scene.hpp"
#include "test_util.hpp"

using namespace avatar;
using namespace avatar::test;

namespace {

KinematicChain two_capsule_chain() {
  KinematicChain c;
  c.parents = {-1, 0};
  c.offsets = {Vec3::Zero(), Vec3(0, 1, 0)};
  c.tips = {Vec3(0, 1, 0), Vec3(0, 1, 0)};
  c.radii = {0.1, 0.2};
  return c;
}

GaussianCloud single_gaussian(double opacity, double scale) {
  GaussianCloud c;
  c.positions = {Vec3::Zero()};
  c.log_scales = {Vec3::Constant(std::log(scale))};
  c.rotations = {Quaternion::identity()};
  c.opacity_logits = {logit(opacity)};
  c.features = Eigen::MatrixXd::Zero(4, 1);
  return c;
}

}  // namespace

TEST_CASE("surface init rejects an empty request") {
  CHECK_THROWS_AS(init_from_chain_surface(two_capsule_chain(), 0, 1), std::invalid_argument);
}

TEST_CASE("single Gaussian lies on a capsule surface") {
  const KinematicChain chain = two_capsule_chain();
  const GaussianCloud c = init_from_chain_surface(chain, 1, 4);
  REQUIRE(c.size() == 1);
  bool on_surface = false;
  for (const auto& cap : chain.bones()) {
    on_surface |= std::abs(cap.distance_to_axis(c.positions[0]) - cap.radius) < 1e-12;
  }
  CHECK(on_surface);
}

TEST_CASE("surface init is deterministic") {
  const auto a = init_from_chain_surface(KinematicChain::default_humanoid(), 200, 9);
  const auto b = init_from_chain_surface(KinematicChain::default_humanoid(), 200, 9);
  CHECK(a.positions == b.positions);
  CHECK(a.log_scales == b.log_scales);
  CHECK(a.features == b.features);
}

TEST_CASE("samples per capsule follow capsule area") {
  const KinematicChain chain = two_capsule_chain();
  const auto caps = chain.bones();
  std::vector<Vec3> pts;
  const auto bone = sample_capsule_surface(caps, 2000, 21, pts);
  std::size_t first = std::count(bone.begin(), bone.end(), 0);
  // closed-form capsule area: cylinder side plus sphere
  auto area = [](double len, double r) { return 2 * kPi * r * len + 4 * kPi * r * r; };
  const double expected = 2000 * area(1, 0.1) / (area(1, 0.1) + area(1, 0.2));
  CHECK(std::abs(static_cast<double>(first) - expected) < 0.1 * expected);
  CHECK(std::abs(static_cast<double>(2000 - first) - (2000 - expected)) < 0.1 * (2000 - expected));
}

TEST_CASE("densify leaves a quiet cloud unchanged") {
  const GaussianCloud c = init_from_chain_surface(KinematicChain::default_humanoid(), 50, 2);
  DensifyStats stats(c.size());
  DensifyConfig cfg;
  cfg.scene_diameter = 2.0;
  const auto r = densify_and_prune(c, stats, cfg);
  CHECK(r.cloud.positions == c.positions);
  CHECK(r.cloud.features == c.features);
  CHECK(r.pruned + r.cloned + r.split == 0);
}

TEST_CASE("densify prunes transparent Gaussians") {
  GaussianCloud c = single_gaussian(0.5, 0.01);
  const GaussianCloud faint = single_gaussian(0.001, 0.01);
  c = c.gather({0, 0});
  c.opacity_logits[1] = faint.opacity_logits[0];
  DensifyStats stats(2);
  const auto r = densify_and_prune(c, stats, {});
  CHECK(r.cloud.size() == 1);
  CHECK(r.pruned == 1);
}

TEST_CASE("densify splits a large high-gradient Gaussian") {
  const GaussianCloud c = single_gaussian(0.5, 0.1);
  DensifyStats stats(1);
  stats.view_gradient_sum[0] = 1.0;
  stats.observations[0] = 1;
  DensifyConfig cfg;
  cfg.scene_diameter = 1.0;
  const auto r = densify_and_prune(c, stats, cfg);
  CHECK(r.cloud.size() == 2);
  CHECK(r.split == 1);
  CHECK(std::exp(r.cloud.log_scales[0][0]) == doctest::Approx(0.1 / cfg.split_scale_divisor));
}

TEST_CASE("densify refuses to prune everything") {
  const GaussianCloud c = single_gaussian(0.001, 0.01);
  DensifyStats stats(1);
  CHECK_THROWS_WITH_AS(densify_and_prune(c, stats, {}), doctest::Contains("empty cloud"), std::runtime_error);
}

TEST_CASE("cloud file round trip") {
  const GaussianCloud c = init_from_chain_surface(KinematicChain::default_humanoid(), 30, 5);
  const auto path = std::filesystem::temp_directory_path() / "avatar_test_cloud.json";
  write_cloud(path, c);
  const GaussianCloud d = read_cloud(path);
  CHECK(d.positions == c.positions);
  CHECK(d.log_scales == c.log_scales);
  CHECK(d.rotations == c.rotations);
  CHECK(d.opacity_logits == c.opacity_logits);
  CHECK(d.features == c.features);
  std::filesystem::remove(path);
}
