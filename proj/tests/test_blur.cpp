#include "avatar/blur.hpp"
#include "test_util.hpp"

using namespace avatar;
using namespace avatar::test;

namespace {

Pose random_pose(std::mt19937_64& rng, std::size_t k) {
  Pose p = Pose::rest(k);
  p.root_translation = Vec3(0.1, -0.2, 0.3);
  p.root_orientation = random_unit_quaternion(rng);
  for (auto& q : p.joints) q = random_unit_quaternion(rng);
  return p;
}

}  // namespace

TEST_CASE("virtual poses of a static trajectory are identical") {
  std::mt19937_64 rng(1);
  const Pose p = random_pose(rng, 4);
  const auto poses = sample_virtual_poses(ExposureTrajectory::from_pose(p), 7);
  REQUIRE(poses.size() == 7);
  for (const auto& q : poses) CHECK(q == p);
  CHECK_THROWS_AS(sample_virtual_poses(ExposureTrajectory::from_pose(p), 0), std::invalid_argument);
}

TEST_CASE("virtual poses hit the trajectory endpoints") {
  std::mt19937_64 rng(2);
  ExposureTrajectory traj = ExposureTrajectory::from_pose(random_pose(rng, 3));
  traj.knots.back() = random_pose(rng, 3);
  for (int n : {2, 5, 9}) {
    const auto poses = sample_virtual_poses(traj, n);
    CHECK(poses.front() == traj.start());
    CHECK(poses.back() == traj.end());
  }
  const auto times = virtual_times(5);
  CHECK(times == std::vector<double>{0.0, 0.25, 0.5, 0.75, 1.0});
}

TEST_CASE("spline trajectory endpoints") {
  std::mt19937_64 rng(3);
  ExposureTrajectory traj = ExposureTrajectory::from_pose(random_pose(rng, 2), Interpolation::cubic_spline);
  REQUIRE(traj.knots.size() == 4);
  for (auto& k : traj.knots) k = random_pose(rng, 2);
  const Pose a = traj.sample(0.0), b = traj.sample(1.0);
  CHECK((a.root_translation - traj.start().root_translation).norm() < 1e-14);
  CHECK((b.root_translation - traj.end().root_translation).norm() < 1e-14);
  for (std::size_t j = 0; j < 2; ++j) {
    CHECK(rotation_angle_between(a.joints[j], traj.start().joints[j]) < 1e-7);
    CHECK(rotation_angle_between(b.joints[j], traj.end().joints[j]) < 1e-7);
  }
}

TEST_CASE("blur of identical images is the image") {
  std::mt19937_64 rng(4);
  const ImageBuffer img = random_image(6, 5, rng);
  const std::vector<ImageBuffer> same(5, img);
  CHECK(max_abs_diff(synthesize_blur(same), img) < 1e-15);
}

TEST_CASE("blur of two images is their average") {
  std::mt19937_64 rng(5);
  const std::vector<ImageBuffer> two{random_image(4, 4, rng), random_image(4, 4, rng)};
  const ImageBuffer b = synthesize_blur(two);
  for (std::size_t i = 0; i < b.rgb.size(); ++i) CHECK(b.rgb[i] == (two[0].rgb[i] + two[1].rgb[i]) / 2);
  const std::vector<ImageBuffer> bad{ImageBuffer(4, 4), ImageBuffer(3, 4)};
  CHECK_THROWS_AS(synthesize_blur(bad), std::invalid_argument);
}

TEST_CASE("fusion mask with a zero final layer is one half") {
  std::mt19937_64 rng(6);
  const int latent = 4, embed = 3;
  const DenseNet net = DenseNet::make(latent + embed + kPositionEncodingWidth + 3, std::vector<int>{8}, 1, rng, true);
  const ImageBuffer sharp = random_image(5, 4, rng);
  const auto m = fusion_mask_image(net, Eigen::VectorXd::Ones(latent), Eigen::VectorXd::Ones(embed), sharp);
  for (double v : m) CHECK(v == 0.5);
  CHECK_THROWS_AS(fusion_mask_image(net, Eigen::VectorXd::Ones(latent + 1), Eigen::VectorXd::Ones(embed), sharp),
                  std::invalid_argument);
}

TEST_CASE("position encoding width") {
  CHECK(position_encoding(3, 2, 8, 8).size() == kPositionEncodingWidth);
}

TEST_CASE("fusion blend at constant masks") {
  std::mt19937_64 rng(7);
  const ImageBuffer s = random_image(7, 6, rng), b = random_image(7, 6, rng);
  const std::vector<double> zero(s.pixel_count(), 0.0), one(s.pixel_count(), 1.0), half(s.pixel_count(), 0.5);
  CHECK(blend(s, b, zero) == s);
  CHECK(blend(s, b, one) == b);
  const ImageBuffer h = blend(s, b, half);
  for (std::size_t i = 0; i < h.rgb.size(); ++i) CHECK(h.rgb[i] == doctest::Approx((s.rgb[i] + b.rgb[i]) / 2).epsilon(1e-15));
  CHECK_THROWS_AS(blend(s, ImageBuffer(6, 6), zero), std::invalid_argument);
}

TEST_CASE("trajectory gradients") {
  std::mt19937_64 rng(8);
  ExposureTrajectory traj = ExposureTrajectory::from_pose(random_pose(rng, 2));
  const auto flat = [](const ExposureTrajectory& t) { return t.flatten(); };
  const auto g0 = trajectory_gradients([](const ExposureTrajectory&) { return 3.0; }, traj);
  for (double g : g0) CHECK(std::abs(g) < 1e-6);

  const std::size_t stride = Pose::flat_size(2);
  const Vec3 target(0.5, 0.5, -0.5);
  auto quad = [&](const ExposureTrajectory& t) {
    const auto v = flat(t);
    double s = 0.0;
    for (int k = 0; k < 3; ++k) s += std::pow(v[k] - target[k], 2) + std::pow(v[stride + k] - target[k], 2);
    return s;
  };
  const auto g = trajectory_gradients(quad, traj);
  const auto v = flat(traj);
  for (int k = 0; k < 3; ++k) {
    CHECK(g[k] == doctest::Approx(2 * (v[k] - target[k])).epsilon(1e-8));
    CHECK(g[stride + k] == doctest::Approx(2 * (v[stride + k] - target[k])).epsilon(1e-8));
  }
}
