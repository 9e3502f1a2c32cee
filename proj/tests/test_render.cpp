#include <filesystem>

#include "avatar/render.hpp"
#include "test_util.hpp"

using namespace avatar;
using namespace avatar::test;

#ifndef AVATAR_TEST_DATA
#define AVATAR_TEST_DATA "."
#endif

namespace {

Camera axis_camera(int w, int h, double f) {
  Camera c;
  c.fx = c.fy = f;
  c.cx = 0.5 * (w - 1);
  c.cy = 0.5 * (h - 1);
  c.width = w;
  c.height = h;
  return c;
}

ObservedGaussians random_scene(std::mt19937_64& rng, int count) {
  std::uniform_real_distribution<double> u(-1.0, 1.0), c(0.0, 1.0);
  ObservedGaussians g;
  for (int i = 0; i < count; ++i) {
    g.positions.push_back(Vec3(0.4 * u(rng), 0.4 * u(rng), 3.0 + u(rng)));
    g.covariances.push_back(build_covariance(Vec3::Constant(-2.0) + 0.5 * Vec3(u(rng), u(rng), u(rng)),
                                             random_unit_quaternion(rng)));
    g.colors.push_back(Vec3(c(rng), c(rng), c(rng)));
    g.opacities.push_back(0.2 + 0.75 * c(rng));
  }
  return g;
}

Splat2D make_splat(const Vec2& mean, double var, double depth, int index) {
  Splat2D s;
  s.mean = mean;
  s.cov = var * Mat2::Identity();
  s.conic = s.cov.inverse();
  s.depth = depth;
  s.index = index;
  s.radius = 3.0 * std::sqrt(var);
  return s;
}

ObservedGaussians golden_scene() {
  ObservedGaussians g;
  g.positions = {Vec3(0, 0, 3), Vec3(0.2, -0.1, 3.5), Vec3(-0.3, 0.2, 2.5)};
  g.covariances = {build_covariance(Vec3(-2, -2.5, -2), Quaternion{0.9, 0.1, 0.3, 0.0}),
                   build_covariance(Vec3(-1.8, -2.2, -2.4), Quaternion{0.7, -0.2, 0.1, 0.4}),
                   build_covariance(Vec3(-2.3, -2.1, -1.9), Quaternion::identity())};
  g.colors = {Vec3(0.9, 0.2, 0.1), Vec3(0.1, 0.8, 0.3), Vec3(0.2, 0.3, 0.9)};
  g.opacities = {0.8, 0.6, 0.7};
  return g;
}

}  // namespace

TEST_CASE("projection of an on-axis isotropic Gaussian") {
  const Camera cam = axis_camera(16, 12, 20.0);
  const double sigma = 0.1, z = 2.0;
  const auto s = project_gaussian(cam, Vec3(0, 0, z), sigma * sigma * Mat3::Identity());
  REQUIRE(s.has_value());
  CHECK((s->mean - Vec2(cam.cx, cam.cy)).norm() < 1e-15);
  const double v = std::pow(cam.fx * sigma / z, 2) + kLowPassDilation;
  CHECK(s->cov(0, 0) == doctest::Approx(v).epsilon(1e-14));
  CHECK(s->cov(1, 1) == doctest::Approx(v).epsilon(1e-14));
  CHECK(std::abs(s->cov(0, 1)) < 1e-15);
  CHECK_FALSE(project_gaussian(cam, Vec3(0, 0, -1), Mat3::Identity()).has_value());
}

TEST_CASE("no splats gives the background") {
  RenderOptions opt;
  opt.background = Vec3(0.2, 0.4, 0.6);
  const ImageBuffer img = composite({}, {}, {}, 5, 4, opt);
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 5; ++x) CHECK(img.color(x, y) == opt.background);
  for (double a : img.alpha) CHECK(a == 0.0);
}

TEST_CASE("one splat at its center") {
  const std::vector<Splat2D> s{make_splat(Vec2(3, 2), 1.5, 1.0, 0)};
  const std::vector<Vec3> c{Vec3(0.3, 0.6, 0.9)};
  const std::vector<double> a{0.7};
  const ImageBuffer img = composite(s, c, a, 8, 8);
  CHECK((img.color(3, 2) - c[0] * a[0]).norm() < 1e-15);
}

TEST_CASE("two splats match the hand expansion") {
  const Vec2 p(5, 6);
  const std::vector<Splat2D> s{make_splat(p, 2.0, 1.0, 0), make_splat(p, 3.0, 2.0, 1)};
  const std::vector<Vec3> c{Vec3(0.9, 0.1, 0.4), Vec3(0.2, 0.7, 0.5)};
  const std::vector<double> a{0.6, 0.45};
  RenderOptions opt;
  opt.background = Vec3(0.1, 0.2, 0.3);
  const ImageBuffer img = composite(s, c, a, 12, 12, opt);
  const Vec3 expected = c[0] * a[0] + c[1] * a[1] * (1 - a[0]) + opt.background * (1 - a[0]) * (1 - a[1]);
  CHECK((img.color(5, 6) - expected).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("contribution weights and transmittance sum to one") {
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    std::mt19937_64 rng(seed);
    ObservedGaussians g = random_scene(rng, 5);
    g.colors.assign(g.size(), Vec3::Ones());
    const Camera cam = axis_camera(8, 8, 10.0);
    RenderTape tape;
    const ImageBuffer img = render(g, cam, {}, &tape);
    for (int y = 0; y < 8; ++y)
      for (int x = 0; x < 8; ++x) {
        const double t = tape.final_transmittance[img.index(x, y)];
        CHECK(std::abs(img.color(x, y)[0] + t - 1.0) < 1e-10);
      }
  }
}

TEST_CASE("render is deterministic and culls far clouds") {
  std::mt19937_64 rng(4);
  const ObservedGaussians g = random_scene(rng, 20);
  const Camera cam = axis_camera(16, 16, 20.0);
  CHECK(render(g, cam) == render(g, cam));
  ObservedGaussians far = g;
  for (auto& p : far.positions) p += Vec3(100, 0, 0);
  RenderOptions opt;
  opt.background = Vec3(0.5, 0.5, 0.5);
  const ImageBuffer img = render(far, cam, opt);
  for (int y = 0; y < 16; ++y)
    for (int x = 0; x < 16; ++x) CHECK(img.color(x, y) == opt.background);
  CHECK_THROWS_AS(render(ObservedGaussians{}, cam), std::invalid_argument);
}

TEST_CASE("golden render") {
  const ImageBuffer img = render(golden_scene(), axis_camera(16, 16, 24.0));
  const auto path = std::filesystem::path(AVATAR_TEST_DATA) / "golden_render.pfm";
  REQUIRE(std::filesystem::exists(path));
  const ImageBuffer ref = read_pfm(path);
  REQUIRE(ref.same_shape(img));
  double m = 0.0;
  for (std::size_t i = 0; i < img.rgb.size(); ++i) m = std::max(m, std::abs(img.rgb[i] - ref.rgb[i]));
  CHECK(m <= 1e-6);
}

TEST_CASE("zero upstream gives zero render gradients") {
  std::mt19937_64 rng(9);
  const ObservedGaussians g = random_scene(rng, 5);
  RenderTape tape;
  const ImageBuffer img = render(g, axis_camera(8, 8, 10.0), {}, &tape);
  const RenderGrads gr = render_backward(tape, ImageBuffer(8, 8));
  for (std::size_t i = 0; i < g.size(); ++i) {
    CHECK(gr.d_position[i].norm() == 0.0);
    CHECK(gr.d_covariance[i].norm() == 0.0);
    CHECK(gr.d_color[i].norm() == 0.0);
    CHECK(gr.d_opacity[i] == 0.0);
  }
  CHECK_THROWS_AS(render_backward(tape, ImageBuffer(4, 4)), std::invalid_argument);
}

TEST_CASE("canonical view direction under identity skinning") {
  const Vec3 d = Vec3(0.3, -0.4, 0.8).normalized();
  CHECK((canonical_view_direction(Mat3::Identity(), d) - d).norm() < 1e-15);
}
