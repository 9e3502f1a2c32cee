#include <filesystem>
#include <fstream>

#include "avatar/metrics.hpp"
#include "avatar/synthdata.hpp"
#include "test_util.hpp"

using namespace avatar;
using namespace avatar::test;
namespace fs = std::filesystem;

namespace {

SceneConfig small_scene() {
  SceneConfig c;
  c.gaussians = 300;
  c.width = c.height = 24;
  c.focal = 45.0;
  return c;
}

double segment_distance(const Vec3& p, const Vec3& a, const Vec3& b) {
  const Vec3 ab = b - a;
  const double t = std::clamp((p - a).dot(ab) / ab.squaredNorm(), 0.0, 1.0);
  return (p - (a + t * ab)).norm();
}

double mean_value(const ImageBuffer& img) {
  double s = 0.0;
  for (double v : img.rgb) s += v;
  return s / static_cast<double>(img.rgb.size());
}

}  // namespace

TEST_CASE("scene generation") {
  const GroundTruthScene a = make_scene(5, small_scene());
  const GroundTruthScene b = make_scene(5, small_scene());
  CHECK(a.cloud.positions == b.cloud.positions);
  CHECK(a.colors == b.colors);
  for (const auto& p : a.cloud.positions) {
    double best = 1e9;
    for (const auto& cap : a.chain.bones()) best = std::min(best, std::abs(segment_distance(p, cap.a, cap.b) - cap.radius));
    CHECK(best < 1e-9);
  }
  REQUIRE(a.eval_cameras.size() == 1);
  CHECK((a.eval_cameras[0].center() - a.train_camera.center()).norm() > 0.5);
}

TEST_CASE("motion script") {
  CHECK_THROWS_AS(make_motion(1, 4, 16), std::invalid_argument);
  MotionConfig still;
  still.joint_amplitude.assign(6, 0.0);
  still.root_yaw_amplitude = still.root_sway = 0.0;
  const MotionScript s = make_motion(1, 3, 9, 6, still);
  for (const auto& frame : s.subframes)
    for (const auto& p : frame) CHECK(p == s.subframes[0][0]);
  const MotionConfig cfg;
  const MotionScript m = make_motion(2, 10, 17, 6, cfg);
  CHECK(m.frame_count() == 10);
  CHECK(max_subframe_rotation(m) <= cfg.max_subframe_rotation + 1e-12);
  CHECK(max_subframe_rotation(m) > 0.0);
}

TEST_CASE("synthesis defaults") {
  const SynthConfig cfg;
  CHECK(cfg.frames == 60);
  CHECK(cfg.blur_size == 17);
}

TEST_CASE("blur oracle") {
  const GroundTruthScene scene = make_scene(3, small_scene());
  MotionConfig still;
  still.joint_amplitude.assign(6, 0.0);
  still.root_yaw_amplitude = still.root_sway = 0.0;
  const OracleFrame st = blur_oracle_frame(scene, make_motion(3, 1, 9, 6, still), 0, scene.train_camera);
  CHECK(max_abs_diff(st.blurred, st.sharp) < 1e-6);

  const OracleFrame one = blur_oracle_frame(scene, make_motion(3, 1, 1), 0, scene.train_camera);
  CHECK(max_abs_diff(one.blurred, one.sharp) == 0.0);

  const MotionScript script = make_motion(4, 1, 9);
  const OracleFrame f = blur_oracle_frame(scene, script, 0, scene.train_camera);
  double mean_of_means = 0.0;
  for (const auto& p : script.subframes[0]) mean_of_means += mean_value(render_ground_truth(scene, p, scene.train_camera));
  mean_of_means /= static_cast<double>(script.subframes[0].size());
  CHECK(std::abs(mean_value(f.blurred) - mean_of_means) < 1e-10);
}

TEST_CASE("dataset round trip") {
  SynthConfig cfg;
  cfg.frames = 3;
  cfg.blur_size = 5;
  cfg.scene = small_scene();
  const Dataset ds = synthesize_dataset(cfg);
  const Dataset again = synthesize_dataset(cfg);
  for (std::size_t f = 0; f < ds.frames.size(); ++f) CHECK(ds.frames[f].blurred == again.frames[f].blurred);

  const fs::path dir = fs::temp_directory_path() / "avatar_test_dataset";
  fs::remove_all(dir);
  write_dataset(dir, ds);
  const Dataset rd = read_dataset(dir);
  CHECK(rd.blur_size == 5);
  CHECK(rd.seed == cfg.seed);
  REQUIRE(rd.frames.size() == 3);
  for (std::size_t f = 0; f < 3; ++f) {
    CHECK(rd.frames[f].blurred.rgb == ds.frames[f].blurred.rgb);
    CHECK(rd.frames[f].sharp.rgb == ds.frames[f].sharp.rgb);
    CHECK(rd.frames[f].mask == ds.frames[f].mask);
    CHECK(rd.frames[f].input_pose == ds.frames[f].input_pose);
    CHECK(rd.frames[f].center_pose == ds.frames[f].center_pose);
  }
  CHECK(rd.train_camera.world_to_camera.rotation == ds.train_camera.world_to_camera.rotation);

  const fs::path frame = dir / "frames" / "blur_0001.pfm";
  const auto size = fs::file_size(frame);
  fs::resize_file(frame, size / 2);
  CHECK_THROWS(read_dataset(dir));
  fs::remove(dir / "manifest.json");
  CHECK_THROWS_WITH(read_dataset(dir), doctest::Contains("manifest"));
  std::ofstream(dir / "manifest.json") << "{ not json";
  CHECK_THROWS_WITH(read_dataset(dir), doctest::Contains("manifest"));
  fs::remove_all(dir);
}

TEST_CASE("ground truth renders are near-lossless against their own frames") {
  SynthConfig cfg;
  cfg.frames = 2;
  cfg.blur_size = 3;
  cfg.scene = small_scene();
  const Dataset ds = synthesize_dataset(cfg);
  const GroundTruthScene scene = make_scene(ds.seed, ds.scene);
  for (const auto& f : ds.frames) CHECK(psnr(render_ground_truth(scene, f.center_pose, ds.train_camera), f.sharp) >= 45.0);
}
