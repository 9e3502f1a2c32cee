#include "avatar/synthdata.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <nlohmann/json.hpp>
#include <numbers>
#include <random>
#include <stdexcept>

namespace avatar {

namespace {

const Vec3 kBoneColors[] = {{0.85, 0.35, 0.25}, {0.95, 0.8, 0.55}, {0.25, 0.55, 0.9},
                            {0.2, 0.8, 0.45},   {0.9, 0.75, 0.2},  {0.65, 0.3, 0.85}};

Quaternion from_rotation_vector(const Vec3& r) {
  const double angle = r.norm();
  if (angle < 1e-15) return Quaternion::identity();
  return Quaternion::from_axis_angle(r / angle, angle);
}

}  // namespace

GroundTruthScene make_scene(std::uint64_t seed, const SceneConfig& config) {
  GroundTruthScene s;
  s.chain = KinematicChain::default_humanoid();
  const auto capsules = s.chain.bones();
  s.bones = sample_capsule_surface(capsules, config.gaussians, seed, s.cloud.positions);
  const auto nn = mean_neighbor_distance(s.cloud.positions, 3);
  for (std::size_t i = 0; i < s.cloud.positions.size(); ++i) {
    s.cloud.log_scales.push_back(Vec3::Constant(std::log(0.8 * nn[i])));
    s.cloud.rotations.push_back(Quaternion::identity());
    s.cloud.opacity_logits.push_back(logit(0.9));
    const Capsule& c = capsules[static_cast<std::size_t>(s.bones[i])];
    const Vec3 axis = c.b - c.a;
    const double t = axis.squaredNorm() > 0 ? (s.cloud.positions[i] - c.a).dot(axis) / axis.squaredNorm() : 0.0;
    const double stripes = 0.5 * (1.0 + std::sin(2.0 * std::numbers::pi * 3.0 * t));
    const Vec3 base = kBoneColors[static_cast<std::size_t>(s.bones[i]) % std::size(kBoneColors)];
    s.colors.push_back(base * (0.45 + 0.55 * stripes));
  }
  s.cloud.features.resize(0, static_cast<Eigen::Index>(s.cloud.positions.size()));

  const auto cams = scene_cameras(config);
  s.train_camera = cams.front();
  s.eval_cameras.assign(cams.begin() + 1, cams.end());
  return s;
}

std::vector<Camera> scene_cameras(const SceneConfig& config) {
  const Vec3 target(0.0, 0.32, 0.0);
  const Vec3 up(0.0, 1.0, 0.0);
  std::vector<Camera> cams;
  cams.push_back(Camera::look_at(target + Vec3(0, 0, config.camera_distance), target, up, config.focal,
                                 config.width, config.height));
  for (int e = 0; e < config.eval_cameras; ++e) {
    const double a = (e % 2 == 0 ? 1.0 : -1.0) * config.eval_camera_angle_deg * (1 + e / 2) *
                     std::numbers::pi / 180.0;
    const Vec3 eye = target + config.camera_distance * Vec3(std::sin(a), 0.0, std::cos(a));
    cams.push_back(Camera::look_at(eye, target, up, config.focal, config.width, config.height));
  }
  return cams;
}

ObservedGaussians pose_ground_truth(const GroundTruthScene& scene, const Pose& pose) {
  const auto transforms = forward_kinematics(scene.chain, pose);
  ObservedGaussians g;
  for (std::size_t i = 0; i < scene.cloud.size(); ++i) {
    const RigidTransform& t = transforms[static_cast<std::size_t>(scene.bones[i])];
    g.positions.push_back(apply_rigid(t, scene.cloud.positions[i]));
    g.covariances.push_back(t.rotation * build_covariance(scene.cloud.log_scales[i], scene.cloud.rotations[i]) *
                            t.rotation.transpose());
    g.colors.push_back(scene.colors[i]);
    g.opacities.push_back(scene.cloud.opacity(i));
  }
  return g;
}

ImageBuffer render_ground_truth(const GroundTruthScene& scene, const Pose& pose, const Camera& cam) {
  return render(pose_ground_truth(scene, pose), cam);
}

MotionScript make_motion(std::uint64_t seed, int frames, int blur_size, std::size_t joint_count,
                         const MotionConfig& config) {
  if (frames < 1) throw std::invalid_argument("make_motion: frames must be >= 1");
  if (blur_size < 1 || blur_size % 2 == 0) {
    throw std::invalid_argument("make_motion: blur size must be odd so a center subframe exists");
  }
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> uni(0.0, 1.0);

  // angle(t) = Σ_h a_h sin(ω_h t + φ_h) per joint and axis; two bands in
  // [0.5 ω0, ω0].
  struct Band {
    double amplitude, omega, phase;
  };
  constexpr int kBands = 2;
  const std::size_t channels = 3 * joint_count + 1 + 3;  // joints, root yaw, root sway
  std::vector<std::vector<Band>> bands(channels);
  for (std::size_t c = 0; c < channels; ++c) {
    double peak;
    if (c < 3 * joint_count) {
      const std::size_t j = c / 3;
      peak = j < config.joint_amplitude.size() ? config.joint_amplitude[j] : config.joint_amplitude.back();
    } else if (c == 3 * joint_count) {
      peak = config.root_yaw_amplitude;
    } else {
      peak = config.root_sway;
    }
    for (int h = 0; h < kBands; ++h) {
      bands[c].push_back({peak / kBands, config.frequency * (0.5 + 0.5 * uni(rng)),
                          2.0 * std::numbers::pi * uni(rng)});
    }
  }
  // Cap joint angular speed: |d r/dt| <= sqrt(3) max_c Σ a ω per subframe.
  double speed = 0.0;
  for (std::size_t c = 0; c <= 3 * joint_count; ++c) {
    double s = 0.0;
    for (const auto& b : bands[c]) s += b.amplitude * b.omega;
    speed = std::max(speed, s);
  }
  const double bound = std::sqrt(3.0) * speed;
  if (bound > config.max_subframe_rotation) {
    const double scale = config.max_subframe_rotation / bound;
    for (std::size_t c = 0; c <= 3 * joint_count; ++c)
      for (auto& b : bands[c]) b.amplitude *= scale;
  }

  auto eval = [&](std::size_t c, double t) {
    double v = 0.0;
    for (const auto& b : bands[c]) v += b.amplitude * std::sin(b.omega * t + b.phase);
    return v;
  };
  auto pose_at = [&](double t) {
    Pose p = Pose::rest(joint_count);
    for (std::size_t j = 0; j < joint_count; ++j) {
      p.joints[j] = from_rotation_vector(Vec3(eval(3 * j, t), eval(3 * j + 1, t), eval(3 * j + 2, t)));
    }
    p.root_orientation = from_rotation_vector(Vec3(0.0, eval(3 * joint_count, t), 0.0));
    p.root_translation = Vec3(eval(3 * joint_count + 1, t), eval(3 * joint_count + 2, t),
                              eval(3 * joint_count + 3, t));
    return p;
  };

  MotionScript script;
  script.blur_size = blur_size;
  const int half = blur_size / 2;
  for (int f = 0; f < frames; ++f) {
    std::vector<Pose> sub;
    for (int s = -half; s <= half; ++s) sub.push_back(pose_at(static_cast<double>(f * config.frame_stride + s)));
    script.subframes.push_back(std::move(sub));
  }
  return script;
}

double max_subframe_rotation(const MotionScript& script) {
  double worst = 0.0;
  for (const auto& sub : script.subframes) {
    for (std::size_t s = 1; s < sub.size(); ++s) {
      worst = std::max(worst, rotation_angle_between(sub[s - 1].root_orientation, sub[s].root_orientation));
      for (std::size_t j = 0; j < sub[s].joints.size(); ++j) {
        worst = std::max(worst, rotation_angle_between(sub[s - 1].joints[j], sub[s].joints[j]));
      }
    }
  }
  return worst;
}

OracleFrame blur_oracle_frame(const GroundTruthScene& scene, const MotionScript& script,
                              std::size_t frame, const Camera& cam) {
  const auto& sub = script.subframes.at(frame);
  std::vector<ImageBuffer> renders;
  renders.reserve(sub.size());
  for (const auto& pose : sub) renders.push_back(render_ground_truth(scene, pose, cam));
  OracleFrame out;
  out.blurred = synthesize_blur(renders);
  out.sharp = renders[sub.size() / 2];
  out.mask.resize(out.sharp.pixel_count());
  for (std::size_t p = 0; p < out.mask.size(); ++p) out.mask[p] = out.sharp.alpha[p] > 0.5 ? 1.0 : 0.0;
  return out;
}

Dataset blur_oracle(const GroundTruthScene& scene, const MotionScript& script, double pose_noise,
                    std::uint64_t noise_seed) {
  Dataset ds;
  ds.chain = scene.chain;
  ds.train_camera = scene.train_camera;
  ds.eval_cameras = scene.eval_cameras;
  ds.blur_size = script.blur_size;
  ds.pose_noise = pose_noise;
  std::mt19937_64 rng(noise_seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  auto clean = [](ImageBuffer img) {
    img.quantize_to_float();
    std::fill(img.alpha.begin(), img.alpha.end(), 0.0);
    return img;
  };
  for (std::size_t f = 0; f < script.frame_count(); ++f) {
    OracleFrame o = blur_oracle_frame(scene, script, f, scene.train_camera);
    DatasetFrame df;
    df.center_pose = script.center(f);
    df.input_pose = df.center_pose;
    for (auto& q : df.input_pose.joints) {
      const Vec3 r(normal(rng), normal(rng), normal(rng));
      q = quat_mul(q, from_rotation_vector(pose_noise * r));
    }
    df.blurred = clean(std::move(o.blurred));
    df.sharp = clean(std::move(o.sharp));
    df.mask = std::move(o.mask);
    for (const auto& cam : scene.eval_cameras) df.eval_sharp.push_back(clean(render_ground_truth(scene, df.center_pose, cam)));
    ds.frames.push_back(std::move(df));
  }
  return ds;
}

Dataset synthesize_dataset(const SynthConfig& config) {
  const GroundTruthScene scene = make_scene(config.seed, config.scene);
  const MotionScript script =
      make_motion(config.seed + 1000, config.frames, config.blur_size, scene.chain.size(), config.motion);
  Dataset ds = blur_oracle(scene, script, config.pose_noise, config.seed + 2000);
  ds.seed = config.seed;
  ds.scene = config.scene;
  return ds;
}

namespace {

constexpr int kDatasetFormatVersion = 1;

nlohmann::json camera_json(const Camera& c) {
  const Mat3& r = c.world_to_camera.rotation;
  const Vec3& t = c.world_to_camera.translation;
  return {{"fx", c.fx}, {"fy", c.fy}, {"cx", c.cx}, {"cy", c.cy},
          {"width", c.width}, {"height", c.height},
          {"rotation", {r(0, 0), r(0, 1), r(0, 2), r(1, 0), r(1, 1), r(1, 2), r(2, 0), r(2, 1), r(2, 2)}},
          {"translation", {t.x(), t.y(), t.z()}}};
}

Camera json_camera(const nlohmann::json& j) {
  Camera c;
  c.fx = j.at("fx").get<double>();
  c.fy = j.at("fy").get<double>();
  c.cx = j.at("cx").get<double>();
  c.cy = j.at("cy").get<double>();
  c.width = j.at("width").get<int>();
  c.height = j.at("height").get<int>();
  const auto r = j.at("rotation").get<std::vector<double>>();
  const auto t = j.at("translation").get<std::vector<double>>();
  if (r.size() != 9 || t.size() != 3) throw std::runtime_error("camera extrinsics malformed");
  for (int i = 0; i < 9; ++i) c.world_to_camera.rotation(i / 3, i % 3) = r[static_cast<std::size_t>(i)];
  c.world_to_camera.translation = Vec3(t[0], t[1], t[2]);
  c.validate();
  return c;
}

std::string frame_name(const char* pattern, std::size_t i) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), pattern, static_cast<int>(i));
  return buf;
}

void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump(1) << '\n';
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

nlohmann::json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("dataset file missing: " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("corrupt dataset file " + path.string() + ": " + e.what());
  }
}

}  // namespace

void write_dataset(const std::filesystem::path& dir, const Dataset& ds) {
  std::error_code ec;
  std::filesystem::create_directories(dir / "frames", ec);
  std::filesystem::create_directories(dir / "masks", ec);
  if (ec) throw std::runtime_error("cannot create dataset directory " + dir.string() + ": " + ec.message());

  nlohmann::json cams = {{"train", camera_json(ds.train_camera)}, {"eval", nlohmann::json::array()}};
  for (const auto& c : ds.eval_cameras) cams["eval"].push_back(camera_json(c));
  write_json(dir / "cameras.json", cams);

  nlohmann::json poses = nlohmann::json::array();
  for (const auto& f : ds.frames) poses.push_back({{"input", f.input_pose}, {"center", f.center_pose}});
  write_json(dir / "poses.json", {{"frames", poses}});
  write_chain(dir / "chain.json", ds.chain);

  for (std::size_t i = 0; i < ds.frames.size(); ++i) {
    const auto& f = ds.frames[i];
    write_pfm(dir / frame_name("frames/blur_%04d.pfm", i), f.blurred);
    write_pfm(dir / frame_name("frames/sharp_%04d.pfm", i), f.sharp);
    for (std::size_t e = 0; e < f.eval_sharp.size(); ++e) {
      write_pfm(dir / (frame_name("frames/eval%d_", e) + frame_name("%04d.pfm", i)), f.eval_sharp[e]);
    }
    write_png_gray(dir / frame_name("masks/%04d.png", i), f.blurred.width, f.blurred.height, f.mask);
  }
  write_json(dir / "manifest.json",
             {{"format_version", kDatasetFormatVersion},
              {"frames", ds.frames.size()},
              {"blur_size", ds.blur_size},
              {"seed", ds.seed},
              {"pose_noise", ds.pose_noise},
              {"width", ds.train_camera.width},
              {"height", ds.train_camera.height},
              {"eval_cameras", ds.eval_cameras.size()},
              {"scene",
               {{"gaussians", ds.scene.gaussians},
                {"width", ds.scene.width},
                {"height", ds.scene.height},
                {"focal", ds.scene.focal},
                {"camera_distance", ds.scene.camera_distance},
                {"eval_camera_angle_deg", ds.scene.eval_camera_angle_deg},
                {"eval_cameras", ds.scene.eval_cameras}}},
              {"layout",
               {{"blurred", "frames/blur_%04d.pfm"},
                {"sharp", "frames/sharp_%04d.pfm"},
                {"eval_sharp", "frames/eval<camera>_%04d.pfm"},
                {"masks", "masks/%04d.png"},
                {"poses", "poses.json"},
                {"cameras", "cameras.json"},
                {"chain", "chain.json"}}}});
}

Dataset read_dataset(const std::filesystem::path& dir) {
  const nlohmann::json manifest = read_json(dir / "manifest.json");
  Dataset ds;
  try {
    if (manifest.at("format_version").get<int>() != kDatasetFormatVersion) {
      throw std::runtime_error("unsupported dataset format version in " + (dir / "manifest.json").string());
    }
    const auto frames = manifest.at("frames").get<std::size_t>();
    ds.blur_size = manifest.at("blur_size").get<int>();
    ds.seed = manifest.at("seed").get<std::uint64_t>();
    ds.pose_noise = manifest.at("pose_noise").get<double>();
    if (manifest.contains("scene")) {
      const auto& sc = manifest.at("scene");
      ds.scene.gaussians = sc.at("gaussians").get<std::size_t>();
      ds.scene.width = sc.at("width").get<int>();
      ds.scene.height = sc.at("height").get<int>();
      ds.scene.focal = sc.at("focal").get<double>();
      ds.scene.camera_distance = sc.at("camera_distance").get<double>();
      ds.scene.eval_camera_angle_deg = sc.at("eval_camera_angle_deg").get<double>();
      ds.scene.eval_cameras = sc.at("eval_cameras").get<int>();
    }
    const auto cams = read_json(dir / "cameras.json");
    ds.train_camera = json_camera(cams.at("train"));
    for (const auto& c : cams.at("eval")) ds.eval_cameras.push_back(json_camera(c));
    ds.chain = read_chain(dir / "chain.json");
    const auto poses = read_json(dir / "poses.json").at("frames");
    if (poses.size() != frames) throw std::runtime_error("poses.json frame count does not match manifest");
    for (std::size_t i = 0; i < frames; ++i) {
      DatasetFrame f;
      f.input_pose = poses[i].at("input").get<Pose>();
      f.center_pose = poses[i].at("center").get<Pose>();
      f.blurred = read_pfm(dir / frame_name("frames/blur_%04d.pfm", i));
      f.sharp = read_pfm(dir / frame_name("frames/sharp_%04d.pfm", i));
      for (std::size_t e = 0; e < ds.eval_cameras.size(); ++e) {
        f.eval_sharp.push_back(read_pfm(dir / (frame_name("frames/eval%d_", e) + frame_name("%04d.pfm", i))));
      }
      int w = 0, h = 0;
      f.mask = read_png_gray(dir / frame_name("masks/%04d.png", i), w, h);
      if (w != f.blurred.width || h != f.blurred.height || w != ds.train_camera.width ||
          h != ds.train_camera.height) {
        throw std::runtime_error("frame " + std::to_string(i) + " dimensions do not match the camera");
      }
      ds.frames.push_back(std::move(f));
    }
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("corrupt dataset manifest in " + dir.string() + ": " + e.what());
  }
  return ds;
}

}  // namespace avatar
