// avatar: synthesize blurred datasets, train and evaluate avatars, render
// poses, verify gradients and run n-sweeps.
#include <CLI11.hpp>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <nlohmann/json.hpp>
#include <optional>
#include <sstream>

#include "avatar/gradcheck.hpp"
#include "avatar/metrics.hpp"
#include "avatar/parallel.hpp"
#include "avatar/synthdata.hpp"
#include "avatar/train.hpp"

namespace fs = std::filesystem;
using namespace avatar;

namespace {

int blur_size_from_name(const std::string& name) {
  if (name == "small") return 17;
  if (name == "medium") return 33;
  if (name == "large") return 49;
  throw CLI::ValidationError("--blur-size", "expected small, medium or large");
}

struct SynthOptions {
  fs::path out;
  std::uint64_t seed = 1;
  int frames = 60;
  std::string blur_size = "small";
  int m = 0;
  double pose_noise = 0.01;
  int width = 64;
  int height = 64;
  double focal = 0.0;
  std::size_t gaussians = 1500;
  int eval_cameras = 1;
  bool smoke = false;
};

struct TrainOptions {
  fs::path data;
  fs::path out;
  fs::path config;
  std::optional<std::int64_t> iters;
  std::optional<std::int64_t> trajectory_start;
  std::optional<std::int64_t> fusion_start;
  std::optional<std::uint64_t> seed;
  std::optional<int> n;
  std::optional<std::string> interp;
  std::optional<std::size_t> gaussians;
  std::optional<double> lr_trajectory;
  std::optional<std::int64_t> checkpoint_every;
  bool no_motion_model = false;
  bool no_fusion = false;
  bool quiet = false;
};

void add_train_flags(CLI::App* cmd, TrainOptions& o) {
  cmd->add_option("--config", o.config, "JSON training config; flags override its keys");
  cmd->add_option("--iters", o.iters, "Total iterations; stage starts scale with it unless given");
  cmd->add_option("--trajectory-start", o.trajectory_start, "Iteration the blur stage starts");
  cmd->add_option("--fusion-start", o.fusion_start, "Iteration the fusion stage starts");
  cmd->add_option("--seed", o.seed, "Training seed");
  cmd->add_option("--n", o.n, "Number of virtual poses per exposure")->check(CLI::PositiveNumber);
  cmd->add_option("--interp", o.interp, "Exposure trajectory interpolation")
      ->check(CLI::IsMember({"slerp", "spline"}));
  cmd->add_option("--gaussians", o.gaussians, "Initial Gaussian count")->check(CLI::PositiveNumber);
  cmd->add_option("--lr-trajectory", o.lr_trajectory, "Trajectory learning rate");
  cmd->add_option("--checkpoint-every", o.checkpoint_every, "Checkpoint interval in iterations (0 disables)");
  cmd->add_flag("--no-motion-model", o.no_motion_model, "Ablation: train on blurred frames with a single pose");
  cmd->add_flag("--no-fusion", o.no_fusion, "Ablation: never blend in the sharp render");
  cmd->add_flag("--quiet", o.quiet, "Suppress progress output");
}

TrainConfig build_train_config(const TrainOptions& o) {
  TrainConfig cfg;
  if (!o.config.empty()) {
    std::ifstream in(o.config);
    if (!in) throw std::runtime_error("cannot read config " + o.config.string());
    cfg = nlohmann::json::parse(in).get<TrainConfig>();
  }
  if (o.iters) {
    const TrainConfig defaults;
    const double scale = static_cast<double>(*o.iters) / static_cast<double>(cfg.iterations);
    cfg.trajectory_start = static_cast<std::int64_t>(std::llround(cfg.trajectory_start * scale));
    cfg.fusion_start = static_cast<std::int64_t>(std::llround(cfg.fusion_start * scale));
    cfg.iterations = *o.iters;
  }
  if (o.trajectory_start) cfg.trajectory_start = *o.trajectory_start;
  if (o.fusion_start) cfg.fusion_start = *o.fusion_start;
  if (o.seed) cfg.seed = *o.seed;
  if (o.n) cfg.virtual_poses = *o.n;
  if (o.interp) cfg.interpolation = interpolation_from_string(*o.interp);
  if (o.gaussians) cfg.gaussians = *o.gaussians;
  if (o.lr_trajectory) cfg.lr_trajectory = *o.lr_trajectory;
  if (o.checkpoint_every) cfg.checkpoint_every = *o.checkpoint_every;
  if (o.no_motion_model) cfg.motion_model = false;
  if (o.no_fusion) cfg.fusion = false;
  cfg.validate();
  return cfg;
}

TrainCallbacks progress(bool quiet, std::int64_t total) {
  TrainCallbacks cb;
  if (quiet) return cb;
  const auto start = std::chrono::steady_clock::now();
  cb.on_iteration = [start, total](const LogRecord& r) {
    if (r.iteration % 100 != 0 && r.iteration + 1 != total) return;
    const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    std::printf("[%6lld/%lld] %-10s loss %.5f rgb %.5f mask %.5f gaussians %zu  %.0fs\n",
                static_cast<long long>(r.iteration), static_cast<long long>(total), to_string(r.stage).c_str(),
                r.total, r.parts.rgb, r.parts.mask, r.gaussians, s);
    std::fflush(stdout);
  };
  return cb;
}

void write_eval_csv(const fs::path& path, const EvalReport& r) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "frame,view,psnr,ssim\n";
  char line[128];
  for (std::size_t i = 0; i < r.train_view.size(); ++i) {
    std::snprintf(line, sizeof(line), "%zu,train,%.6f,%.6f\n", i, r.train_view[i].psnr, r.train_view[i].ssim);
    out << line;
  }
  const std::size_t per_frame = r.train_view.empty() ? 0 : r.eval_view.size() / r.train_view.size();
  for (std::size_t i = 0; i < r.eval_view.size(); ++i) {
    std::snprintf(line, sizeof(line), "%zu,eval%zu,%.6f,%.6f\n", per_frame ? i / per_frame : i,
                  per_frame ? i % per_frame : 0, r.eval_view[i].psnr, r.eval_view[i].ssim);
    out << line;
  }
  std::snprintf(line, sizeof(line), "mean,train,%.6f,%.6f\n", r.mean_psnr, r.mean_ssim);
  out << line;
  if (!r.eval_view.empty()) {
    std::snprintf(line, sizeof(line), "mean,eval,%.6f,%.6f\n", r.eval_mean_psnr, r.eval_mean_ssim);
    out << line;
  }
}

void save_image(const fs::path& path, const ImageBuffer& img) {
  if (path.extension() == ".pfm") {
    write_pfm(path, img);
  } else {
    write_png_rgb(path, img);
  }
}

int run_synth(const SynthOptions& o) {
  SynthConfig cfg;
  cfg.seed = o.seed;
  cfg.frames = o.frames;
  cfg.blur_size = o.m > 0 ? o.m : blur_size_from_name(o.blur_size);
  cfg.pose_noise = o.pose_noise;
  cfg.scene.width = o.width;
  cfg.scene.height = o.height;
  cfg.scene.gaussians = o.gaussians;
  cfg.scene.eval_cameras = o.eval_cameras;
  if (o.smoke) {
    cfg.frames = std::min(cfg.frames, 4);
    cfg.scene.width = cfg.scene.height = 32;
    cfg.scene.gaussians = std::min<std::size_t>(cfg.scene.gaussians, 600);
  }
  cfg.scene.focal = o.focal > 0.0 ? o.focal : 120.0 * cfg.scene.width / 64.0;
  const Dataset ds = synthesize_dataset(cfg);
  write_dataset(o.out, ds);
  double blur_psnr = 0.0;
  for (const auto& f : ds.frames) blur_psnr += psnr(f.blurred, f.sharp);
  std::printf("wrote %s: %zu frames, m=%d, seed=%llu, %dx%d, blurred-vs-sharp PSNR %.2f dB\n", o.out.c_str(),
              ds.frames.size(), ds.blur_size, static_cast<unsigned long long>(ds.seed), cfg.scene.width,
              cfg.scene.height, blur_psnr / static_cast<double>(ds.frames.size()));
  return 0;
}

fs::path default_run_dir(const std::string& name, const TrainConfig& cfg) {
  return fs::path("runs") / (name + "-seed" + std::to_string(cfg.seed));
}

int run_train(const TrainOptions& o, const std::string& argv_line) {
  const Dataset ds = read_dataset(o.data);
  const TrainConfig cfg = build_train_config(o);
  const fs::path out = o.out.empty() ? default_run_dir("train", cfg) : o.out;
  fs::create_directories(out);
  std::ofstream(out / "command.txt") << argv_line << '\n';
  const TrainState st = train(ds, cfg, out, progress(o.quiet, cfg.iterations));
  const EvalReport r = evaluate(st.checkpoint.model, ds);
  write_eval_csv(out / "metrics.csv", r);
  std::printf("trained %lld iterations; %zu Gaussians; sharp-frame PSNR %.3f dB SSIM %.4f; eval-camera PSNR %.3f dB\n",
              static_cast<long long>(st.checkpoint.iteration), st.checkpoint.model.cloud.size(), r.mean_psnr,
              r.mean_ssim, r.eval_mean_psnr);
  std::printf("checkpoint: %s\n", (out / "checkpoint.json").c_str());
  return 0;
}

struct RenderOptionsCli {
  fs::path checkpoint;
  fs::path data;
  fs::path pose_file;
  fs::path out;
  std::optional<std::size_t> frame;
  std::string camera = "train";
};

Camera pick_camera(const std::string& name, const std::vector<Camera>& cams) {
  if (name == "train") return cams.at(0);
  if (name.rfind("eval", 0) == 0) {
    const std::size_t e = name.size() > 4 ? std::stoul(name.substr(4)) : 0;
    if (e + 1 >= cams.size()) throw std::runtime_error("no camera named " + name);
    return cams[e + 1];
  }
  throw std::runtime_error("unknown camera '" + name + "' (expected train or evalN)");
}

int run_render(const RenderOptionsCli& o) {
  const Checkpoint ck = read_checkpoint(o.checkpoint);
  std::vector<Camera> cams;
  std::vector<Pose> poses;
  if (!o.data.empty()) {
    const Dataset ds = read_dataset(o.data);
    cams.push_back(ds.train_camera);
    cams.insert(cams.end(), ds.eval_cameras.begin(), ds.eval_cameras.end());
    if (o.frame) poses.push_back(ds.frames.at(*o.frame).input_pose);
  } else {
    cams = scene_cameras(SceneConfig{});
  }
  if (!o.pose_file.empty()) poses = read_pose_sequence(o.pose_file);
  if (poses.empty()) throw std::runtime_error("nothing to render: give --frame with --data, or --pose");
  const Camera cam = pick_camera(o.camera, cams);
  if (poses.size() == 1 && o.out.has_extension()) {
    save_image(o.out, render_pose(ck.model, poses[0], cam));
    std::printf("wrote %s\n", o.out.c_str());
    return 0;
  }
  fs::create_directories(o.out);
  for (std::size_t i = 0; i < poses.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "render_%04zu.png", i);
    save_image(o.out / name, render_pose(ck.model, poses[i], cam));
  }
  std::printf("wrote %zu renders to %s\n", poses.size(), o.out.c_str());
  return 0;
}

int run_eval(const fs::path& checkpoint, const fs::path& data, bool ground_truth, const fs::path& out) {
  const Dataset ds = read_dataset(data);
  EvalReport r;
  if (ground_truth) {
    const GroundTruthScene scene = make_scene(ds.seed, ds.scene);
    r = evaluate([&](const Pose& p, const Camera& c) { return render_ground_truth(scene, p, c); }, ds, false);
  } else {
    if (checkpoint.empty()) throw CLI::ValidationError("eval", "give --checkpoint or --ground-truth");
    r = evaluate(read_checkpoint(checkpoint).model, ds);
  }
  if (!out.empty()) write_eval_csv(out, r);
  std::printf("mean PSNR %.3f dB  SSIM %.4f  (sharp center frames)\n", r.mean_psnr, r.mean_ssim);
  if (!r.eval_view.empty()) {
    std::printf("eval-camera PSNR %.3f dB  SSIM %.4f\n", r.eval_mean_psnr, r.eval_mean_ssim);
  }
  return 0;
}

int run_gradcheck(const std::string& module, int seeds, std::uint64_t seed, double tolerance) {
  GradcheckConfig cfg;
  cfg.seeds = seeds;
  cfg.base_seed = seed;
  cfg.tolerance = tolerance;
  const auto start = std::chrono::steady_clock::now();
  const GradcheckReport r = run_gradcheck(gradcheck_module_from_string(module), cfg);
  for (const auto& g : r.groups) {
    std::printf("%-30s checked %6zu  kinks skipped %4zu  max rel err %.3e%s\n", g.name.c_str(), g.checked,
                g.skipped_kinks, g.max_rel_error, g.failures ? "  FAIL" : "");
  }
  const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  std::printf("%s: %zu entries over %d seeds, max rel err %.3e (tolerance %.1e), %.1fs\n",
              r.passed() ? "PASS" : "FAIL", r.checked(), seeds, r.max_rel_error(), tolerance, s);
  return r.passed() ? 0 : 2;
}

struct SweepOptions {
  fs::path data;
  fs::path out = "runs/sweep";
  std::vector<int> n_values{3, 5, 7, 9, 13};
  TrainOptions train;
};

int run_sweep(const SweepOptions& o) {
  const Dataset ds = read_dataset(o.data);
  fs::create_directories(o.out);
  std::ofstream csv(o.out / "sweep.csv");
  if (!csv) throw std::runtime_error("cannot write " + (o.out / "sweep.csv").string());
  csv << "n,iterations,final_loss,psnr,ssim,eval_psnr,eval_ssim,seconds\n";
  for (int n : o.n_values) {
    TrainOptions t = o.train;
    t.n = n;
    const TrainConfig cfg = build_train_config(t);
    const fs::path run = o.out / ("n" + std::to_string(n));
    const auto start = std::chrono::steady_clock::now();
    const TrainState st = train(ds, cfg, run, progress(true, cfg.iterations));
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    const EvalReport r = evaluate(st.checkpoint.model, ds);
    write_eval_csv(run / "metrics.csv", r);
    const double final_loss = st.log.empty() ? 0.0 : st.log.back().total;
    char line[256];
    std::snprintf(line, sizeof(line), "%d,%lld,%.6f,%.4f,%.5f,%.4f,%.5f,%.1f\n", n,
                  static_cast<long long>(cfg.iterations), final_loss, r.mean_psnr, r.mean_ssim, r.eval_mean_psnr,
                  r.eval_mean_ssim, seconds);
    csv << line << std::flush;
    std::printf("n=%-3d PSNR %.3f dB  SSIM %.4f  (%.1fs)\n", n, r.mean_psnr, r.mean_ssim, seconds);
  }
  std::printf("wrote %s\n", (o.out / "sweep.csv").c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Motion-blur-aware articulated Gaussian avatars"};
  app.require_subcommand(1);
  int threads = 0;
  app.add_option("--threads", threads, "Worker threads (default: AVATAR_THREADS or all cores)")
      ->check(CLI::NonNegativeNumber);

  SynthOptions synth;
  auto* synth_cmd = app.add_subcommand("synth", "Synthesize a blurred dataset from the ground-truth avatar");
  synth_cmd->add_option("--out", synth.out, "Output dataset directory")->required();
  synth_cmd->add_option("--seed", synth.seed, "Scene, motion and noise seed");
  synth_cmd->add_option("--frames", synth.frames, "Number of frames")->check(CLI::PositiveNumber);
  synth_cmd->add_option("--blur-size", synth.blur_size, "small (m=17), medium (33) or large (49)")
      ->check(CLI::IsMember({"small", "medium", "large"}));
  synth_cmd->add_option("--m", synth.m, "Subframes per frame (odd); overrides --blur-size");
  synth_cmd->add_option("--pose-noise", synth.pose_noise, "Input pose noise in radians per joint");
  synth_cmd->add_option("--width", synth.width, "Image width")->check(CLI::PositiveNumber);
  synth_cmd->add_option("--height", synth.height, "Image height")->check(CLI::PositiveNumber);
  synth_cmd->add_option("--focal", synth.focal, "Focal length in pixels (default scales with width)");
  synth_cmd->add_option("--gaussians", synth.gaussians, "Ground-truth Gaussian count")->check(CLI::PositiveNumber);
  synth_cmd->add_option("--eval-cameras", synth.eval_cameras, "Held-out camera count")->check(CLI::NonNegativeNumber);
  synth_cmd->add_flag("--smoke", synth.smoke, "Tiny preset: 4 frames at 32x32");

  TrainOptions train_opts;
  auto* train_cmd = app.add_subcommand("train", "Train an avatar on a dataset");
  train_cmd->add_option("--data", train_opts.data, "Dataset directory")->required();
  train_cmd->add_option("--out", train_opts.out, "Run directory (default runs/train-seed<seed>)");
  add_train_flags(train_cmd, train_opts);

  RenderOptionsCli render_opts;
  auto* render_cmd = app.add_subcommand("render", "Render sharp images from a checkpoint");
  render_cmd->add_option("--checkpoint", render_opts.checkpoint, "Checkpoint file")->required();
  render_cmd->add_option("--data", render_opts.data, "Dataset supplying cameras and frame poses");
  render_cmd->add_option("--frame", render_opts.frame, "Dataset frame whose input pose is rendered");
  render_cmd->add_option("--pose", render_opts.pose_file, "Pose sequence JSON {\"poses\": [...]}");
  render_cmd->add_option("--camera", render_opts.camera, "train or evalN");
  render_cmd->add_option("--out", render_opts.out, "Image file (.png/.pfm) or directory")->required();

  fs::path eval_checkpoint, eval_data, eval_out;
  bool eval_ground_truth = false;
  auto* eval_cmd = app.add_subcommand("eval", "PSNR/SSIM of sharp renders against the sharp center frames");
  eval_cmd->add_option("--checkpoint", eval_checkpoint, "Checkpoint file");
  eval_cmd->add_option("--data", eval_data, "Dataset directory")->required();
  eval_cmd->add_option("--out", eval_out, "Metrics CSV (frame,view,psnr,ssim)");
  eval_cmd->add_flag("--ground-truth", eval_ground_truth, "Score the ground-truth scene instead of a checkpoint");

  std::string gc_module = "all";
  int gc_seeds = 20;
  std::uint64_t gc_seed = 1;
  double gc_tolerance = 1e-3;
  auto* gc_cmd = app.add_subcommand("gradcheck", "Compare analytic gradients with finite differences");
  gc_cmd->add_option("--module", gc_module, "all, tinynet, render or model")
      ->check(CLI::IsMember({"all", "tinynet", "render", "model"}));
  gc_cmd->add_option("--seeds", gc_seeds, "Number of random scenes")->check(CLI::PositiveNumber);
  gc_cmd->add_option("--seed", gc_seed, "First seed");
  gc_cmd->add_option("--tolerance", gc_tolerance, "Maximum relative error");

  SweepOptions sweep;
  auto* sweep_cmd = app.add_subcommand("sweep", "Train once per virtual-pose count n and compare");
  sweep_cmd->add_option("--data", sweep.data, "Dataset directory")->required();
  sweep_cmd->add_option("--out", sweep.out, "Sweep directory (default runs/sweep)");
  sweep_cmd->add_option("--n-values", sweep.n_values, "Virtual pose counts")->delimiter(',');
  add_train_flags(sweep_cmd, sweep.train);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  std::ostringstream argv_line;
  for (int i = 0; i < argc; ++i) argv_line << (i ? " " : "") << argv[i];

  try {
    if (threads > 0) set_thread_count(threads);
    if (*synth_cmd) return run_synth(synth);
    if (*train_cmd) return run_train(train_opts, argv_line.str());
    if (*render_cmd) return run_render(render_opts);
    if (*eval_cmd) return run_eval(eval_checkpoint, eval_data, eval_ground_truth, eval_out);
    if (*gc_cmd) return run_gradcheck(gc_module, gc_seeds, gc_seed, gc_tolerance);
    if (*sweep_cmd) return run_sweep(sweep);
  } catch (const CLI::ValidationError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 1;
}
