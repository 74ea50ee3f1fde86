#include <malloc.h>

#include <Eigen/Core>
#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "mvdiff/denoiser.hpp"
#include "mvdiff/errors.hpp"
#include "mvdiff/evaluation.hpp"
#include "mvdiff/generation.hpp"
#include "mvdiff/image_io.hpp"
#include "mvdiff/synthdata.hpp"
#include "mvdiff/trainer.hpp"
#include "mvdiff/verify.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace mvdiff;

namespace {

constexpr int kExitOk = 0, kExitInvariant = 1, kExitInvalid = 2;

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  MVD_REQUIRE(in.good(), "cannot read " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_json(const fs::path& p, const json& j) {
  std::ofstream out(p);
  MVD_REQUIRE(out.good(), "cannot write " + p.string());
  out << j.dump(2) << "\n";
}

bool non_empty_dir(const fs::path& p) { return fs::is_directory(p) && !fs::is_empty(p); }

void prepare_out(const fs::path& out, bool force) {
  if (non_empty_dir(out)) {
    MVD_REQUIRE(force, "output directory " + out.string() + " is not empty (use --force)");
    fs::remove_all(out);
  }
  fs::create_directories(out);
}

std::vector<geometry::CameraView> read_poses(const fs::path& p) {
  const json j = json::parse(read_file(p));
  MVD_REQUIRE(j.is_array(), "pose file must hold a JSON array of cameras");
  std::vector<geometry::CameraView> views;
  for (const auto& c : j) views.push_back(synthdata::camera_from_json(c));
  MVD_REQUIRE(!views.empty(), "pose file is empty");
  return views;
}

std::vector<int> read_caption(const std::string& text, const denoiser::DenoiserConfig& cfg) {
  const auto tokens = synthdata::tokenize(text);
  MVD_REQUIRE(static_cast<int>(tokens.size()) <= cfg.max_caption, "caption longer than the model accepts");
  return tokens;
}

std::string frame_name(const std::string& prefix, int i) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%s_%03d.png", prefix.c_str(), i);
  return buf;
}

void write_frames(const fs::path& dir, const Tensor& images) {
  const int64_t n = images.dim(0), per = images.numel() / n;
  for (int64_t i = 0; i < n; ++i) {
    Tensor img({images.dim(1), images.dim(2), images.dim(3)});
    std::copy(images.data() + i * per, images.data() + (i + 1) * per, img.data());
    io::write_png(dir / frame_name("frame", static_cast<int>(i)), img);
  }
}

// --- dataset ---

struct DatasetArgs {
  int scenes = 64;
  fs::path out;
  uint64_t seed = 0;
  int size = 32;
  bool force = false;
};

int cmd_dataset(const DatasetArgs& a) {
  prepare_out(a.out, a.force);
  if (a.scenes == 0) std::cerr << "warning: --scenes 0 writes an empty dataset\n";
  const int n = synthdata::write_dataset(a.out, a.scenes, a.seed, a.size);
  write_json(a.out / "manifest.json", {{"command", "dataset"},
                                       {"scenes", n},
                                       {"seed", a.seed},
                                       {"image_size", a.size},
                                       {"frames", n * synthdata::kRingSize}});
  std::cout << "wrote " << n << " scenes (" << n * synthdata::kRingSize << " frames) to " << a.out.string() << "\n";
  return kExitOk;
}

// --- train ---

struct TrainArgs {
  std::string stage;
  fs::path data, config, out, init;
  bool resume = false;
  int max_steps = -1;
  bool quiet = false;
};

int cmd_train(const TrainArgs& a) {
  MVD_REQUIRE(a.stage == "2d" || a.stage == "mv", "--stage must be 2d or mv");
  const bool mv = a.stage == "mv";
  MVD_REQUIRE(!mv || !a.init.empty(), "--stage mv requires --init with a stage-2d checkpoint");
  MVD_REQUIRE(!mv || fs::exists(a.init / "manifest.json"), "init checkpoint not found: " + a.init.string());
  const std::string source = a.config.empty() ? std::string() : read_file(a.config);
  const trainer::TrainConfig cfg = trainer::parse_config(source);
  const auto scenes = synthdata::read_dataset(a.data);
  MVD_REQUIRE(!scenes.empty(), "dataset " + a.data.string() + " has no scenes");
  trainer::RunOptions opts;
  opts.stage = mv ? trainer::Stage::kMultiView : trainer::Stage::k2D;
  opts.out = a.out;
  if (mv) opts.init = a.init;
  opts.resume = a.resume;
  opts.config_source = source.empty() ? trainer::config_text(cfg) : source;
  opts.max_steps = a.max_steps;
  opts.quiet = a.quiet;
  const double held = trainer::run_stage(scenes, cfg, opts);
  std::cout << "held-out loss " << held << "; checkpoint in " << a.out.string() << "\n";
  return kExitOk;
}

// --- sample ---

struct SampleArgs {
  std::string mode;
  fs::path ckpt, poses, out, cond_poses;
  std::vector<std::string> cond_images;
  std::string caption;
  int steps = 50;
  double lambda_cfg = 7.5;
  double later_lambda = 0.0;
  int first_n = 10;
  int batch_ng = 10;
  uint64_t seed = 0;
  bool deterministic = false;
  bool force = false;
};

int cmd_sample(const SampleArgs& a) {
  MVD_REQUIRE(a.mode == "uncond" || a.mode == "cond" || a.mode == "trajectory",
              "--mode must be uncond, cond or trajectory");
  json manifest;
  const denoiser::Denoiser model = denoiser::load_checkpoint(a.ckpt, &manifest);
  const auto& cfg = model.config();
  const auto& s = manifest.at("schedule");
  const auto base = diffusion::make_schedule(s.at("t_max").get<int>(), s.at("beta_start").get<double>(),
                                             s.at("beta_end").get<double>());
  const auto views = read_poses(a.poses);
  const auto caption = read_caption(a.caption, cfg);
  generation::SampleOptions opts;
  opts.steps = a.steps;
  opts.lambda_cfg = a.lambda_cfg;
  opts.deterministic = a.deterministic;
  opts.seed = a.seed;
  opts.max_frames = cfg.max_frames;
  const int n = static_cast<int>(views.size());
  const auto eps = generation::model_eps(model);
  const Shape frame{cfg.image_channels, views[0].height, views[0].width};

  json run{{"command", "sample"},
           {"mode", a.mode},
           {"checkpoint", a.ckpt.string()},
           {"checkpoint_hash", trainer::hash_hex(read_file(a.ckpt / "params.bin"))},
           {"config_hash", manifest.value("config_hash", "")},
           {"poses", json::parse(read_file(a.poses))},
           {"caption", a.caption},
           {"seed", a.seed},
           {"steps", a.steps},
           {"deterministic", a.deterministic}};
  const auto t0 = std::chrono::steady_clock::now();
  Tensor images;
  if (a.mode == "uncond") {
    MVD_REQUIRE(n <= cfg.max_frames, "pose file has more frames than the model's maximum N");
    prepare_out(a.out, a.force);
    images = generation::generate_unconditional(eps, views, caption, base, opts, frame);
    run["lambda_cfg"] = a.lambda_cfg;
  } else if (a.mode == "cond") {
    MVD_REQUIRE(!a.cond_images.empty(), "cond mode needs --cond-images");
    MVD_REQUIRE(!a.cond_poses.empty(), "cond mode needs --cond-poses");
    const auto cond_views = read_poses(a.cond_poses);
    MVD_REQUIRE(cond_views.size() == a.cond_images.size(), "one --cond-poses entry per conditioning image");
    MVD_REQUIRE(n + static_cast<int>(cond_views.size()) <= cfg.max_frames,
                "pose files hold more frames than the model's maximum N");
    Tensor cond({static_cast<int64_t>(a.cond_images.size()), frame[0], frame[1], frame[2]});
    const int64_t per = cond.numel() / cond.dim(0);
    for (size_t k = 0; k < a.cond_images.size(); ++k) {
      const Tensor img = io::read_png(a.cond_images[k]);
      MVD_REQUIRE(img.shape() == frame, "conditioning image " + a.cond_images[k] + " does not match the pose size");
      std::copy(img.data(), img.data() + per, cond.data() + k * per);
    }
    prepare_out(a.out, a.force);
    images = generation::generate_conditional(eps, cond, cond_views, views, caption, base, opts);
    run["lambda_cfg"] = a.lambda_cfg;
    run["cond_images"] = a.cond_images;
    run["cond_poses"] = json::parse(read_file(a.cond_poses));
  } else {
    generation::require_normalized(views);
    const int first = std::min(a.first_n, n);
    MVD_REQUIRE(first + a.batch_ng <= cfg.max_frames || first == n, "first batch plus --batch-ng exceeds the model's N");
    prepare_out(a.out, a.force);
    const auto traj = generation::generate_trajectory(eps, views, first, a.batch_ng, caption, base, opts,
                                                      a.later_lambda);
    images = traj.images;
    json batches = json::array();
    for (const auto& b : traj.batches) batches.push_back(generation::batch_to_json(b));
    run["batches"] = batches;
    run["first_n"] = first;
    run["batch_ng"] = a.batch_ng;
  }
  write_frames(a.out, images);
  run["frames"] = images.dim(0);
  run["seconds"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  write_json(a.out / "manifest.json", run);
  std::cout << "wrote " << images.dim(0) << " frames to " << a.out.string() << "\n";
  return kExitOk;
}

// --- evaluate ---

struct EvaluateArgs {
  fs::path ckpt, data, report;
  bool untrained = false;
  std::string run_id;
  int count = 8;
  int steps = 50;
  double lambda_cfg = 1.0;
  uint64_t seed = 0;
};

int cmd_evaluate(const EvaluateArgs& a) {
  json manifest;
  denoiser::Denoiser model = denoiser::load_checkpoint(a.ckpt, &manifest);
  if (a.untrained) model = denoiser::Denoiser(model.config(), manifest.value("seed", uint64_t{0}));
  const auto& s = manifest.at("schedule");
  const auto base = diffusion::make_schedule(s.at("t_max").get<int>(), s.at("beta_start").get<double>(),
                                             s.at("beta_end").get<double>());
  auto scenes = synthdata::read_dataset(a.data);
  MVD_REQUIRE(!scenes.empty(), "evaluation dataset is empty");
  if (a.count > 0 && static_cast<int>(scenes.size()) > a.count) scenes.resize(a.count);
  evaluation::ConditionalEvalOptions opts;
  opts.steps = a.steps;
  opts.lambda_cfg = a.lambda_cfg;
  opts.seed = a.seed;
  const auto result = evaluation::evaluate_conditional(generation::model_eps(model), scenes, base, opts);
  json entry = evaluation::to_json(result);
  entry["checkpoint"] = a.ckpt.string();
  entry["untrained"] = a.untrained;
  entry["step"] = a.untrained ? 0 : manifest.value("step", 0);
  entry["lambda_cfg"] = a.lambda_cfg;
  entry["sample_steps"] = a.steps;
  entry["seed"] = a.seed;
  const std::string id = a.run_id.empty() ? a.ckpt.filename().string() : a.run_id;
  std::cout << id << ": psnr " << result.psnr << " ssim " << result.ssim << " consistency " << result.consistency
            << "\n";
  if (!a.report.empty()) {
    json report = fs::exists(a.report) ? json::parse(read_file(a.report)) : json::object();
    report[id] = entry;
    write_json(a.report, report);
  }
  return kExitOk;
}

// --- verify ---

int cmd_verify(const std::string& suite, const fs::path& report, uint64_t seed) {
  const auto names = verify::suite_names();
  MVD_REQUIRE(suite == "all" || std::find(names.begin(), names.end(), suite) != names.end(),
              "unknown suite '" + suite + "'");
  const auto reports = verify::run(suite, seed);
  bool ok = true;
  for (const auto& r : reports) {
    for (const auto& c : r.checks)
      std::cout << (c.passed ? "PASS " : "FAIL ") << r.suite << ": " << c.name << "  value=" << c.value
                << " tol=" << c.tolerance << (c.detail.empty() ? "" : "  (" + c.detail + ")") << "\n";
    std::cout << r.suite << " " << (r.passed() ? "passed" : "FAILED") << " in " << r.seconds << " s\n";
    ok = ok && r.passed();
  }
  const json j = verify::to_json(reports);
  if (!report.empty()) write_json(report, {{"passed", ok}, {"suites", j}});
  return ok ? kExitOk : kExitInvariant;
}

// Autograd graphs allocate and free many large buffers per step; keeping them
// on the heap instead of fresh mmaps avoids repeated page faults.
void tune_allocator() {
  mallopt(M_MMAP_THRESHOLD, 32 << 20);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
}

void apply_thread_env() {
  if (const char* v = std::getenv("MVDIFF_THREADS")) {
    const int n = std::atoi(v);
    if (n > 0) Eigen::setNbThreads(n);
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-view diffusion toolkit"};
  app.require_subcommand(1);

  DatasetArgs ds;
  auto* dataset = app.add_subcommand("dataset", "Render the synthetic multi-view corpus");
  dataset->add_option("--scenes", ds.scenes, "Number of scenes")->check(CLI::NonNegativeNumber);
  dataset->add_option("--out", ds.out, "Output directory")->required();
  dataset->add_option("--seed", ds.seed, "Generator seed");
  dataset->add_option("--size", ds.size, "Image side in pixels")->check(CLI::PositiveNumber);
  dataset->add_flag("--force", ds.force, "Replace a non-empty output directory");

  TrainArgs tr;
  auto* train = app.add_subcommand("train", "Run a training stage");
  train->add_option("--stage", tr.stage, "2d or mv")->required();
  train->add_option("--data", tr.data, "Dataset directory")->required();
  train->add_option("--config", tr.config, "key = value config file");
  train->add_option("--out", tr.out, "Checkpoint directory")->required();
  train->add_option("--init", tr.init, "Stage-2d checkpoint (stage mv)");
  train->add_flag("--resume", tr.resume, "Continue from the checkpoint in --out");
  train->add_option("--max-steps", tr.max_steps, "Stop after this many steps");
  train->add_flag("--quiet", tr.quiet, "Only write the log file");

  SampleArgs sa;
  auto* sample = app.add_subcommand("sample", "Generate images from a checkpoint");
  sample->add_option("--mode", sa.mode, "uncond, cond or trajectory")->required();
  sample->add_option("--ckpt", sa.ckpt, "Checkpoint directory")->required();
  sample->add_option("--poses", sa.poses, "JSON camera list of the frames to generate")->required();
  sample->add_option("--caption", sa.caption, "Caption text");
  sample->add_option("--out", sa.out, "Output directory")->required();
  sample->add_option("--cond-images", sa.cond_images, "Conditioning PNGs (cond mode)")->delimiter(',');
  sample->add_option("--cond-poses", sa.cond_poses, "JSON cameras of the conditioning images");
  sample->add_option("--steps", sa.steps, "Reverse steps")->check(CLI::PositiveNumber);
  sample->add_option("--lambda", sa.lambda_cfg, "Guidance scale (first batch in trajectory mode)");
  sample->add_option("--later-lambda", sa.later_lambda, "Guidance scale of later trajectory batches");
  sample->add_option("--first-n", sa.first_n, "Frames in the first trajectory batch")->check(CLI::PositiveNumber);
  sample->add_option("--batch-ng", sa.batch_ng, "Generated frames per later batch")->check(CLI::PositiveNumber);
  sample->add_option("--seed", sa.seed, "Sampling seed");
  sample->add_flag("--deterministic", sa.deterministic, "Noise-free reverse steps");
  sample->add_flag("--force", sa.force, "Replace a non-empty output directory");

  EvaluateArgs ev;
  auto* evaluate = app.add_subcommand("evaluate", "Score single-image-conditional generation on held-out scenes");
  evaluate->add_option("--ckpt", ev.ckpt, "Checkpoint directory")->required();
  evaluate->add_option("--data", ev.data, "Held-out dataset directory")->required();
  evaluate->add_option("--report", ev.report, "JSON report to update (keyed by run id)");
  evaluate->add_option("--run-id", ev.run_id, "Report key (default: checkpoint name)");
  evaluate->add_flag("--untrained", ev.untrained, "Score a freshly initialized model of the same config");
  evaluate->add_option("--count", ev.count, "Scenes to use (0 = all)");
  evaluate->add_option("--steps", ev.steps, "Reverse steps")->check(CLI::PositiveNumber);
  evaluate->add_option("--lambda", ev.lambda_cfg, "Guidance scale");
  evaluate->add_option("--seed", ev.seed, "Sampling seed");

  std::string suite = "all";
  fs::path verify_report;
  uint64_t verify_seed = 0;
  auto* verify_cmd = app.add_subcommand("verify", "Run invariant suites");
  verify_cmd->add_option("--suite", suite, "geometry, render, gradcheck, diffusion or all");
  verify_cmd->add_option("--report", verify_report, "Write the JSON report here");
  verify_cmd->add_option("--seed", verify_seed, "Seed of randomized checks");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitInvalid;
  }
  apply_thread_env();
  tune_allocator();
  try {
    if (*dataset) return cmd_dataset(ds);
    if (*train) return cmd_train(tr);
    if (*sample) return cmd_sample(sa);
    if (*evaluate) return cmd_evaluate(ev);
    if (*verify_cmd) return cmd_verify(suite, verify_report, verify_seed);
  } catch (const InvalidInput& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitInvalid;
  } catch (const json::exception& e) {
    // JSON is only read from user-supplied files (poses, manifests, reports).
    std::cerr << "error: malformed JSON input: " << e.what() << "\n";
    return kExitInvalid;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitInvariant;
  }
  return kExitOk;
}
