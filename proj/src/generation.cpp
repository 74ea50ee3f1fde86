#include "mvdiff/generation.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>

#include "mvdiff/conditioning.hpp"
#include "mvdiff/errors.hpp"
#include "mvdiff/synthdata.hpp"

namespace mvdiff::generation {

using diffusion::FrameSetState;
using diffusion::NoiseSchedule;

namespace {

uint64_t batch_seed(uint64_t seed, int batch) {
  uint64_t x = seed ^ (0xD1B54A32D192ED03ull * static_cast<uint64_t>(batch + 1));
  x = (x ^ (x >> 31)) * 0x9E3779B97F4A7C15ull;
  return x ^ (x >> 29);
}

NoiseSchedule sampling_schedule(const NoiseSchedule& base, const SampleOptions& opts) {
  NoiseSchedule s = diffusion::respace(base, std::min(opts.steps, base.steps));
  return opts.deterministic ? s.without_noise() : s;
}

std::vector<conditioning::ConditionVector> test_conditions(const std::vector<CameraView>& views) {
  std::vector<conditioning::ConditionVector> out;
  for (const auto& v : views) out.push_back(conditioning::make_condition(v, Tensor(), conditioning::IntensityMode::kTest));
  return out;
}

Tensor frames(const Tensor& x, int64_t begin, int64_t end) {
  Shape shape = x.shape();
  const int64_t per = x.numel() / shape[0];
  shape[0] = end - begin;
  Tensor out(shape);
  std::copy(x.data() + begin * per, x.data() + end * per, out.data());
  return out;
}

}  // namespace

EpsFn model_eps(const denoiser::Denoiser& model) {
  return [&model](const FrameSetState& s, const NoiseSchedule& sched) { return model.predict(s, sched); };
}

Tensor to_model_space(const Tensor& images) {
  Tensor x(images.shape());
  for (int64_t i = 0; i < x.numel(); ++i) x[i] = 2.0 * images[i] - 1.0;
  return x;
}

Tensor to_image_space(const Tensor& x) {
  Tensor img(x.shape());
  for (int64_t i = 0; i < x.numel(); ++i) img[i] = std::clamp(0.5 * (x[i] + 1.0), 0.0, 1.0);
  return img;
}

Tensor run_reverse(const EpsFn& eps, FrameSetState state, const NoiseSchedule& schedule, double lambda_cfg,
                   uint64_t seed) {
  const int n = state.frames();
  MVD_REQUIRE(n >= 1 && state.x.dim(0) == n, "reverse process: state frames disagree");
  const Shape frame_shape(state.x.shape().begin() + 1, state.x.shape().end());
  const int64_t per = shape_numel(frame_shape);
  for (int f = 0; f < n; ++f) {
    if (state.t[f] == 0) continue;
    MVD_REQUIRE(state.t[f] == schedule.steps, "reverse process: generative frames start at the last step");
    const Tensor z = diffusion::frame_noise(seed, f, schedule.steps + 1, frame_shape);
    std::copy(z.data(), z.data() + per, state.x.data() + f * per);
  }
  const bool guided = lambda_cfg != 1.0 && !state.caption.empty();
  while (std::any_of(state.t.begin(), state.t.end(), [](int t) { return t > 0; })) {
    Tensor e;
    if (!guided) {
      e = eps(state, schedule);
    } else {
      FrameSetState uncond = state;
      uncond.caption.clear();
      Tensor eu = eps(uncond, schedule);
      e = lambda_cfg == 0.0 ? std::move(eu) : diffusion::cfg_combine(eu, eps(state, schedule), lambda_cfg);
    }
    state = diffusion::p_sample_step(state, e, schedule, seed);
  }
  return state.x;
}

Tensor generate_unconditional(const EpsFn& eps, const std::vector<CameraView>& views, const std::vector<int>& caption,
                              const NoiseSchedule& base, const SampleOptions& opts, Shape frame_shape) {
  const int n = static_cast<int>(views.size());
  MVD_REQUIRE(n >= 1 && n <= opts.max_frames, "unconditional generation: frame count out of range");
  const NoiseSchedule sched = sampling_schedule(base, opts);
  FrameSetState state;
  frame_shape.insert(frame_shape.begin(), n);
  state.x = Tensor(frame_shape);
  state.t.assign(n, sched.steps);
  state.conditions = test_conditions(views);
  state.views = views;
  state.caption = caption;
  return to_image_space(run_reverse(eps, std::move(state), sched, opts.lambda_cfg, opts.seed));
}

Tensor generate_conditional(const EpsFn& eps, const Tensor& cond_images, const std::vector<CameraView>& cond_views,
                            const std::vector<CameraView>& targets, const std::vector<int>& caption,
                            const NoiseSchedule& base, const SampleOptions& opts) {
  const int nc = static_cast<int>(cond_views.size()), ng = static_cast<int>(targets.size());
  MVD_REQUIRE(nc >= 1 && ng >= 1, "conditional generation needs conditioning and target views");
  MVD_REQUIRE(cond_images.ndim() == 4 && cond_images.dim(0) == nc, "conditional generation: one image per view");
  MVD_REQUIRE(nc + ng <= opts.max_frames, "conditional generation: n_c + n_g exceeds the frame limit");
  const NoiseSchedule sched = sampling_schedule(base, opts);
  FrameSetState state;
  Shape shape = cond_images.shape();
  shape[0] = nc + ng;
  state.x = Tensor(shape);
  const Tensor xc = to_model_space(cond_images);
  std::copy(xc.data(), xc.data() + xc.numel(), state.x.data());
  state.t.assign(nc, 0);
  state.t.resize(nc + ng, sched.steps);
  state.views = cond_views;
  state.views.insert(state.views.end(), targets.begin(), targets.end());
  state.conditions = test_conditions(state.views);
  state.caption = caption;
  Tensor x = run_reverse(eps, std::move(state), sched, opts.lambda_cfg, opts.seed);
  return to_image_space(frames(x, nc, nc + ng));
}

void require_normalized(const std::vector<CameraView>& views) {
  for (const auto& v : views) {
    v.validate();
    const geometry::Vec3 c = v.center();
    MVD_REQUIRE(c.cwiseAbs().maxCoeff() > 0.5, "trajectory camera inside the unit cube: poses are not normalized");
    MVD_REQUIRE(geometry::project(geometry::Vec3::Zero(), v).in_front,
                "trajectory camera does not face the unit cube: poses are not normalized");
  }
}

std::vector<int> first_batch_indices(int m, int first_n) {
  MVD_REQUIRE(first_n >= 1 && first_n <= m, "first batch larger than the trajectory");
  std::vector<int> out(first_n);
  for (int k = 0; k < first_n; ++k) out[k] = static_cast<int>((static_cast<int64_t>(k) * m) / first_n);
  return out;
}

TrajectoryResult generate_trajectory(const EpsFn& eps, const std::vector<CameraView>& trajectory, int first_n,
                                     int batch_n_g, const std::vector<int>& caption, const NoiseSchedule& base,
                                     const SampleOptions& opts, double later_lambda) {
  const int m = static_cast<int>(trajectory.size());
  MVD_REQUIRE(m >= first_n, "trajectory shorter than the first batch");
  MVD_REQUIRE(batch_n_g >= 1, "batch_n_g must be positive");
  MVD_REQUIRE(first_n <= opts.max_frames, "first batch exceeds the frame limit");
  MVD_REQUIRE(m == first_n || first_n + batch_n_g <= opts.max_frames,
              "conditioning batch (n_c + n_g) exceeds the frame limit");
  require_normalized(trajectory);
  const auto& first_view = trajectory.front();
  const Shape frame_shape{3, first_view.height, first_view.width};
  TrajectoryResult result;
  result.images = Tensor({m, 3, first_view.height, first_view.width});
  const int64_t per = shape_numel(frame_shape);

  const std::vector<int> first = first_batch_indices(m, first_n);
  std::vector<CameraView> first_views;
  for (int i : first) first_views.push_back(trajectory[i]);
  auto start = std::chrono::steady_clock::now();
  SampleOptions o = opts;
  o.seed = batch_seed(opts.seed, 0);
  const Tensor first_images = generate_unconditional(eps, first_views, caption, base, o, frame_shape);
  for (int k = 0; k < first_n; ++k)
    std::copy(first_images.data() + k * per, first_images.data() + (k + 1) * per,
              result.images.data() + first[k] * per);
  result.batches.push_back({"unconditional", first, 0, opts.lambda_cfg, o.seed,
                            std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count()});

  std::vector<int> rest;
  for (int i = 0; i < m; ++i)
    if (std::find(first.begin(), first.end(), i) == first.end()) rest.push_back(i);
  o.lambda_cfg = later_lambda;
  for (size_t b = 0; b < rest.size(); b += batch_n_g) {
    start = std::chrono::steady_clock::now();
    std::vector<int> idx(rest.begin() + b, rest.begin() + std::min(rest.size(), b + batch_n_g));
    std::vector<CameraView> targets;
    for (int i : idx) targets.push_back(trajectory[i]);
    o.seed = batch_seed(opts.seed, static_cast<int>(result.batches.size()));
    const Tensor imgs = generate_conditional(eps, first_images, first_views, targets, caption, base, o);
    for (size_t k = 0; k < idx.size(); ++k)
      std::copy(imgs.data() + k * per, imgs.data() + (k + 1) * per, result.images.data() + idx[k] * per);
    result.batches.push_back({"conditional", idx, first_n, later_lambda, o.seed,
                              std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count()});
  }
  return result;
}

std::vector<CameraView> orbit(int m, double elevation_deg, double radius, int image_size, double phase_deg) {
  std::vector<CameraView> out;
  for (int k = 0; k < m; ++k)
    out.push_back(synthdata::ring_camera(phase_deg + 360.0 * k / m, elevation_deg, radius, image_size));
  return out;
}

nlohmann::json batch_to_json(const BatchRecord& b) {
  return {{"kind", b.kind},           {"frames", b.frames}, {"n_cond", b.n_cond},
          {"lambda_cfg", b.lambda_cfg}, {"seed", b.seed},     {"seconds", b.seconds}};
}

}  // namespace mvdiff::generation
