#pragma once

#include <functional>
#include <string>
#include <vector>

#include "json.hpp"
#include "mvdiff/denoiser.hpp"
#include "mvdiff/diffusion.hpp"

namespace mvdiff::generation {

using geometry::CameraView;

// Noise predictor over a joint state (the denoiser, or an oracle in tests).
using EpsFn = std::function<Tensor(const diffusion::FrameSetState&, const diffusion::NoiseSchedule&)>;
EpsFn model_eps(const denoiser::Denoiser& model);

struct SampleOptions {
  int steps = 50;            // respaced reverse steps
  double lambda_cfg = 7.5;   // classifier-free guidance scale
  bool deterministic = false;  // sigma_t = 0
  uint64_t seed = 0;
  int max_frames = 30;
};

// Images in [0, 1] <-> model space [-1, 1].
Tensor to_model_space(const Tensor& images);
Tensor to_image_space(const Tensor& x);  // clamped to [0, 1]

// The reverse process over a prepared state. Frames with t = 0 stay fixed;
// every other frame starts from its own noise sub-stream and all of them
// step down in lockstep. Returns the final model-space state.
// lambda != 1 evaluates an unconditional (empty caption) branch as well;
// lambda = 0 evaluates only that branch.
Tensor run_reverse(const EpsFn& eps, diffusion::FrameSetState state, const diffusion::NoiseSchedule& schedule,
                   double lambda_cfg, uint64_t seed);

// All N frames generated jointly from noise. Returns [N, 3, H, W] in [0, 1].
Tensor generate_unconditional(const EpsFn& eps, const std::vector<CameraView>& views, const std::vector<int>& caption,
                              const diffusion::NoiseSchedule& base, const SampleOptions& opts, Shape frame_shape);

// cond_images: [n_c, 3, H, W] in [0, 1], held at t = 0. Returns [n_g, 3, H, W].
Tensor generate_conditional(const EpsFn& eps, const Tensor& cond_images, const std::vector<CameraView>& cond_views,
                            const std::vector<CameraView>& targets, const std::vector<int>& caption,
                            const diffusion::NoiseSchedule& base, const SampleOptions& opts);

struct BatchRecord {
  std::string kind;  // "unconditional" or "conditional"
  std::vector<int> frames;  // trajectory indices generated
  int n_cond = 0;
  double lambda_cfg = 0;
  uint64_t seed = 0;
  double seconds = 0;
};

struct TrajectoryResult {
  Tensor images;  // [M, 3, H, W] in trajectory order
  std::vector<BatchRecord> batches;
};

// First batch: first_n trajectory poses spaced evenly along the trajectory
// (a 360 degree sweep for an orbit), generated unconditionally with
// first_lambda. Remaining poses follow in trajectory order, batch_n_g at a
// time, each conditioned on the whole first batch with later_lambda.
TrajectoryResult generate_trajectory(const EpsFn& eps, const std::vector<CameraView>& trajectory, int first_n,
                                     int batch_n_g, const std::vector<int>& caption,
                                     const diffusion::NoiseSchedule& base, const SampleOptions& opts,
                                     double later_lambda = 0.0);

// Trajectory poses must be normalized: each camera lies outside the unit
// cube and sees the cube center in front of it. Throws InvalidInput otherwise.
void require_normalized(const std::vector<CameraView>& views);

// Indices of the first batch within a trajectory of m poses.
std::vector<int> first_batch_indices(int m, int first_n);

// An orbit of m poses equally spaced in azimuth.
std::vector<CameraView> orbit(int m, double elevation_deg, double radius, int image_size, double phase_deg = 0.0);

nlohmann::json batch_to_json(const BatchRecord& b);

}  // namespace mvdiff::generation
