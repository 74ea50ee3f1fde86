#pragma once

#include <cstdint>
#include <vector>

#include "mvdiff/autograd.hpp"
#include "mvdiff/conditioning.hpp"
#include "mvdiff/geometry.hpp"

namespace mvdiff::diffusion {

// Tables are indexed by step 0..steps. Index 0 holds the conventions
// beta_0 = 0, alpha_bar_0 = 1. model_t maps a step to the timestep the
// denoiser was trained with (identity unless the schedule was respaced).
struct NoiseSchedule {
  int steps = 0;
  std::vector<double> beta, alpha, alpha_bar, sigma;
  std::vector<int> model_t;

  double sqrt_alpha_bar(int t) const;
  // Same schedule with sigma_t = 0 (deterministic reverse process).
  NoiseSchedule without_noise() const;
};

// Linear beta ramp; sigma_t^2 = beta_t.
NoiseSchedule make_schedule(int t_max, double beta_start, double beta_end);
NoiseSchedule schedule_from_betas(const std::vector<double>& betas);
// Evenly spaced subsequence of `steps` timesteps with matching betas
// beta'_i = 1 - alpha_bar(tau_i) / alpha_bar(tau_{i-1}).
NoiseSchedule respace(const NoiseSchedule& base, int steps);

// x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps (per frame t).
Tensor q_sample(const Tensor& x0, int t, const Tensor& eps, const NoiseSchedule& schedule);
// Frame-wise version: x0 and eps are [N, ...], t holds one step per frame.
Tensor q_sample_frames(const Tensor& x0, const std::vector<int>& t, const Tensor& eps,
                       const NoiseSchedule& schedule);

struct EpsLoss {
  ad::Var value;
  bool all_masked = false;  // no active frame: the loss is zero
};

// Mean squared error over frames with active[n] = true. eps tensors are [N, ...].
EpsLoss eps_loss(const Tensor& eps_true, const ad::Var& eps_pred, const std::vector<bool>& active);

// Joint state of the frames being denoised.
struct FrameSetState {
  Tensor x;                 // [N, C, H, W]
  std::vector<int> t;       // schedule step per frame (0 = clean conditioning frame)
  std::vector<conditioning::ConditionVector> conditions;
  std::vector<geometry::CameraView> views;
  std::vector<int> caption;  // shared caption token ids (may be empty)

  int frames() const { return static_cast<int>(t.size()); }
};

// Standard normal noise for one frame, from a sub-stream keyed by
// (seed, frame, step) so results do not depend on evaluation order.
Tensor frame_noise(uint64_t seed, int frame, int step, const Shape& frame_shape);

// Ancestral step for every frame with t > 0; frames at t = 0 pass through
// bit-identically. Noise is omitted on the final step (t = 1).
FrameSetState p_sample_step(const FrameSetState& state, const Tensor& eps_pred, const NoiseSchedule& schedule,
                            uint64_t seed);

// eps_uncond + lambda (eps_cond - eps_uncond)
Tensor cfg_combine(const Tensor& eps_uncond, const Tensor& eps_cond, double lambda);

}  // namespace mvdiff::diffusion
