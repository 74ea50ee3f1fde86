#include "mvdiff/diffusion.hpp"

#include <cmath>
#include <random>

#include "mvdiff/errors.hpp"
#include "mvdiff/ops.hpp"

namespace mvdiff::diffusion {

namespace {

uint64_t splitmix64(uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

void fill_derived(NoiseSchedule& s) {
  s.alpha.assign(s.steps + 1, 1.0);
  s.alpha_bar.assign(s.steps + 1, 1.0);
  s.sigma.assign(s.steps + 1, 0.0);
  for (int t = 1; t <= s.steps; ++t) {
    s.alpha[t] = 1.0 - s.beta[t];
    s.alpha_bar[t] = s.alpha_bar[t - 1] * s.alpha[t];
    s.sigma[t] = std::sqrt(s.beta[t]);
  }
  if (s.model_t.empty()) {
    s.model_t.resize(s.steps + 1);
    for (int t = 0; t <= s.steps; ++t) s.model_t[t] = t;
  }
}

}  // namespace

double NoiseSchedule::sqrt_alpha_bar(int t) const { return std::sqrt(alpha_bar.at(t)); }

NoiseSchedule NoiseSchedule::without_noise() const {
  NoiseSchedule s = *this;
  std::fill(s.sigma.begin(), s.sigma.end(), 0.0);
  return s;
}

NoiseSchedule schedule_from_betas(const std::vector<double>& betas) {
  MVD_REQUIRE(!betas.empty(), "schedule needs at least one step");
  NoiseSchedule s;
  s.steps = static_cast<int>(betas.size());
  s.beta.assign(1, 0.0);
  for (size_t i = 0; i < betas.size(); ++i) {
    MVD_REQUIRE(betas[i] > 0 && betas[i] < 1, "beta must lie in (0, 1)");
    MVD_REQUIRE(i == 0 || betas[i] >= betas[i - 1], "beta must be non-decreasing");
    s.beta.push_back(betas[i]);
  }
  fill_derived(s);
  return s;
}

NoiseSchedule make_schedule(int t_max, double beta_start, double beta_end) {
  MVD_REQUIRE(t_max >= 1, "make_schedule: T_max must be positive");
  MVD_REQUIRE(0 < beta_start && beta_start <= beta_end && beta_end < 1,
              "make_schedule: need 0 < beta_start <= beta_end < 1");
  std::vector<double> betas(t_max);
  for (int i = 0; i < t_max; ++i)
    betas[i] = t_max == 1 ? beta_start : beta_start + (beta_end - beta_start) * i / (t_max - 1);
  return schedule_from_betas(betas);
}

NoiseSchedule respace(const NoiseSchedule& base, int steps) {
  MVD_REQUIRE(steps >= 1 && steps <= base.steps, "respace: step count out of range");
  if (steps == base.steps) return base;
  // tau_1 < ... < tau_steps = T, evenly spaced.
  std::vector<int> tau(steps + 1, 0);
  for (int i = 1; i <= steps; ++i)
    tau[i] = static_cast<int>(std::lround(static_cast<double>(i) * base.steps / steps));
  NoiseSchedule s;
  s.steps = steps;
  s.beta.assign(steps + 1, 0.0);
  s.model_t.assign(steps + 1, 0);
  for (int i = 1; i <= steps; ++i) {
    s.beta[i] = 1.0 - base.alpha_bar[tau[i]] / base.alpha_bar[tau[i - 1]];
    s.model_t[i] = base.model_t[tau[i]];
  }
  fill_derived(s);
  return s;
}

Tensor q_sample(const Tensor& x0, int t, const Tensor& eps, const NoiseSchedule& schedule) {
  MVD_REQUIRE(t >= 0 && t <= schedule.steps, "q_sample: timestep out of range");
  MVD_REQUIRE(x0.numel() == eps.numel(), "q_sample: x0 and eps differ in size");
  const double a = std::sqrt(schedule.alpha_bar[t]);
  const double b = std::sqrt(1.0 - schedule.alpha_bar[t]);
  Tensor out(x0.shape());
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = a * x0[i] + b * eps[i];
  return out;
}

Tensor q_sample_frames(const Tensor& x0, const std::vector<int>& t, const Tensor& eps,
                       const NoiseSchedule& schedule) {
  const int64_t n = x0.dim(0);
  MVD_REQUIRE(static_cast<int64_t>(t.size()) == n, "q_sample_frames: one timestep per frame");
  MVD_REQUIRE(x0.numel() == eps.numel(), "q_sample_frames: x0 and eps differ in size");
  const int64_t per = x0.numel() / n;
  Tensor out(x0.shape());
  for (int64_t f = 0; f < n; ++f) {
    MVD_REQUIRE(t[f] >= 0 && t[f] <= schedule.steps, "q_sample_frames: timestep out of range");
    const double a = std::sqrt(schedule.alpha_bar[t[f]]);
    const double b = std::sqrt(1.0 - schedule.alpha_bar[t[f]]);
    for (int64_t i = f * per; i < (f + 1) * per; ++i) out[i] = a * x0[i] + b * eps[i];
  }
  return out;
}

EpsLoss eps_loss(const Tensor& eps_true, const ad::Var& eps_pred, const std::vector<bool>& active) {
  const int64_t n = eps_pred.dim(0);
  MVD_REQUIRE(eps_true.numel() == eps_pred.numel(), "eps_loss: shape mismatch");
  MVD_REQUIRE(static_cast<int64_t>(active.size()) == n, "eps_loss: one mask entry per frame");
  const int64_t per = eps_pred.numel() / n;
  int64_t count = 0;
  Tensor mask(eps_pred.shape());
  for (int64_t f = 0; f < n; ++f)
    if (active[f]) {
      count += per;
      for (int64_t i = f * per; i < (f + 1) * per; ++i) mask[i] = 1.0;
    }
  EpsLoss out;
  if (count == 0) {
    out.all_masked = true;
    out.value = ad::mul_const(ad::sum(eps_pred), Tensor({1}, 0.0));
    return out;
  }
  ad::Var diff = ad::mul_const(ad::sub(eps_pred, ad::Var(eps_true.reshaped(eps_pred.shape()))), mask);
  out.value = ad::scale(ad::sum(ad::mul(diff, diff)), 1.0 / static_cast<double>(count));
  return out;
}

Tensor frame_noise(uint64_t seed, int frame, int step, const Shape& frame_shape) {
  const uint64_t key = splitmix64(splitmix64(splitmix64(seed) ^ static_cast<uint64_t>(frame)) ^
                                  (static_cast<uint64_t>(step) << 20));
  std::mt19937_64 rng(key);
  std::normal_distribution<double> nd(0.0, 1.0);
  Tensor out(frame_shape);
  for (auto& v : out.storage()) v = nd(rng);
  return out;
}

FrameSetState p_sample_step(const FrameSetState& state, const Tensor& eps_pred, const NoiseSchedule& schedule,
                            uint64_t seed) {
  const int64_t n = state.x.dim(0);
  MVD_REQUIRE(eps_pred.numel() == state.x.numel(), "p_sample_step: eps shape mismatch");
  MVD_REQUIRE(static_cast<int64_t>(state.t.size()) == n, "p_sample_step: one timestep per frame");
  const int64_t per = state.x.numel() / n;
  Shape frame_shape(state.x.shape().begin() + 1, state.x.shape().end());
  FrameSetState next = state;
  for (int64_t f = 0; f < n; ++f) {
    const int t = state.t[f];
    if (t == 0) continue;
    MVD_REQUIRE(t <= schedule.steps, "p_sample_step: timestep out of range");
    const double inv_sqrt_alpha = 1.0 / std::sqrt(schedule.alpha[t]);
    const double eps_coef = schedule.beta[t] / std::sqrt(1.0 - schedule.alpha_bar[t]);
    const double sigma = t > 1 ? schedule.sigma[t] : 0.0;
    Tensor noise;
    if (sigma > 0) noise = frame_noise(seed, static_cast<int>(f), t, frame_shape);
    for (int64_t i = 0; i < per; ++i) {
      const int64_t k = f * per + i;
      double v = inv_sqrt_alpha * (state.x[k] - eps_coef * eps_pred[k]);
      if (sigma > 0) v += sigma * noise[i];
      next.x[k] = v;
    }
    next.t[f] = t - 1;
  }
  return next;
}

Tensor cfg_combine(const Tensor& eps_uncond, const Tensor& eps_cond, double lambda) {
  MVD_REQUIRE(eps_uncond.numel() == eps_cond.numel(), "cfg_combine: shape mismatch");
  Tensor out(eps_uncond.shape());
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = eps_uncond[i] + lambda * (eps_cond[i] - eps_uncond[i]);
  return out;
}

}  // namespace mvdiff::diffusion
