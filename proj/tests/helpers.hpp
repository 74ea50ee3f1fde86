#pragma once

#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "mvdiff/geometry.hpp"
#include "mvdiff/nn.hpp"

namespace testing {

using mvdiff::geometry::CameraView;
using mvdiff::geometry::Vec3;

// Camera on a sphere of the given radius looking at the origin.
inline CameraView orbit_camera(double azimuth_deg, double elevation_deg, double radius, int size = 16,
                               double focal = -1) {
  const double a = azimuth_deg * M_PI / 180.0, e = elevation_deg * M_PI / 180.0;
  const Vec3 eye(radius * std::cos(e) * std::sin(a), radius * std::sin(e), radius * std::cos(e) * std::cos(a));
  const double f = focal > 0 ? focal : size;
  return CameraView::look_at(eye, Vec3::Zero(), Vec3::UnitY(), f, f, 0.5 * size, 0.5 * size, size, size);
}

// Generic camera with unequal focal lengths and an off-center principal point.
inline CameraView random_camera(mvdiff::Rng& rng) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  Vec3 eye;
  do {
    eye = Vec3(u(rng), u(rng), u(rng)) * 3.0;
  } while (eye.norm() < 1.0 || std::abs(eye.normalized().y()) > 0.9);
  const int h = 20 + static_cast<int>(10 * (u(rng) + 1)), w = 20 + static_cast<int>(10 * (u(rng) + 1));
  return CameraView::look_at(eye, Vec3(u(rng), u(rng), u(rng)) * 0.2, Vec3::UnitY(), 25 + 5 * u(rng),
                             28 + 5 * u(rng), 0.5 * w + 2 * u(rng), 0.5 * h + 2 * u(rng), h, w);
}

inline double max_abs_diff(const mvdiff::Tensor& a, const mvdiff::Tensor& b) {
  double m = 0;
  for (int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

// Largest relative error between the analytic gradient of sum(f(x) * w) and a
// central finite difference, probing up to `probes` coordinates per input.
inline double gradcheck(const std::function<mvdiff::ad::Var(const std::vector<mvdiff::ad::Var>&)>& f,
                        std::vector<mvdiff::Tensor> inputs, uint64_t seed = 1, int probes = 12,
                        double h = 1e-5) {
  using mvdiff::ad::Var;
  mvdiff::Rng rng(seed);
  std::vector<Var> vars;
  for (auto& t : inputs) vars.emplace_back(t, true);
  const Var out = f(vars);
  const mvdiff::Tensor w = mvdiff::randn(out.shape(), 1.0, rng);
  mvdiff::ad::backward(mvdiff::ad::dot_const(out, w));
  auto eval = [&](const std::vector<mvdiff::Tensor>& xs) {
    mvdiff::ad::NoGradGuard guard;
    std::vector<Var> v;
    for (const auto& t : xs) v.emplace_back(t);
    const mvdiff::Tensor y = f(v).value();
    double s = 0;
    for (int64_t i = 0; i < y.numel(); ++i) s += y[i] * w[i];
    return s;
  };
  double worst = 0;
  for (size_t a = 0; a < inputs.size(); ++a) {
    const mvdiff::Tensor g = vars[a].grad();
    std::uniform_int_distribution<int64_t> pick(0, inputs[a].numel() - 1);
    for (int p = 0; p < std::min<int64_t>(probes, inputs[a].numel()); ++p) {
      const int64_t i = inputs[a].numel() <= probes ? p : pick(rng);
      auto plus = inputs, minus = inputs;
      plus[a][i] += h;
      minus[a][i] -= h;
      const double fd = (eval(plus) - eval(minus)) / (2 * h);
      worst = std::max(worst, std::abs(fd - g[i]) / std::max(1.0, std::abs(fd)));
    }
  }
  return worst;
}

// Same check for leaves owned elsewhere (model parameters, inputs): f
// rebuilds the graph from their current values.
inline double gradcheck_leaves(const std::function<mvdiff::ad::Var()>& f, std::vector<mvdiff::ad::Var> leaves,
                               uint64_t seed = 1, int probes = 12, double h = 1e-5) {
  mvdiff::Rng rng(seed);
  for (auto& l : leaves) l.zero_grad();
  const mvdiff::ad::Var out = f();
  const mvdiff::Tensor w = mvdiff::randn(out.shape(), 1.0, rng);
  mvdiff::ad::backward(mvdiff::ad::dot_const(out, w));
  auto eval = [&]() {
    mvdiff::ad::NoGradGuard guard;
    const mvdiff::Tensor y = f().value();
    double s = 0;
    for (int64_t i = 0; i < y.numel(); ++i) s += y[i] * w[i];
    return s;
  };
  double worst = 0;
  for (auto& l : leaves) {
    const mvdiff::Tensor g = l.grad();
    std::uniform_int_distribution<int64_t> pick(0, l.numel() - 1);
    for (int p = 0; p < std::min<int64_t>(probes, l.numel()); ++p) {
      const int64_t i = l.numel() <= probes ? p : pick(rng);
      const double x0 = l.value()[i];
      l.mutable_value()[i] = x0 + h;
      const double fp = eval();
      l.mutable_value()[i] = x0 - h;
      const double fm = eval();
      l.mutable_value()[i] = x0;
      const double fd = (fp - fm) / (2 * h);
      worst = std::max(worst, std::abs(fd - g[i]) / std::max(1.0, std::abs(fd)));
    }
  }
  return worst;
}

}  // namespace testing
