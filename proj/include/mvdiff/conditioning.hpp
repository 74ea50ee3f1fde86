#pragma once

#include <array>
#include <vector>

#include "mvdiff/geometry.hpp"
#include "mvdiff/tensor.hpp"

namespace mvdiff::conditioning {

inline constexpr int kConditionDim = 10;

enum class IntensityMode { kTrain, kTest };

// Per-frame condition z = [z1 (pose), z2 (intrinsics), z3 (intensity)].
struct ConditionVector {
  std::array<double, 4> pose{};
  std::array<double, 4> intrinsics{};
  std::array<double, 2> intensity{0.5, 0.0};

  std::array<double, kConditionDim> z() const;
};

// (sin azimuth, cos azimuth, elevation, radius) of the camera center, with
// azimuth measured in the x-z plane from +z toward +x and elevation toward +y.
std::array<double, 4> encode_pose(const geometry::CameraView& view);

// (fx / W, fy / H, cx / W, cy / H)
std::array<double, 4> encode_intrinsics(const geometry::CameraView& view);

// Train: (mean, population variance) over every value of an image in [0, 1].
// Test: the constant (0.5, 0).
std::array<double, 2> encode_intensity(const Tensor& image, IntensityMode mode);

ConditionVector make_condition(const geometry::CameraView& view, const Tensor& image, IntensityMode mode);

// Rows of [N, 10] condition tensor.
Tensor stack_conditions(const std::vector<ConditionVector>& conditions);

// Sinusoidal embedding [sin(t w_0..w_{d/2-1}), cos(t w_0..w_{d/2-1})] with
// w_k = 10000^(-k / (d/2)).
std::vector<double> timestep_embedding(int t, int dim, int t_max = 1000);

}  // namespace mvdiff::conditioning
