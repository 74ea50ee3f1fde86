#include "mvdiff/conditioning.hpp"

#include <algorithm>
#include <cmath>

#include "mvdiff/errors.hpp"

namespace mvdiff::conditioning {

std::array<double, kConditionDim> ConditionVector::z() const {
  return {pose[0], pose[1], pose[2], pose[3], intrinsics[0], intrinsics[1], intrinsics[2], intrinsics[3],
          intensity[0], intensity[1]};
}

std::array<double, 4> encode_pose(const geometry::CameraView& view) {
  const geometry::Vec3 c = view.center();
  const double radius = c.norm();
  MVD_REQUIRE(radius > 1e-12, "encode_pose: camera at the origin has no defined azimuth");
  const double horizontal = std::hypot(c.x(), c.z());
  double s = 0.0, co = 1.0;
  if (horizontal > 1e-12) {
    s = c.x() / horizontal;
    co = c.z() / horizontal;
  }
  return {s, co, std::atan2(c.y(), horizontal), radius};
}

std::array<double, 4> encode_intrinsics(const geometry::CameraView& view) {
  const double w = view.width, h = view.height;
  return {view.fx / w, view.fy / h, view.cx / w, view.cy / h};
}

std::array<double, 2> encode_intensity(const Tensor& image, IntensityMode mode) {
  if (mode == IntensityMode::kTest || image.numel() == 0) return {0.5, 0.0};
  const double n = static_cast<double>(image.numel());
  double mean = 0.0;
  for (double v : image.storage()) mean += v;
  mean /= n;
  double var = 0.0;
  for (double v : image.storage()) var += (v - mean) * (v - mean);
  return {mean, var / n};
}

ConditionVector make_condition(const geometry::CameraView& view, const Tensor& image, IntensityMode mode) {
  return {encode_pose(view), encode_intrinsics(view), encode_intensity(image, mode)};
}

Tensor stack_conditions(const std::vector<ConditionVector>& conditions) {
  Tensor out({static_cast<int64_t>(conditions.size()), kConditionDim});
  for (size_t i = 0; i < conditions.size(); ++i) {
    const auto z = conditions[i].z();
    std::copy(z.begin(), z.end(), out.data() + i * kConditionDim);
  }
  return out;
}

std::vector<double> timestep_embedding(int t, int dim, int t_max) {
  MVD_REQUIRE(dim > 0 && dim % 2 == 0, "timestep_embedding: dimension must be even");
  MVD_REQUIRE(t >= 0 && t <= t_max, "timestep_embedding: timestep out of range");
  const int half = dim / 2;
  std::vector<double> out(dim);
  for (int k = 0; k < half; ++k) {
    const double freq = std::exp(-std::log(10000.0) * k / half);
    out[k] = std::sin(t * freq);
    out[half + k] = std::cos(t * freq);
  }
  return out;
}

}  // namespace mvdiff::conditioning
