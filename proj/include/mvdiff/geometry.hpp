#pragma once

#include <Eigen/Core>
#include <optional>
#include <vector>

// Pinhole cameras in an OpenCV-style frame (x right, y down, z forward).
// The normalized world frame is y-up with the captured object inside the
// cube [-0.5, 0.5]^3. Pixel (i, j) covers [i, i+1) x [j, j+1); its center is
// at (i + 0.5, j + 0.5).
namespace mvdiff::geometry {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using Mat4 = Eigen::Matrix4d;

struct CameraView {
  Mat4 pose = Mat4::Identity();  // world-to-camera rigid transform
  double fx = 1.0, fy = 1.0;
  double cx = 0.5, cy = 0.5;
  int height = 1, width = 1;

  Mat3 rotation() const { return pose.topLeftCorner<3, 3>(); }
  Vec3 translation() const { return pose.topRightCorner<3, 1>(); }
  Vec3 center() const { return -rotation().transpose() * translation(); }
  Vec3 optical_axis() const { return rotation().row(2).transpose(); }

  // Throws InvalidInput when an invariant is violated.
  void validate() const;
  // Same camera observed at a different resolution (intrinsics rescaled).
  CameraView resized(int new_height, int new_width) const;

  static CameraView look_at(const Vec3& eye, const Vec3& target, const Vec3& up, double fx, double fy, double cx,
                            double cy, int height, int width);
};

struct Ray {
  Vec3 origin = Vec3::Zero();
  Vec3 direction = Vec3::UnitZ();
  double near = 0.0, far = 1.0;
};

struct Aabb {
  Vec3 lo = Vec3::Constant(-0.5);
  Vec3 hi = Vec3::Constant(0.5);
};

Aabb unit_cube();

struct Projection {
  Vec2 pixel = Vec2::Zero();
  double depth = 0.0;
  bool in_front = false;  // false means the caller should drop the sample
};

Projection project(const Vec3& point, const CameraView& view);
Vec3 unproject_pixel(const Vec2& pixel, double depth, const CameraView& view);

// x' = scale * rotation * x + offset
struct Similarity {
  double scale = 1.0;
  Mat3 rotation = Mat3::Identity();
  Vec3 offset = Vec3::Zero();
  Vec3 apply(const Vec3& x) const { return scale * (rotation * x) + offset; }
};

struct NormalizedRig {
  std::vector<CameraView> views;
  Similarity transform;
};

// Rotates camera centers onto a y = const plane (least-squares fit, normal
// pointing from the object toward the cameras), then translates and scales
// isotropically so object_bounds fits the unit cube.
NormalizedRig normalize_poses(const std::vector<CameraView>& views, const Aabb& object_bounds);

// Slab test. Returns the [near, far] parameter interval with near clamped to 0.
std::optional<std::pair<double, double>> intersect_box(const Vec3& origin, const Vec3& direction, const Aabb& box);

// Far bound used for the background march.
inline constexpr double kBackgroundFar = 1000.0;

struct PixelRay {
  Ray foreground;                // near/far = unit cube entry/exit (empty when missing)
  bool hits_foreground = false;
  double background_near = 0.0;  // cube exit, or closest approach to the origin on a miss
  double background_far = kBackgroundFar;
};

// One ray per pixel center, row-major (index = row * width + col).
std::vector<PixelRay> generate_rays(const CameraView& view);
PixelRay pixel_ray(const CameraView& view, const Vec2& pixel);

}  // namespace mvdiff::geometry
