#include "mvdiff/geometry.hpp"

#include <Eigen/Eigenvalues>
#include <Eigen/Geometry>
#include <algorithm>
#include <cmath>
#include <limits>

#include "mvdiff/errors.hpp"

namespace mvdiff::geometry {

void CameraView::validate() const {
  const Mat3 r = rotation();
  MVD_REQUIRE((r.transpose() * r - Mat3::Identity()).cwiseAbs().maxCoeff() < 1e-6, "camera rotation not orthonormal");
  MVD_REQUIRE(r.determinant() > 0, "camera rotation must have det = +1");
  MVD_REQUIRE(fx > 0 && fy > 0, "focal lengths must be positive");
  MVD_REQUIRE(width > 0 && height > 0, "resolution must be positive");
  MVD_REQUIRE(cx >= 0 && cx < width && cy >= 0 && cy < height, "principal point outside the image");
  MVD_REQUIRE(pose.allFinite(), "pose must be finite");
}

CameraView CameraView::resized(int new_height, int new_width) const {
  CameraView v = *this;
  const double sx = static_cast<double>(new_width) / width;
  const double sy = static_cast<double>(new_height) / height;
  v.fx *= sx;
  v.cx *= sx;
  v.fy *= sy;
  v.cy *= sy;
  v.width = new_width;
  v.height = new_height;
  return v;
}

CameraView CameraView::look_at(const Vec3& eye, const Vec3& target, const Vec3& up, double fx, double fy, double cx,
                               double cy, int height, int width) {
  const Vec3 forward = (target - eye).normalized();
  Vec3 right = forward.cross(up);
  MVD_REQUIRE(right.norm() > 1e-12, "look_at: up vector parallel to viewing direction");
  right.normalize();
  const Vec3 down = forward.cross(right);
  Mat3 r;
  r.row(0) = right.transpose();
  r.row(1) = down.transpose();
  r.row(2) = forward.transpose();
  CameraView v;
  v.pose.topLeftCorner<3, 3>() = r;
  v.pose.topRightCorner<3, 1>() = -r * eye;
  v.fx = fx;
  v.fy = fy;
  v.cx = cx;
  v.cy = cy;
  v.height = height;
  v.width = width;
  return v;
}

Aabb unit_cube() { return Aabb{}; }

Projection project(const Vec3& point, const CameraView& view) {
  const Vec3 pc = view.rotation() * point + view.translation();
  Projection out;
  out.depth = pc.z();
  out.in_front = pc.z() > 0;
  if (out.in_front) out.pixel = Vec2(view.fx * pc.x() / pc.z() + view.cx, view.fy * pc.y() / pc.z() + view.cy);
  return out;
}

Vec3 unproject_pixel(const Vec2& pixel, double depth, const CameraView& view) {
  MVD_REQUIRE(depth > 0, "unproject_pixel: depth must be positive");
  const Vec3 pc((pixel.x() - view.cx) / view.fx * depth, (pixel.y() - view.cy) / view.fy * depth, depth);
  return view.rotation().transpose() * (pc - view.translation());
}

namespace {

// Rotation taking unit vector n onto +y.
Mat3 rotation_to_up(const Vec3& n) {
  const Vec3 up = Vec3::UnitY();
  if (n.dot(up) < -1.0 + 1e-12) return Eigen::AngleAxisd(M_PI, Vec3::UnitX()).toRotationMatrix();
  return Eigen::Quaterniond::FromTwoVectors(n, up).toRotationMatrix();
}

}  // namespace

NormalizedRig normalize_poses(const std::vector<CameraView>& views, const Aabb& object_bounds) {
  MVD_REQUIRE(!views.empty(), "normalize_poses: need at least one view");
  const Vec3 extent = object_bounds.hi - object_bounds.lo;
  MVD_REQUIRE(extent.minCoeff() > 0, "normalize_poses: degenerate object bounds");

  const Vec3 box_center = 0.5 * (object_bounds.lo + object_bounds.hi);
  Mat3 align = Mat3::Identity();
  if (views.size() >= 3) {
    Vec3 mean = Vec3::Zero();
    for (const auto& v : views) mean += v.center();
    mean /= static_cast<double>(views.size());
    Mat3 cov = Mat3::Zero();
    for (const auto& v : views) {
      const Vec3 d = v.center() - mean;
      cov += d * d.transpose();
    }
    Eigen::SelfAdjointEigenSolver<Mat3> eig(cov);
    const Vec3 ev = eig.eigenvalues();
    // Collinear or coincident centers leave the plane undetermined.
    if (ev(1) > 1e-12 * std::max(1.0, ev(2))) {
      Vec3 n = eig.eigenvectors().col(0).normalized();
      const double side = (mean - box_center).dot(n);
      if (std::abs(side) > 1e-12) {
        if (side < 0) n = -n;
      } else {
        int axis = 0;
        n.cwiseAbs().maxCoeff(&axis);
        if (n(axis) < 0) n = -n;
      }
      align = rotation_to_up(n);
    }
  }

  Vec3 lo = Vec3::Constant(std::numeric_limits<double>::infinity());
  Vec3 hi = -lo;
  for (int corner = 0; corner < 8; ++corner) {
    const Vec3 p((corner & 1) ? object_bounds.hi.x() : object_bounds.lo.x(),
                 (corner & 2) ? object_bounds.hi.y() : object_bounds.lo.y(),
                 (corner & 4) ? object_bounds.hi.z() : object_bounds.lo.z());
    const Vec3 q = align * p;
    lo = lo.cwiseMin(q);
    hi = hi.cwiseMax(q);
  }
  Similarity sim;
  sim.rotation = align;
  sim.scale = 1.0 / (hi - lo).maxCoeff();
  sim.offset = -sim.scale * 0.5 * (lo + hi);

  NormalizedRig rig;
  rig.transform = sim;
  rig.views.reserve(views.size());
  for (const auto& v : views) {
    CameraView out = v;
    const Mat3 r = v.rotation() * align.transpose();
    out.pose.topLeftCorner<3, 3>() = r;
    out.pose.topRightCorner<3, 1>() = sim.scale * v.translation() - r * sim.offset;
    rig.views.push_back(out);
  }
  return rig;
}

std::optional<std::pair<double, double>> intersect_box(const Vec3& origin, const Vec3& direction, const Aabb& box) {
  double t0 = -std::numeric_limits<double>::infinity();
  double t1 = std::numeric_limits<double>::infinity();
  for (int a = 0; a < 3; ++a) {
    if (std::abs(direction(a)) < 1e-15) {
      if (origin(a) < box.lo(a) || origin(a) > box.hi(a)) return std::nullopt;
      continue;
    }
    double ta = (box.lo(a) - origin(a)) / direction(a);
    double tb = (box.hi(a) - origin(a)) / direction(a);
    if (ta > tb) std::swap(ta, tb);
    t0 = std::max(t0, ta);
    t1 = std::min(t1, tb);
  }
  t0 = std::max(t0, 0.0);
  if (t1 <= t0) return std::nullopt;
  return std::make_pair(t0, t1);
}

PixelRay pixel_ray(const CameraView& view, const Vec2& pixel) {
  const Vec3 dir_cam((pixel.x() - view.cx) / view.fx, (pixel.y() - view.cy) / view.fy, 1.0);
  PixelRay pr;
  pr.foreground.origin = view.center();
  pr.foreground.direction = (view.rotation().transpose() * dir_cam).normalized();
  const Vec3& o = pr.foreground.origin;
  const Vec3& d = pr.foreground.direction;
  if (auto hit = intersect_box(o, d, unit_cube())) {
    pr.hits_foreground = true;
    pr.foreground.near = hit->first;
    pr.foreground.far = hit->second;
    pr.background_near = hit->second;
  } else {
    pr.hits_foreground = false;
    pr.foreground.near = 0.0;
    pr.foreground.far = 0.0;
    pr.background_near = std::max(0.0, -o.dot(d));
  }
  pr.background_far = std::max(kBackgroundFar, pr.background_near + 1.0);
  return pr;
}

std::vector<PixelRay> generate_rays(const CameraView& view) {
  std::vector<PixelRay> rays;
  rays.reserve(static_cast<size_t>(view.height) * view.width);
  for (int row = 0; row < view.height; ++row)
    for (int col = 0; col < view.width; ++col) rays.push_back(pixel_ray(view, Vec2(col + 0.5, row + 0.5)));
  return rays;
}

}  // namespace mvdiff::geometry
