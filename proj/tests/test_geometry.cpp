#include <cmath>

#include "doctest.h"
#include "helpers.hpp"
#include "mvdiff/errors.hpp"
#include "mvdiff/geometry.hpp"

using namespace mvdiff;
using namespace mvdiff::geometry;

TEST_SUITE("geometry") {
  TEST_CASE("point on the optical axis projects to the principal point") {
    const auto cam = testing::orbit_camera(30, 20, 2.0, 16);
    const Vec3 p = cam.center() + 1.0 * cam.optical_axis();
    const auto pr = project(p, cam);
    CHECK(pr.in_front);
    CHECK(pr.pixel.x() == doctest::Approx(cam.cx).epsilon(1e-12));
    CHECK(pr.pixel.y() == doctest::Approx(cam.cy).epsilon(1e-12));
    CHECK(pr.depth == doctest::Approx(1.0));
  }

  TEST_CASE("projection matches an explicit K [R|t] product") {
    Rng rng(4);
    for (int i = 0; i < 20; ++i) {
      const auto cam = testing::random_camera(rng);
      const Vec3 p = Vec3::Random() * 0.5;
      Eigen::Matrix<double, 3, 4> rt = cam.pose.topRows<3>();
      Mat3 k;
      k << cam.fx, 0, cam.cx, 0, cam.fy, cam.cy, 0, 0, 1;
      const Vec3 h = k * rt * Eigen::Vector4d(p.x(), p.y(), p.z(), 1.0);
      const auto pr = project(p, cam);
      CHECK(pr.pixel.x() == doctest::Approx(h.x() / h.z()).epsilon(1e-12));
      CHECK(pr.pixel.y() == doctest::Approx(h.y() / h.z()).epsilon(1e-12));
      CHECK(pr.depth == doctest::Approx(h.z()).epsilon(1e-12));
    }
  }

  TEST_CASE("points behind the camera are flagged") {
    const auto cam = testing::orbit_camera(0, 0, 2.0);
    CHECK_FALSE(project(cam.center() - cam.optical_axis(), cam).in_front);
  }

  TEST_CASE("unproject at the principal point walks along the optical axis") {
    const auto cam = testing::orbit_camera(70, 35, 1.7);
    const Vec3 p = unproject_pixel(Vec2(cam.cx, cam.cy), 2.5, cam);
    CHECK((p - (cam.center() + 2.5 * cam.optical_axis())).norm() < 1e-12);
  }

  TEST_CASE("corner pixel unprojection matches the inverse pinhole") {
    Rng rng(8);
    const auto cam = testing::random_camera(rng);
    const double d = 2.0;
    const Vec3 cam_pt((0.0 - cam.cx) / cam.fx * d, (0.0 - cam.cy) / cam.fy * d, d);
    const Vec3 world = cam.rotation().transpose() * (cam_pt - cam.translation());
    CHECK((unproject_pixel(Vec2(0, 0), d, cam) - world).norm() < 1e-12);
  }

  TEST_CASE("unproject rejects non-positive depth") {
    const auto cam = testing::orbit_camera(0, 0, 2.0);
    CHECK_THROWS_AS(unproject_pixel(Vec2(1, 1), 0.0, cam), InvalidInput);
    CHECK_THROWS_AS(unproject_pixel(Vec2(1, 1), -1.0, cam), InvalidInput);
  }

  TEST_CASE("project and unproject are inverse on random pixels") {
    Rng rng(15);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    double worst = 0;
    for (int i = 0; i < 100; ++i) {
      const auto cam = testing::random_camera(rng);
      const Vec2 px(u(rng) * cam.width, u(rng) * cam.height);
      const auto pr = project(unproject_pixel(px, 0.2 + 5 * u(rng), cam), cam);
      worst = std::max(worst, (pr.pixel - px).norm());
    }
    CHECK(worst < 1e-5);
  }

  TEST_CASE("rays have unit directions and the center ray follows the optical axis") {
    const auto cam = testing::orbit_camera(40, 25, 1.5, 12);
    for (const auto& r : generate_rays(cam)) CHECK(std::abs(r.foreground.direction.norm() - 1.0) < 1e-6);
    const auto center = pixel_ray(cam, Vec2(cam.cx, cam.cy));
    CHECK((center.foreground.direction - cam.optical_axis()).norm() < 1e-12);
    CHECK(generate_rays(cam).size() == 144u);
  }

  TEST_CASE("camera at (0,0,2) looking at the origin enters the cube at 1.5 and leaves at 2.5") {
    const auto cam = CameraView::look_at(Vec3(0, 0, 2), Vec3::Zero(), Vec3::UnitY(), 8, 8, 4, 4, 8, 8);
    const auto r = pixel_ray(cam, Vec2(4, 4));
    REQUIRE(r.hits_foreground);
    CHECK(r.foreground.near == doctest::Approx(1.5).epsilon(1e-12));
    CHECK(r.foreground.far == doctest::Approx(2.5).epsilon(1e-12));
    CHECK(r.background_near == doctest::Approx(2.5).epsilon(1e-12));
  }

  TEST_CASE("normalize_poses: unit cube and level ring is the identity") {
    std::vector<CameraView> ring;
    for (int k = 0; k < 5; ++k) ring.push_back(testing::orbit_camera(72.0 * k, 0.0, 1.5));
    const auto out = normalize_poses(ring, unit_cube());
    for (size_t k = 0; k < ring.size(); ++k) CHECK((out.views[k].pose - ring[k].pose).cwiseAbs().maxCoeff() < 1e-9);
  }

  TEST_CASE("normalize_poses: a side-2 box halves every translation") {
    std::vector<CameraView> ring;
    for (int k = 0; k < 5; ++k) ring.push_back(testing::orbit_camera(72.0 * k, 0.0, 3.0));
    const auto out = normalize_poses(ring, Aabb{Vec3::Constant(-1), Vec3::Constant(1)});
    for (size_t k = 0; k < ring.size(); ++k) {
      // Hand-applied similarity: x' = x / 2, so t' = t / 2 and R unchanged.
      CHECK((out.views[k].translation() - 0.5 * ring[k].translation()).norm() < 1e-9);
      CHECK((out.views[k].rotation() - ring[k].rotation()).cwiseAbs().maxCoeff() < 1e-9);
    }
  }

  TEST_CASE("normalize_poses preserves relative rotations, is idempotent and fits the box") {
    Rng rng(21);
    std::vector<CameraView> views;
    for (int k = 0; k < 4; ++k) views.push_back(testing::random_camera(rng));
    const Aabb box{Vec3(-0.2, 0.1, -0.4), Vec3(0.6, 0.5, 0.3)};
    const auto once = normalize_poses(views, box);
    for (size_t i = 0; i < views.size(); ++i)
      for (size_t j = 0; j < views.size(); ++j) {
        const Mat3 before = views[j].rotation() * views[i].rotation().transpose();
        const Mat3 after = once.views[j].rotation() * once.views[i].rotation().transpose();
        CHECK((before - after).cwiseAbs().maxCoeff() < 1e-6);
      }
    // Box corners land inside the unit cube, touching it on the longest side.
    double extent = 0;
    for (int c = 0; c < 8; ++c) {
      const Vec3 corner((c & 1) ? box.hi.x() : box.lo.x(), (c & 2) ? box.hi.y() : box.lo.y(),
                        (c & 4) ? box.hi.z() : box.lo.z());
      const Vec3 m = once.transform.apply(corner);
      CHECK(m.cwiseAbs().maxCoeff() <= 0.5 + 1e-9);
      extent = std::max(extent, m.cwiseAbs().maxCoeff());
    }
    CHECK(extent == doctest::Approx(0.5).epsilon(1e-6));
    const auto twice = normalize_poses(once.views, unit_cube());
    for (size_t k = 0; k < views.size(); ++k)
      CHECK((twice.views[k].pose - once.views[k].pose).cwiseAbs().maxCoeff() < 1e-6);
  }

  TEST_CASE("normalize_poses rejects degenerate bounds") {
    std::vector<CameraView> ring{testing::orbit_camera(0, 10, 2)};
    CHECK_THROWS_AS(normalize_poses(ring, Aabb{Vec3::Zero(), Vec3(1, 1, 0)}), InvalidInput);
    CHECK_THROWS_AS(normalize_poses({}, unit_cube()), InvalidInput);
  }

  TEST_CASE("camera validation") {
    auto cam = testing::orbit_camera(0, 10, 2);
    CHECK_NOTHROW(cam.validate());
    cam.fx = -1;
    CHECK_THROWS_AS(cam.validate(), InvalidInput);
    cam = testing::orbit_camera(0, 10, 2);
    cam.pose(0, 0) *= 2;
    CHECK_THROWS_AS(cam.validate(), InvalidInput);
  }
}
