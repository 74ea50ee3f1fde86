#include <cmath>

#include "doctest.h"
#include "helpers.hpp"
#include "mvdiff/conditioning.hpp"
#include "mvdiff/errors.hpp"

using namespace mvdiff;
using namespace mvdiff::conditioning;
using geometry::CameraView;
using geometry::Vec3;

namespace {

CameraView camera_at(const Vec3& eye, int w = 16, int h = 16) {
  return CameraView::look_at(eye, Vec3::Zero(), std::abs(eye.normalized().y()) > 0.99 ? Vec3::UnitZ() : Vec3::UnitY(),
                             w, h, 0.5 * w, 0.5 * h, h, w);
}

}  // namespace

TEST_SUITE("conditioning") {
  TEST_CASE("pose encoding on the axes") {
    const auto z = encode_pose(camera_at(Vec3(0, 0, 2)));
    CHECK(z[0] == doctest::Approx(0.0));
    CHECK(z[1] == doctest::Approx(1.0));
    CHECK(z[2] == doctest::Approx(0.0));
    CHECK(z[3] == doctest::Approx(2.0));
    const auto x = encode_pose(camera_at(Vec3(3, 0, 0)));
    CHECK(x[0] == doctest::Approx(1.0));
    CHECK(x[1] == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(x[3] == doctest::Approx(3.0));
  }

  TEST_CASE("pose encoding matches a spherical-coordinate oracle") {
    Rng rng(2);
    std::uniform_real_distribution<double> u(-2.0, 2.0);
    for (int i = 0; i < 20; ++i) {
      const Vec3 c(u(rng), 0.5 * u(rng), u(rng));
      const auto z = encode_pose(camera_at(c));
      const double az = std::atan2(c.x(), c.z());
      CHECK(z[0] == doctest::Approx(std::sin(az)));
      CHECK(z[1] == doctest::Approx(std::cos(az)));
      CHECK(z[2] == doctest::Approx(std::asin(c.y() / c.norm())));
      CHECK(z[3] == doctest::Approx(c.norm()));
    }
  }

  TEST_CASE("camera at the origin has no azimuth") {
    CameraView v;
    v.width = v.height = 4;
    v.cx = v.cy = 2;
    CHECK_THROWS_AS(encode_pose(v), InvalidInput);
  }

  TEST_CASE("intrinsics encoding") {
    CameraView v;
    v.fx = v.fy = 256;
    v.width = v.height = 256;
    v.cx = v.cy = 128;
    auto z = encode_intrinsics(v);
    CHECK(z == std::array<double, 4>{1, 1, 0.5, 0.5});
    v.fx *= 2, v.fy *= 2, v.cx *= 2, v.cy *= 2, v.width *= 2, v.height *= 2;
    CHECK(encode_intrinsics(v) == z);
    v.fx = 200, v.fy = 300, v.width = v.height = 100, v.cx = 50, v.cy = 25;
    z = encode_intrinsics(v);
    CHECK(z[0] == doctest::Approx(2));
    CHECK(z[1] == doctest::Approx(3));
    CHECK(z[2] == doctest::Approx(0.5));
    CHECK(z[3] == doctest::Approx(0.25));
  }

  TEST_CASE("intensity encoding") {
    const Tensor gray({3, 4, 4}, 0.5);
    CHECK(encode_intensity(gray, IntensityMode::kTrain) == std::array<double, 2>{0.5, 0.0});
    Tensor half({3, 4, 4});
    for (int64_t i = 0; i < half.numel(); i += 2) half[i] = 1.0;
    const auto z = encode_intensity(half, IntensityMode::kTrain);
    CHECK(z[0] == doctest::Approx(0.5));
    CHECK(z[1] == doctest::Approx(0.25));
    // Test-time value is a constant.
    CHECK(encode_intensity(half, IntensityMode::kTest) == std::array<double, 2>{0.5, 0.0});
    CHECK(encode_intensity(gray, IntensityMode::kTest) == std::array<double, 2>{0.5, 0.0});
  }

  TEST_CASE("condition vector layout") {
    const auto cam = camera_at(Vec3(1, 0.5, 1));
    const auto c = make_condition(cam, Tensor({3, 2, 2}, 0.25), IntensityMode::kTrain);
    const auto z = c.z();
    const auto p = encode_pose(cam), k = encode_intrinsics(cam);
    for (int i = 0; i < 4; ++i) {
      CHECK(z[i] == p[i]);
      CHECK(z[4 + i] == k[i]);
    }
    CHECK(z[8] == 0.25);
    CHECK(z[9] == 0.0);
    const Tensor s = stack_conditions({c, c});
    CHECK(s.shape() == Shape{2, 10});
    CHECK(s[13] == z[3]);
  }

  TEST_CASE("timestep embedding") {
    const auto e0 = timestep_embedding(0, 8, 100);
    for (int i = 0; i < 4; ++i) {
      CHECK(e0[i] == 0.0);
      CHECK(e0[4 + i] == 1.0);
    }
    const auto e17 = timestep_embedding(17, 8, 100);
    for (int k = 0; k < 4; ++k) {
      const double w = std::pow(10000.0, -k / 4.0);
      CHECK(e17[k] == doctest::Approx(std::sin(17 * w)));
      CHECK(e17[4 + k] == doctest::Approx(std::cos(17 * w)));
    }
    const auto et = timestep_embedding(100, 8, 100);
    double d = 0;
    for (int i = 0; i < 8; ++i) d += (et[i] - e0[i]) * (et[i] - e0[i]);
    CHECK(d > 0);
    CHECK_THROWS_AS(timestep_embedding(3, 7, 100), InvalidInput);
    CHECK_THROWS_AS(timestep_embedding(101, 8, 100), InvalidInput);
  }
}
