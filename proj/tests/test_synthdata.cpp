#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "doctest.h"
#include "helpers.hpp"
#include "mvdiff/errors.hpp"
#include "mvdiff/synthdata.hpp"

using namespace mvdiff;
using namespace mvdiff::synthdata;

namespace {

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

SceneSpec sphere_scene() {
  SceneSpec s;
  s.object = Primitive::kSphere;
  s.size = 0.6;
  s.center = Vec3(0.05, kFloorY + 0.3, -0.05);
  s.color_id = 2;
  s.floor_texture = 0;
  return s;
}

}  // namespace

TEST_SUITE("synthdata") {
  TEST_CASE("scene validation") {
    SceneSpec s;
    CHECK_NOTHROW(s.validate());
    s.center = Vec3(0.3, 0, 0);
    CHECK_THROWS_AS(s.validate(), InvalidInput);
    s = SceneSpec();
    s.color_id = static_cast<int>(palette().size());
    CHECK_THROWS_AS(s.validate(), InvalidInput);
    s = SceneSpec();
    s.light = Vec3(1, 1, 0);
    CHECK_THROWS_AS(s.validate(), InvalidInput);
  }

  TEST_CASE("random scenes are valid and reproducible") {
    Rng a(3), b(3);
    for (int i = 0; i < 50; ++i) {
      const auto s = random_scene(a, i);
      CHECK_NOTHROW(s.validate());
      CHECK(s.center.y() - 0.5 * s.size == doctest::Approx(kFloorY));
      CHECK(scene_spec_to_json(s) == scene_spec_to_json(random_scene(b, i)));
      CHECK(scene_spec_to_json(scene_spec_from_json(scene_spec_to_json(s))) == scene_spec_to_json(s));
    }
  }

  TEST_CASE("captions") {
    SceneSpec s;
    s.color_id = 0;
    s.object = Primitive::kCylinder;
    s.floor_texture = 1;
    CHECK(detokenize(caption_of(s)) == "red cylinder on stripe floor");
    CHECK(caption_of(s).size() == 5u);
    CHECK(tokenize("  blue   cube on plain floor ") == tokenize("blue cube on plain floor"));
    CHECK_THROWS_AS(tokenize("blue teapot"), InvalidInput);
    CHECK_THROWS_AS(detokenize({-1}), InvalidInput);
    // Empty-caption frequency: 10% of 4000 draws.
    Rng rng(4);
    int empty = 0;
    for (int i = 0; i < 4000; ++i) empty += draw_caption(s, rng).empty();
    CHECK(std::abs(empty - 400) < 4 * std::sqrt(4000 * 0.1 * 0.9));
  }

  TEST_CASE("ring cameras") {
    SceneSpec s;
    s.elevation = 30;
    s.radius = 1.4;
    s.azimuth_phase = 7;
    const auto views = ring_views(s, 32);
    REQUIRE(views.size() == static_cast<size_t>(kRingSize));
    for (int k = 0; k < kRingSize; ++k) {
      const auto& v = views[k];
      CHECK(v.fx == 32);
      CHECK(v.cx == 16);
      CHECK(v.center().norm() == doctest::Approx(1.4));
      CHECK(std::asin(v.center().y() / 1.4) == doctest::Approx(30 * M_PI / 180));
      const double az = std::atan2(v.center().x(), v.center().z());
      CHECK(std::remainder(az - (7 + 15.0 * k) * M_PI / 180, 2 * M_PI) == doctest::Approx(0).epsilon(1e-9));
      const auto pr = geometry::project(Vec3::Zero(), v);
      CHECK(pr.pixel.x() == doctest::Approx(16));
    }
  }

  TEST_CASE("rendered depth lands on the sphere surface") {
    const auto s = sphere_scene();
    const auto view = ring_camera(40, 25, 1.5, 32);
    const auto r = render_scene(s, view);
    int hits = 0;
    for (int y = 0; y < 32; ++y)
      for (int x = 0; x < 32; ++x) {
        const int64_t i = y * 32 + x;
        const Vec3 p = geometry::unproject_pixel(geometry::Vec2(x + 0.5, y + 0.5), std::max(r.depth[i], 1e-9), view);
        if (r.mask[i] > 0) {
          CHECK((p - s.center).norm() == doctest::Approx(0.3).epsilon(1e-9));
          ++hits;
        } else if (r.depth[i] > 0) {
          CHECK(p.y() == doctest::Approx(kFloorY).epsilon(1e-9));
        }
      }
    CHECK(hits > 50);
    for (double v : r.image.storage()) CHECK((v >= 0 && v <= 1));
    // Analytic silhouette: the pixel at the projected center is covered.
    const auto c = geometry::project(s.center, view);
    CHECK(r.mask[static_cast<int64_t>(c.pixel.y()) * 32 + static_cast<int64_t>(c.pixel.x())] == 1.0);
  }

  TEST_CASE("cube faces are axis aligned") {
    SceneSpec s;
    s.object = Primitive::kCube;
    s.size = 0.5;
    s.center = Vec3(0, kFloorY + 0.25, 0);
    const auto view = ring_camera(30, 30, 1.6, 24);
    const auto r = render_scene(s, view);
    for (int64_t i = 0; i < 24 * 24; ++i) {
      if (r.mask[i] == 0) continue;
      const Vec3 p = geometry::unproject_pixel(geometry::Vec2(i % 24 + 0.5, i / 24 + 0.5), r.depth[i], view);
      CHECK((p - s.center).cwiseAbs().maxCoeff() == doctest::Approx(0.25).epsilon(1e-9));
    }
  }

  TEST_CASE("frame index sampling") {
    Rng rng(5);
    const auto r = random_indices(24, 5, rng);
    CHECK(std::set<int>(r.begin(), r.end()).size() == 5u);
    CHECK(consecutive_indices(24, 22, 4) == std::vector<int>{22, 23, 0, 1});
    CHECK_THROWS_AS(random_indices(4, 5, rng), InvalidInput);
    CHECK_THROWS_AS(consecutive_indices(24, 24, 2), InvalidInput);
  }

  TEST_CASE("training frame sets") {
    Rng rng(6);
    const Scene scene = make_scene(sphere_scene(), 8);
    int consecutive = 0;
    const int draws = 2000;
    for (int i = 0; i < draws; ++i) {
      const auto s = sample_training_frames(scene, 5, rng);
      consecutive += s.consecutive;
      if (i < 20) {
        CHECK(s.images.shape() == Shape{5, 3, 8, 8});
        CHECK(s.conditions.size() == 5u);
        for (int k = 0; k < 5; ++k) {
          CHECK(std::memcmp(s.images.data() + k * 192, scene.images[s.indices[k]].data(), 192 * sizeof(double)) == 0);
          CHECK(s.conditions[k].pose == conditioning::encode_pose(scene.views[s.indices[k]]));
        }
      }
    }
    // Binomial(2000, 0.5) within four standard deviations.
    CHECK(std::abs(consecutive - draws / 2) < 4 * std::sqrt(draws * 0.25));
    CHECK_THROWS_AS(sample_training_frames(scene, 25, rng), InvalidInput);
  }

  TEST_CASE("scene files round trip") {
    const auto dir = std::filesystem::temp_directory_path() / "mvdiff_test_scene";
    std::filesystem::remove_all(dir);
    const Scene scene = make_scene(sphere_scene(), 16);
    write_scene(dir, scene);
    const Scene back = read_scene(dir);
    CHECK(back.caption == scene.caption);
    REQUIRE(back.images.size() == scene.images.size());
    for (size_t k = 0; k < scene.images.size(); ++k) {
      CHECK(testing::max_abs_diff(back.images[k], scene.images[k]) <= 0.5 / 255 + 1e-12);
      double worst = 0;
      for (int64_t i = 0; i < scene.depths[k].numel(); ++i)
        worst = std::max(worst, std::abs(back.depths[k][i] - std::min(scene.depths[k][i], kMaxStoredDepth)));
      CHECK(worst <= 0.5 / kDepthScale + 1e-12);
      CHECK(back.masks[k].storage() == scene.masks[k].storage());
      CHECK((back.views[k].pose - scene.views[k].pose).cwiseAbs().maxCoeff() < 1e-12);
    }
    std::filesystem::remove(dir / "cameras.json");
    CHECK_THROWS_AS(read_scene(dir), InvalidInput);
    std::filesystem::remove_all(dir);
  }

  TEST_CASE("datasets are deterministic in the seed") {
    const auto a = std::filesystem::temp_directory_path() / "mvdiff_test_ds_a";
    const auto b = std::filesystem::temp_directory_path() / "mvdiff_test_ds_b";
    std::filesystem::remove_all(a);
    std::filesystem::remove_all(b);
    CHECK(write_dataset(a, 2, 42, 8) == 2);
    CHECK(write_dataset(b, 2, 42, 8) == 2);
    for (const char* f : {"scene_0001/frame_03.png", "scene_0000/depth_10.png", "scene_0001/cameras.json"})
      CHECK(slurp(a / f) == slurp(b / f));
    CHECK(read_dataset(a).size() == 2u);
    std::filesystem::remove_all(a);
    std::filesystem::remove_all(b);
  }
}
