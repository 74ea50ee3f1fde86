#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "helpers.hpp"
#include "mvdiff/conditioning.hpp"
#include "mvdiff/denoiser.hpp"
#include "mvdiff/errors.hpp"
#include "tiny_model.hpp"

using namespace mvdiff;
using namespace mvdiff::denoiser;
using ad::Var;

namespace {

struct Batch {
  Tensor x, conditions;
  std::vector<int> t;
  std::vector<geometry::CameraView> views;
};

Batch make_batch(int n, uint64_t seed, int size = 8) {
  Rng rng(seed);
  Batch b;
  b.x = randn({n, 3, size, size}, 1.0, rng);
  std::vector<conditioning::ConditionVector> cs;
  for (int i = 0; i < n; ++i) {
    b.views.push_back(testing::orbit_camera(360.0 * i / n + 10, 20, 1.6, size));
    b.t.push_back(1 + static_cast<int>(rng() % 100));
    cs.push_back(conditioning::make_condition(b.views.back(), randn({3, 2, 2}, 0.3, rng),
                                              conditioning::IntensityMode::kTrain));
  }
  b.conditions = conditioning::stack_conditions(cs);
  return b;
}

Tensor run(const Denoiser& m, const Batch& b, const std::vector<int>& caption = {},
           std::optional<int> skip = std::nullopt) {
  ad::NoGradGuard guard;
  return m.forward(Var(b.x), b.t, b.conditions, b.views, caption, skip).value();
}

}  // namespace

TEST_SUITE("denoiser") {
  TEST_CASE("configuration validation and serialization") {
    auto c = testing::tiny_config();
    CHECK_NOTHROW(c.validate());
    auto j = config_to_json(c);
    CHECK(config_to_json(config_from_json(j)) == j);
    auto bad = c;
    bad.attention = {false};
    CHECK_THROWS_AS(bad.validate(), InvalidInput);
    bad = c;
    bad.projection = {true, true};
    CHECK_THROWS_AS(bad.validate(), InvalidInput);
    bad = c;
    bad.image_size = 7;
    CHECK_THROWS_AS(bad.validate(), InvalidInput);
    bad = c;
    bad.temb_dim = 7;
    CHECK_THROWS_AS(bad.validate(), InvalidInput);
  }

  TEST_CASE("parameter count and ablations") {
    auto c = testing::tiny_config();
    Denoiser full(c);
    CHECK(count_parameters(c) == full.params().scalar_count());
    auto np = c;
    np.use_projection = false;
    Denoiser no_proj(np);
    CHECK(no_proj.params().scalar_count() < full.params().scalar_count());
    for (const auto& p : no_proj.params().all()) CHECK(p.group == nn::ParamGroup::kBase);
    auto nc = c;
    nc.use_cross_frame = false;
    CHECK(count_parameters(nc) < count_parameters(c));
  }

  TEST_CASE("same seed, same weights") {
    Denoiser a(testing::tiny_config(), 3), b(testing::tiny_config(), 3), c(testing::tiny_config(), 4);
    for (size_t i = 0; i < a.params().all().size(); ++i)
      CHECK(a.params().all()[i].var.value().storage() == b.params().all()[i].var.value().storage());
    CHECK(a.params().all()[0].var.value().storage() != c.params().all()[0].var.value().storage());
  }

  TEST_CASE("a fresh model predicts zero noise") {
    Denoiser m(testing::tiny_config());
    const auto b = make_batch(3, 1);
    const Tensor y = run(m, b);
    CHECK(y.shape() == b.x.shape());
    CHECK(y.max_abs() == 0.0);
  }

  TEST_CASE("input validation") {
    Denoiser m(testing::tiny_config());
    auto b = make_batch(2, 2);
    CHECK_THROWS_AS(run(m, make_batch(2, 2, 16)), InvalidInput);
    CHECK_THROWS_AS(run(m, b, {9}), InvalidInput);
    CHECK_THROWS_AS(run(m, b, {1, 2, 3, 4, 5}), InvalidInput);
    CHECK_THROWS_AS(run(m, b, {}, 2), InvalidInput);
    CHECK_THROWS_AS(run(m, make_batch(7, 2)), InvalidInput);
    b.t.pop_back();
    CHECK_THROWS_AS(run(m, b), InvalidInput);
  }

  TEST_CASE("frame permutation equivariance") {
    Denoiser m(testing::tiny_config());
    testing::randomize(m.params(), 5);
    const auto b = make_batch(4, 3);
    const std::vector<int> perm{3, 1, 0, 2};
    Batch p = b;
    const int64_t fs = b.x.numel() / 4;
    for (int i = 0; i < 4; ++i) {
      std::copy_n(b.x.data() + perm[i] * fs, fs, p.x.data() + i * fs);
      std::copy_n(b.conditions.data() + perm[i] * 10, 10, p.conditions.data() + i * 10);
      p.t[i] = b.t[perm[i]];
      p.views[i] = b.views[perm[i]];
    }
    const Tensor y = run(m, b, {1, 2}), yp = run(m, p, {1, 2});
    double worst = 0;
    for (int i = 0; i < 4; ++i)
      for (int64_t k = 0; k < fs; ++k) worst = std::max(worst, std::abs(yp[i * fs + k] - y[perm[i] * fs + k]));
    CHECK(worst < 1e-5);
  }

  TEST_CASE("conditions enter only through the adapters") {
    Denoiser m(testing::tiny_config());
    testing::randomize(m.params(), 6);
    auto b = make_batch(3, 4);
    const Tensor base = run(m, b);
    auto c = b;
    for (int64_t i = 0; i < c.conditions.numel(); ++i) c.conditions[i] += 0.5;
    CHECK(testing::max_abs_diff(run(m, c), base) > 1e-6);
    m.set_adapter_scale(0.0);
    CHECK(testing::max_abs_diff(run(m, c), run(m, b)) == 0.0);
  }

  TEST_CASE("the skipped frame is invisible to other frames without cross-frame attention") {
    auto cfg = testing::tiny_config();
    cfg.use_cross_frame = false;
    Denoiser m(cfg);
    testing::randomize(m.params(), 7);
    auto b = make_batch(3, 5);
    const Tensor a = run(m, b, {}, 0);
    for (int64_t i = 0; i < b.x.numel() / 3; ++i) b.x[i] += 1.0;
    const Tensor c = run(m, b, {}, 0);
    const int64_t fs = b.x.numel() / 3;
    double others = 0, own = 0;
    for (int64_t i = 0; i < fs; ++i) own = std::max(own, std::abs(c[i] - a[i]));
    for (int64_t i = fs; i < 3 * fs; ++i) others = std::max(others, std::abs(c[i] - a[i]));
    CHECK(others == 0.0);
    CHECK(own > 1e-6);
    // Without the skip, frame 0 feeds the grids seen by the others.
    CHECK(testing::max_abs_diff(run(m, b), c) > 1e-6);
  }

  TEST_CASE("a single frame runs every block") {
    Denoiser m(testing::tiny_config());
    testing::randomize(m.params(), 8);
    const auto b = make_batch(1, 6);
    const Tensor y = run(m, b, {3});
    CHECK(y.all_finite());
    CHECK(y.max_abs() > 0);
  }

  TEST_CASE("denoiser gradients") {
    Denoiser m(testing::tiny_config());
    testing::randomize(m.params(), 9);
    const auto b = make_batch(2, 7);
    const auto* w = m.params().find("enc1.cfa.q");
    REQUIRE(w != nullptr);
    const auto* r = m.params().find("enc1.proj.render.l1.weight");
    REQUIRE(r != nullptr);
    Var x(b.x, true);
    const double err = testing::gradcheck_leaves(
        [&]() { return m.forward(x, b.t, b.conditions, b.views, {2}); }, {x, w->var, r->var}, 2, 8);
    CHECK(err < 1e-3);
  }

  TEST_CASE("checkpoint round trip") {
    const auto dir = std::filesystem::temp_directory_path() / "mvdiff_test_ckpt";
    std::filesystem::remove_all(dir);
    Denoiser m(testing::tiny_config());
    testing::randomize(m.params(), 10);
    save_checkpoint(dir, m, {{"stage", "mv"}});
    nlohmann::json manifest;
    Denoiser back = load_checkpoint(dir, &manifest);
    CHECK(manifest["stage"] == "mv");
    const auto b = make_batch(2, 8);
    CHECK(testing::max_abs_diff(run(m, b), run(back, b)) == 0.0);
    manifest["parameter_count"] = 1;
    std::ofstream(dir / "manifest.json") << manifest.dump();
    CHECK_THROWS_AS(load_checkpoint(dir), InvalidInput);
    CHECK_THROWS_AS(load_checkpoint(dir / "missing"), InvalidInput);
    std::filesystem::remove_all(dir);
  }
}
