#include <cmath>
#include <cstring>
#include <set>

#include "doctest.h"
#include "helpers.hpp"
#include "mvdiff/errors.hpp"
#include "mvdiff/generation.hpp"
#include "tiny_model.hpp"

using namespace mvdiff;
using namespace mvdiff::generation;
using diffusion::FrameSetState;
using diffusion::NoiseSchedule;

namespace {

// Noise predictor that knows the clean frames: every generated frame is
// pulled toward `target` (model space).
EpsFn oracle(const Tensor& target) {
  return [target](const FrameSetState& s, const NoiseSchedule& sch) {
    Tensor e(s.x.shape());
    const int64_t per = s.x.numel() / s.frames();
    for (int f = 0; f < s.frames(); ++f) {
      const int t = s.t[f];
      if (t == 0) continue;
      const double ab = sch.alpha_bar[t];
      for (int64_t i = 0; i < per; ++i)
        e[f * per + i] = (s.x[f * per + i] - std::sqrt(ab) * target[i % target.numel()]) / std::sqrt(1 - ab);
    }
    return e;
  };
}

const NoiseSchedule& base_schedule() {
  static const NoiseSchedule s = diffusion::make_schedule(100, 1e-3, 0.2);
  return s;
}

}  // namespace

TEST_SUITE("generation") {
  TEST_CASE("image and model space") {
    const Tensor img({4}, {0, 0.25, 0.5, 1});
    CHECK(to_model_space(img).to_vector() == std::vector<double>{-1, -0.5, 0, 1});
    CHECK(to_image_space(to_model_space(img)).storage() == img.storage());
    CHECK(to_image_space(Tensor({2}, {-3, 3})).to_vector() == std::vector<double>{0, 1});
  }

  TEST_CASE("first batch spans the trajectory evenly") {
    CHECK(first_batch_indices(100, 10) == std::vector<int>{0, 10, 20, 30, 40, 50, 60, 70, 80, 90});
    CHECK(first_batch_indices(5, 5) == std::vector<int>{0, 1, 2, 3, 4});
    CHECK(first_batch_indices(7, 3) == std::vector<int>{0, 2, 4});
    CHECK_THROWS_AS(first_batch_indices(3, 4), InvalidInput);
  }

  TEST_CASE("orbits are normalized and equally spaced") {
    const auto o = orbit(8, 20, 1.5, 16);
    CHECK_NOTHROW(require_normalized(o));
    for (int k = 0; k < 8; ++k) {
      const auto z = conditioning::encode_pose(o[k]);
      CHECK(std::atan2(z[0], z[1]) == doctest::Approx(std::remainder(2 * M_PI * k / 8, 2 * M_PI)).epsilon(1e-9));
      CHECK(z[3] == doctest::Approx(1.5));
    }
    auto inside = o;
    inside[2] = testing::orbit_camera(0, 0, 0.3, 16);
    CHECK_THROWS_AS(require_normalized(inside), InvalidInput);
    auto away = o;
    away[0] = geometry::CameraView::look_at(geometry::Vec3(0, 0, 2), geometry::Vec3(0, 0, 4), geometry::Vec3::UnitY(),
                                            16, 16, 8, 8, 16, 16);
    CHECK_THROWS_AS(require_normalized(away), InvalidInput);
  }

  TEST_CASE("an exact noise oracle recovers the clean frames") {
    Rng rng(1);
    const Tensor target = uniform({3, 4, 4}, -1, 1, rng);
    SampleOptions opts;
    opts.deterministic = true;
    const auto views = orbit(3, 10, 1.5, 4);
    const Tensor out = generate_unconditional(oracle(target), views, {}, base_schedule(), opts, {3, 4, 4});
    REQUIRE(out.shape() == Shape{3, 3, 4, 4});
    const Tensor expect = to_image_space(target);
    for (int64_t i = 0; i < out.numel(); ++i) CHECK(out[i] == doctest::Approx(expect[i % 48]).epsilon(1e-9));
    // Stochastic sampling with an exact oracle still lands on the target.
    opts.deterministic = false;
    const Tensor noisy = generate_unconditional(oracle(target), views, {}, base_schedule(), opts, {3, 4, 4});
    for (int64_t i = 0; i < noisy.numel(); ++i) CHECK(noisy[i] == doctest::Approx(expect[i % 48]).epsilon(1e-9));
  }

  TEST_CASE("conditioning frames never change") {
    Rng rng(2);
    const Tensor target = uniform({3, 4, 4}, -1, 1, rng);
    FrameSetState st;
    st.x = randn({3, 3, 4, 4}, 1.0, rng);
    st.t = {0, 50, 0};
    const auto views = orbit(3, 10, 1.5, 4);
    st.views = views;
    for (const auto& v : views) st.conditions.push_back(conditioning::make_condition(v, Tensor({3, 4, 4}), conditioning::IntensityMode::kTest));
    int calls = 0;
    const EpsFn counted = [&](const FrameSetState& s, const NoiseSchedule& sch) {
      ++calls;
      CHECK(std::memcmp(s.x.data(), st.x.data(), 48 * sizeof(double)) == 0);
      CHECK(std::memcmp(s.x.data() + 96, st.x.data() + 96, 48 * sizeof(double)) == 0);
      return oracle(target)(s, sch);
    };
    const Tensor out = run_reverse(counted, st, diffusion::respace(base_schedule(), 50), 1.0, 3);
    CHECK(calls == 50);
    CHECK(std::memcmp(out.data(), st.x.data(), 48 * sizeof(double)) == 0);
    st.t = {0, 20, 0};
    CHECK_THROWS_AS(run_reverse(counted, st, diffusion::respace(base_schedule(), 50), 1.0, 3), InvalidInput);
  }

  TEST_CASE("guidance evaluates the branches it needs") {
    Rng rng(3);
    const Tensor target = uniform({3, 2, 2}, -1, 1, rng);
    int cond = 0, uncond = 0;
    const EpsFn count = [&](const FrameSetState& s, const NoiseSchedule& sch) {
      (s.caption.empty() ? uncond : cond)++;
      return oracle(target)(s, sch);
    };
    SampleOptions opts;
    opts.steps = 10;
    const auto views = orbit(2, 10, 1.5, 2);
    auto run = [&](double lambda, std::vector<int> caption) {
      cond = uncond = 0;
      opts.lambda_cfg = lambda;
      generate_unconditional(count, views, caption, base_schedule(), opts, {3, 2, 2});
    };
    run(7.5, {1});
    CHECK((cond == 10 && uncond == 10));
    run(1.0, {1});
    CHECK((cond == 10 && uncond == 0));
    run(0.0, {1});
    CHECK((cond == 0 && uncond == 10));
    run(7.5, {});
    CHECK((cond == 0 && uncond == 10));
  }

  TEST_CASE("sampling is reproducible from the seed") {
    denoiser::Denoiser m(testing::tiny_config());
    testing::randomize(m.params(), 4, 0.1);
    SampleOptions opts;
    opts.steps = 3;
    opts.seed = 11;
    const auto views = orbit(2, 10, 1.5, 8);
    const EpsFn eps = model_eps(m);
    const Tensor a = generate_unconditional(eps, views, {2}, base_schedule(), opts, {3, 8, 8});
    const Tensor b = generate_unconditional(eps, views, {2}, base_schedule(), opts, {3, 8, 8});
    CHECK(a.storage() == b.storage());
    opts.seed = 12;
    CHECK(generate_unconditional(eps, views, {2}, base_schedule(), opts, {3, 8, 8}).storage() != a.storage());
    opts.max_frames = 1;
    CHECK_THROWS_AS(generate_unconditional(eps, views, {}, base_schedule(), opts, {3, 8, 8}), InvalidInput);
  }

  TEST_CASE("conditional generation returns only the targets") {
    Rng rng(5);
    const Tensor target = uniform({3, 4, 4}, -1, 1, rng);
    const Tensor cond = uniform({2, 3, 4, 4}, 0, 1, rng);
    const auto views = orbit(5, 10, 1.5, 4);
    SampleOptions opts;
    opts.steps = 20;
    opts.deterministic = true;
    const Tensor out = generate_conditional(oracle(target), cond, {views[0], views[1]}, {views[2], views[3], views[4]},
                                            {}, base_schedule(), opts);
    REQUIRE(out.shape() == Shape{3, 3, 4, 4});
    const Tensor expect = to_image_space(target);
    for (int64_t i = 0; i < out.numel(); ++i) CHECK(out[i] == doctest::Approx(expect[i % 48]).epsilon(1e-9));
    CHECK_THROWS_AS(generate_conditional(oracle(target), cond, {views[0]}, {views[2]}, {}, base_schedule(), opts),
                    InvalidInput);
  }

  TEST_CASE("trajectory batching") {
    Rng rng(6);
    const Tensor target = uniform({3, 4, 4}, -1, 1, rng);
    const auto traj = orbit(25, 15, 1.5, 4);
    std::vector<int> frames_seen;
    const EpsFn eps = [&](const FrameSetState& s, const NoiseSchedule& sch) {
      frames_seen.push_back(s.frames());
      return oracle(target)(s, sch);
    };
    SampleOptions opts;
    opts.steps = 2;
    opts.lambda_cfg = 1.0;
    const auto res = generate_trajectory(eps, traj, 10, 10, {}, base_schedule(), opts);
    REQUIRE(res.batches.size() == 3u);
    CHECK(res.batches[0].kind == "unconditional");
    CHECK(res.batches[0].frames == first_batch_indices(25, 10));
    CHECK(res.batches[1].kind == "conditional");
    CHECK(res.batches[1].n_cond == 10);
    CHECK(res.batches[1].frames.size() == 10u);
    CHECK(res.batches[2].frames.size() == 5u);
    CHECK(res.batches[1].lambda_cfg == 0.0);
    std::set<int> all;
    for (const auto& b : res.batches) all.insert(b.frames.begin(), b.frames.end());
    CHECK(all.size() == 25u);
    // Later batches hold the whole first batch plus their targets.
    CHECK(frames_seen.front() == 10);
    CHECK(frames_seen.back() == 15);
    CHECK(res.images.shape() == Shape{25, 3, 4, 4});
    CHECK(batch_to_json(res.batches[1])["n_cond"] == 10);
    opts.max_frames = 15;
    CHECK_THROWS_AS(generate_trajectory(eps, traj, 10, 10, {}, base_schedule(), opts), InvalidInput);
  }
}
