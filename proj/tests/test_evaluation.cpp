#include <cmath>

#include "doctest.h"
#include "helpers.hpp"
#include "mvdiff/errors.hpp"
#include "mvdiff/evaluation.hpp"

using namespace mvdiff;
using namespace mvdiff::evaluation;

namespace {

// Two-pass SSIM of one window and channel; the implementation under test
// accumulates raw moments in a single pass.
double window_ssim(const Tensor& a, const Tensor& b, int64_t k, int64_t cy, int64_t cx) {
  const int64_t h = a.dim(1), w = a.dim(2);
  std::vector<double> xa, xb;
  for (int64_t y = cy - 3; y <= cy + 3; ++y)
    for (int64_t x = cx - 3; x <= cx + 3; ++x) {
      xa.push_back(a[(k * h + y) * w + x]);
      xb.push_back(b[(k * h + y) * w + x]);
    }
  double ma = 0, mb = 0;
  for (size_t i = 0; i < xa.size(); ++i) ma += xa[i] / 49, mb += xb[i] / 49;
  double va = 0, vb = 0, cov = 0;
  for (size_t i = 0; i < xa.size(); ++i) {
    va += (xa[i] - ma) * (xa[i] - ma) / 48;
    vb += (xb[i] - mb) * (xb[i] - mb) / 48;
    cov += (xa[i] - ma) * (xb[i] - mb) / 48;
  }
  const double c1 = 1e-4, c2 = 9e-4;
  return (2 * ma * mb + c1) * (2 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
}

synthdata::Scene lambertian_scene(int size = 32) {
  synthdata::SceneSpec s;
  s.object = synthdata::Primitive::kCube;
  s.size = 0.6;
  s.center = geometry::Vec3(0, synthdata::kFloorY + 0.3, 0);
  s.color_id = 3;
  return synthdata::make_scene(s, size);
}

}  // namespace

TEST_SUITE("evaluation") {
  TEST_CASE("masked PSNR") {
    Rng rng(1);
    const Tensor t = uniform({3, 4, 4}, 0.2, 0.8, rng);
    Tensor p = t;
    for (int64_t i = 0; i < p.numel(); ++i) p[i] += 0.1;
    Tensor mask({4, 4}, 1.0);
    CHECK(masked_psnr(p, t, mask) == doctest::Approx(20.0));
    CHECK(masked_psnr(t, t, mask) == kPsnrCap);
    // Errors outside the mask do not count.
    mask.fill(0.0);
    mask[5] = 1.0;
    Tensor q = t;
    for (int64_t k = 0; k < 3; ++k) q[k * 16] = 0.0;
    for (int64_t k = 0; k < 3; ++k) q[k * 16 + 5] += 0.01;
    CHECK(masked_psnr(q, t, mask) == doctest::Approx(40.0));
    CHECK_THROWS_AS(masked_psnr(t, t, Tensor({4, 4})), UndefinedMetric);
    CHECK_THROWS_AS(masked_psnr(t, Tensor({3, 4, 5}), mask), InvalidInput);
  }

  TEST_CASE("masked SSIM matches a two-pass reference") {
    Rng rng(2);
    const Tensor a = uniform({2, 10, 9}, 0, 1, rng);
    Tensor b = a;
    for (int64_t i = 0; i < b.numel(); ++i) b[i] = std::clamp(0.7 * b[i] + 0.1 + 0.1 * std::sin(i), 0.0, 1.0);
    Tensor mask({10, 9});
    std::vector<std::pair<int, int>> centers{{3, 3}, {4, 5}, {6, 4}};
    for (auto [y, x] : centers) mask[y * 9 + x] = 1.0;
    mask[0] = 1.0;  // window would leave the image; ignored
    double expect = 0;
    for (auto [y, x] : centers)
      for (int k = 0; k < 2; ++k) expect += window_ssim(a, b, k, y, x) / 6;
    CHECK(masked_ssim(a, b, mask) == doctest::Approx(expect).epsilon(1e-10));
    CHECK(masked_ssim(a, a, mask) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK_THROWS_AS(masked_ssim(a, b, Tensor({10, 9})), UndefinedMetric);
  }

  TEST_CASE("masked SSIM of an inverted binary image") {
    Tensor t({1, 9, 9});
    for (int64_t i = 0; i < t.numel(); ++i) t[i] = (i * 7 + i / 9) % 3 == 0 ? 1.0 : 0.0;
    Tensor p = t;
    for (auto& v : p.storage()) v = 1.0 - v;
    Tensor mask({9, 9}, 1.0);
    double expect = 0;
    for (int y = 3; y <= 5; ++y)
      for (int x = 3; x <= 5; ++x) expect += window_ssim(p, t, 0, y, x) / 9;
    CHECK(expect < 0);
    CHECK(masked_ssim(p, t, mask) == doctest::Approx(expect).epsilon(1e-10));
    CHECK(masked_ssim(p, t, mask) == doctest::Approx(masked_ssim(t, p, mask)).epsilon(1e-12));
  }

  TEST_CASE("ground-truth renders are reprojection consistent") {
    const auto scene = lambertian_scene();
    const std::vector<int> idx{0, 3, 6};
    std::vector<Tensor> images, depths, masks;
    std::vector<geometry::CameraView> views;
    for (int i : idx) {
      images.push_back(scene.images[i]);
      depths.push_back(scene.depths[i]);
      masks.push_back(scene.masks[i]);
      views.push_back(scene.views[i]);
    }
    const double gt = reprojection_consistency(images, views, depths, masks);
    // Constant images agree everywhere.
    std::vector<Tensor> flat(3, Tensor({3, 32, 32}, 0.4));
    CHECK(reprojection_consistency(flat, views, depths, masks) == 0.0);
    // Per-view noise makes corresponding pixels disagree.
    Rng rng(3);
    auto noisy = images;
    for (auto& im : noisy)
      for (auto& v : im.storage()) v = std::clamp(v + 0.3 * (rng() % 2 ? 1 : -1), 0.0, 1.0);
    const double bad = reprojection_consistency(noisy, views, depths, masks);
    CHECK(gt < 0.05);
    CHECK(bad > 4 * gt);
    std::vector<Tensor> empty(3, Tensor({32, 32}));
    CHECK_THROWS_AS(reprojection_consistency(images, views, depths, empty), UndefinedMetric);
    CHECK_THROWS_AS(reprojection_consistency(images, {views[0]}, depths, masks), InvalidInput);
  }

  TEST_CASE("finite-difference gradient checks") {
    ad::Var x(Tensor({3}, {0.5, -1.0, 2.0}), true);
    const auto ok = check_gradients([&] { return ad::sum(ad::mul(x, x)); }, {{"x", x}});
    CHECK(ok.checked == 3);
    CHECK(ok.max_rel_error < 1e-8);
    // A deliberately wrong backward is caught.
    const auto bad = check_gradients(
        [&] {
          const Tensor v = x.value();
          Tensor y({1}, v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
          return ad::make_op(std::move(y), {x}, [](ad::Node& self) {
            auto& p = self.parents[0];
            for (int64_t i = 0; i < 3; ++i) p->grad_buffer()[i] += self.grad[0] * p->value[i];  // missing factor 2
          });
        },
        {{"x", x}});
    CHECK(bad.max_rel_error == doctest::Approx(0.5));
    CHECK(grad_check_components().size() == 6u);
    CHECK(grad_check("linear").max_rel_error < 1e-8);
    CHECK(grad_check("composite").max_rel_error < 1e-6);
    CHECK_THROWS_AS(grad_check("nonsense"), InvalidInput);
  }

  TEST_CASE("conditional evaluation with a perfect oracle") {
    auto scene = lambertian_scene(16);
    scene.name = "oracle";
    // Noise predictor that denoises each frame toward the ground truth of its ring pose.
    const generation::EpsFn eps = [&](const diffusion::FrameSetState& s, const diffusion::NoiseSchedule& sch) {
      Tensor e(s.x.shape());
      const int64_t per = s.x.numel() / s.frames();
      for (int f = 0; f < s.frames(); ++f) {
        if (s.t[f] == 0) continue;
        int ring = -1;
        for (int k = 0; k < synthdata::kRingSize; ++k)
          if ((scene.views[k].center() - s.views[f].center()).norm() < 1e-9) ring = k;
        REQUIRE(ring >= 0);
        const Tensor x0 = generation::to_model_space(scene.images[ring]);
        const double ab = sch.alpha_bar[s.t[f]];
        for (int64_t i = 0; i < per; ++i)
          e[f * per + i] = (s.x[f * per + i] - std::sqrt(ab) * x0[i]) / std::sqrt(1 - ab);
      }
      return e;
    };
    ConditionalEvalOptions opts;
    opts.steps = 10;
    opts.deterministic = true;
    const auto r = evaluate_conditional(eps, {scene}, diffusion::make_schedule(100, 1e-3, 0.2), opts);
    REQUIRE(r.scenes.size() == 1u);
    CHECK(r.psnr > 90);
    CHECK(r.ssim == doctest::Approx(1.0).epsilon(1e-6));
    CHECK(r.consistency_scenes == 1);
    std::vector<Tensor> images, depths, masks;
    std::vector<geometry::CameraView> views;
    for (int i : opts.target_indices) {
      images.push_back(scene.images[i]);
      depths.push_back(scene.depths[i]);
      masks.push_back(scene.masks[i]);
      views.push_back(scene.views[i]);
    }
    CHECK(r.consistency == doctest::Approx(reprojection_consistency(images, views, depths, masks)).epsilon(1e-6));
    const auto j = to_json(r);
    CHECK(j["scenes"][0]["scene"] == "oracle");
    CHECK(j.contains("seconds"));
    opts.target_indices = {30};
    CHECK_THROWS_AS(evaluate_conditional(eps, {scene}, diffusion::make_schedule(100, 1e-3, 0.2), opts), InvalidInput);
  }
}
