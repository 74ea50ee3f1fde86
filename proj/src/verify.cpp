#include "mvdiff/verify.hpp"

#include <chrono>
#include <cmath>
#include <cstring>
#include <random>

#include "mvdiff/diffusion.hpp"
#include "mvdiff/errors.hpp"
#include "mvdiff/evaluation.hpp"
#include "mvdiff/generation.hpp"
#include "mvdiff/geometry.hpp"
#include "mvdiff/synthdata.hpp"

namespace mvdiff::verify {

using geometry::Vec2;
using geometry::Vec3;

namespace {

Check make_check(std::string name, double value, double tol, std::string detail = {}) {
  Check c{std::move(name), value, tol, std::isfinite(value) && value <= tol, std::move(detail)};
  return c;
}

template <typename Fn>
SuiteReport timed(const std::string& name, Fn&& body) {
  const auto t0 = std::chrono::steady_clock::now();
  SuiteReport r;
  r.suite = name;
  body(r.checks);
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

geometry::CameraView random_camera(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  Vec3 eye;
  do {
    eye = Vec3(u(rng), u(rng), u(rng)) * 3.0;
  } while (eye.norm() < 1.0 || std::abs(eye.normalized().y()) > 0.95);
  const int h = 16 + static_cast<int>(16 * (u(rng) + 1)), w = 16 + static_cast<int>(16 * (u(rng) + 1));
  const double fx = 20 + 10 * (u(rng) + 1), fy = 20 + 10 * (u(rng) + 1);
  return geometry::CameraView::look_at(eye, Vec3(u(rng), u(rng), u(rng)) * 0.3, Vec3::UnitY(), fx, fy, 0.5 * w + u(rng),
                                       0.5 * h + u(rng), h, w);
}

}  // namespace

bool SuiteReport::passed() const {
  for (const auto& c : checks)
    if (!c.passed) return false;
  return true;
}

SuiteReport geometry_suite(uint64_t seed) {
  return timed("geometry", [&](std::vector<Check>& out) {
    std::mt19937_64 rng(seed + 11);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    double worst = 0;
    for (int i = 0; i < 10000; ++i) {
      const auto cam = random_camera(rng);
      const Vec2 px(u(rng) * cam.width, u(rng) * cam.height);
      const double depth = 0.1 + 10.0 * u(rng);
      const Vec3 p = geometry::unproject_pixel(px, depth, cam);
      const auto pr = geometry::project(p, cam);
      worst = std::max({worst, (pr.pixel - px).norm(), std::abs(pr.depth - depth)});
      const Vec3 back = geometry::unproject_pixel(pr.pixel, pr.depth, cam);
      worst = std::max(worst, (back - p).norm());
    }
    out.push_back(make_check("project/unproject round trip (1e4 cases)", worst, 1e-5));

    const Vec3 c = projection::contract_background(Vec3(4, 0, 0));
    out.push_back(make_check("MERF contraction (4,0,0) -> (1.75,0,0)", (c - Vec3(1.75, 0, 0)).cwiseAbs().maxCoeff(),
                             0.0));

    std::vector<geometry::CameraView> ring;
    for (int k = 0; k < 6; ++k) ring.push_back(synthdata::ring_camera(60.0 * k, 0.0, 1.5, 16));
    const auto same = geometry::normalize_poses(ring, geometry::unit_cube());
    double identity_err = 0;
    for (size_t k = 0; k < ring.size(); ++k)
      identity_err = std::max(identity_err, (same.views[k].pose - ring[k].pose).cwiseAbs().maxCoeff());
    out.push_back(make_check("normalize_poses identity case", identity_err, 1e-9));

    geometry::Aabb big{Vec3::Constant(-1.0), Vec3::Constant(1.0)};
    const auto scaled = geometry::normalize_poses(ring, big);
    double scale_err = 0;
    for (size_t k = 0; k < ring.size(); ++k)
      scale_err = std::max(scale_err, (scaled.views[k].translation() - 0.5 * ring[k].translation()).norm());
    out.push_back(make_check("normalize_poses side-2 box halves translations", scale_err, 1e-9));

    std::vector<geometry::CameraView> pair{random_camera(rng), random_camera(rng)};
    const auto moved = geometry::normalize_poses(pair, geometry::Aabb{Vec3(-0.3, -0.2, -0.1), Vec3(0.4, 0.9, 0.5)});
    const geometry::Mat3 before = pair[1].rotation() * pair[0].rotation().transpose();
    const geometry::Mat3 after = moved.views[1].rotation() * moved.views[0].rotation().transpose();
    out.push_back(make_check("relative rotation preserved", (before - after).cwiseAbs().maxCoeff(), 1e-6));
  });
}

SuiteReport render_suite(const CompositeFn& composite) {
  return timed("render", [&](std::vector<Check>& out) {
    const double sigma = 2.0, color = 0.7;
    const auto view = synthdata::ring_camera(30.0, 20.0, 1.6, 8);
    projection::RenderOptions opts;
    opts.samples = 256;
    opts.background = false;
    const auto plan = projection::make_render_plan({view}, 4, opts);
    const int64_t r = plan.rays, s = plan.samples_per_ray;
    ad::Var density(Tensor({r, s}, sigma)), feats(Tensor({r, s, 1}, color));
    const auto res = composite(density, feats, plan.deltas);
    const auto rays = geometry::generate_rays(view);
    double worst = 0, worst_sum = 0;
    int hits = 0;
    for (int64_t i = 0; i < r; ++i) {
      double wsum = 0;
      for (int64_t k = 0; k < s; ++k) wsum += res.weights[i * s + k];
      worst_sum = std::max(worst_sum, wsum - 1.0);
      if (!rays[i].hits_foreground) continue;
      const double len = rays[i].foreground.far - rays[i].foreground.near;
      const double expect = color * (1.0 - std::exp(-sigma * len));
      if (expect < 1e-6) continue;
      worst = std::max(worst, std::abs(res.features.value()[i] - expect) / expect);
      ++hits;
    }
    out.push_back(make_check("constant-density ray matches c(1 - exp(-sigma L)) at 256 samples", worst, 0.01,
                             std::to_string(hits) + " rays"));

    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    Tensor dens({64, 96}), deltas({64, 96});
    for (auto& v : dens.storage()) v = 20.0 * u(rng) * u(rng);
    for (auto& v : deltas.storage()) v = 0.2 * u(rng);
    const auto rand = composite(ad::Var(dens), ad::Var(Tensor({64, 96, 1}, 1.0)), deltas);
    for (int64_t i = 0; i < 64; ++i) {
      double wsum = 0;
      for (int64_t k = 0; k < 96; ++k) {
        wsum += rand.weights[i * 96 + k];
        if (rand.weights[i * 96 + k] < 0) wsum = 1e9;
      }
      worst_sum = std::max(worst_sum, wsum - 1.0);
    }
    out.push_back(make_check("compositing weights are non-negative and sum to <= 1 + 1e-6", std::max(0.0, worst_sum),
                             1e-6));

    // The same closed form through the full grid -> MLP -> composite pipeline.
    nn::ParamStore store;
    Rng prng(3);
    projection::RenderMlp mlp(store, "render", 1, 4, prng);
    for (auto* layer : {&mlp.l1, &mlp.l2, &mlp.l3}) layer->weight.mutable_value().fill(0.0);
    mlp.l3.bias.mutable_value()[0] = std::log(std::expm1(sigma));  // softplus^-1
    mlp.l3.bias.mutable_value()[1] = color;
    projection::FeatureVoxelGrid grid{ad::Var(Tensor({1, 4, 4, 4}, 0.3)), ad::Var(Tensor({1, 4, 4, 4}, 0.3))};
    const auto rendered = projection::render(grid, {view}, mlp, opts);
    double worst_full = 0;
    for (int64_t i = 0; i < r; ++i) {
      if (!rays[i].hits_foreground) continue;
      const double len = rays[i].foreground.far - rays[i].foreground.near;
      const double expect = color * (1.0 - std::exp(-sigma * len));
      if (expect < 1e-6) continue;
      worst_full = std::max(worst_full, std::abs(rendered.features.value()[i] - expect) / expect);
    }
    out.push_back(make_check("render() on a constant grid matches the closed form", worst_full, 0.01));
  });
}

SuiteReport gradcheck_suite(uint64_t seed) {
  return timed("gradcheck", [&](std::vector<Check>& out) {
    const std::vector<std::pair<std::string, double>> tolerances = {
        {"linear", 1e-8}, {"composite", 1e-6}, {"render", 1e-4},
        {"attention", 1e-4}, {"projection", 1e-4}, {"denoiser", 1e-3}};
    for (const auto& [name, tol] : tolerances) {
      const auto r = evaluation::grad_check(name, 1e-6, seed);
      out.push_back(make_check("gradient check: " + name, r.max_rel_error, tol,
                               std::to_string(r.checked) + " entries, worst " + r.worst));
    }
  });
}

SuiteReport diffusion_suite(uint64_t seed) {
  return timed("diffusion", [&](std::vector<Check>& out) {
    std::mt19937_64 rng(seed + 7);
    std::normal_distribution<double> nd(0.0, 1.0);
    // Chain of single forward steps vs the closed-form marginal with the implied noise.
    const auto sched = diffusion::make_schedule(10, 0.05, 0.3);
    double chain_err = 0;
    for (int trial = 0; trial < 100; ++trial) {
      const double x0 = nd(rng);
      double x = x0, carried = 0;  // carried = sum of scaled noises
      for (int t = 1; t <= sched.steps; ++t) {
        const double n = nd(rng);
        x = std::sqrt(1.0 - sched.beta[t]) * x + std::sqrt(sched.beta[t]) * n;
        carried = std::sqrt(1.0 - sched.beta[t]) * carried + std::sqrt(sched.beta[t]) * n;
        const double eps = carried / std::sqrt(1.0 - sched.alpha_bar[t]);
        const double closed = diffusion::q_sample(Tensor({1}, x0), t, Tensor({1}, eps), sched)[0];
        chain_err = std::max(chain_err, std::abs(closed - x));
      }
    }
    out.push_back(make_check("chain-iterated forward steps equal the closed-form marginal (T=10)", chain_err, 1e-10));

    // Oracle reverse pass at sigma = 0.
    const auto base = diffusion::make_schedule(100, 1e-3, 0.2);
    Tensor target({2, 3, 8, 8});
    for (auto& v : target.storage()) v = std::uniform_real_distribution<double>(-1.0, 1.0)(rng);
    generation::EpsFn oracle = [&](const diffusion::FrameSetState& s, const diffusion::NoiseSchedule& sc) {
      Tensor e(s.x.shape());
      const int64_t per = s.x.numel() / s.frames();
      for (int f = 0; f < s.frames(); ++f) {
        const int t = s.t[f];
        if (t == 0) continue;
        const double a = std::sqrt(sc.alpha_bar[t]), b = std::sqrt(1.0 - sc.alpha_bar[t]);
        for (int64_t i = f * per; i < (f + 1) * per; ++i) e[i] = (s.x[i] - a * target[i]) / b;
      }
      return e;
    };
    const auto sched50 = diffusion::respace(base, 50).without_noise();
    diffusion::FrameSetState state;
    state.x = Tensor(target.shape());
    state.t = {sched50.steps, sched50.steps};
    const Tensor result = generation::run_reverse(oracle, state, sched50, 1.0, seed);
    double se = 0;
    for (int64_t i = 0; i < target.numel(); ++i) se += (result[i] - target[i]) * (result[i] - target[i]);
    out.push_back(make_check("oracle reverse pass recovers the target (RMS, sigma = 0)",
                             std::sqrt(se / target.numel()), 0.05));

    // Conditioning frames are bit-identical through a stochastic reverse pass.
    const auto noisy = diffusion::respace(base, 20);
    diffusion::FrameSetState cond;
    cond.x = Tensor({3, 3, 8, 8});
    for (auto& v : cond.x.storage()) v = nd(rng);
    const Tensor before = cond.x;
    cond.t = {0, noisy.steps, noisy.steps};
    generation::EpsFn junk = [](const diffusion::FrameSetState& s, const diffusion::NoiseSchedule&) {
      Tensor e(s.x.shape());
      for (int64_t i = 0; i < e.numel(); ++i) e[i] = std::sin(3.0 * s.x[i]);
      return e;
    };
    const Tensor after = generation::run_reverse(junk, cond, noisy, 1.0, seed);
    const int64_t per = before.numel() / 3;
    const bool same = std::memcmp(before.data(), after.data(), per * sizeof(double)) == 0;
    out.push_back(make_check("conditioning frames bit-identical through sampling", same ? 0.0 : 1.0, 0.0));

    // q_sample moments over 1e5 scalar draws.
    const int draws = 100000, t = 37;
    const double x0 = 0.8;
    double sum = 0, sq = 0;
    for (int i = 0; i < draws; ++i) {
      const double v = diffusion::q_sample(Tensor({1}, x0), t, Tensor({1}, nd(rng)), base)[0];
      sum += v;
      sq += v * v;
    }
    const double mean = sum / draws, var = sq / draws - mean * mean;
    const double mu = std::sqrt(base.alpha_bar[t]) * x0, v = 1.0 - base.alpha_bar[t];
    const double z_mean = std::abs(mean - mu) / std::sqrt(v / draws);
    const double z_var = std::abs(var - v) / (v * std::sqrt(2.0 / (draws - 1)));
    out.push_back(make_check("q_sample mean within 3 standard errors", z_mean, 3.0));
    out.push_back(make_check("q_sample variance within 3 standard errors", z_var, 3.0));
  });
}

std::vector<std::string> suite_names() { return {"geometry", "render", "gradcheck", "diffusion"}; }

std::vector<SuiteReport> run(const std::string& suite, uint64_t seed) {
  std::vector<SuiteReport> out;
  const bool all = suite == "all";
  if (all || suite == "geometry") out.push_back(geometry_suite(seed));
  if (all || suite == "render") out.push_back(render_suite());
  if (all || suite == "gradcheck") out.push_back(gradcheck_suite(seed));
  if (all || suite == "diffusion") out.push_back(diffusion_suite(seed));
  MVD_REQUIRE(!out.empty(), "unknown verify suite '" + suite + "'");
  return out;
}

nlohmann::json to_json(const std::vector<SuiteReport>& reports) {
  nlohmann::json j = nlohmann::json::array();
  for (const auto& r : reports) {
    nlohmann::json checks = nlohmann::json::array();
    for (const auto& c : r.checks)
      checks.push_back({{"name", c.name}, {"value", c.value}, {"tolerance", c.tolerance}, {"passed", c.passed},
                        {"detail", c.detail}});
    j.push_back({{"suite", r.suite}, {"passed", r.passed()}, {"seconds", r.seconds}, {"checks", checks}});
  }
  return j;
}

}  // namespace mvdiff::verify
