#include "mvdiff/evaluation.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <random>

#include "mvdiff/attention.hpp"
#include "mvdiff/conditioning.hpp"
#include "mvdiff/denoiser.hpp"
#include "mvdiff/errors.hpp"
#include "mvdiff/projection.hpp"
#include "mvdiff/synthdata.hpp"

namespace mvdiff::evaluation {

namespace {

void require_same(const Tensor& pred, const Tensor& target, const Tensor& mask) {
  MVD_REQUIRE(pred.shape() == target.shape(), "metric: prediction and target shapes differ");
  MVD_REQUIRE(pred.ndim() == 3 && mask.ndim() == 2 && mask.dim(0) == pred.dim(1) && mask.dim(1) == pred.dim(2),
              "metric: expected [C, H, W] images and an [H, W] mask");
}

}  // namespace

double masked_psnr(const Tensor& pred, const Tensor& target, const Tensor& mask) {
  require_same(pred, target, mask);
  const int64_t c = pred.dim(0), hw = mask.numel();
  double se = 0;
  int64_t count = 0;
  for (int64_t p = 0; p < hw; ++p) {
    if (mask[p] <= 0.5) continue;
    for (int64_t k = 0; k < c; ++k) {
      const double d = pred[k * hw + p] - target[k * hw + p];
      se += d * d;
    }
    count += c;
  }
  if (count == 0) throw UndefinedMetric("masked_psnr: empty mask");
  const double mse = se / static_cast<double>(count);
  if (mse <= 0) return kPsnrCap;
  return std::min(kPsnrCap, -10.0 * std::log10(mse));
}

double masked_ssim(const Tensor& pred, const Tensor& target, const Tensor& mask) {
  require_same(pred, target, mask);
  constexpr int kWin = 7, kHalf = kWin / 2;
  constexpr double kC1 = 0.01 * 0.01, kC2 = 0.03 * 0.03;
  constexpr double kNp = kWin * kWin, kCovNorm = kNp / (kNp - 1.0);
  const int64_t c = pred.dim(0), h = pred.dim(1), w = pred.dim(2);
  double total = 0;
  int64_t windows = 0;
  for (int64_t y = kHalf; y + kHalf < h; ++y)
    for (int64_t x = kHalf; x + kHalf < w; ++x) {
      if (mask[y * w + x] <= 0.5) continue;
      for (int64_t k = 0; k < c; ++k) {
        const double* a = pred.data() + k * h * w;
        const double* b = target.data() + k * h * w;
        double sa = 0, sb = 0, saa = 0, sbb = 0, sab = 0;
        for (int64_t dy = -kHalf; dy <= kHalf; ++dy)
          for (int64_t dx = -kHalf; dx <= kHalf; ++dx) {
            const double va = a[(y + dy) * w + x + dx], vb = b[(y + dy) * w + x + dx];
            sa += va;
            sb += vb;
            saa += va * va;
            sbb += vb * vb;
            sab += va * vb;
          }
        const double ma = sa / kNp, mb = sb / kNp;
        const double va = kCovNorm * (saa / kNp - ma * ma), vb = kCovNorm * (sbb / kNp - mb * mb);
        const double cov = kCovNorm * (sab / kNp - ma * mb);
        total += ((2 * ma * mb + kC1) * (2 * cov + kC2)) / ((ma * ma + mb * mb + kC1) * (va + vb + kC2));
      }
      ++windows;
    }
  if (windows == 0) throw UndefinedMetric("masked_ssim: no masked window center");
  return total / static_cast<double>(windows * c);
}

double reprojection_consistency(const std::vector<Tensor>& images, const std::vector<geometry::CameraView>& views,
                                const std::vector<Tensor>& depths, const std::vector<Tensor>& masks,
                                double depth_tolerance) {
  const size_t m = images.size();
  MVD_REQUIRE(views.size() == m && depths.size() == m && masks.size() == m,
              "reprojection: one view, depth and mask per image");
  double sum = 0;
  int pairs = 0;
  for (size_t i = 0; i < m; ++i) {
    const auto& vi = views[i];
    const int64_t hi = vi.height, wi = vi.width;
    MVD_REQUIRE(images[i].ndim() == 3 && images[i].dim(1) == hi && images[i].dim(2) == wi,
                "reprojection: image does not match its view");
    for (size_t j = 0; j < m; ++j) {
      if (i == j) continue;
      const auto& vj = views[j];
      const int64_t hj = vj.height, wj = vj.width, c = images[i].dim(0);
      double pair_sum = 0;
      int64_t valid = 0;
      for (int64_t y = 0; y < hi; ++y)
        for (int64_t x = 0; x < wi; ++x) {
          const double d = depths[i][y * wi + x];
          if (masks[i][y * wi + x] <= 0.5 || d <= 0) continue;
          const geometry::Vec3 p = geometry::unproject_pixel(geometry::Vec2(x + 0.5, y + 0.5), d, vi);
          const geometry::Projection pr = geometry::project(p, vj);
          if (!pr.in_front) continue;
          const auto u = static_cast<int64_t>(std::floor(pr.pixel.x())), v = static_cast<int64_t>(std::floor(pr.pixel.y()));
          if (u < 0 || u >= wj || v < 0 || v >= hj) continue;
          if (masks[j][v * wj + u] <= 0.5) continue;
          if (std::abs(depths[j][v * wj + u] - pr.depth) > depth_tolerance * pr.depth) continue;
          double diff = 0;
          for (int64_t k = 0; k < c; ++k)
            diff += std::abs(images[i][(k * hi + y) * wi + x] - images[j][(k * hj + v) * wj + u]);
          pair_sum += diff / static_cast<double>(c);
          ++valid;
        }
      if (valid == 0) continue;
      sum += pair_sum / static_cast<double>(valid);
      ++pairs;
    }
  }
  if (pairs == 0) throw UndefinedMetric("reprojection_consistency: no valid correspondences");
  return sum / pairs;
}

GradCheckResult check_gradients(const std::function<ad::Var()>& f,
                                const std::vector<std::pair<std::string, ad::Var>>& leaves, double eps,
                                int max_per_tensor, uint64_t seed) {
  for (const auto& [name, v] : leaves) {
    MVD_REQUIRE(v.requires_grad(), "grad check: leaf " + name + " does not require a gradient");
    const_cast<ad::Var&>(v).zero_grad();
  }
  ad::backward(f());
  std::mt19937_64 rng(seed);
  struct Entry {
    size_t leaf;
    int64_t index;
    double analytic, numeric;
  };
  std::vector<Entry> entries;
  for (size_t l = 0; l < leaves.size(); ++l) {
    ad::Var v = leaves[l].second;
    const Tensor g = v.grad();
    std::vector<int64_t> idx(v.numel());
    for (int64_t k = 0; k < v.numel(); ++k) idx[k] = k;
    if (max_per_tensor >= 0 && static_cast<int64_t>(idx.size()) > max_per_tensor) {
      std::shuffle(idx.begin(), idx.end(), rng);
      idx.resize(max_per_tensor);
    }
    for (int64_t k : idx) {
      double& x = v.mutable_value()[k];
      const double saved = x;
      double fp, fm;
      {
        ad::NoGradGuard guard;
        x = saved + eps;
        fp = f().value()[0];
        x = saved - eps;
        fm = f().value()[0];
      }
      x = saved;
      entries.push_back({l, k, g[k], (fp - fm) / (2 * eps)});
    }
  }
  double scale = 0;
  for (const auto& e : entries) scale = std::max(scale, std::abs(e.analytic));
  const double floor = std::max(1e-3 * scale, 1e-12);
  GradCheckResult r;
  r.checked = static_cast<int64_t>(entries.size());
  for (const auto& e : entries) {
    const double err =
        std::abs(e.analytic - e.numeric) / std::max({std::abs(e.analytic), std::abs(e.numeric), floor});
    if (r.worst.empty() || err > r.max_rel_error) {
      r.max_rel_error = err;
      r.worst = leaves[e.leaf].first + "[" + std::to_string(e.index) + "]";
    }
  }
  return r;
}

std::vector<std::string> grad_check_components() {
  return {"linear", "composite", "render", "attention", "projection", "denoiser"};
}

namespace {

using Leaves = std::vector<std::pair<std::string, ad::Var>>;

Leaves store_leaves(const nn::ParamStore& store) {
  Leaves out;
  for (const auto& p : store.all()) out.emplace_back(p.name, p.var);
  return out;
}

// Zero-initialized tensors would hide upstream gradients; give them small
// random values for the check.
void randomize_zero_params(nn::ParamStore& store, Rng& rng) {
  for (auto& p : store.all())
    if (p.var.value().max_abs() == 0.0) p.var.mutable_value() = randn(p.var.shape(), 0.2, rng);
}

std::vector<geometry::CameraView> micro_views(int n, int size) {
  std::vector<geometry::CameraView> views;
  for (int i = 0; i < n; ++i)
    views.push_back(synthdata::ring_camera(40.0 + 95.0 * i, 20.0 + 7.0 * i, 1.4, size));
  return views;
}

}  // namespace

GradCheckResult grad_check(const std::string& component, double eps, uint64_t seed) {
  Rng rng(seed + 1234);
  if (component == "linear") {
    ad::Var x(randn({3, 4}, 1.0, rng), true), w(randn({5, 4}, 1.0, rng), true), b(randn({5}, 1.0, rng), true);
    const Tensor probe = randn({3, 5}, 1.0, rng);
    return check_gradients([&] { return ad::dot_const(ad::linear(x, w, b), probe); },
                           {{"x", x}, {"weight", w}, {"bias", b}}, eps, -1, seed);
  }
  if (component == "composite") {
    Tensor dens = uniform({3, 8}, 0.1, 3.0, rng);
    ad::Var density(dens, true), feats(randn({3, 8, 2}, 1.0, rng), true);
    const Tensor deltas = uniform({3, 8}, 0.05, 0.3, rng);
    const Tensor probe = randn({3, 2}, 1.0, rng);
    return check_gradients(
        [&] { return ad::dot_const(projection::composite(density, feats, deltas).features, probe); },
        {{"density", density}, {"features", feats}}, eps, -1, seed);
  }
  if (component == "render") {
    nn::ParamStore store;
    projection::RenderMlp mlp(store, "render", 2, 4, rng);
    projection::FeatureVoxelGrid grid{ad::Var(randn({2, 4, 4, 4}, 1.0, rng), true),
                                      ad::Var(randn({2, 4, 4, 4}, 1.0, rng), true)};
    const auto views = micro_views(2, 2);
    projection::RenderOptions opts;
    opts.samples = 8;
    const Tensor probe = randn({2, 2, 2, 2}, 1.0, rng);
    Leaves leaves = store_leaves(store);
    leaves.emplace_back("grid.foreground", grid.foreground);
    leaves.emplace_back("grid.background", grid.background);
    return check_gradients([&] { return ad::dot_const(projection::render(grid, views, mlp, opts).features, probe); },
                           leaves, eps, -1, seed);
  }
  if (component == "attention") {
    nn::ParamStore store;
    auto w = attention::AttentionWeights::create(store, "cfa", 4, 4, 4, 2, 1, rng);
    randomize_zero_params(store, rng);
    ad::Var h(randn({2, 4, 2, 2}, 1.0, rng), true), z(randn({2, conditioning::kConditionDim}, 1.0, rng), true);
    const Tensor probe = randn({2, 4, 2, 2}, 1.0, rng);
    Leaves leaves = store_leaves(store);
    leaves.emplace_back("h", h);
    leaves.emplace_back("z", z);
    return check_gradients([&] { return ad::dot_const(attention::cross_frame_attention(h, z, w), probe); }, leaves,
                           eps, -1, seed);
  }
  if (component == "projection") {
    nn::ParamStore store;
    projection::ProjectionConfig cfg;
    cfg.channels = 4;
    cfg.compressed = 2;
    cfg.grid = 4;
    cfg.samples = 8;
    cfg.temb_dim = 4;
    cfg.agg_hidden = 8;
    cfg.render_hidden = 4;
    cfg.refine_blocks = 1;
    cfg.t_max = 100;
    projection::ProjectionLayer layer(store, "proj", cfg, rng);
    randomize_zero_params(store, rng);
    ad::Var h(randn({2, 4, 2, 2}, 1.0, rng), true);
    const auto views = micro_views(2, 2);
    const std::vector<int> t{30, 70};
    const Tensor probe = randn({2, 4, 2, 2}, 1.0, rng);
    Leaves leaves = store_leaves(store);
    leaves.emplace_back("h", h);
    return check_gradients(
        [&] { return ad::dot_const(layer.forward(h, views, t, std::nullopt), probe); }, leaves, eps, -1, seed);
  }
  if (component == "denoiser") {
    denoiser::DenoiserConfig cfg;
    cfg.image_size = 8;
    cfg.base_channels = 8;
    cfg.grid_base = 8;
    cfg.compressed = 4;
    cfg.render_samples = 8;
    cfg.render_hidden = 8;
    cfg.agg_hidden = 8;
    cfg.refine_blocks = 1;
    cfg.temb_dim = 8;
    cfg.time_hidden = 16;
    cfg.proj_temb_dim = 4;
    cfg.lora_rank = 2;
    cfg.d_txt = 8;
    cfg.vocab_size = 19;
    cfg.max_caption = 5;
    denoiser::Denoiser model(cfg, seed);
    randomize_zero_params(model.params(), rng);
    const auto views = micro_views(2, 8);
    ad::Var x(randn({2, 3, 8, 8}, 1.0, rng), true);
    std::vector<conditioning::ConditionVector> conds;
    for (const auto& v : views)
      conds.push_back(conditioning::make_condition(v, Tensor(), conditioning::IntensityMode::kTest));
    const Tensor z = conditioning::stack_conditions(conds);
    const std::vector<int> t{40, 40}, caption{0, 10, 17, 13, 18};
    const Tensor probe = randn({2, 3, 8, 8}, 1.0, rng);
    Leaves leaves = store_leaves(model.params());
    leaves.emplace_back("x", x);
    return check_gradients([&] { return ad::dot_const(model.forward(x, t, z, views, caption), probe); }, leaves, eps,
                           2, seed);
  }
  throw InvalidInput("grad_check: unknown component '" + component + "'");
}

}  // namespace mvdiff::evaluation

namespace mvdiff::evaluation {

ConditionalEvalResult evaluate_conditional(const generation::EpsFn& eps, const std::vector<synthdata::Scene>& scenes,
                                           const diffusion::NoiseSchedule& base, const ConditionalEvalOptions& opts) {
  MVD_REQUIRE(!scenes.empty(), "evaluation needs at least one scene");
  MVD_REQUIRE(!opts.cond_indices.empty() && !opts.target_indices.empty(), "evaluation needs cond and target frames");
  const auto t0 = std::chrono::steady_clock::now();
  generation::SampleOptions so;
  so.steps = opts.steps;
  so.lambda_cfg = opts.lambda_cfg;
  so.deterministic = opts.deterministic;
  ConditionalEvalResult r;
  for (size_t s = 0; s < scenes.size(); ++s) {
    const auto& scene = scenes[s];
    const int n = static_cast<int>(scene.views.size());
    std::vector<geometry::CameraView> cond_views, targets;
    std::vector<Tensor> cond_list;
    for (int i : opts.cond_indices) {
      MVD_REQUIRE(i >= 0 && i < n, "evaluation: cond index out of range");
      cond_views.push_back(scene.views[i]);
      cond_list.push_back(scene.images[i]);
    }
    for (int i : opts.target_indices) {
      MVD_REQUIRE(i >= 0 && i < n, "evaluation: target index out of range");
      targets.push_back(scene.views[i]);
    }
    const Tensor& first = cond_list.front();
    const int64_t per = first.numel();
    Tensor cond({static_cast<int64_t>(cond_list.size()), first.dim(0), first.dim(1), first.dim(2)});
    for (size_t k = 0; k < cond_list.size(); ++k)
      std::copy(cond_list[k].data(), cond_list[k].data() + per, cond.data() + k * per);
    so.seed = opts.seed * 1000003 + s;
    const Tensor gen = generation::generate_conditional(eps, cond, cond_views, targets,
                                                        synthdata::tokenize(scene.caption), base, so);
    SceneScore sc;
    sc.scene = scene.name;
    std::vector<Tensor> images, depths, masks;
    for (size_t k = 0; k < targets.size(); ++k) {
      Tensor img = Tensor(first.shape());
      std::copy(gen.data() + k * per, gen.data() + (k + 1) * per, img.data());
      const int idx = opts.target_indices[k];
      sc.psnr += masked_psnr(img, scene.images[idx], scene.masks[idx]) / targets.size();
      sc.ssim += masked_ssim(img, scene.images[idx], scene.masks[idx]) / targets.size();
      images.push_back(std::move(img));
      depths.push_back(scene.depths[idx]);
      masks.push_back(scene.masks[idx]);
    }
    try {
      sc.consistency = reprojection_consistency(images, targets, depths, masks);
      sc.consistency_defined = true;
      r.consistency += sc.consistency;
      ++r.consistency_scenes;
    } catch (const UndefinedMetric&) {
    }
    r.psnr += sc.psnr / scenes.size();
    r.ssim += sc.ssim / scenes.size();
    r.scenes.push_back(sc);
  }
  if (r.consistency_scenes > 0) r.consistency /= r.consistency_scenes;
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

nlohmann::json to_json(const ConditionalEvalResult& r) {
  nlohmann::json per = nlohmann::json::array();
  for (const auto& s : r.scenes) {
    nlohmann::json j{{"scene", s.scene}, {"psnr", s.psnr}, {"ssim", s.ssim}};
    j["consistency"] = s.consistency_defined ? nlohmann::json(s.consistency) : nlohmann::json(nullptr);
    per.push_back(j);
  }
  return {{"psnr", r.psnr},     {"ssim", r.ssim},       {"consistency", r.consistency},
          {"consistency_scenes", r.consistency_scenes}, {"seconds", r.seconds}, {"scenes", per}};
}

}  // namespace mvdiff::evaluation
