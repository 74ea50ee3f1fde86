#include "mvdiff/projection.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

#include "mvdiff/conditioning.hpp"
#include "mvdiff/errors.hpp"

namespace mvdiff::projection {

using geometry::Vec2;
using geometry::Vec3;

Vec3 contract_background(const Vec3& x) {
  int j = 0;
  const double m = x.cwiseAbs().maxCoeff(&j);
  if (m <= 1.0) return x;
  Vec3 out = x / m;
  out(j) = std::copysign(2.0 - 1.0 / m, x(j));
  return out;
}

Vec3 uncontract_background(const Vec3& u) {
  int j = 0;
  const double m = u.cwiseAbs().maxCoeff(&j);
  if (m <= 1.0) return u;
  MVD_REQUIRE(m < 2.0, "uncontract_background: point on or beyond the contracted boundary");
  const double a = 1.0 / (2.0 - m);
  Vec3 out = u * a;
  out(j) = std::copysign(a, u(j));
  return out;
}

namespace {

double cell_center(int i, int grid, double lo, double hi) { return lo + (hi - lo) * (i + 0.5) / grid; }

// Trilinear taps for continuous index-space coordinates (voxel centers at
// integers), clamped to the grid.
void trilinear_taps(const Vec3& g, int grid, int64_t* index, double* weight) {
  int i0[3];
  double f[3];
  for (int a = 0; a < 3; ++a) {
    const double c = std::clamp(g(a), 0.0, static_cast<double>(grid - 1));
    i0[a] = std::min(static_cast<int>(std::floor(c)), grid - 1);
    f[a] = c - i0[a];
  }
  int k = 0;
  for (int dz = 0; dz < 2; ++dz)
    for (int dy = 0; dy < 2; ++dy)
      for (int dx = 0; dx < 2; ++dx, ++k) {
        const int x = std::min(i0[0] + dx, grid - 1);
        const int y = std::min(i0[1] + dy, grid - 1);
        const int z = std::min(i0[2] + dz, grid - 1);
        index[k] = (static_cast<int64_t>(z) * grid + y) * grid + x;
        weight[k] = (dx ? f[0] : 1.0 - f[0]) * (dy ? f[1] : 1.0 - f[1]) * (dz ? f[2] : 1.0 - f[2]);
      }
}

// [C', G, G, G] grid <-> [G^3, C'] rows.
ad::Var grid_to_rows(const ad::Var& grid) {
  const int64_t c = grid.dim(0), p = grid.numel() / c;
  return ad::reshape(ad::transpose12(ad::reshape(grid, {1, c, p})), {p, c});
}

ad::Var rows_to_grid(const ad::Var& rows, int grid) {
  const int64_t p = rows.dim(0), c = rows.dim(1);
  return ad::reshape(ad::transpose12(ad::reshape(rows, {1, p, c})), {c, grid, grid, grid});
}

PerViewGrids unproject_points(const ad::Var& rows, int64_t height, int64_t width,
                              const std::vector<CameraView>& views, const std::vector<int>& frames,
                              const std::vector<Vec3>& points) {
  const int nv = static_cast<int>(frames.size());
  const int np = static_cast<int>(points.size());
  const int64_t total = static_cast<int64_t>(nv) * np;
  ad::GatherPlan plan;
  plan.rows = total;
  plan.taps = 4;
  plan.index.assign(total * 4, 0);
  plan.weight.assign(total * 4, 0.0);
  PerViewGrids out;
  out.views = nv;
  out.voxels = np;
  out.valid = Tensor({total});
  out.ray_encoding = Tensor({total, 4});
  for (int v = 0; v < nv; ++v) {
    const CameraView& view = views[frames[v]];
    const Vec3 center = view.center();
    const double depth_scale = std::max(center.norm(), 1e-6);
    const int64_t base = static_cast<int64_t>(frames[v]) * height * width;
    for (int p = 0; p < np; ++p) {
      const int64_t row = static_cast<int64_t>(v) * np + p;
      const auto proj = geometry::project(points[p], view);
      const Vec3 dir = (points[p] - center).normalized();
      double* enc = out.ray_encoding.data() + row * 4;
      enc[0] = dir.x();
      enc[1] = dir.y();
      enc[2] = dir.z();
      enc[3] = proj.depth / depth_scale;
      if (!proj.in_front) continue;
      const double u = proj.pixel.x(), w = proj.pixel.y();
      if (!(u >= 0 && u < width && w >= 0 && w < height)) continue;
      out.valid[row] = 1.0;
      const double x = std::clamp(u - 0.5, 0.0, static_cast<double>(width - 1));
      const double y = std::clamp(w - 0.5, 0.0, static_cast<double>(height - 1));
      const int64_t x0 = std::min<int64_t>(static_cast<int64_t>(std::floor(x)), width - 1);
      const int64_t y0 = std::min<int64_t>(static_cast<int64_t>(std::floor(y)), height - 1);
      const int64_t x1 = std::min<int64_t>(x0 + 1, width - 1), y1 = std::min<int64_t>(y0 + 1, height - 1);
      const double fx = x - x0, fy = y - y0;
      int64_t* idx = plan.index.data() + row * 4;
      double* wt = plan.weight.data() + row * 4;
      idx[0] = base + y0 * width + x0;
      idx[1] = base + y0 * width + x1;
      idx[2] = base + y1 * width + x0;
      idx[3] = base + y1 * width + x1;
      wt[0] = (1 - fx) * (1 - fy);
      wt[1] = fx * (1 - fy);
      wt[2] = (1 - fx) * fy;
      wt[3] = fx * fy;
    }
  }
  out.features = ad::gather(rows, plan);
  return out;
}

}  // namespace

std::vector<Vec3> foreground_voxel_centers(int grid) {
  std::vector<Vec3> pts;
  pts.reserve(static_cast<size_t>(grid) * grid * grid);
  for (int z = 0; z < grid; ++z)
    for (int y = 0; y < grid; ++y)
      for (int x = 0; x < grid; ++x)
        pts.emplace_back(cell_center(x, grid, -0.5, 0.5), cell_center(y, grid, -0.5, 0.5),
                         cell_center(z, grid, -0.5, 0.5));
  return pts;
}

std::vector<Vec3> background_voxel_centers(int grid) {
  std::vector<Vec3> pts;
  pts.reserve(static_cast<size_t>(grid) * grid * grid);
  for (int z = 0; z < grid; ++z)
    for (int y = 0; y < grid; ++y)
      for (int x = 0; x < grid; ++x) {
        const Vec3 u(cell_center(x, grid, -2, 2), cell_center(y, grid, -2, 2), cell_center(z, grid, -2, 2));
        pts.push_back(0.5 * uncontract_background(u));
      }
  return pts;
}

Unprojection unproject(const ad::Var& features, const std::vector<CameraView>& views, std::optional<int> skip,
                       int grid, bool with_background) {
  MVD_REQUIRE(features.shape().size() == 4, "unproject expects [N, C', H, W] features");
  const int64_t n = features.dim(0), c = features.dim(1), h = features.dim(2), w = features.dim(3);
  MVD_REQUIRE(static_cast<int64_t>(views.size()) == n, "unproject: one view per frame required");
  Unprojection out;
  for (int i = 0; i < n; ++i)
    if (!skip || *skip != i) out.frames.push_back(i);
  MVD_REQUIRE(!out.frames.empty(), "unproject: every view is skipped");
  for (const auto& v : views)
    MVD_REQUIRE(v.height == h && v.width == w, "unproject: views must match the feature resolution");

  ad::Var rows = ad::reshape(ad::transpose12(ad::reshape(features, {n, c, h * w})), {n * h * w, c});
  out.foreground = unproject_points(rows, h, w, views, out.frames, foreground_voxel_centers(grid));
  if (with_background)
    out.background = unproject_points(rows, h, w, views, out.frames, background_voxel_centers(grid));
  return out;
}

Aggregator::Aggregator(nn::ParamStore& store, const std::string& name, const ProjectionConfig& cfg, Rng& rng) {
  const int in = cfg.compressed + 4 + cfg.temb_dim;
  in1 = nn::Linear(store, name + ".in1", in, cfg.agg_hidden, rng);
  in2 = nn::Linear(store, name + ".in2", cfg.agg_hidden, cfg.agg_hidden, rng);
  weight_head = nn::Linear(store, name + ".weight", cfg.agg_hidden, 1, rng);
  out1 = nn::Linear(store, name + ".out1", 3 * cfg.compressed, cfg.agg_hidden, rng);
  out2 = nn::Linear(store, name + ".out2", cfg.agg_hidden, cfg.compressed, rng);
}

ad::Var view_statistics(const ad::Var& features, const ad::Var& logits, const Tensor& valid, int views,
                        int voxels) {
  const int64_t c = features.dim(1);
  MVD_REQUIRE(features.dim(0) == static_cast<int64_t>(views) * voxels && logits.numel() == features.dim(0) &&
                  valid.numel() == features.dim(0),
              "view_statistics: inconsistent shapes");
  Tensor out({voxels, 3 * c});
  auto weights = std::make_shared<std::vector<double>>(static_cast<size_t>(views) * voxels, 0.0);
  auto counts = std::make_shared<std::vector<int>>(voxels, 0);
  const double* f = features.value().data();
  const double* lg = logits.value().data();
  for (int p = 0; p < voxels; ++p) {
    double mx = -std::numeric_limits<double>::infinity();
    int cnt = 0;
    for (int v = 0; v < views; ++v)
      if (valid[v * voxels + p] > 0) {
        mx = std::max(mx, lg[v * voxels + p]);
        ++cnt;
      }
    (*counts)[p] = cnt;
    if (cnt == 0) continue;
    double z = 0.0;
    for (int v = 0; v < views; ++v)
      if (valid[v * voxels + p] > 0) {
        const double e = std::exp(lg[v * voxels + p] - mx);
        (*weights)[v * voxels + p] = e;
        z += e;
      }
    double* o = out.data() + p * 3 * c;
    for (int v = 0; v < views; ++v) {
      const int64_t row = static_cast<int64_t>(v) * voxels + p;
      if (valid[row] <= 0) continue;
      (*weights)[row] /= z;
      const double wv = (*weights)[row];
      for (int64_t k = 0; k < c; ++k) {
        o[k] += wv * f[row * c + k];
        o[c + k] += f[row * c + k] / cnt;
      }
    }
    for (int v = 0; v < views; ++v) {
      const int64_t row = static_cast<int64_t>(v) * voxels + p;
      if (valid[row] <= 0) continue;
      for (int64_t k = 0; k < c; ++k) {
        const double d = f[row * c + k] - o[c + k];
        o[2 * c + k] += d * d / cnt;
      }
    }
  }
  return ad::make_op(std::move(out), {features, logits}, [=](ad::Node& self) {
    auto& pf = self.parents[0];
    auto& pl = self.parents[1];
    const double* f = pf->value.data();
    const std::vector<double>& w = *weights;
    for (int p = 0; p < voxels; ++p) {
      const int cnt = (*counts)[p];
      if (cnt == 0) continue;
      const double* g = self.grad.data() + p * 3 * c;
      const double* o = self.value.data() + p * 3 * c;
      // a_v = g_wmean . f_v
      double weighted_a = 0.0;
      std::vector<double> a(views, 0.0);
      for (int v = 0; v < views; ++v) {
        const int64_t row = static_cast<int64_t>(v) * voxels + p;
        if (valid[row] <= 0) continue;
        double s = 0.0;
        for (int64_t k = 0; k < c; ++k) s += g[k] * f[row * c + k];
        a[v] = s;
        weighted_a += w[row] * s;
      }
      for (int v = 0; v < views; ++v) {
        const int64_t row = static_cast<int64_t>(v) * voxels + p;
        if (valid[row] <= 0) continue;
        if (pf->requires_grad) {
          double* gf = pf->grad_buffer().data() + row * c;
          for (int64_t k = 0; k < c; ++k)
            gf[k] += w[row] * g[k] + g[c + k] / cnt + g[2 * c + k] * 2.0 * (f[row * c + k] - o[c + k]) / cnt;
        }
        if (pl->requires_grad) pl->grad_buffer()[row] += w[row] * (a[v] - weighted_a);
      }
    }
  });
}

ad::Var aggregate(const PerViewGrids& grids, const Tensor& temb, const Aggregator& net) {
  const int64_t rows = static_cast<int64_t>(grids.views) * grids.voxels;
  const int64_t tdim = temb.dim(1);
  MVD_REQUIRE(temb.dim(0) == grids.views, "aggregate: one timestep embedding per view");
  Tensor temb_rows({rows, tdim});
  for (int v = 0; v < grids.views; ++v)
    for (int p = 0; p < grids.voxels; ++p)
      std::copy_n(temb.data() + v * tdim, tdim, temb_rows.data() + (static_cast<int64_t>(v) * grids.voxels + p) * tdim);
  ad::Var input = ad::concat({grids.features, ad::Var(grids.ray_encoding), ad::Var(std::move(temb_rows))}, 1);
  ad::Var hidden = ad::elu(net.in2(ad::elu(net.in1(input))));
  ad::Var logits = net.weight_head(hidden);
  ad::Var stats = view_statistics(grids.features, logits, grids.valid, grids.views, grids.voxels);
  ad::Var out = net.out2(ad::elu(net.out1(stats)));
  const int64_t c = out.dim(1);
  Tensor any_valid({static_cast<int64_t>(grids.voxels), c});
  for (int p = 0; p < grids.voxels; ++p) {
    bool any = false;
    for (int v = 0; v < grids.views; ++v) any = any || grids.valid[static_cast<int64_t>(v) * grids.voxels + p] > 0;
    if (any)
      for (int64_t k = 0; k < c; ++k) any_valid[p * c + k] = 1.0;
  }
  return ad::mul_const(out, any_valid);
}

Refiner::Refiner(nn::ParamStore& store, const std::string& name, const ProjectionConfig& cfg, Rng& rng) {
  const int groups = nn::group_count(cfg.compressed, 4);
  for (int b = 0; b < cfg.refine_blocks; ++b) {
    const std::string n = name + ".block" + std::to_string(b);
    RefineBlock blk;
    blk.norm1 = nn::GroupNorm(store, n + ".norm1", cfg.compressed, groups);
    blk.conv1 = nn::Conv3d(store, n + ".conv1", cfg.compressed, cfg.compressed, rng);
    blk.temb = nn::Linear(store, n + ".temb", cfg.temb_dim, cfg.compressed, rng);
    blk.norm2 = nn::GroupNorm(store, n + ".norm2", cfg.compressed, groups);
    blk.conv2 = nn::Conv3d(store, n + ".conv2", cfg.compressed, cfg.compressed, rng, nn::Init::kZero);
    blocks.push_back(std::move(blk));
  }
}

ad::Var refine_volume(const ad::Var& x, const Tensor& temb, const Refiner& net) {
  const int64_t batch = x.dim(0);
  ad::Var t(temb.reshaped({1, temb.numel()}));
  ad::Var out = x;
  for (const auto& blk : net.blocks) {
    ad::Var h = blk.conv1(ad::silu(blk.norm1(out)));
    ad::Var bias = blk.temb(t);
    if (batch > 1) bias = ad::concat(std::vector<ad::Var>(batch, bias), 0);
    h = ad::add_batch_channel(h, bias);
    h = blk.conv2(ad::silu(blk.norm2(h)));
    out = ad::add(out, h);
  }
  return out;
}

FeatureVoxelGrid refine(const FeatureVoxelGrid& grid, const Tensor& temb, const Refiner& net) {
  const int64_t c = grid.channels(), g = grid.resolution();
  const Shape one{1, c, g, g, g};
  ad::Var stacked = ad::concat({ad::reshape(grid.foreground, one), ad::reshape(grid.background, one)}, 0);
  ad::Var refined = refine_volume(stacked, temb, net);
  return {ad::reshape(ad::slice(refined, 0, 0, 1), {c, g, g, g}),
          ad::reshape(ad::slice(refined, 0, 1, 2), {c, g, g, g})};
}

RenderMlp::RenderMlp(nn::ParamStore& store, const std::string& name, int channels, int hidden, Rng& rng) {
  l1 = nn::Linear(store, name + ".l1", channels, hidden, rng, true, nn::Init::kDefault, nn::ParamGroup::kRenderer);
  l2 = nn::Linear(store, name + ".l2", hidden, hidden, rng, true, nn::Init::kDefault, nn::ParamGroup::kRenderer);
  l3 = nn::Linear(store, name + ".l3", hidden, channels + 1, rng, true, nn::Init::kDefault,
                  nn::ParamGroup::kRenderer);
}

RenderPlan make_render_plan(const std::vector<CameraView>& views, int grid, const RenderOptions& opts) {
  MVD_REQUIRE(opts.samples >= 2, "render: need at least two samples per segment");
  MVD_REQUIRE(!views.empty(), "render: no views");
  const int s = opts.samples;
  RenderPlan plan;
  plan.samples_per_ray = opts.background ? 2 * s : s;
  for (const auto& v : views) plan.rays += static_cast<int64_t>(v.height) * v.width;
  const int64_t r = plan.rays;
  auto init = [&](ad::GatherPlan& gp) {
    gp.rows = r * s;
    gp.taps = 8;
    gp.index.assign(gp.rows * 8, 0);
    gp.weight.assign(gp.rows * 8, 0.0);
  };
  init(plan.foreground);
  if (opts.background) init(plan.background);
  plan.deltas = Tensor({r, plan.samples_per_ray});

  std::mt19937_64 rng(opts.seed);
  std::uniform_real_distribution<double> jitter(0.0, 1.0);
  auto offset = [&]() { return opts.stratified ? jitter(rng) : 0.5; };

  int64_t ray = 0;
  for (const auto& view : views) {
    for (const auto& pr : geometry::generate_rays(view)) {
      const Vec3& o = pr.foreground.origin;
      const Vec3& d = pr.foreground.direction;
      double* delta = plan.deltas.data() + ray * plan.samples_per_ray;
      if (pr.hits_foreground) {
        const double t0 = pr.foreground.near, len = pr.foreground.far - pr.foreground.near;
        for (int k = 0; k < s; ++k) {
          const double t = t0 + len * (k + offset()) / s;
          const Vec3 g = (o + t * d + Vec3::Constant(0.5)) * grid - Vec3::Constant(0.5);
          const int64_t row = ray * s + k;
          trilinear_taps(g, grid, plan.foreground.index.data() + row * 8, plan.foreground.weight.data() + row * 8);
          delta[k] = len / s;
        }
      }
      if (opts.background) {
        // t(u) = t0 + rho * u / (1 - u): uniform steps in u are uniform in
        // inverse distance, i.e. in the contracted radius along radial rays.
        const double t0 = pr.background_near;
        const double rho = std::max((o + t0 * d).norm(), 1e-3);
        const double q = (pr.background_far - t0) / rho;
        const double umax = q / (1.0 + q);
        auto t_of = [&](double u) { return t0 + rho * u / (1.0 - u); };
        for (int k = 0; k < s; ++k) {
          const double u_lo = umax * k / s, u_hi = umax * (k + 1) / s;
          const double t = t_of(u_lo + (u_hi - u_lo) * offset());
          const Vec3 c = contract_background(2.0 * (o + t * d));
          const Vec3 g = (c + Vec3::Constant(2.0)) / 4.0 * grid - Vec3::Constant(0.5);
          const int64_t row = ray * s + k;
          trilinear_taps(g, grid, plan.background.index.data() + row * 8, plan.background.weight.data() + row * 8);
          delta[s + k] = t_of(u_hi) - t_of(u_lo);
        }
      }
      ++ray;
    }
  }
  return plan;
}

CompositeResult composite(const ad::Var& density, const ad::Var& features, const Tensor& deltas) {
  const int64_t r = density.dim(0), s = density.dim(1), c = features.dim(2);
  MVD_REQUIRE(features.dim(0) == r && features.dim(1) == s && deltas.numel() == r * s,
              "composite: inconsistent shapes");
  Tensor out({r, c});
  Tensor weights({r, s});
  const double* d = density.value().data();
  const double* f = features.value().data();
  for (int64_t i = 0; i < r; ++i) {
    double trans = 1.0;
    for (int64_t k = 0; k < s; ++k) {
      const double sigma = d[i * s + k] * deltas[i * s + k];
      const double keep = std::exp(-sigma);
      const double w = trans * (1.0 - keep);
      weights[i * s + k] = w;
      for (int64_t j = 0; j < c; ++j) out[i * c + j] += w * f[(i * s + k) * c + j];
      trans *= keep;
    }
  }
  CompositeResult res;
  res.weights = weights;
  res.features = ad::make_op(std::move(out), {density, features}, [=](ad::Node& self) {
    auto& pd = self.parents[0];
    auto& pf = self.parents[1];
    const double* d = pd->value.data();
    const double* f = pf->value.data();
    std::vector<double> gs(s);
    for (int64_t i = 0; i < r; ++i) {
      const double* g = self.grad.data() + i * c;
      for (int64_t k = 0; k < s; ++k) {
        const double w = weights[i * s + k];
        double dot = 0.0;
        for (int64_t j = 0; j < c; ++j) dot += g[j] * f[(i * s + k) * c + j];
        gs[k] = dot;
        if (pf->requires_grad) {
          double* gf = pf->grad_buffer().data() + (i * s + k) * c;
          for (int64_t j = 0; j < c; ++j) gf[j] += w * g[j];
        }
      }
      if (!pd->requires_grad) continue;
      // dL/dsigma_j = T_{j+1} (g . s_j) - sum_{k>j} w_k (g . s_k)
      double suffix = 0.0;
      double trans = 1.0;
      std::vector<double> trans_after(s);
      for (int64_t k = 0; k < s; ++k) {
        trans *= std::exp(-d[i * s + k] * deltas[i * s + k]);
        trans_after[k] = trans;
      }
      Tensor& gd = pd->grad_buffer();
      for (int64_t k = s - 1; k >= 0; --k) {
        const double dsigma = trans_after[k] * gs[k] - suffix;
        gd[i * s + k] += dsigma * deltas[i * s + k];
        suffix += weights[i * s + k] * gs[k];
      }
    }
  });
  return res;
}

RenderResult render(const FeatureVoxelGrid& grid, const std::vector<CameraView>& views, const RenderMlp& mlp,
                    const RenderOptions& opts) {
  const int g = grid.resolution();
  const int64_t c = grid.channels();
  const int h = views.front().height, w = views.front().width;
  for (const auto& v : views) MVD_REQUIRE(v.height == h && v.width == w, "render: views must share a resolution");
  const RenderPlan plan = make_render_plan(views, g, opts);
  const int64_t r = plan.rays, s = opts.samples, st = plan.samples_per_ray;

  ad::Var fg = ad::reshape(ad::gather(grid_to_rows(grid.foreground), plan.foreground), {r, s, c});
  ad::Var samples = fg;
  if (opts.background) {
    ad::Var bg = ad::reshape(ad::gather(grid_to_rows(grid.background), plan.background), {r, s, c});
    samples = ad::concat({fg, bg}, 1);
  }
  ad::Var flat = ad::reshape(samples, {r * st, c});
  ad::Var o = mlp.l3(ad::silu(mlp.l2(ad::silu(mlp.l1(flat)))));
  ad::Var density = ad::reshape(ad::softplus(ad::slice(o, 1, 0, 1)), {r, st});
  ad::Var feat = ad::reshape(ad::slice(o, 1, 1, 1 + c), {r, st, c});
  CompositeResult comp = composite(density, feat, plan.deltas);

  const int64_t nv = static_cast<int64_t>(views.size()), hw = static_cast<int64_t>(h) * w;
  RenderResult out;
  out.features = ad::reshape(ad::transpose12(ad::reshape(comp.features, {nv, hw, c})), {nv, c, h, w});
  out.weights = std::move(comp.weights);
  return out;
}

ad::Var scale_features(const ad::Var& r, const ScaleNet& net) { return net.c2(ad::relu(net.c1(r))); }

Tensor frame_timestep_embeddings(const std::vector<int>& timesteps, int dim, int t_max) {
  Tensor out({static_cast<int64_t>(timesteps.size()), dim});
  for (size_t i = 0; i < timesteps.size(); ++i) {
    const auto e = conditioning::timestep_embedding(timesteps[i], dim, t_max);
    std::copy(e.begin(), e.end(), out.data() + i * dim);
  }
  return out;
}

Tensor mean_timestep_embedding(const std::vector<int>& timesteps, int dim, int t_max) {
  MVD_REQUIRE(!timesteps.empty(), "mean_timestep_embedding: no timesteps");
  Tensor all = frame_timestep_embeddings(timesteps, dim, t_max);
  Tensor out({dim});
  for (size_t i = 0; i < timesteps.size(); ++i)
    for (int k = 0; k < dim; ++k) out[k] += all[i * dim + k] / static_cast<double>(timesteps.size());
  return out;
}

ProjectionLayer::ProjectionLayer(nn::ParamStore& store, const std::string& name, const ProjectionConfig& cfg,
                                 Rng& rng)
    : config(cfg) {
  compress = nn::Conv2d(store, name + ".compress", cfg.channels, cfg.compressed, 1, rng);
  aggregator = Aggregator(store, name + ".aggregator", cfg, rng);
  refiner = Refiner(store, name + ".refine", cfg, rng);
  render_mlp = RenderMlp(store, name + ".render", cfg.compressed, cfg.render_hidden, rng);
  scale_net.c1 = nn::Conv2d(store, name + ".scale1", cfg.compressed, cfg.compressed, 1, rng, 1, nn::Init::kDefault,
                            nn::ParamGroup::kRenderer);
  scale_net.c2 = nn::Conv2d(store, name + ".scale2", cfg.compressed, cfg.compressed, 1, rng, 1, nn::Init::kDefault,
                            nn::ParamGroup::kRenderer);
  expand = nn::Conv2d(store, name + ".expand", cfg.compressed, cfg.channels, 1, rng, 1, nn::Init::kZero);
}

FeatureVoxelGrid ProjectionLayer::build_grid(const ad::Var& compressed, const std::vector<CameraView>& views,
                                             const std::vector<int>& timesteps, std::optional<int> skip) const {
  const int g = config.grid;
  Unprojection un = unproject(compressed, views, skip, g, config.background);
  std::vector<int> used_t;
  for (int f : un.frames) used_t.push_back(timesteps[f]);
  const Tensor temb = frame_timestep_embeddings(used_t, config.temb_dim, config.t_max);
  FeatureVoxelGrid grid;
  grid.foreground = rows_to_grid(aggregate(un.foreground, temb, aggregator), g);
  grid.background = config.background ? rows_to_grid(aggregate(un.background, temb, aggregator), g)
                                      : ad::Var(Tensor({config.compressed, g, g, g}));
  return refine(grid, mean_timestep_embedding(timesteps, config.temb_dim, config.t_max), refiner);
}

ad::Var ProjectionLayer::forward(const ad::Var& h, const std::vector<CameraView>& views,
                                 const std::vector<int>& timesteps, std::optional<int> skip,
                                 uint64_t jitter_seed) const {
  const int64_t n = h.dim(0);
  const int fh = static_cast<int>(h.dim(2)), fw = static_cast<int>(h.dim(3));
  MVD_REQUIRE(static_cast<int64_t>(views.size()) == n && static_cast<int64_t>(timesteps.size()) == n,
              "projection layer: one view and timestep per frame");
  std::vector<CameraView> fviews;
  fviews.reserve(n);
  for (const auto& v : views) fviews.push_back(v.resized(fh, fw));
  ad::Var c = compress(h);
  FeatureVoxelGrid grid = build_grid(c, fviews, timesteps, skip);
  RenderOptions opts;
  opts.samples = config.samples;
  opts.background = config.background;
  opts.stratified = config.stratified;
  opts.seed = jitter_seed;
  ad::Var r = render(grid, fviews, render_mlp, opts).features;
  return ad::add(h, expand(scale_features(r, scale_net)));
}

}  // namespace mvdiff::projection
