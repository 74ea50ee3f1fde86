#pragma once

#include <optional>
#include <string>
#include <vector>

#include "mvdiff/geometry.hpp"
#include "mvdiff/nn.hpp"

// The projection layer: compress -> unproject -> aggregate -> refine ->
// volume-render -> scale -> expand. Feature grids live over the unit cube
// (foreground) and over the contracted background shell [-2, 2]^3.
namespace mvdiff::projection {

using geometry::CameraView;

struct ProjectionConfig {
  int channels = 32;      // C, width of the surrounding U-Net stage
  int compressed = 16;    // C'
  int grid = 8;           // G
  int samples = 32;       // samples per segment (foreground and background each)
  int temb_dim = 16;      // sinusoidal timestep width fed to the aggregator and 3D CNN
  int agg_hidden = 32;
  int render_hidden = 16;
  int refine_blocks = 5;
  bool background = true;
  bool stratified = false;  // jitter samples inside each interval (midpoints otherwise)
  int t_max = 1000;
};

// [C', G, G, G] foreground and background grids.
struct FeatureVoxelGrid {
  ad::Var foreground;
  ad::Var background;
  int resolution() const { return static_cast<int>(foreground.dim(1)); }
  int channels() const { return static_cast<int>(foreground.dim(0)); }
};

// MERF piecewise-projective contraction: identity inside the unit infinity-norm
// ball, otherwise the dominant coordinate maps to sign * (2 - 1/|x_j|) and
// the rest to x_i / |x_j|.
geometry::Vec3 contract_background(const geometry::Vec3& x);
geometry::Vec3 uncontract_background(const geometry::Vec3& u);

// World-space centers of the G^3 voxels, x fastest (layout [z][y][x]).
std::vector<geometry::Vec3> foreground_voxel_centers(int grid);
std::vector<geometry::Vec3> background_voxel_centers(int grid);

// Per-view voxel features for one grid kind. Rows are (view, voxel) pairs.
struct PerViewGrids {
  ad::Var features;  // [V * P, C']
  Tensor valid;      // [V * P] 1 where the voxel projects inside view v
  Tensor ray_encoding;  // [V * P, 4] unit direction and normalized depth
  int views = 0;
  int voxels = 0;
};

struct Unprojection {
  PerViewGrids foreground, background;
  std::vector<int> frames;  // frame index of each used view
};

// Samples h' [N, C', H, W] at every voxel center's projection (bilinear).
// Frame `skip` is never read. Views must match h's resolution.
Unprojection unproject(const ad::Var& features, const std::vector<CameraView>& views, std::optional<int> skip,
                       int grid, bool with_background = true);

// IBRNet-style aggregation network.
struct Aggregator {
  nn::Linear in1, in2, weight_head, out1, out2;
  Aggregator() = default;
  Aggregator(nn::ParamStore& store, const std::string& name, const ProjectionConfig& cfg, Rng& rng);
};

// Fused softmax-weighted mean, mean and variance over valid views.
// features: [V * P, C'] rows, logits: [V * P, 1]. Returns [P, 3 C'];
// voxels without a valid view get zeros.
ad::Var view_statistics(const ad::Var& features, const ad::Var& logits, const Tensor& valid, int views, int voxels);

// Returns [P, C'] aggregated voxel features (zero where no view is valid).
// temb: [V, T] per-view timestep embeddings.
ad::Var aggregate(const PerViewGrids& grids, const Tensor& temb, const Aggregator& net);

struct RefineBlock {
  nn::GroupNorm norm1, norm2;
  nn::Conv3d conv1, conv2;
  nn::Linear temb;
};

struct Refiner {
  std::vector<RefineBlock> blocks;
  Refiner() = default;
  Refiner(nn::ParamStore& store, const std::string& name, const ProjectionConfig& cfg, Rng& rng);
};

// Residual 3D CNN on x: [B, C', G, G, G] with a FiLM bias from temb: [T].
ad::Var refine_volume(const ad::Var& x, const Tensor& temb, const Refiner& net);
FeatureVoxelGrid refine(const FeatureVoxelGrid& grid, const Tensor& temb, const Refiner& net);

// f -> (density d >= 0 via softplus, feature s).
struct RenderMlp {
  nn::Linear l1, l2, l3;
  RenderMlp() = default;
  RenderMlp(nn::ParamStore& store, const std::string& name, int channels, int hidden, Rng& rng);
};

struct RenderOptions {
  int samples = 32;
  bool background = true;
  bool stratified = false;
  uint64_t seed = 0;  // jitter stream when stratified
};

// Fixed sample geometry for a set of views.
struct RenderPlan {
  int64_t rays = 0;
  int samples_per_ray = 0;  // foreground + background
  ad::GatherPlan foreground, background;
  Tensor deltas;            // [rays, samples_per_ray]
};

RenderPlan make_render_plan(const std::vector<CameraView>& views, int grid, const RenderOptions& opts);

struct CompositeResult {
  ad::Var features;  // [R, C']
  Tensor weights;    // [R, S] compositing weights (diagnostic)
};

// Front-to-back alpha compositing: r = sum_k T_k (1 - exp(-d_k delta_k)) s_k,
// T_k = exp(-sum_{j<k} d_j delta_j). density: [R, S], features: [R, S, C'].
CompositeResult composite(const ad::Var& density, const ad::Var& features, const Tensor& deltas);

struct RenderResult {
  ad::Var features;  // [V, C', H, W]
  Tensor weights;    // [V * H * W, S]
};

RenderResult render(const FeatureVoxelGrid& grid, const std::vector<CameraView>& views, const RenderMlp& mlp,
                    const RenderOptions& opts);

// 1x1 conv, ReLU, 1x1 conv.
struct ScaleNet {
  nn::Conv2d c1, c2;
};
ad::Var scale_features(const ad::Var& r, const ScaleNet& net);

struct ProjectionLayer {
  ProjectionConfig config;
  nn::Conv2d compress;
  Aggregator aggregator;
  Refiner refiner;
  RenderMlp render_mlp;
  ScaleNet scale_net;
  nn::Conv2d expand;

  ProjectionLayer() = default;
  ProjectionLayer(nn::ParamStore& store, const std::string& name, const ProjectionConfig& cfg, Rng& rng);

  // h: [N, C, H, W]; views at any resolution (rescaled to H x W);
  // timesteps per frame. Returns h + expand(scale(render(...))).
  ad::Var forward(const ad::Var& h, const std::vector<CameraView>& views, const std::vector<int>& timesteps,
                  std::optional<int> skip, uint64_t jitter_seed = 0) const;

  // The grid built from h (after aggregation and refinement), for inspection.
  FeatureVoxelGrid build_grid(const ad::Var& compressed, const std::vector<CameraView>& views,
                              const std::vector<int>& timesteps, std::optional<int> skip) const;
};

// Mean of the per-frame sinusoidal embeddings, [T].
Tensor mean_timestep_embedding(const std::vector<int>& timesteps, int dim, int t_max);
// [N, T] per-frame sinusoidal embeddings.
Tensor frame_timestep_embeddings(const std::vector<int>& timesteps, int dim, int t_max);

}  // namespace mvdiff::projection
