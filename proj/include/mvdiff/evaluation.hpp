#pragma once

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "mvdiff/autograd.hpp"
#include "mvdiff/generation.hpp"
#include "mvdiff/geometry.hpp"
#include "mvdiff/synthdata.hpp"

namespace mvdiff::evaluation {

inline constexpr double kPsnrCap = 99.0;

// PSNR (peak 1) over pixels with mask > 0.5. pred/target: [C, H, W], mask: [H, W].
// Identical inputs report kPsnrCap. Throws UndefinedMetric on an empty mask.
double masked_psnr(const Tensor& pred, const Tensor& target, const Tensor& mask);

// Mean SSIM (7x7 uniform window, sample covariance, K1 = 0.01, K2 = 0.03,
// data range 1) over windows that lie inside the image and whose center
// pixel is masked, averaged over channels.
double masked_ssim(const Tensor& pred, const Tensor& target, const Tensor& mask);

// Warps every object pixel of image i into image j through its depth and the
// cameras; a warp is valid when it lands inside j on an object pixel whose
// depth agrees within depth_tolerance (relative). Returns the mean absolute
// color difference over valid warps, averaged over ordered pairs (i, j), i != j.
// Throws UndefinedMetric when no pair has a valid warp.
double reprojection_consistency(const std::vector<Tensor>& images, const std::vector<geometry::CameraView>& views,
                                const std::vector<Tensor>& depths, const std::vector<Tensor>& masks,
                                double depth_tolerance = 0.05);

struct GradCheckResult {
  double max_rel_error = 0;
  int64_t checked = 0;
  std::string worst;  // "<leaf>[index]"
};

// Central finite differences of a scalar function against its reverse-mode
// gradient. Per entry the error is |a - n| / max(|a|, |n|, floor) with
// floor = 1e-3 * max |a| over all checked entries (guards 0/0 where both
// gradients vanish). max_per_tensor < 0 checks every entry; otherwise that
// many entries per leaf, chosen with the given seed.
GradCheckResult check_gradients(const std::function<ad::Var()>& f,
                                const std::vector<std::pair<std::string, ad::Var>>& leaves, double eps = 1e-6,
                                int max_per_tensor = -1, uint64_t seed = 0);

// Named micro instances: "linear", "composite", "render", "attention",
// "projection", "denoiser".
std::vector<std::string> grad_check_components();
GradCheckResult grad_check(const std::string& component, double eps = 1e-6, uint64_t seed = 0);

// Single-image-conditional protocol on held-out scenes: the ring frames in
// cond_indices condition the generation of the frames in target_indices,
// which are scored against the ground-truth renders inside the object mask.
// Consistency is reprojection_consistency of the generated set through the
// ground-truth depths, masks and cameras.
struct ConditionalEvalOptions {
  std::vector<int> cond_indices{0};
  std::vector<int> target_indices{4, 9, 14, 19};
  int steps = 50;
  double lambda_cfg = 1.0;
  bool deterministic = false;
  uint64_t seed = 0;
};

struct SceneScore {
  std::string scene;
  double psnr = 0, ssim = 0;
  double consistency = 0;
  bool consistency_defined = false;
};

struct ConditionalEvalResult {
  std::vector<SceneScore> scenes;
  double psnr = 0, ssim = 0, consistency = 0;
  int consistency_scenes = 0;
  double seconds = 0;
};

ConditionalEvalResult evaluate_conditional(const generation::EpsFn& eps, const std::vector<synthdata::Scene>& scenes,
                                           const diffusion::NoiseSchedule& base, const ConditionalEvalOptions& opts);

nlohmann::json to_json(const ConditionalEvalResult& r);

}  // namespace mvdiff::evaluation
