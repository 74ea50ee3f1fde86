#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "mvdiff/denoiser.hpp"
#include "mvdiff/diffusion.hpp"
#include "mvdiff/synthdata.hpp"

namespace mvdiff::trainer {

// Every tunable constant of both training stages. Parsed from a flat
// "key = value" file; see config_keys() for the list.
struct TrainConfig {
  denoiser::DenoiserConfig model;
  double beta_start = 1e-3, beta_end = 0.2;  // linear schedule over model.t_max steps
  int frames = 5;          // N per training item
  int batch = 2;           // frame sets per optimizer step
  int grad_accum = 1;      // micro-batches per optimizer step
  int steps = 20000;
  int pretrain_steps = 5000;
  int pretrain_batch = 4;  // single frames per stage-0 step
  double pretrain_lr = 1e-3;
  double lr_base = 5e-5;
  double lr_renderer = 5e-3;
  double weight_decay = 0.0;
  double adam_beta1 = 0.9, adam_beta2 = 0.999, adam_eps = 1e-8;
  double grad_clip = 0.0;  // global norm clip; 0 disables
  double p_cond_first = 0.25, p_cond_second = 0.25;
  double p_random_frames = 0.5;
  double p_empty_caption = 0.1;
  double prior_weight = 0.1;
  int prior_count = 300;
  int prior_steps = 20;
  bool skip_last = true;  // voxel skip of the last frame
  uint64_t seed = 0;
  int log_every = 10;
  int checkpoint_every = 1000;
};

std::vector<std::string> config_keys();
// Parses key = value lines ('#' starts a comment). Unknown keys and bad
// values raise InvalidInput.
TrainConfig parse_config(const std::string& text);
TrainConfig load_config(const std::filesystem::path& path);
std::string config_text(const TrainConfig& cfg);
// FNV-1a 64 of a string, as 16 hex digits.
std::string hash_hex(const std::string& bytes);

diffusion::NoiseSchedule make_schedule(const TrainConfig& cfg);

// AdamW with one learning rate per parameter group.
class AdamW {
 public:
  AdamW() = default;
  AdamW(const nn::ParamStore& params, double lr_base, double lr_renderer, double beta1 = 0.9, double beta2 = 0.999,
        double eps = 1e-8, double weight_decay = 0.0);

  // Applies one update from the accumulated gradients. Returns false (and
  // leaves the weights untouched) when any gradient is non-finite.
  bool step(nn::ParamStore& params);
  int64_t steps() const { return t_; }
  double lr(nn::ParamGroup g) const { return g == nn::ParamGroup::kRenderer ? lr_renderer_ : lr_base_; }
  void set_lr(double base, double renderer) {
    lr_base_ = base;
    lr_renderer_ = renderer;
  }

  void save(const std::filesystem::path& path) const;
  void load(const std::filesystem::path& path);

 private:
  double lr_base_ = 0, lr_renderer_ = 0, beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8, wd_ = 0;
  int64_t t_ = 0;
  std::vector<Tensor> m_, v_;
};

// Global gradient norm clip; returns the pre-clip norm.
double clip_grad_norm(nn::ParamStore& params, double max_norm);

// One noised training item.
struct PreparedItem {
  Tensor x_t;           // [N, 3, H, W] model space
  Tensor eps;           // noise targets
  std::vector<int> t;   // per-frame timestep (0 = conditioning frame)
  std::vector<bool> active;
  Tensor conditions;    // [N, 10]
  std::vector<geometry::CameraView> views;
  std::vector<int> caption;
  std::optional<int> skip;
};

// Shared t ~ U[1, T]; frame 0 (1) is set to t = 0 with p_cond_first
// (p_cond_second) and kept clean; remaining frames are noised.
PreparedItem prepare_item(const synthdata::FrameSample& sample, const diffusion::NoiseSchedule& schedule,
                          const TrainConfig& cfg, Rng& rng);
PreparedItem prepare_prior(const synthdata::PriorItem& item, const diffusion::NoiseSchedule& schedule, Rng& rng);

struct Losses {
  double total = 0, data = 0, prior = 0;
  bool all_masked = false;
};

// Forward + backward for a batch of items (and an optional prior item):
// L = mean_b L_d(b) + prior_weight * L_p. Gradients accumulate in the model,
// scaled by grad_scale.
Losses train_step(const denoiser::Denoiser& model, const std::vector<PreparedItem>& batch,
                  const PreparedItem* prior, double prior_weight, uint64_t jitter_seed = 0,
                  double grad_scale = 1.0);

// Copies every parameter of `from` whose name and shape match into `to`.
// Returns the number of copied tensors.
int copy_matching(const denoiser::Denoiser& from, denoiser::Denoiser& to);

enum class Stage { k2D, kMultiView };

struct RunOptions {
  Stage stage = Stage::k2D;
  std::filesystem::path out;
  std::optional<std::filesystem::path> init;  // stage-2d checkpoint (required for multi-view)
  bool resume = false;
  std::string config_source;  // raw config file text (hashed into the manifest)
  int max_steps = -1;         // stop early (tests); -1 runs cfg steps
  bool quiet = false;
};

// Runs one training stage on the loaded scenes and writes checkpoints to
// opts.out (params.bin, optimizer.bin, manifest.json) plus log.jsonl.
// Returns the final held-out loss.
double run_stage(const std::vector<synthdata::Scene>& scenes, const TrainConfig& cfg, const RunOptions& opts);

// Single images sampled from a stage-2d model with captions and poses drawn
// from the training distribution.
std::vector<synthdata::PriorItem> make_prior_set(const std::filesystem::path& checkpoint, int count, uint64_t seed,
                                                 int steps);

// Mean eps loss of the model on fixed items (no gradients).
double evaluate_loss(const denoiser::Denoiser& model, const std::vector<PreparedItem>& items);

}  // namespace mvdiff::trainer
