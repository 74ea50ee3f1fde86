#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "mvdiff/attention.hpp"
#include "mvdiff/diffusion.hpp"
#include "mvdiff/projection.hpp"

namespace mvdiff::denoiser {

struct DenoiserConfig {
  int image_channels = 3;
  int image_size = 32;
  int base_channels = 32;
  std::vector<int> channel_mult{1, 2, 2};
  std::vector<bool> attention{false, true, true};
  std::vector<bool> projection{false, true, true};
  // Voxel grid side at stage 0; stage l uses grid_base >> l.
  int grid_base = 16;
  int compressed = 16;
  int render_samples = 32;
  int render_hidden = 16;
  int agg_hidden = 32;
  int refine_blocks = 2;
  bool background = true;
  int temb_dim = 32;      // sinusoidal width of the U-Net timestep embedding
  int time_hidden = 64;
  int proj_temb_dim = 16;  // sinusoidal width inside projection layers
  int lora_rank = 4;
  int heads = 1;
  int vocab_size = 32;
  int d_txt = 32;
  int max_caption = 8;
  int max_frames = 30;
  int t_max = 100;
  // Ablation switches (parameters of disabled blocks are not created).
  bool use_cross_frame = true;
  bool use_projection = true;

  int stages() const { return static_cast<int>(channel_mult.size()); }
  int stage_channels(int l) const { return base_channels * channel_mult.at(l); }
  int stage_grid(int l) const { return grid_base >> l; }
  bool has_projection(int l) const { return use_projection && projection.at(l); }
  // Throws InvalidInput on inconsistent settings.
  void validate() const;
};

nlohmann::json config_to_json(const DenoiserConfig& cfg);
DenoiserConfig config_from_json(const nlohmann::json& j);

struct ResBlock {
  nn::GroupNorm norm1, norm2;
  nn::Conv2d conv1, conv2, shortcut;
  nn::Linear temb;
  bool has_shortcut = false;
};

struct Stage {
  ResBlock block;
  nn::GroupNorm cfa_norm, caption_norm;
  std::optional<attention::AttentionWeights> cross_frame, caption;
  std::optional<projection::ProjectionLayer> projection;
};

class Denoiser {
 public:
  explicit Denoiser(const DenoiserConfig& cfg, uint64_t seed = 0);
  // Parameters are shared handles; copies would alias them.
  Denoiser(const Denoiser&) = delete;
  Denoiser& operator=(const Denoiser&) = delete;
  Denoiser(Denoiser&&) = default;
  Denoiser& operator=(Denoiser&&) = default;

  // Noise prediction [N, C, H, W] for the frames in x. Frame n is at model
  // timestep timesteps[n] with camera views[n]; conditions are [N, 10]; the
  // caption may be empty. Frame `skip` does not contribute to any voxel grid.
  ad::Var forward(const ad::Var& x, const std::vector<int>& timesteps, const Tensor& conditions,
                  const std::vector<geometry::CameraView>& views, const std::vector<int>& caption,
                  std::optional<int> skip = std::nullopt, uint64_t jitter_seed = 0) const;

  // forward() on a sampling state: schedule steps map to model timesteps.
  Tensor predict(const diffusion::FrameSetState& state, const diffusion::NoiseSchedule& schedule) const;

  const DenoiserConfig& config() const { return config_; }
  nn::ParamStore& params() { return params_; }
  const nn::ParamStore& params() const { return params_; }

  // Sets the low-rank adapter strength s in every attention block.
  void set_adapter_scale(double s);

 private:
  ad::Var resblock(const ResBlock& b, const ad::Var& h, const ad::Var& temb) const;
  ad::Var stage_body(const Stage& s, const ad::Var& h, const ad::Var& temb, const ad::Var& z, const ad::Var& caption,
                     const std::vector<projection::CameraView>& views, const std::vector<int>& timesteps,
                     std::optional<int> skip, uint64_t jitter_seed) const;

  DenoiserConfig config_;
  nn::ParamStore params_;
  nn::Linear time1_, time2_;
  ad::Var token_table_, position_table_;
  nn::Conv2d in_conv_;
  std::vector<Stage> encoder_, decoder_;
  std::vector<nn::Conv2d> downsample_, upsample_;
  ResBlock middle_;
  nn::GroupNorm out_norm_;
  nn::Conv2d out_conv_;
};

int64_t count_parameters(const DenoiserConfig& cfg);

// Checkpoint directory: params.bin (flat archive in registration order) and
// manifest.json (config, parameter count, schedule, seed, extra fields).
void save_checkpoint(const std::filesystem::path& dir, const Denoiser& model, const nlohmann::json& extra);
// Loads weights into a fresh model built from the manifest's config and
// validates the parameter count.
Denoiser load_checkpoint(const std::filesystem::path& dir, nlohmann::json* manifest = nullptr);

}  // namespace mvdiff::denoiser
