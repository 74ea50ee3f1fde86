#include "mvdiff/denoiser.hpp"

#include <fstream>

#include "mvdiff/archive.hpp"
#include "mvdiff/conditioning.hpp"
#include "mvdiff/errors.hpp"

namespace mvdiff::denoiser {

using nlohmann::json;

void DenoiserConfig::validate() const {
  const int n = stages();
  MVD_REQUIRE(n >= 1, "denoiser: need at least one stage");
  MVD_REQUIRE(static_cast<int>(attention.size()) == n && static_cast<int>(projection.size()) == n,
              "denoiser: attention/projection flags need one entry per stage");
  MVD_REQUIRE(!projection[0], "denoiser: the first stage cannot hold a projection layer");
  MVD_REQUIRE(image_channels >= 1 && base_channels >= 1, "denoiser: channel counts must be positive");
  for (int m : channel_mult) MVD_REQUIRE(m >= 1, "denoiser: channel multipliers must be positive");
  MVD_REQUIRE(image_size >= 1 && image_size % (1 << (n - 1)) == 0,
              "denoiser: image size must halve cleanly at every stage");
  for (int l = 0; l < n; ++l) {
    MVD_REQUIRE(!attention[l] || stage_channels(l) % heads == 0, "denoiser: heads must divide stage channels");
    if (projection[l]) {
      MVD_REQUIRE(grid_base % (1 << l) == 0 && stage_grid(l) >= 2,
                  "denoiser: grid must halve with the feature map and stay >= 2");
    }
  }
  MVD_REQUIRE(temb_dim % 2 == 0 && proj_temb_dim % 2 == 0, "denoiser: timestep widths must be even");
  MVD_REQUIRE(compressed >= 1 && render_samples >= 1 && refine_blocks >= 0, "denoiser: bad projection settings");
  MVD_REQUIRE(lora_rank >= 1 && heads >= 1, "denoiser: bad attention settings");
  MVD_REQUIRE(vocab_size >= 1 && d_txt >= 1 && max_caption >= 1, "denoiser: bad caption settings");
  MVD_REQUIRE(max_frames >= 1 && t_max >= 1, "denoiser: bad frame or timestep bounds");
}

json config_to_json(const DenoiserConfig& c) {
  return json{{"image_channels", c.image_channels},
              {"image_size", c.image_size},
              {"base_channels", c.base_channels},
              {"channel_mult", c.channel_mult},
              {"attention", c.attention},
              {"projection", c.projection},
              {"grid_base", c.grid_base},
              {"compressed", c.compressed},
              {"render_samples", c.render_samples},
              {"render_hidden", c.render_hidden},
              {"agg_hidden", c.agg_hidden},
              {"refine_blocks", c.refine_blocks},
              {"background", c.background},
              {"temb_dim", c.temb_dim},
              {"time_hidden", c.time_hidden},
              {"proj_temb_dim", c.proj_temb_dim},
              {"lora_rank", c.lora_rank},
              {"heads", c.heads},
              {"vocab_size", c.vocab_size},
              {"d_txt", c.d_txt},
              {"max_caption", c.max_caption},
              {"max_frames", c.max_frames},
              {"t_max", c.t_max},
              {"use_cross_frame", c.use_cross_frame},
              {"use_projection", c.use_projection}};
}

DenoiserConfig config_from_json(const json& j) {
  DenoiserConfig c;
  try {
    c.image_channels = j.at("image_channels");
    c.image_size = j.at("image_size");
    c.base_channels = j.at("base_channels");
    c.channel_mult = j.at("channel_mult").get<std::vector<int>>();
    c.attention = j.at("attention").get<std::vector<bool>>();
    c.projection = j.at("projection").get<std::vector<bool>>();
    c.grid_base = j.at("grid_base");
    c.compressed = j.at("compressed");
    c.render_samples = j.at("render_samples");
    c.render_hidden = j.at("render_hidden");
    c.agg_hidden = j.at("agg_hidden");
    c.refine_blocks = j.at("refine_blocks");
    c.background = j.at("background");
    c.temb_dim = j.at("temb_dim");
    c.time_hidden = j.at("time_hidden");
    c.proj_temb_dim = j.at("proj_temb_dim");
    c.lora_rank = j.at("lora_rank");
    c.heads = j.at("heads");
    c.vocab_size = j.at("vocab_size");
    c.d_txt = j.at("d_txt");
    c.max_caption = j.at("max_caption");
    c.max_frames = j.at("max_frames");
    c.t_max = j.at("t_max");
    c.use_cross_frame = j.at("use_cross_frame");
    c.use_projection = j.at("use_projection");
  } catch (const json::exception& e) {
    throw InvalidInput(std::string("denoiser config: ") + e.what());
  }
  c.validate();
  return c;
}

namespace {

ResBlock make_resblock(nn::ParamStore& store, const std::string& name, int in, int out, int temb, Rng& rng) {
  ResBlock b;
  b.norm1 = nn::GroupNorm(store, name + ".norm1", in, nn::group_count(in));
  b.conv1 = nn::Conv2d(store, name + ".conv1", in, out, 3, rng);
  b.temb = nn::Linear(store, name + ".temb", temb, out, rng);
  b.norm2 = nn::GroupNorm(store, name + ".norm2", out, nn::group_count(out));
  b.conv2 = nn::Conv2d(store, name + ".conv2", out, out, 3, rng);
  if (in != out) {
    b.has_shortcut = true;
    b.shortcut = nn::Conv2d(store, name + ".shortcut", in, out, 1, rng);
  }
  return b;
}

Stage make_stage(nn::ParamStore& store, const std::string& name, const DenoiserConfig& cfg, int level, int in,
                 Rng& rng) {
  const int c = cfg.stage_channels(level);
  Stage s;
  s.block = make_resblock(store, name + ".res", in, c, cfg.time_hidden, rng);
  if (cfg.attention[level]) {
    if (cfg.use_cross_frame) {
      s.cfa_norm = nn::GroupNorm(store, name + ".cfa_norm", c, nn::group_count(c));
      s.cross_frame = attention::AttentionWeights::create(store, name + ".cfa", c, c, c, cfg.lora_rank, cfg.heads, rng);
    }
    s.caption_norm = nn::GroupNorm(store, name + ".txt_norm", c, nn::group_count(c));
    s.caption =
        attention::AttentionWeights::create(store, name + ".txt", c, c, cfg.d_txt, cfg.lora_rank, cfg.heads, rng);
  }
  if (cfg.has_projection(level)) {
    projection::ProjectionConfig pc;
    pc.channels = c;
    pc.compressed = cfg.compressed;
    pc.grid = cfg.stage_grid(level);
    pc.samples = cfg.render_samples;
    pc.temb_dim = cfg.proj_temb_dim;
    pc.agg_hidden = cfg.agg_hidden;
    pc.render_hidden = cfg.render_hidden;
    pc.refine_blocks = cfg.refine_blocks;
    pc.background = cfg.background;
    pc.t_max = cfg.t_max;
    s.projection = projection::ProjectionLayer(store, name + ".proj", pc, rng);
  }
  return s;
}

}  // namespace

Denoiser::Denoiser(const DenoiserConfig& cfg, uint64_t seed) : config_(cfg) {
  config_.validate();
  Rng rng(seed);
  const int n = config_.stages();
  time1_ = nn::Linear(params_, "time.l1", config_.temb_dim, config_.time_hidden, rng);
  time2_ = nn::Linear(params_, "time.l2", config_.time_hidden, config_.time_hidden, rng);
  token_table_ = params_.create("caption.tokens", randn({config_.vocab_size, config_.d_txt}, 1.0, rng));
  position_table_ = params_.create("caption.positions", randn({config_.max_caption, config_.d_txt}, 0.1, rng));
  in_conv_ = nn::Conv2d(params_, "in_conv", config_.image_channels, config_.base_channels, 3, rng);

  int prev = config_.base_channels;
  for (int l = 0; l < n; ++l) {
    encoder_.push_back(make_stage(params_, "enc" + std::to_string(l), config_, l, prev, rng));
    prev = config_.stage_channels(l);
    if (l + 1 < n) downsample_.push_back(nn::Conv2d(params_, "down" + std::to_string(l), prev, prev, 3, rng, 2));
  }
  middle_ = make_resblock(params_, "mid", prev, prev, config_.time_hidden, rng);
  decoder_.resize(n);
  upsample_.resize(n > 1 ? n - 1 : 0);
  for (int l = n - 1; l >= 0; --l) {
    const int c = config_.stage_channels(l);
    decoder_[l] = make_stage(params_, "dec" + std::to_string(l), config_, l, 2 * c, rng);
    if (l > 0)
      upsample_[l - 1] =
          nn::Conv2d(params_, "up" + std::to_string(l - 1), c, config_.stage_channels(l - 1), 3, rng);
  }
  const int c0 = config_.stage_channels(0);
  out_norm_ = nn::GroupNorm(params_, "out_norm", c0, nn::group_count(c0));
  out_conv_ = nn::Conv2d(params_, "out_conv", c0, config_.image_channels, 3, rng, 1, nn::Init::kZero);
}

void Denoiser::set_adapter_scale(double s) {
  for (auto* stages : {&encoder_, &decoder_})
    for (auto& st : *stages) {
      if (st.cross_frame) st.cross_frame->adapter_scale = s;
      if (st.caption) st.caption->adapter_scale = s;
    }
}

ad::Var Denoiser::resblock(const ResBlock& b, const ad::Var& h, const ad::Var& temb) const {
  ad::Var r = b.conv1(ad::silu(b.norm1(h)));
  r = ad::add_batch_channel(r, b.temb(temb));
  r = b.conv2(ad::silu(b.norm2(r)));
  return ad::add(b.has_shortcut ? b.shortcut(h) : h, r);
}

ad::Var Denoiser::stage_body(const Stage& s, const ad::Var& h_in, const ad::Var& temb, const ad::Var& z,
                             const ad::Var& caption, const std::vector<projection::CameraView>& views,
                             const std::vector<int>& timesteps, std::optional<int> skip,
                             uint64_t jitter_seed) const {
  ad::Var h = resblock(s.block, h_in, temb);
  if (s.cross_frame) h = ad::add(h, attention::attend_across_frames(s.cfa_norm(h), z, *s.cross_frame));
  if (s.caption && caption.defined()) h = ad::add(h, attention::attend_caption(s.caption_norm(h), caption, z, *s.caption));
  if (s.projection) h = s.projection->forward(h, views, timesteps, skip, jitter_seed);
  return h;
}

ad::Var Denoiser::forward(const ad::Var& x, const std::vector<int>& timesteps, const Tensor& conditions,
                          const std::vector<geometry::CameraView>& views, const std::vector<int>& caption,
                          std::optional<int> skip, uint64_t jitter_seed) const {
  const auto& c = config_;
  MVD_REQUIRE(x.shape().size() == 4, "denoiser: input must be [N, C, H, W]");
  const int64_t n = x.dim(0);
  MVD_REQUIRE(n >= 1 && n <= c.max_frames, "denoiser: frame count out of range");
  MVD_REQUIRE(x.dim(1) == c.image_channels && x.dim(2) == c.image_size && x.dim(3) == c.image_size,
              "denoiser: frames must be " + std::to_string(c.image_channels) + "x" + std::to_string(c.image_size) +
                  "x" + std::to_string(c.image_size) + ", got " + shape_str(x.shape()));
  MVD_REQUIRE(static_cast<int64_t>(timesteps.size()) == n && static_cast<int64_t>(views.size()) == n,
              "denoiser: one timestep and view per frame");
  MVD_REQUIRE(conditions.ndim() == 2 && conditions.dim(0) == n && conditions.dim(1) == conditioning::kConditionDim,
              "denoiser: conditions must be [N, 10]");
  MVD_REQUIRE(!skip || (n >= 2 && *skip >= 0 && *skip < n), "denoiser: skip frame out of range");
  MVD_REQUIRE(static_cast<int>(caption.size()) <= c.max_caption, "denoiser: caption too long");
  for (int id : caption) MVD_REQUIRE(id >= 0 && id < c.vocab_size, "denoiser: caption token out of vocabulary");

  ad::Var t_in(projection::frame_timestep_embeddings(timesteps, c.temb_dim, c.t_max));
  ad::Var temb = ad::silu(time2_(ad::silu(time1_(t_in))));
  ad::Var z(conditions);
  ad::Var cap;
  if (!caption.empty())
    cap = ad::add(ad::embedding(token_table_, caption),
                  ad::slice(position_table_, 0, 0, static_cast<int64_t>(caption.size())));

  const int levels = c.stages();
  std::vector<ad::Var> skips;
  ad::Var h = in_conv_(x);
  for (int l = 0; l < levels; ++l) {
    h = stage_body(encoder_[l], h, temb, z, cap, views, timesteps, skip, jitter_seed);
    skips.push_back(h);
    if (l + 1 < levels) h = downsample_[l](h);
  }
  h = resblock(middle_, h, temb);
  for (int l = levels - 1; l >= 0; --l) {
    h = ad::concat({h, skips[l]}, 1);
    h = stage_body(decoder_[l], h, temb, z, cap, views, timesteps, skip, jitter_seed);
    if (l > 0) h = upsample_[l - 1](ad::upsample_nearest2x(h));
  }
  return out_conv_(ad::silu(out_norm_(h)));
}

Tensor Denoiser::predict(const diffusion::FrameSetState& state, const diffusion::NoiseSchedule& schedule) const {
  std::vector<int> model_t;
  model_t.reserve(state.t.size());
  for (int t : state.t) {
    MVD_REQUIRE(t >= 0 && t <= schedule.steps, "denoiser: schedule step out of range");
    model_t.push_back(schedule.model_t[t]);
  }
  ad::NoGradGuard guard;
  return forward(ad::Var(state.x), model_t, conditioning::stack_conditions(state.conditions), state.views,
                 state.caption)
      .value();
}

int64_t count_parameters(const DenoiserConfig& cfg) { return Denoiser(cfg).params().scalar_count(); }

void save_checkpoint(const std::filesystem::path& dir, const Denoiser& model, const json& extra) {
  std::filesystem::create_directories(dir);
  NamedTensors tensors;
  for (const auto& p : model.params().all()) tensors.emplace_back(p.name, p.var.value());
  save_tensors(dir / "params.bin", tensors);
  json manifest = extra.is_object() ? extra : json::object();
  manifest["format"] = "mvdiff-checkpoint";
  manifest["version"] = 1;
  manifest["config"] = config_to_json(model.config());
  manifest["parameter_count"] = model.params().scalar_count();
  manifest["block_order"] = "resblock, cross-frame attention, caption attention, projection, resample";
  std::ofstream out(dir / "manifest.json");
  MVD_REQUIRE(out.good(), "cannot write checkpoint manifest in " + dir.string());
  out << manifest.dump(2) << "\n";
}

Denoiser load_checkpoint(const std::filesystem::path& dir, json* manifest_out) {
  std::ifstream in(dir / "manifest.json");
  MVD_REQUIRE(in.good(), "checkpoint manifest missing in " + dir.string());
  json manifest;
  try {
    in >> manifest;
  } catch (const json::exception& e) {
    throw InvalidInput("checkpoint manifest unreadable: " + std::string(e.what()));
  }
  MVD_REQUIRE(manifest.value("format", "") == "mvdiff-checkpoint", "not an mvdiff checkpoint: " + dir.string());
  Denoiser model(config_from_json(manifest.at("config")));
  const int64_t expected = manifest.at("parameter_count").get<int64_t>();
  MVD_REQUIRE(expected == model.params().scalar_count(),
              "checkpoint parameter count does not match its config");
  NamedTensors tensors = load_tensors(dir / "params.bin");
  auto& params = model.params().all();
  MVD_REQUIRE(tensors.size() == params.size(), "checkpoint tensor count mismatch");
  for (size_t i = 0; i < params.size(); ++i) {
    MVD_REQUIRE(tensors[i].first == params[i].name, "checkpoint tensor order mismatch at " + params[i].name);
    MVD_REQUIRE(tensors[i].second.shape() == params[i].var.shape(), "checkpoint shape mismatch at " + params[i].name);
    params[i].var.mutable_value() = std::move(tensors[i].second);
  }
  if (manifest_out) *manifest_out = std::move(manifest);
  return model;
}

}  // namespace mvdiff::denoiser
