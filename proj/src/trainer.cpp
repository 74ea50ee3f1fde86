#include "mvdiff/trainer.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>
#include <unordered_map>

#include "mvdiff/archive.hpp"
#include "mvdiff/errors.hpp"
#include "mvdiff/generation.hpp"

namespace mvdiff::trainer {

using nlohmann::json;

namespace {

struct Field {
  std::string key;
  std::function<void(TrainConfig&, const std::string&)> set;
  std::function<std::string(const TrainConfig&)> get;
};

template <typename T>
T parse_number(const std::string& key, const std::string& v) {
  std::istringstream in(v);
  T out{};
  in >> out;
  MVD_REQUIRE(!in.fail() && (in >> std::ws).eof(), "config: bad value for " + key + ": '" + v + "'");
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw InvalidInput("config: bad boolean for " + key + ": '" + v + "'");
}

std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream in(v);
  while (std::getline(in, item, ',')) {
    const auto b = item.find_first_not_of(" \t"), e = item.find_last_not_of(" \t");
    MVD_REQUIRE(b != std::string::npos, "config: empty list element in '" + v + "'");
    out.push_back(item.substr(b, e - b + 1));
  }
  return out;
}

std::string fmt_double(double v) {
  std::ostringstream out;
  out.precision(17);
  out << v;
  return out.str();
}

#define MVD_INT(name, member)                                                                        \
  Field{name, [](TrainConfig& c, const std::string& v) { c.member = parse_number<int>(name, v); }, \
        [](const TrainConfig& c) { return std::to_string(c.member); }}
#define MVD_U64(name, member)                                                                             \
  Field{name, [](TrainConfig& c, const std::string& v) { c.member = parse_number<uint64_t>(name, v); }, \
        [](const TrainConfig& c) { return std::to_string(c.member); }}
#define MVD_DBL(name, member)                                                                           \
  Field{name, [](TrainConfig& c, const std::string& v) { c.member = parse_number<double>(name, v); }, \
        [](const TrainConfig& c) { return fmt_double(c.member); }}
#define MVD_BOOL(name, member)                                                                 \
  Field{name, [](TrainConfig& c, const std::string& v) { c.member = parse_bool(name, v); }, \
        [](const TrainConfig& c) { return std::string(c.member ? "true" : "false"); }}

const std::vector<Field>& fields() {
  static const std::vector<Field> f = {
      MVD_INT("image_size", model.image_size),
      MVD_INT("base_channels", model.base_channels),
      Field{"channel_mult",
            [](TrainConfig& c, const std::string& v) {
              c.model.channel_mult.clear();
              for (const auto& s : split_list(v)) c.model.channel_mult.push_back(parse_number<int>("channel_mult", s));
            },
            [](const TrainConfig& c) {
              std::string s;
              for (int m : c.model.channel_mult) s += (s.empty() ? "" : ",") + std::to_string(m);
              return s;
            }},
      Field{"attention_stages",
            [](TrainConfig& c, const std::string& v) {
              c.model.attention.clear();
              for (const auto& s : split_list(v)) c.model.attention.push_back(parse_bool("attention_stages", s));
            },
            [](const TrainConfig& c) {
              std::string s;
              for (bool b : c.model.attention) s += (s.empty() ? "" : ",") + std::string(b ? "true" : "false");
              return s;
            }},
      Field{"projection_stages",
            [](TrainConfig& c, const std::string& v) {
              c.model.projection.clear();
              for (const auto& s : split_list(v)) c.model.projection.push_back(parse_bool("projection_stages", s));
            },
            [](const TrainConfig& c) {
              std::string s;
              for (bool b : c.model.projection) s += (s.empty() ? "" : ",") + std::string(b ? "true" : "false");
              return s;
            }},
      MVD_INT("grid_base", model.grid_base),
      MVD_INT("compressed", model.compressed),
      MVD_INT("render_samples", model.render_samples),
      MVD_INT("render_hidden", model.render_hidden),
      MVD_INT("agg_hidden", model.agg_hidden),
      MVD_INT("refine_blocks", model.refine_blocks),
      MVD_BOOL("background", model.background),
      MVD_INT("temb_dim", model.temb_dim),
      MVD_INT("time_hidden", model.time_hidden),
      MVD_INT("proj_temb_dim", model.proj_temb_dim),
      MVD_INT("lora_rank", model.lora_rank),
      MVD_INT("heads", model.heads),
      MVD_INT("vocab_size", model.vocab_size),
      MVD_INT("d_txt", model.d_txt),
      MVD_INT("max_caption", model.max_caption),
      MVD_INT("max_frames", model.max_frames),
      MVD_INT("t_max", model.t_max),
      MVD_BOOL("use_cross_frame", model.use_cross_frame),
      MVD_BOOL("use_projection", model.use_projection),
      MVD_DBL("beta_start", beta_start),
      MVD_DBL("beta_end", beta_end),
      MVD_INT("frames", frames),
      MVD_INT("batch", batch),
      MVD_INT("grad_accum", grad_accum),
      MVD_INT("steps", steps),
      MVD_INT("pretrain_steps", pretrain_steps),
      MVD_INT("pretrain_batch", pretrain_batch),
      MVD_DBL("pretrain_lr", pretrain_lr),
      MVD_DBL("lr_base", lr_base),
      MVD_DBL("lr_renderer", lr_renderer),
      MVD_DBL("weight_decay", weight_decay),
      MVD_DBL("adam_beta1", adam_beta1),
      MVD_DBL("adam_beta2", adam_beta2),
      MVD_DBL("adam_eps", adam_eps),
      MVD_DBL("grad_clip", grad_clip),
      MVD_DBL("p_cond_first", p_cond_first),
      MVD_DBL("p_cond_second", p_cond_second),
      MVD_DBL("p_random_frames", p_random_frames),
      MVD_DBL("p_empty_caption", p_empty_caption),
      MVD_DBL("prior_weight", prior_weight),
      MVD_INT("prior_count", prior_count),
      MVD_INT("prior_steps", prior_steps),
      MVD_BOOL("skip_last", skip_last),
      MVD_U64("seed", seed),
      MVD_INT("log_every", log_every),
      MVD_INT("checkpoint_every", checkpoint_every),
  };
  return f;
}

#undef MVD_INT
#undef MVD_U64
#undef MVD_DBL
#undef MVD_BOOL

void validate(const TrainConfig& c) {
  c.model.validate();
  MVD_REQUIRE(c.frames >= 1 && c.frames <= c.model.max_frames, "config: frames out of range");
  MVD_REQUIRE(c.batch >= 1 && c.grad_accum >= 1 && c.pretrain_batch >= 1, "config: batch sizes must be positive");
  MVD_REQUIRE(c.steps >= 0 && c.pretrain_steps >= 0, "config: step counts must be non-negative");
  for (double p : {c.p_cond_first, c.p_cond_second, c.p_random_frames, c.p_empty_caption})
    MVD_REQUIRE(p >= 0 && p <= 1, "config: probabilities must lie in [0, 1]");
  MVD_REQUIRE(c.lr_base >= 0 && c.lr_renderer >= 0 && c.pretrain_lr >= 0, "config: learning rates must be >= 0");
  MVD_REQUIRE(c.prior_count >= 0 && c.prior_steps >= 1, "config: bad prior settings");
  MVD_REQUIRE(c.log_every >= 1 && c.checkpoint_every >= 1, "config: logging intervals must be positive");
}

std::string rng_state(const Rng& rng) {
  std::ostringstream out;
  out << rng;
  return out.str();
}

void restore_rng(Rng& rng, const std::string& state) {
  std::istringstream in(state);
  in >> rng;
  MVD_REQUIRE(!in.fail(), "checkpoint RNG state unreadable");
}

uint64_t step_seed(uint64_t seed, int64_t step) {
  uint64_t x = seed + 0x9E3779B97F4A7C15ull * static_cast<uint64_t>(step + 1);
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

std::string timestamp() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&now));
  return buf;
}

}  // namespace

std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  for (const auto& f : fields()) keys.push_back(f.key);
  return keys;
}

TrainConfig parse_config(const std::string& text) {
  TrainConfig cfg;
  std::unordered_map<std::string, const Field*> index;
  for (const auto& f : fields()) index[f.key] = &f;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const auto b = line.find_first_not_of(" \t\r");
    if (b == std::string::npos) continue;
    const auto eq = line.find('=');
    MVD_REQUIRE(eq != std::string::npos, "config line " + std::to_string(lineno) + ": expected key = value");
    auto trim = [](std::string s) {
      const auto b2 = s.find_first_not_of(" \t\r"), e2 = s.find_last_not_of(" \t\r");
      return b2 == std::string::npos ? std::string() : s.substr(b2, e2 - b2 + 1);
    };
    const std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
    auto it = index.find(key);
    MVD_REQUIRE(it != index.end(), "config line " + std::to_string(lineno) + ": unknown key '" + key + "'");
    it->second->set(cfg, value);
  }
  validate(cfg);
  return cfg;
}

TrainConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  MVD_REQUIRE(in.good(), "cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

std::string config_text(const TrainConfig& cfg) {
  std::string out;
  for (const auto& f : fields()) out += f.key + " = " + f.get(cfg) + "\n";
  return out;
}

std::string hash_hex(const std::string& bytes) {
  uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

diffusion::NoiseSchedule make_schedule(const TrainConfig& cfg) {
  return diffusion::make_schedule(cfg.model.t_max, cfg.beta_start, cfg.beta_end);
}

AdamW::AdamW(const nn::ParamStore& params, double lr_base, double lr_renderer, double beta1, double beta2,
             double eps, double weight_decay)
    : lr_base_(lr_base), lr_renderer_(lr_renderer), beta1_(beta1), beta2_(beta2), eps_(eps), wd_(weight_decay) {
  for (const auto& p : params.all()) {
    m_.emplace_back(p.var.shape());
    v_.emplace_back(p.var.shape());
  }
}

bool AdamW::step(nn::ParamStore& params) {
  auto& all = params.all();
  MVD_REQUIRE(all.size() == m_.size(), "optimizer state does not match the parameters");
  for (const auto& p : all)
    if (p.var.has_grad() && !p.var.node()->grad.all_finite()) return false;
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (size_t i = 0; i < all.size(); ++i) {
    auto& p = all[i];
    if (!p.var.has_grad()) continue;  // untouched this step, as in frameworks with None gradients
    const Tensor& g = p.var.node()->grad;
    Tensor& w = p.var.mutable_value();
    Tensor& m = m_[i];
    Tensor& v = v_[i];
    const double lr = this->lr(p.group);
    for (int64_t k = 0; k < w.numel(); ++k) {
      m[k] = beta1_ * m[k] + (1.0 - beta1_) * g[k];
      v[k] = beta2_ * v[k] + (1.0 - beta2_) * g[k] * g[k];
      const double mhat = m[k] / c1, vhat = v[k] / c2;
      w[k] -= lr * (mhat / (std::sqrt(vhat) + eps_) + wd_ * w[k]);
    }
  }
  return true;
}

void AdamW::save(const std::filesystem::path& path) const {
  NamedTensors t;
  t.emplace_back("t", Tensor({1}, static_cast<double>(t_)));
  for (size_t i = 0; i < m_.size(); ++i) {
    t.emplace_back("m" + std::to_string(i), m_[i]);
    t.emplace_back("v" + std::to_string(i), v_[i]);
  }
  save_tensors(path, t);
}

void AdamW::load(const std::filesystem::path& path) {
  NamedTensors t = load_tensors(path);
  MVD_REQUIRE(t.size() == 1 + 2 * m_.size() && t[0].first == "t", "optimizer state does not match the model");
  t_ = static_cast<int64_t>(t[0].second[0]);
  for (size_t i = 0; i < m_.size(); ++i) {
    MVD_REQUIRE(t[1 + 2 * i].second.shape() == m_[i].shape(), "optimizer state shape mismatch");
    m_[i] = std::move(t[1 + 2 * i].second);
    v_[i] = std::move(t[2 + 2 * i].second);
  }
}

double clip_grad_norm(nn::ParamStore& params, double max_norm) {
  double sq = 0;
  for (const auto& p : params.all())
    if (p.var.has_grad())
      for (double g : p.var.node()->grad.storage()) sq += g * g;
  const double norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm && std::isfinite(norm)) {
    const double s = max_norm / norm;
    for (auto& p : params.all())
      if (p.var.has_grad())
        for (double& g : p.var.node()->grad.storage()) g *= s;
  }
  return norm;
}

PreparedItem prepare_item(const synthdata::FrameSample& sample, const diffusion::NoiseSchedule& schedule,
                          const TrainConfig& cfg, Rng& rng) {
  const int n = static_cast<int>(sample.views.size());
  PreparedItem item;
  std::uniform_int_distribution<int> pick_t(1, schedule.steps);
  const int t = pick_t(rng);
  item.t.assign(n, t);
  std::bernoulli_distribution first(cfg.p_cond_first), second(cfg.p_cond_second);
  // Both draws happen every time so the stream does not depend on N.
  const bool c1 = first(rng), c2 = second(rng);
  if (n >= 2 && c1) item.t[0] = 0;
  if (n >= 2 && c2) item.t[1] = 0;
  const Tensor x0 = generation::to_model_space(sample.images);
  item.eps = randn(x0.shape(), 1.0, rng);
  item.x_t = diffusion::q_sample_frames(x0, item.t, item.eps, schedule);
  for (int f = 0; f < n; ++f) item.active.push_back(item.t[f] > 0);
  item.conditions = conditioning::stack_conditions(sample.conditions);
  item.views = sample.views;
  item.caption = sample.caption;
  if (cfg.skip_last && n >= 2) item.skip = n - 1;
  return item;
}

PreparedItem prepare_prior(const synthdata::PriorItem& prior, const diffusion::NoiseSchedule& schedule, Rng& rng) {
  PreparedItem item;
  std::uniform_int_distribution<int> pick_t(1, schedule.steps);
  item.t = {pick_t(rng)};
  const Tensor x0 = generation::to_model_space(prior.image.reshaped({1, 3, prior.image.dim(1), prior.image.dim(2)}));
  item.eps = randn(x0.shape(), 1.0, rng);
  item.x_t = diffusion::q_sample_frames(x0, item.t, item.eps, schedule);
  item.active = {true};
  item.conditions = conditioning::stack_conditions(
      {conditioning::make_condition(prior.view, prior.image, conditioning::IntensityMode::kTrain)});
  item.views = {prior.view};
  item.caption = prior.caption;
  return item;
}

Losses train_step(const denoiser::Denoiser& model, const std::vector<PreparedItem>& batch, const PreparedItem* prior,
                  double prior_weight, uint64_t jitter_seed, double grad_scale) {
  MVD_REQUIRE(!batch.empty(), "train_step needs at least one item");
  Losses out;
  ad::Var data;
  for (const auto& item : batch) {
    ad::Var pred = model.forward(ad::Var(item.x_t), item.t, item.conditions, item.views, item.caption, item.skip,
                                 jitter_seed);
    diffusion::EpsLoss l = diffusion::eps_loss(item.eps, pred, item.active);
    out.all_masked = out.all_masked || l.all_masked;
    data = data.defined() ? ad::add(data, l.value) : l.value;
  }
  data = ad::scale(data, 1.0 / static_cast<double>(batch.size()));
  out.data = data.value()[0];
  ad::Var total = data;
  if (prior) {
    ad::Var pred = model.forward(ad::Var(prior->x_t), prior->t, prior->conditions, prior->views, prior->caption);
    ad::Var lp = diffusion::eps_loss(prior->eps, pred, prior->active).value;
    out.prior = lp.value()[0];
    total = ad::add(data, ad::scale(lp, prior_weight));
  }
  out.total = total.value()[0];
  if (total.requires_grad()) ad::backward(ad::scale(total, grad_scale));
  return out;
}

double evaluate_loss(const denoiser::Denoiser& model, const std::vector<PreparedItem>& items) {
  ad::NoGradGuard guard;
  double sum = 0;
  for (const auto& item : items) {
    ad::Var pred = model.forward(ad::Var(item.x_t), item.t, item.conditions, item.views, item.caption, item.skip);
    sum += diffusion::eps_loss(item.eps, pred, item.active).value.value()[0];
  }
  return items.empty() ? 0.0 : sum / static_cast<double>(items.size());
}

int copy_matching(const denoiser::Denoiser& from, denoiser::Denoiser& to) {
  std::unordered_map<std::string, const nn::Parameter*> src;
  for (const auto& p : from.params().all()) src[p.name] = &p;
  int copied = 0;
  for (auto& p : to.params().all()) {
    auto it = src.find(p.name);
    if (it == src.end() || it->second->var.shape() != p.var.shape()) continue;
    p.var.mutable_value() = it->second->var.value();
    ++copied;
  }
  return copied;
}

namespace {

diffusion::NoiseSchedule schedule_from_manifest(const json& manifest) {
  const auto& s = manifest.at("schedule");
  return diffusion::make_schedule(s.at("t_max").get<int>(), s.at("beta_start").get<double>(),
                                  s.at("beta_end").get<double>());
}

NamedTensors prior_to_tensors(const std::vector<synthdata::PriorItem>& items) {
  NamedTensors t;
  for (size_t i = 0; i < items.size(); ++i) {
    const auto& it = items[i];
    t.emplace_back("image" + std::to_string(i), it.image);
    Tensor cam({22});
    for (int r = 0; r < 4; ++r)
      for (int c = 0; c < 4; ++c) cam[r * 4 + c] = it.view.pose(r, c);
    cam[16] = it.view.fx;
    cam[17] = it.view.fy;
    cam[18] = it.view.cx;
    cam[19] = it.view.cy;
    cam[20] = it.view.height;
    cam[21] = it.view.width;
    t.emplace_back("camera" + std::to_string(i), cam);
    Tensor cap({static_cast<int64_t>(it.caption.size())});
    for (size_t k = 0; k < it.caption.size(); ++k) cap[k] = it.caption[k];
    t.emplace_back("caption" + std::to_string(i), cap);
  }
  return t;
}

std::vector<synthdata::PriorItem> prior_from_tensors(const NamedTensors& t) {
  MVD_REQUIRE(t.size() % 3 == 0, "prior archive malformed");
  std::vector<synthdata::PriorItem> items;
  for (size_t i = 0; i < t.size(); i += 3) {
    synthdata::PriorItem it;
    it.image = t[i].second;
    const Tensor& cam = t[i + 1].second;
    for (int r = 0; r < 4; ++r)
      for (int c = 0; c < 4; ++c) it.view.pose(r, c) = cam[r * 4 + c];
    it.view.fx = cam[16];
    it.view.fy = cam[17];
    it.view.cx = cam[18];
    it.view.cy = cam[19];
    it.view.height = static_cast<int>(cam[20]);
    it.view.width = static_cast<int>(cam[21]);
    for (double v : t[i + 2].second.storage()) it.caption.push_back(static_cast<int>(v));
    items.push_back(std::move(it));
  }
  return items;
}

}  // namespace

std::vector<synthdata::PriorItem> make_prior_set(const std::filesystem::path& checkpoint, int count, uint64_t seed,
                                                 int steps) {
  MVD_REQUIRE(count >= 0, "prior set size must be non-negative");
  MVD_REQUIRE(std::filesystem::exists(checkpoint / "manifest.json"),
              "prior set needs a stage-2d checkpoint; none found at " + checkpoint.string());
  if (count == 0) return {};
  json manifest;
  const denoiser::Denoiser model = denoiser::load_checkpoint(checkpoint, &manifest);
  const auto base = schedule_from_manifest(manifest);
  const int size = model.config().image_size;
  Rng rng(seed);
  generation::SampleOptions opts;
  opts.steps = steps;
  opts.lambda_cfg = 1.0;
  std::vector<synthdata::PriorItem> items;
  for (int i = 0; i < count; ++i) {
    const synthdata::SceneSpec spec = synthdata::random_scene(rng, static_cast<uint64_t>(i));
    synthdata::PriorItem it;
    it.caption = synthdata::caption_of(spec);
    it.view = synthdata::random_training_view(rng, size);
    opts.seed = step_seed(seed, i);
    Tensor img = generation::generate_unconditional(generation::model_eps(model), {it.view}, it.caption, base, opts,
                                                    {3, size, size});
    it.image = img.reshaped({3, size, size});
    items.push_back(std::move(it));
  }
  return items;
}

double run_stage(const std::vector<synthdata::Scene>& scenes, const TrainConfig& cfg, const RunOptions& opts) {
  MVD_REQUIRE(!scenes.empty(), "training needs at least one scene");
  const bool mv = opts.stage == Stage::kMultiView;
  MVD_REQUIRE(!mv || opts.init.has_value(), "multi-view training needs --init with a stage-2d checkpoint");
  MVD_REQUIRE(!mv || std::filesystem::exists(*opts.init / "manifest.json"),
              "stage-2d checkpoint not found: " + (opts.init ? opts.init->string() : std::string()));
  for (const auto& s : scenes)
    MVD_REQUIRE(static_cast<int>(s.views.size()) >= (mv ? cfg.frames : 1), "scene has too few ring poses");
  std::filesystem::create_directories(opts.out);
  const auto schedule = make_schedule(cfg);
  const int total_steps = mv ? cfg.steps : cfg.pretrain_steps;
  const int n = mv ? cfg.frames : 1;
  const int per_step = mv ? cfg.batch : cfg.pretrain_batch;
  TrainConfig item_cfg = cfg;
  if (!mv) {
    item_cfg.p_cond_first = item_cfg.p_cond_second = 0.0;
    item_cfg.skip_last = false;
  }

  denoiser::Denoiser model(cfg.model, cfg.seed);
  if (!mv) {
    model.set_adapter_scale(0.0);  // the 2D prior has no camera conditioning
  } else {
    const denoiser::Denoiser init = denoiser::load_checkpoint(*opts.init);
    const int copied = copy_matching(init, model);
    for (auto& p : model.params().all())
      if (p.name.find(".lora_") != std::string::npos && p.name.ends_with(".up")) p.var.mutable_value().fill(0.0);
    if (!opts.quiet) std::cerr << "initialized " << copied << " tensors from " << opts.init->string() << "\n";
  }
  AdamW opt(model.params(), mv ? cfg.lr_base : cfg.pretrain_lr, mv ? cfg.lr_renderer : cfg.pretrain_lr,
            cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps, cfg.weight_decay);
  Rng rng(cfg.seed ^ (mv ? 0x5EEDull : 0x2Dull));
  int start = 0;

  std::vector<synthdata::PriorItem> prior;
  if (mv && cfg.prior_count > 0) {
    const auto cache = opts.out / "prior.bin";
    if (opts.resume && std::filesystem::exists(cache)) {
      prior = prior_from_tensors(load_tensors(cache));
    } else {
      if (!opts.quiet) std::cerr << "sampling " << cfg.prior_count << " prior images\n";
      prior = make_prior_set(*opts.init, cfg.prior_count, cfg.seed + 17, cfg.prior_steps);
      save_tensors(cache, prior_to_tensors(prior));
    }
  }

  const std::string cfg_source = opts.config_source.empty() ? config_text(cfg) : opts.config_source;
  if (opts.resume && std::filesystem::exists(opts.out / "manifest.json")) {
    json manifest;
    denoiser::Denoiser saved = denoiser::load_checkpoint(opts.out, &manifest);
    MVD_REQUIRE(manifest.value("stage", "") == (mv ? "mv" : "2d"), "resume: checkpoint is from another stage");
    copy_matching(saved, model);
    opt.load(opts.out / "optimizer.bin");
    restore_rng(rng, manifest.at("rng_state").get<std::string>());
    start = manifest.at("step").get<int>();
  }

  // Fixed held-out items for loss tracking.
  std::vector<PreparedItem> held_out;
  {
    Rng eval_rng(cfg.seed + 99991);
    for (int i = 0; i < 4; ++i) {
      const auto& scene = scenes[static_cast<size_t>(i) % scenes.size()];
      auto sample = synthdata::sample_training_frames(scene, n, eval_rng, cfg.p_random_frames, cfg.p_empty_caption);
      held_out.push_back(prepare_item(sample, schedule, item_cfg, eval_rng));
    }
  }

  auto save = [&](int step) {
    json extra{{"stage", mv ? "mv" : "2d"},
               {"step", step},
               {"seed", cfg.seed},
               {"schedule", {{"t_max", cfg.model.t_max}, {"beta_start", cfg.beta_start}, {"beta_end", cfg.beta_end}}},
               {"config_hash", hash_hex(cfg_source)},
               {"config", cfg_source},
               {"rng_state", rng_state(rng)}};
    if (opts.init) extra["init"] = opts.init->string();
    denoiser::save_checkpoint(opts.out, model, extra);
    opt.save(opts.out / "optimizer.bin");
  };

  std::ofstream log(opts.out / "log.jsonl", opts.resume ? std::ios::app : std::ios::trunc);
  const int end = opts.max_steps >= 0 ? std::min(total_steps, start + opts.max_steps) : total_steps;
  std::uniform_int_distribution<size_t> pick_scene(0, scenes.size() - 1);
  std::uniform_int_distribution<size_t> pick_prior(0, prior.empty() ? 0 : prior.size() - 1);
  const auto t0 = std::chrono::steady_clock::now();
  for (int step = start; step < end; ++step) {
    model.params().zero_grad();
    Losses acc;
    for (int a = 0; a < cfg.grad_accum; ++a) {
      std::vector<PreparedItem> batch;
      for (int b = 0; b < per_step; ++b) {
        const auto& scene = scenes[pick_scene(rng)];
        auto sample = synthdata::sample_training_frames(scene, n, rng, cfg.p_random_frames, cfg.p_empty_caption);
        batch.push_back(prepare_item(sample, schedule, item_cfg, rng));
      }
      std::optional<PreparedItem> prior_item;
      if (mv && !prior.empty()) prior_item = prepare_prior(prior[pick_prior(rng)], schedule, rng);
      const Losses l = train_step(model, batch, prior_item ? &*prior_item : nullptr, cfg.prior_weight,
                                  step_seed(cfg.seed, step), 1.0 / cfg.grad_accum);
      acc.total += l.total / cfg.grad_accum;
      acc.data += l.data / cfg.grad_accum;
      acc.prior += l.prior / cfg.grad_accum;
    }
    const double gnorm = clip_grad_norm(model.params(), cfg.grad_clip);
    const bool applied = opt.step(model.params());
    if (!applied) std::cerr << "step " << step << ": non-finite gradient, update skipped\n";
    if ((step + 1) % cfg.log_every == 0 || step + 1 == end || !applied) {
      json line{{"step", step + 1},
                {"loss", acc.total},
                {"loss_d", acc.data},
                {"loss_p", acc.prior},
                {"grad_norm", gnorm},
                {"lr_base", opt.lr(nn::ParamGroup::kBase)},
                {"lr_renderer", opt.lr(nn::ParamGroup::kRenderer)},
                {"skipped", !applied},
                {"elapsed_s", std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()},
                {"timestamp", timestamp()}};
      log << line.dump() << "\n" << std::flush;
      if (!opts.quiet) std::cerr << line.dump() << "\n";
    }
    if ((step + 1) % cfg.checkpoint_every == 0 && step + 1 != end) save(step + 1);
  }
  save(end);
  const double held = evaluate_loss(model, held_out);
  log << json{{"step", end}, {"held_out_loss", held}, {"timestamp", timestamp()}}.dump() << "\n";
  return held;
}

}  // namespace mvdiff::trainer
