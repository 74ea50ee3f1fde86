#include "mvdiff/nn.hpp"

#include <algorithm>
#include <cmath>

#include "mvdiff/errors.hpp"

namespace mvdiff {

Tensor randn(Shape shape, double stddev, Rng& rng) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> dist(0.0, stddev);
  for (auto& v : t.storage()) v = dist(rng);
  return t;
}

Tensor uniform(Shape shape, double lo, double hi, Rng& rng) {
  Tensor t(std::move(shape));
  std::uniform_real_distribution<double> dist(lo, hi);
  for (auto& v : t.storage()) v = dist(rng);
  return t;
}

namespace nn {

ad::Var ParamStore::create(const std::string& name, Tensor init, ParamGroup group) {
  MVD_REQUIRE(find(name) == nullptr, "duplicate parameter name " + name);
  ad::Var v(std::move(init), true);
  params_.push_back({name, v, group});
  return v;
}

int64_t ParamStore::scalar_count() const {
  int64_t n = 0;
  for (const auto& p : params_) n += p.var.numel();
  return n;
}

void ParamStore::zero_grad() {
  for (auto& p : params_) p.var.zero_grad();
}

const Parameter* ParamStore::find(const std::string& name) const {
  for (const auto& p : params_)
    if (p.name == name) return &p;
  return nullptr;
}

namespace {

Tensor init_weight(Shape shape, int fan_in, Init init, Rng& rng) {
  switch (init) {
    case Init::kZero:
      return Tensor(std::move(shape));
    case Init::kIdentity: {
      Tensor t(std::move(shape));
      const int64_t out = t.dim(0), in = t.dim(1);
      const int64_t inner = t.numel() / (out * in);
      for (int64_t i = 0; i < std::min(out, in); ++i) t[(i * in + i) * inner + inner / 2] = 1.0;
      return t;
    }
    case Init::kDefault:
      break;
  }
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  return uniform(std::move(shape), -bound, bound, rng);
}

}  // namespace

Linear::Linear(ParamStore& store, const std::string& name, int in, int out, Rng& rng, bool with_bias, Init init,
               ParamGroup group) {
  weight = store.create(name + ".weight", init_weight({out, in}, in, init, rng), group);
  if (with_bias) bias = store.create(name + ".bias", Tensor({out}), group);
}

Conv2d::Conv2d(ParamStore& store, const std::string& name, int in, int out, int kernel, Rng& rng, int s, Init init,
               ParamGroup group, bool with_bias)
    : stride(s), pad(kernel / 2) {
  weight = store.create(name + ".weight", init_weight({out, in, kernel, kernel}, in * kernel * kernel, init, rng),
                        group);
  if (with_bias) bias = store.create(name + ".bias", Tensor({out}), group);
}

Conv3d::Conv3d(ParamStore& store, const std::string& name, int in, int out, Rng& rng, Init init, ParamGroup group) {
  weight = store.create(name + ".weight", init_weight({out, in, 3, 3, 3}, in * 27, init, rng), group);
  bias = store.create(name + ".bias", Tensor({out}), group);
}

GroupNorm::GroupNorm(ParamStore& store, const std::string& name, int channels, int g, ParamGroup group)
    : groups(g) {
  gamma = store.create(name + ".gamma", Tensor({channels}, 1.0), group);
  beta = store.create(name + ".beta", Tensor({channels}), group);
}

int group_count(int channels, int preferred) {
  for (int g = std::min(preferred, channels); g > 1; --g)
    if (channels % g == 0) return g;
  return 1;
}

}  // namespace nn
}  // namespace mvdiff
