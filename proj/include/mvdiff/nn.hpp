#pragma once

#include <random>
#include <string>
#include <vector>

#include "mvdiff/ops.hpp"

namespace mvdiff {

using Rng = std::mt19937_64;

Tensor randn(Shape shape, double stddev, Rng& rng);
Tensor uniform(Shape shape, double lo, double hi, Rng& rng);

namespace nn {

// The volume renderer (ray-marching MLP and the feature scale network) trains
// with its own learning rate; everything else shares the base rate.
enum class ParamGroup { kBase = 0, kRenderer = 1 };

struct Parameter {
  std::string name;
  ad::Var var;
  ParamGroup group;
};

// Owns every trainable tensor of a model in registration order. The order is
// the checkpoint layout.
class ParamStore {
 public:
  ad::Var create(const std::string& name, Tensor init, ParamGroup group = ParamGroup::kBase);

  const std::vector<Parameter>& all() const { return params_; }
  std::vector<Parameter>& all() { return params_; }
  int64_t scalar_count() const;
  void zero_grad();
  const Parameter* find(const std::string& name) const;

 private:
  std::vector<Parameter> params_;
};

// Initialization modes for the layers below.
enum class Init { kDefault, kZero, kIdentity };

struct Linear {
  ad::Var weight, bias;
  Linear() = default;
  Linear(ParamStore& store, const std::string& name, int in, int out, Rng& rng, bool bias = true,
         Init init = Init::kDefault, ParamGroup group = ParamGroup::kBase);
  ad::Var operator()(const ad::Var& x) const { return ad::linear(x, weight, bias); }
};

struct Conv2d {
  ad::Var weight, bias;
  int stride = 1, pad = 0;
  Conv2d() = default;
  Conv2d(ParamStore& store, const std::string& name, int in, int out, int kernel, Rng& rng, int stride = 1,
         Init init = Init::kDefault, ParamGroup group = ParamGroup::kBase, bool bias = true);
  ad::Var operator()(const ad::Var& x) const { return ad::conv2d(x, weight, bias, stride, pad); }
};

struct Conv3d {
  ad::Var weight, bias;
  Conv3d() = default;
  Conv3d(ParamStore& store, const std::string& name, int in, int out, Rng& rng, Init init = Init::kDefault,
         ParamGroup group = ParamGroup::kBase);
  ad::Var operator()(const ad::Var& x) const { return ad::conv3d(x, weight, bias); }
};

struct GroupNorm {
  ad::Var gamma, beta;
  int groups = 1;
  GroupNorm() = default;
  GroupNorm(ParamStore& store, const std::string& name, int channels, int groups,
            ParamGroup group = ParamGroup::kBase);
  ad::Var operator()(const ad::Var& x) const { return ad::group_norm(x, gamma, beta, groups); }
};

// Largest group count <= preferred that divides channels.
int group_count(int channels, int preferred = 8);

}  // namespace nn
}  // namespace mvdiff
