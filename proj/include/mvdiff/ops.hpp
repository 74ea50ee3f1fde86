#pragma once

#include <cstdint>
#include <vector>

#include "mvdiff/autograd.hpp"

// Differentiable tensor operations. Layout conventions: images are
// [B, C, H, W], volumes [B, C, D, H, W], token sequences [L, d] row-major.
namespace mvdiff::ad {

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
// Elementwise product with a constant tensor (masks, fixed weights).
Var mul_const(const Var& a, const Tensor& c);

// x: [B, C, ...], bias: [C].
Var add_channel_bias(const Var& x, const Var& bias);
// x: [B, C, ...], v: [B, C]; adds v[b, c] over the trailing dims.
Var add_batch_channel(const Var& x, const Var& v);

// y = x * W^T (+ b). x: [..., in], W: [out, in], b: [out] (may be undefined).
Var linear(const Var& x, const Var& weight, const Var& bias = Var());
// [M, K] x [K, N]
Var matmul(const Var& a, const Var& b);

// Zero padding; square kernels. w: [Co, Ci, k, k].
Var conv2d(const Var& x, const Var& weight, const Var& bias, int stride, int pad);
// 3x3x3 kernels with unit padding. w: [Co, Ci, 3, 3, 3].
Var conv3d(const Var& x, const Var& weight, const Var& bias);
Var upsample_nearest2x(const Var& x);

// x: [B, C, ...]; normalizes over (C / groups) channels and all trailing dims.
Var group_norm(const Var& x, const Var& gamma, const Var& beta, int groups, double eps = 1e-5);

Var silu(const Var& x);
Var elu(const Var& x);
Var relu(const Var& x);
Var softplus(const Var& x);

Var concat(const std::vector<Var>& parts, int axis);
Var slice(const Var& x, int axis, int64_t begin, int64_t end);
Var reshape(const Var& x, Shape shape);
// [B, A, C] -> [B, C, A]
Var transpose12(const Var& x);

// softmax(q k^T / sqrt(d)) v with q: [Lq, d], k: [Lk, d], v: [Lk, dv].
Var attention(const Var& q, const Var& k, const Var& v);

// Rows of an embedding table. table: [V, d].
Var embedding(const Var& table, const std::vector<int>& ids);

// Fixed sparse linear resampling: out[r, :] = sum_k weight[r, k] * src[index[r, k], :].
// Used for bilinear and trilinear interpolation where sample positions do
// not depend on trainable quantities.
struct GatherPlan {
  int64_t rows = 0;
  int taps = 0;
  std::vector<int64_t> index;  // rows * taps
  std::vector<double> weight;  // rows * taps
};
Var gather(const Var& src, const GatherPlan& plan);

Var sum(const Var& x);
Var mean(const Var& x);
// sum(x * w) for a constant w; used by gradient checks.
Var dot_const(const Var& x, const Tensor& w);

}  // namespace mvdiff::ad
