#include "mvdiff/attention.hpp"

#include <cmath>

#include "mvdiff/conditioning.hpp"
#include "mvdiff/errors.hpp"

namespace mvdiff::attention {

namespace {

LowRankAdapter make_adapter(nn::ParamStore& store, const std::string& name, int d_in, int d_out, int rank,
                            Rng& rng) {
  const int fan_in = d_in + conditioning::kConditionDim;
  LowRankAdapter a;
  a.down = store.create(name + ".down", randn({rank, fan_in}, 1.0 / std::sqrt(static_cast<double>(fan_in)), rng));
  a.up = store.create(name + ".up", Tensor({d_out, rank}));
  return a;
}

// [L, C] tokens of frame i from [N, C, H, W] features.
ad::Var frame_tokens(const ad::Var& h, int64_t i) {
  const int64_t c = h.dim(1), hw = h.dim(2) * h.dim(3);
  ad::Var f = ad::reshape(ad::slice(h, 0, i, i + 1), {1, c, hw});
  return ad::reshape(ad::transpose12(f), {hw, c});
}

// [N*L, C] token rows back to [N, C, H, W].
ad::Var tokens_to_frames(const ad::Var& rows, const Shape& frame_shape) {
  const int64_t n = frame_shape[0], c = frame_shape[1], hw = frame_shape[2] * frame_shape[3];
  ad::Var t = ad::transpose12(ad::reshape(rows, {n, hw, c}));
  return ad::reshape(t, frame_shape);
}

ad::Var multi_head(const ad::Var& q, const ad::Var& k, const ad::Var& v, int heads) {
  if (heads == 1) return ad::attention(q, k, v);
  const int64_t d = q.dim(1), dh = d / heads;
  std::vector<ad::Var> outs;
  for (int hd = 0; hd < heads; ++hd)
    outs.push_back(ad::attention(ad::slice(q, 1, hd * dh, (hd + 1) * dh), ad::slice(k, 1, hd * dh, (hd + 1) * dh),
                                 ad::slice(v, 1, hd * dh, (hd + 1) * dh)));
  return ad::concat(outs, 1);
}

}  // namespace

AttentionWeights AttentionWeights::create(nn::ParamStore& store, const std::string& name, int d_in, int d_att,
                                          int d_ctx, int rank, int heads, Rng& rng) {
  MVD_REQUIRE(heads >= 1 && d_att % heads == 0, "attention: heads must divide the attention width");
  AttentionWeights w;
  const double sq = 1.0 / std::sqrt(static_cast<double>(d_in));
  const double sc = 1.0 / std::sqrt(static_cast<double>(d_ctx));
  w.query = store.create(name + ".q", uniform({d_att, d_in}, -sq, sq, rng));
  w.key = store.create(name + ".k", uniform({d_att, d_ctx}, -sc, sc, rng));
  w.value = store.create(name + ".v", uniform({d_att, d_ctx}, -sc, sc, rng));
  const double so = 1.0 / std::sqrt(static_cast<double>(d_att));
  w.out = store.create(name + ".o", uniform({d_in, d_att}, -so, so, rng));
  w.out_bias = store.create(name + ".o_bias", Tensor({d_in}));
  w.query_adapter = make_adapter(store, name + ".lora_q", d_in, d_att, rank, rng);
  w.key_adapter = make_adapter(store, name + ".lora_k", d_ctx, d_att, rank, rng);
  w.value_adapter = make_adapter(store, name + ".lora_v", d_ctx, d_att, rank, rng);
  w.heads = heads;
  return w;
}

ad::Var conditioned_projection(const ad::Var& weight, const LowRankAdapter& adapter, const ad::Var& tokens,
                               const ad::Var& z, double s) {
  ad::Var base = ad::linear(tokens, weight);
  if (s == 0.0) return base;
  const int64_t l = tokens.dim(0);
  ad::Var zb = ad::matmul(ad::Var(Tensor({l, 1}, 1.0)), ad::reshape(z, {1, conditioning::kConditionDim}));
  ad::Var hz = ad::concat({tokens, zb}, 1);
  ad::Var delta = ad::linear(ad::linear(hz, adapter.down), adapter.up);
  return ad::add(base, ad::scale(delta, s));
}

ad::Var attend_across_frames(const ad::Var& h, const ad::Var& z, const AttentionWeights& w) {
  MVD_REQUIRE(h.shape().size() == 4, "cross-frame attention expects [N, C, H, W]");
  MVD_REQUIRE(z.dim(0) == h.dim(0) && z.dim(1) == conditioning::kConditionDim,
              "cross-frame attention expects one 10-d condition per frame");
  const int64_t n = h.dim(0);
  std::vector<ad::Var> q(n), k(n), v(n);
  for (int64_t i = 0; i < n; ++i) {
    ad::Var x = frame_tokens(h, i);
    ad::Var zi = ad::slice(z, 0, i, i + 1);
    q[i] = conditioned_projection(w.query, w.query_adapter, x, zi, w.adapter_scale);
    k[i] = conditioned_projection(w.key, w.key_adapter, x, zi, w.adapter_scale);
    v[i] = conditioned_projection(w.value, w.value_adapter, x, zi, w.adapter_scale);
  }
  std::vector<ad::Var> outs;
  outs.reserve(n);
  for (int64_t i = 0; i < n; ++i) {
    std::vector<ad::Var> ks, vs;
    for (int64_t j = 0; j < n; ++j)
      if (j != i) {
        ks.push_back(k[j]);
        vs.push_back(v[j]);
      }
    if (ks.empty()) {
      ks.push_back(k[i]);
      vs.push_back(v[i]);
    }
    ad::Var kc = ks.size() == 1 ? ks[0] : ad::concat(ks, 0);
    ad::Var vc = vs.size() == 1 ? vs[0] : ad::concat(vs, 0);
    outs.push_back(ad::linear(multi_head(q[i], kc, vc, w.heads), w.out, w.out_bias));
  }
  return tokens_to_frames(n == 1 ? outs[0] : ad::concat(outs, 0), h.shape());
}

ad::Var cross_frame_attention(const ad::Var& h, const ad::Var& z, const AttentionWeights& w) {
  return ad::add(h, attend_across_frames(h, z, w));
}

ad::Var attend_caption(const ad::Var& h, const ad::Var& caption, const ad::Var& z, const AttentionWeights& w) {
  if (!caption.defined() || caption.numel() == 0) return ad::Var();
  const int64_t n = h.dim(0);
  std::vector<ad::Var> outs;
  for (int64_t i = 0; i < n; ++i) {
    ad::Var x = frame_tokens(h, i);
    ad::Var zi = ad::slice(z, 0, i, i + 1);
    ad::Var q = conditioned_projection(w.query, w.query_adapter, x, zi, w.adapter_scale);
    ad::Var k = conditioned_projection(w.key, w.key_adapter, caption, zi, w.adapter_scale);
    ad::Var v = conditioned_projection(w.value, w.value_adapter, caption, zi, w.adapter_scale);
    outs.push_back(ad::linear(multi_head(q, k, v, w.heads), w.out, w.out_bias));
  }
  return tokens_to_frames(n == 1 ? outs[0] : ad::concat(outs, 0), h.shape());
}

ad::Var caption_cross_attention(const ad::Var& h, const ad::Var& caption, const ad::Var& z,
                                const AttentionWeights& w) {
  ad::Var delta = attend_caption(h, caption, z, w);
  return delta.defined() ? ad::add(h, delta) : h;
}

}  // namespace mvdiff::attention
