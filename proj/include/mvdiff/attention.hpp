#pragma once

#include <string>

#include "mvdiff/nn.hpp"

namespace mvdiff::attention {

// Low-rank adapter W' = up * down acting on [h; z].
struct LowRankAdapter {
  ad::Var down;  // [rank, d_in + 10]
  ad::Var up;    // [d_out, rank], zero at construction
};

struct AttentionWeights {
  ad::Var query, key, value;  // [d_att, d_in] (key/value take d_ctx for caption attention)
  ad::Var out, out_bias;      // [d_in, d_att], [d_in]
  LowRankAdapter query_adapter, key_adapter, value_adapter;
  double adapter_scale = 1.0;  // s
  int heads = 1;

  // d_ctx is the feature width of the key/value source (d_in for frames,
  // d_txt for caption tokens).
  static AttentionWeights create(nn::ParamStore& store, const std::string& name, int d_in, int d_att, int d_ctx,
                                 int rank, int heads, Rng& rng);
};

// W h + s * W' [h; z] per token. h: [L, d_in], z: [1, 10].
ad::Var conditioned_projection(const ad::Var& weight, const LowRankAdapter& adapter, const ad::Var& tokens,
                               const ad::Var& z, double s);

// The attention branch without the residual: for each frame i, queries from
// frame i and keys/values from every other frame (ascending index), each
// projected with its own condition. A single frame attends to itself.
// h: [N, C, H, W], z: [N, 10].
ad::Var attend_across_frames(const ad::Var& h, const ad::Var& z, const AttentionWeights& w);

// h + attend_across_frames(h, z, w)
ad::Var cross_frame_attention(const ad::Var& h, const ad::Var& z, const AttentionWeights& w);

// Spatial tokens of every frame attend to the shared caption tokens [L, d_txt],
// with the frame's condition injected into Q, K and V. No residual.
// An empty caption returns an undefined Var (callers skip the branch).
ad::Var attend_caption(const ad::Var& h, const ad::Var& caption, const ad::Var& z, const AttentionWeights& w);

// h + attend_caption(h, caption, z, w); identity when the caption is empty.
ad::Var caption_cross_attention(const ad::Var& h, const ad::Var& caption, const ad::Var& z,
                                const AttentionWeights& w);

}  // namespace mvdiff::attention
