#pragma once

// Layer catalog on top of the autodiff tape. Layers register their
// parameters in a ParamStore under a dotted name prefix at construction
// time (which fixes checkpoint order) and are pure functions of
// (parameters, input) afterwards.
//
// Convolutions are expressed as gather + matmul: an integer index map
// (built once per input shape and cached) pulls the im2col matrix out of
// the flattened input, and the kernel is an ordinary weight matrix.

#include <array>
#include <map>
#include <memory>
#include <tuple>
#include <vector>

#include "egopose/tape.hpp"

namespace egopose::nn {

using ad::Param;
using ad::ParamStore;
using ad::Tape;
using ad::Var;

/// Fully connected y = x W + b.
template <class S>
struct Dense {
  Param<S>* w = nullptr;
  Param<S>* b = nullptr;

  Dense() = default;
  Dense(ParamStore<S>& store, Rng& rng, const std::string& prefix, int in,
        int out, double init_std = 0.02) {
    w = &store.add_normal(prefix + ".w", in, out, rng, init_std);
    b = &store.add(prefix + ".b", 1, out);
  }

  Var<S> forward(Tape<S>& t, Var<S> x) const {
    return ad::add_rowvec(t, ad::matmul(t, x, t.leaf(*w)), t.leaf(*b));
  }
};

template <class S>
struct LayerNorm {
  Param<S>* gamma = nullptr;
  Param<S>* beta = nullptr;

  LayerNorm() = default;
  LayerNorm(ParamStore<S>& store, const std::string& prefix, int dim) {
    gamma = &store.add_constant(prefix + ".gamma", 1, dim, S(1));
    beta = &store.add(prefix + ".beta", 1, dim);
  }

  Var<S> forward(Tape<S>& t, Var<S> x) const {
    return ad::layernorm_rows(t, x, t.leaf(*gamma), t.leaf(*beta));
  }
};

/// Multi-head attention; self-attention when queries == memory.
/// When `attn_sink` is set, forward() appends each head's row-stochastic
/// attention matrix (used by the row-sum tests).
template <class S>
struct MultiHeadAttention {
  Dense<S> wq, wk, wv, wo;
  int heads = 1;
  int dim = 0;
  std::vector<Mat<S>>* attn_sink = nullptr;

  MultiHeadAttention() = default;
  MultiHeadAttention(ParamStore<S>& store, Rng& rng, const std::string& prefix,
                     int model_dim, int num_heads)
      : wq(store, rng, prefix + ".wq", model_dim, model_dim),
        wk(store, rng, prefix + ".wk", model_dim, model_dim),
        wv(store, rng, prefix + ".wv", model_dim, model_dim),
        wo(store, rng, prefix + ".wo", model_dim, model_dim),
        heads(num_heads),
        dim(model_dim) {
    if (model_dim % num_heads != 0)
      throw ShapeError("attention dim must divide heads");
  }

  Var<S> forward(Tape<S>& t, Var<S> queries, Var<S> memory) const {
    const int hd = dim / heads;
    Var<S> q = wq.forward(t, queries);
    Var<S> k = wk.forward(t, memory);
    Var<S> v = wv.forward(t, memory);
    std::vector<Var<S>> outs;
    for (int h = 0; h < heads; ++h) {
      Var<S> qh = ad::slice_cols(t, q, h * hd, hd);
      Var<S> kh = ad::slice_cols(t, k, h * hd, hd);
      Var<S> vh = ad::slice_cols(t, v, h * hd, hd);
      Var<S> scores = ad::scale(t, ad::matmul(t, qh, ad::transpose(t, kh)),
                                S(1) / S(std::sqrt(double(hd))));
      Var<S> attn = ad::softmax_rows(t, scores);
      if (attn_sink) attn_sink->push_back(attn->value);
      outs.push_back(ad::matmul(t, attn, vh));
    }
    return wo.forward(t, ad::concat_cols(t, outs));
  }

  Var<S> forward(Tape<S>& t, Var<S> x) const { return forward(t, x, x); }
};

/// Two-layer MLP with GELU, the transformer feed-forward.
template <class S>
struct FeedForward {
  Dense<S> fc1, fc2;

  FeedForward() = default;
  FeedForward(ParamStore<S>& store, Rng& rng, const std::string& prefix,
              int dim, int hidden)
      : fc1(store, rng, prefix + ".fc1", dim, hidden),
        fc2(store, rng, prefix + ".fc2", hidden, dim) {}

  Var<S> forward(Tape<S>& t, Var<S> x) const {
    return fc2.forward(t, ad::gelu(t, fc1.forward(t, x)));
  }
};

/// Pre-norm encoder block: x += attn(LN(x)); x += mlp(LN(x)).
template <class S>
struct EncoderBlock {
  LayerNorm<S> ln1, ln2;
  MultiHeadAttention<S> attn;
  FeedForward<S> mlp;

  EncoderBlock() = default;
  EncoderBlock(ParamStore<S>& store, Rng& rng, const std::string& prefix,
               int dim, int heads, int mlp_hidden)
      : ln1(store, prefix + ".ln1", dim),
        ln2(store, prefix + ".ln2", dim),
        attn(store, rng, prefix + ".attn", dim, heads),
        mlp(store, rng, prefix + ".mlp", dim, mlp_hidden) {}

  Var<S> forward(Tape<S>& t, Var<S> x) const {
    x = ad::add(t, x, attn.forward(t, ln1.forward(t, x)));
    x = ad::add(t, x, mlp.forward(t, ln2.forward(t, x)));
    return x;
  }
};

/// Pre-norm decoder block: query self-attention, cross-attention into the
/// feature memory, then the feed-forward.
template <class S>
struct DecoderBlock {
  LayerNorm<S> ln1, ln2, ln3;
  MultiHeadAttention<S> self_attn, cross_attn;
  FeedForward<S> mlp;

  DecoderBlock() = default;
  DecoderBlock(ParamStore<S>& store, Rng& rng, const std::string& prefix,
               int dim, int heads, int mlp_hidden)
      : ln1(store, prefix + ".ln1", dim),
        ln2(store, prefix + ".ln2", dim),
        ln3(store, prefix + ".ln3", dim),
        self_attn(store, rng, prefix + ".self_attn", dim, heads),
        cross_attn(store, rng, prefix + ".cross_attn", dim, heads),
        mlp(store, rng, prefix + ".mlp", dim, mlp_hidden) {}

  Var<S> forward(Tape<S>& t, Var<S> queries, Var<S> memory) const {
    queries = ad::add(t, queries, self_attn.forward(t, ln1.forward(t, queries)));
    queries = ad::add(
        t, queries, cross_attn.forward(t, ln2.forward(t, queries), memory));
    queries = ad::add(t, queries, mlp.forward(t, ln3.forward(t, queries)));
    return queries;
  }
};

// ---------------------------------------------------------------------------
// Convolution index maps
// ---------------------------------------------------------------------------

struct GridShape {
  int t = 1, h = 0, w = 0, channels = 0;
};

/// Index map for dense 3D/2D convolution as im2col. Rows enumerate output
/// positions (t, y, x row-major), columns enumerate (c_in, kt, ky, kx).
/// -1 marks zero padding. 2D convolution is the t==1, kt==1 case.
inline std::shared_ptr<MatXi> conv_index_map(const GridShape& in, int kt,
                                             int kh, int kw, int st, int sh,
                                             int sw, int pt, int ph, int pw) {
  const int to = (in.t + 2 * pt - kt) / st + 1;
  const int ho = (in.h + 2 * ph - kh) / sh + 1;
  const int wo = (in.w + 2 * pw - kw) / sw + 1;
  const int taps = in.channels * kt * kh * kw;
  auto idx = std::make_shared<MatXi>(to * ho * wo, taps);
  const int plane = in.t * in.h * in.w;
  for (int ot = 0; ot < to; ++ot)
    for (int oy = 0; oy < ho; ++oy)
      for (int ox = 0; ox < wo; ++ox) {
        const int row = (ot * ho + oy) * wo + ox;
        for (int c = 0; c < in.channels; ++c)
          for (int dt = 0; dt < kt; ++dt)
            for (int dy = 0; dy < kh; ++dy)
              for (int dx = 0; dx < kw; ++dx) {
                const int col = ((c * kt + dt) * kh + dy) * kw + dx;
                const int it = ot * st - pt + dt;
                const int iy = oy * sh - ph + dy;
                const int ix = ox * sw - pw + dx;
                const bool inside = it >= 0 && it < in.t && iy >= 0 &&
                                    iy < in.h && ix >= 0 && ix < in.w;
                (*idx)(row, col) =
                    inside ? c * plane + (it * in.h + iy) * in.w + ix : -1;
              }
      }
  return idx;
}

/// Index map for depthwise 2D convolution. Rows enumerate (c, y, x) with
/// the channel outermost, matching the reshape from (P*C)x1 back to PxC;
/// columns enumerate kernel taps (ky, kx).
inline std::shared_ptr<MatXi> depthwise_index_map(const GridShape& in, int kh,
                                                  int kw, int ph, int pw) {
  const int ho = in.h + 2 * ph - kh + 1;
  const int wo = in.w + 2 * pw - kw + 1;
  const int positions = ho * wo;
  auto idx = std::make_shared<MatXi>(in.channels * positions, kh * kw);
  for (int c = 0; c < in.channels; ++c)
    for (int oy = 0; oy < ho; ++oy)
      for (int ox = 0; ox < wo; ++ox) {
        const int row = c * positions + oy * wo + ox;
        for (int dy = 0; dy < kh; ++dy)
          for (int dx = 0; dx < kw; ++dx) {
            const int iy = oy - ph + dy;
            const int ix = ox - pw + dx;
            const bool inside = iy >= 0 && iy < in.h && ix >= 0 && ix < in.w;
            (*idx)(row, dy * kw + dx) =
                inside ? (c * in.h + iy) * in.w + ix : -1;
          }
      }
  return idx;
}

/// Dense convolution over a (t*h*w) x C input laid out channel-last; the
/// node entering it must be a flat (t*h*w*C) x 1 column or a matrix whose
/// column-major flat order matches (channel plane outermost).
template <class S>
struct Conv {
  Param<S>* kernel = nullptr;  // (C_in*kt*kh*kw) x C_out
  Param<S>* bias = nullptr;
  int kt, kh, kw, st, sh, sw, pt, ph, pw;
  int c_in = 0, c_out = 0;
  mutable std::map<std::tuple<int, int, int>, std::shared_ptr<MatXi>> cache;

  Conv() = default;
  Conv(ParamStore<S>& store, Rng& rng, const std::string& prefix, int cin,
       int cout, std::array<int, 3> kernel_thw, std::array<int, 3> stride_thw,
       std::array<int, 3> pad_thw)
      : kt(kernel_thw[0]), kh(kernel_thw[1]), kw(kernel_thw[2]),
        st(stride_thw[0]), sh(stride_thw[1]), sw(stride_thw[2]),
        pt(pad_thw[0]), ph(pad_thw[1]), pw(pad_thw[2]),
        c_in(cin), c_out(cout) {
    const int fan_in = cin * kt * kh * kw;
    kernel = &store.add_normal(prefix + ".kernel", fan_in, cout, rng,
                               std::sqrt(2.0 / fan_in));
    bias = &store.add(prefix + ".bias", 1, cout);
  }

  GridShape out_shape(const GridShape& in) const {
    return GridShape{(in.t + 2 * pt - kt) / st + 1,
                     (in.h + 2 * ph - kh) / sh + 1,
                     (in.w + 2 * pw - kw) / sw + 1, c_out};
  }

  /// x: (t*h*w) x C_in. Returns (t_out*h_out*w_out) x C_out.
  Var<S> forward(Tape<S>& t, Var<S> x, const GridShape& in) const {
    if (in.channels != c_in) throw ShapeError("conv: channel mismatch");
    auto key = std::make_tuple(in.t, in.h, in.w);
    auto it = cache.find(key);
    if (it == cache.end())
      it = cache.emplace(key, conv_index_map(in, kt, kh, kw, st, sh, sw, pt,
                                             ph, pw)).first;
    Var<S> cols = ad::gather(t, x, it->second);
    return ad::add_rowvec(t, ad::matmul(t, cols, t.leaf(*kernel)),
                          t.leaf(*bias));
  }
};

/// Depthwise 2D convolution (stride 1, "same" padding), ConvNeXt-style.
template <class S>
struct DepthwiseConv {
  Param<S>* kernel = nullptr;  // C x (kh*kw)
  Param<S>* bias = nullptr;
  int kh, kw, channels;
  mutable std::map<std::pair<int, int>, std::shared_ptr<MatXi>> cache;

  DepthwiseConv() = default;
  DepthwiseConv(ParamStore<S>& store, Rng& rng, const std::string& prefix,
                int c, int k)
      : kh(k), kw(k), channels(c) {
    kernel = &store.add_normal(prefix + ".kernel", c, k * k, rng,
                               std::sqrt(2.0 / (k * k)));
    bias = &store.add(prefix + ".bias", 1, c);
  }

  /// x: (h*w) x C -> same shape (padding preserves the grid).
  Var<S> forward(Tape<S>& t, Var<S> x, const GridShape& in) const {
    if (in.channels != channels) throw ShapeError("depthwise: channel mismatch");
    auto key = std::make_pair(in.h, in.w);
    auto it = cache.find(key);
    if (it == cache.end())
      it = cache.emplace(key, depthwise_index_map(in, kh, kw, (kh - 1) / 2,
                                                  (kw - 1) / 2)).first;
    const int positions = in.h * in.w;
    Var<S> taps = ad::gather(t, x, it->second);  // (C*P) x (kh*kw)
    Var<S> weights = ad::repeat_rows(t, t.leaf(*kernel), positions);
    Var<S> summed = ad::rowwise_sum(t, ad::hadamard(t, taps, weights));
    // (C*P)x1 in channel-major order is exactly the column-major PxC layout.
    Var<S> grid = ad::reshape(t, summed, positions, channels);
    return ad::add_rowvec(t, grid, t.leaf(*bias));
  }
};

/// ConvNeXt-flavored block: depthwise 7x7, LayerNorm, pointwise expansion
/// with GELU, pointwise projection, residual.
template <class S>
struct ConvNextBlock {
  DepthwiseConv<S> dw;
  LayerNorm<S> ln;
  Dense<S> pw1, pw2;

  ConvNextBlock() = default;
  ConvNextBlock(ParamStore<S>& store, Rng& rng, const std::string& prefix,
                int dim, int expansion = 4)
      : dw(store, rng, prefix + ".dw", dim, 7),
        ln(store, prefix + ".ln", dim),
        pw1(store, rng, prefix + ".pw1", dim, dim * expansion),
        pw2(store, rng, prefix + ".pw2", dim * expansion, dim) {}

  Var<S> forward(Tape<S>& t, Var<S> x, const GridShape& in) const {
    Var<S> y = dw.forward(t, x, in);
    y = ln.forward(t, y);
    y = pw2.forward(t, ad::gelu(t, pw1.forward(t, y)));
    return ad::add(t, x, y);
  }
};

/// 16x16 patch embedding: non-overlapping patches, row-major traversal,
/// linear projection plus a learned positional embedding.
template <class S>
struct PatchEmbed {
  Param<S>* proj = nullptr;  // (patch*patch*3) x dim
  Param<S>* bias = nullptr;
  Param<S>* pos = nullptr;   // tokens x dim, fixed grid
  int patch, dim, grid_h, grid_w;
  std::shared_ptr<MatXi> idx;

  PatchEmbed() = default;
  PatchEmbed(ParamStore<S>& store, Rng& rng, const std::string& prefix,
             int image_h, int image_w, int patch_size, int embed_dim)
      : patch(patch_size), dim(embed_dim), grid_h(image_h / patch_size),
        grid_w(image_w / patch_size) {
    if (image_h % patch_size != 0 || image_w % patch_size != 0)
      throw ShapeError("image dims must be divisible by the patch size");
    const int fan_in = patch_size * patch_size * 3;
    proj = &store.add_normal(prefix + ".proj", fan_in, embed_dim, rng, 0.02);
    bias = &store.add(prefix + ".bias", 1, embed_dim);
    pos = &store.add_normal(prefix + ".pos", grid_h * grid_w, embed_dim, rng,
                            0.02);
    // Patchify is a strided convolution's index map; taps are ordered
    // (channel, ky, kx) to match the projection rows.
    idx = conv_index_map(GridShape{1, image_h, image_w, 3}, 1, patch_size,
                         patch_size, 1, patch_size, patch_size, 0, 0, 0);
  }

  int tokens() const { return grid_h * grid_w; }

  /// image: (h*w) x 3 in [0,1] -> tokens x dim.
  Var<S> forward(Tape<S>& t, Var<S> image) const {
    Var<S> patches = ad::gather(t, image, idx);
    Var<S> emb = ad::add_rowvec(t, ad::matmul(t, patches, t.leaf(*proj)),
                                t.leaf(*bias));
    return ad::add(t, emb, t.leaf(*pos));
  }
};

}  // namespace egopose::nn
