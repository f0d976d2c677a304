#pragma once

// HP-ViT+-style hand pose network at desk scale: two parallel image
// pathways (a ViT stack over 16x16 patch tokens and a hierarchical
// ConvNeXt-style stack), each feeding its own transformer keypoint
// decoder and MLP head that regress 21 joints (mm, ego-camera frame)
// plus a sigmoid confidence score. Pathway predictions are fused by a
// score-weighted sum.

#include <array>
#include <string>
#include <vector>

#include "egopose/metrics.hpp"
#include "egopose/nn.hpp"

namespace egopose::hand {

using ad::Param;
using ad::ParamStore;
using ad::Tape;
using ad::Var;

/// (h*w) x 3 channel-last image, values in [0,1], pixel index y*w + x.
template <class S>
struct ImageTensor {
  int h = 0;
  int w = 0;
  Mat<S> data;

  void validate() const {
    if (h <= 0 || w <= 0 || h % 16 != 0 || w % 16 != 0)
      throw ShapeError("image dims must be positive multiples of 16");
    if (data.rows() != static_cast<long>(h) * w || data.cols() != 3)
      throw ShapeError("image buffer must be (h*w) x 3");
    if (!data.allFinite()) throw InvalidInput("non-finite image values");
  }

  template <class T>
  ImageTensor<T> cast() const {
    return ImageTensor<T>{h, w, data.template cast<T>()};
  }
};

using ImageTensord = ImageTensor<double>;

/// Mirror about the vertical axis; channels are untouched.
template <class S>
ImageTensor<S> flip_horizontal(const ImageTensor<S>& img) {
  ImageTensor<S> out{img.h, img.w, Mat<S>(img.data.rows(), 3)};
  for (int y = 0; y < img.h; ++y)
    for (int x = 0; x < img.w; ++x)
      out.data.row(y * img.w + (img.w - 1 - x)) = img.data.row(y * img.w + x);
  return out;
}

enum class Pathway { VIT, CONVNEXT, FUSED };

inline const char* to_string(Pathway p) {
  switch (p) {
    case Pathway::VIT: return "vit";
    case Pathway::CONVNEXT: return "convnext";
    case Pathway::FUSED: return "fused";
  }
  return "?";
}

struct HandModelConfig {
  int image_h = 64;
  int image_w = 64;
  int embed_dim = 64;
  int vit_depth = 4;
  int vit_heads = 4;
  std::array<int, 4> conv_stage_widths{32, 64, 96, 128};
  std::array<int, 4> conv_stage_depths{1, 1, 1, 1};
  int decoder_depth = 2;
  int decoder_heads = 4;
  int num_joints = 21;
  int patch_size = 16;
  /// Fixed architectural gain from head activations to millimeters.
  double output_scale_mm = 200.0;
  /// Score-head auxiliary target is exp(-mpjpe / tau).
  double score_tau_mm = 20.0;
  double score_loss_weight = 0.1;
  uint64_t init_seed = 1;

  void validate() const {
    if (num_joints != 21) throw InvalidInput("hand model requires 21 joints");
    if (patch_size != 16) throw InvalidInput("patch size is fixed at 16");
    if (embed_dim % vit_heads != 0 || embed_dim % decoder_heads != 0)
      throw InvalidInput("embed_dim must divide both head counts");
    if (image_h % patch_size != 0 || image_w % patch_size != 0)
      throw ShapeError("image dims must be divisible by the patch size");
    for (int wdt : conv_stage_widths)
      if (wdt <= 0) throw InvalidInput("conv stage widths must be positive");
  }
};

template <class S>
struct HandSample {
  ImageTensor<S> image;
  Pose3<S> pose;  // HAND21, mm
  std::string id;
};

struct HandPrediction {
  Pose3d keypoints;  // HAND21, mm
  double score = 0.0;
  Pathway pathway = Pathway::FUSED;
};

/// Per-pathway predictions plus the score-weighted fusion.
struct HandTriple {
  HandPrediction vit;
  HandPrediction convnext;
  HandPrediction fused;
};

/// Score-weighted keypoint fusion: (s_v Y_v + s_c Y_c) / (s_v + s_c),
/// computed as Y_v + c (Y_c - Y_v) so identical inputs fuse bit-exactly.
/// The fused score is the max of the member scores.
inline HandPrediction fuse_pathways(const HandPrediction& vit,
                                    const HandPrediction& convnext) {
  const double total = vit.score + convnext.score;
  if (!(total > 0.0)) throw ZeroWeight("pathway scores sum to zero");
  const double c = convnext.score / total;
  HandPrediction fused;
  fused.keypoints = vit.keypoints;
  fused.keypoints.joints =
      vit.keypoints.joints + c * (convnext.keypoints.joints - vit.keypoints.joints);
  fused.score = std::max(vit.score, convnext.score);
  fused.pathway = Pathway::FUSED;
  return fused;
}

template <class S>
class HandModel {
 public:
  struct Decoded {
    Var<S> keypoints;  // 21 x 3 (mm)
    Var<S> score;      // 1 x 1 in (0,1)
  };

  struct ForwardVars {
    Var<S> vit_tokens;
    Var<S> conv_tokens;
    Decoded vit;
    Decoded convnext;
  };

  explicit HandModel(const HandModelConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(cfg_.init_seed);
    const int c = cfg_.embed_dim;

    patch_ = nn::PatchEmbed<S>(store_, rng, "vit.patch", cfg_.image_h,
                               cfg_.image_w, cfg_.patch_size, c);
    for (int d = 0; d < cfg_.vit_depth; ++d)
      vit_blocks_.emplace_back(store_, rng, "vit.block" + std::to_string(d), c,
                               cfg_.vit_heads, 4 * c);

    // ConvNeXt pathway: stem /4, then x2 downsamples between stages. The
    // stage-3 (1/16) map is what the decoder consumes; stage 4 completes
    // the hierarchy at 1/32.
    const auto& widths = cfg_.conv_stage_widths;
    stem_ = nn::Conv<S>(store_, rng, "conv.stem", 3, widths[0], {1, 4, 4},
                        {1, 4, 4}, {0, 0, 0});
    for (int s = 0; s < 4; ++s) {
      if (s > 0)
        downs_.emplace_back(store_, rng, "conv.down" + std::to_string(s),
                            widths[s - 1], widths[s], std::array<int, 3>{1, 2, 2},
                            std::array<int, 3>{1, 2, 2}, std::array<int, 3>{0, 0, 0});
      for (int d = 0; d < cfg_.conv_stage_depths[static_cast<size_t>(s)]; ++d)
        stage_blocks_[static_cast<size_t>(s)].emplace_back(
            store_, rng,
            "conv.stage" + std::to_string(s) + ".block" + std::to_string(d),
            widths[s]);
    }
    conv_proj_ = nn::Dense<S>(store_, rng, "conv.proj", widths[2], c);

    build_decoder(rng, "vit_decoder", vit_dec_);
    build_decoder(rng, "conv_decoder", conv_dec_);
  }

  const HandModelConfig& config() const { return cfg_; }
  ParamStore<S>& params() { return store_; }

  /// Patch embedding incl. positional embedding: tokens x embed_dim.
  Var<S> patch_tokens(Tape<S>& t, const ImageTensor<S>& image) {
    check_image(image);
    return patch_.forward(t, t.constant(image.data));
  }

  /// ViT pathway: patch tokens through vit_depth pre-norm blocks.
  /// Token row i corresponds to grid cell (i / (w/16), i % (w/16)).
  Var<S> vit_features(Tape<S>& t, const ImageTensor<S>& image) {
    Var<S> x = patch_tokens(t, image);
    for (const auto& block : vit_blocks_) x = block.forward(t, x);
    return x;
  }

  /// ConvNeXt pathway 1/16 feature map projected to embed_dim.
  Var<S> convnext_features(Tape<S>& t, const ImageTensor<S>& image) {
    check_image(image);
    nn::GridShape grid{1, image.h, image.w, 3};
    Var<S> x = stem_.forward(t, t.constant(image.data), grid);
    grid = stem_.out_shape(grid);
    Var<S> tap = nullptr;
    for (int s = 0; s < 4; ++s) {
      if (s > 0) {
        x = downs_[static_cast<size_t>(s) - 1].forward(t, x, grid);
        grid = downs_[static_cast<size_t>(s) - 1].out_shape(grid);
      }
      for (const auto& block : stage_blocks_[static_cast<size_t>(s)])
        x = block.forward(t, x, grid);
      if (s == 2) tap = x;  // 1/16 resolution
    }
    return conv_proj_.forward(t, tap);
  }

  /// Stage-1 (1/4 grid) activations, for receptive-field tests.
  Var<S> convnext_stage1(Tape<S>& t, const ImageTensor<S>& image) {
    check_image(image);
    nn::GridShape grid{1, image.h, image.w, 3};
    Var<S> x = stem_.forward(t, t.constant(image.data), grid);
    grid = stem_.out_shape(grid);
    for (const auto& block : stage_blocks_[0]) x = block.forward(t, x, grid);
    return x;
  }

  /// Keypoint decoder: 21 joint queries cross-attend to the feature
  /// tokens; an MLP head maps each query to (x,y,z) mm and a pooled head
  /// to the sigmoid confidence score.
  Decoded decode(Tape<S>& t, Var<S> features, Pathway which) {
    if (!features->value.allFinite())
      throw InvalidFeatures("non-finite feature map");
    DecoderHead& dec = which == Pathway::VIT ? vit_dec_ : conv_dec_;
    Var<S> q = t.leaf(*dec.queries);
    for (const auto& block : dec.blocks) q = block.forward(t, q, features);
    q = dec.final_ln.forward(t, q);
    Var<S> keypoints = ad::scale(t, dec.keypoint_head.forward(t, q),
                                 static_cast<S>(cfg_.output_scale_mm));
    Var<S> score = ad::sigmoid(t, dec.score_head.forward(t, ad::mean_rows(t, q)));
    return Decoded{keypoints, score};
  }

  /// Both pathways plus their decoded predictions on one tape.
  ForwardVars forward(Tape<S>& t, const ImageTensor<S>& image) {
    ForwardVars out;
    out.vit_tokens = vit_features(t, image);
    out.conv_tokens = convnext_features(t, image);
    out.vit = decode(t, out.vit_tokens, Pathway::VIT);
    out.convnext = decode(t, out.conv_tokens, Pathway::CONVNEXT);
    return out;
  }

  /// Inference: per-pathway predictions and the score-weighted fusion.
  HandTriple predict(const ImageTensor<S>& image) {
    Tape<S> tape;
    ForwardVars f = forward(tape, image);
    HandTriple triple;
    triple.vit = to_prediction(f.vit, Pathway::VIT);
    triple.convnext = to_prediction(f.convnext, Pathway::CONVNEXT);
    triple.fused = fuse_pathways(triple.vit, triple.convnext);
    return triple;
  }

  /// Training loss: MPJPE of both pathways plus the auxiliary score loss
  /// against exp(-mpjpe/tau) targets (treated as constants).
  Var<S> loss(Tape<S>& t, const HandSample<S>& sample) {
    ForwardVars f = forward(t, sample.image);
    const Mat<S> gt = sample.pose.joints;
    Var<S> loss_v = ad::mpjpe_to_target(t, f.vit.keypoints, gt);
    Var<S> loss_c = ad::mpjpe_to_target(t, f.convnext.keypoints, gt);
    Var<S> total = ad::add(t, loss_v, loss_c);
    if (cfg_.score_loss_weight > 0.0) {
      Mat<S> target_v(1, 1), target_c(1, 1);
      target_v(0, 0) = static_cast<S>(
          std::exp(-double(loss_v->value(0, 0)) / cfg_.score_tau_mm));
      target_c(0, 0) = static_cast<S>(
          std::exp(-double(loss_c->value(0, 0)) / cfg_.score_tau_mm));
      Var<S> score_loss = ad::add(t, ad::mse_to_target(t, f.vit.score, target_v),
                                  ad::mse_to_target(t, f.convnext.score, target_c));
      total = ad::add(t, total,
                      ad::scale(t, score_loss,
                                static_cast<S>(cfg_.score_loss_weight)));
    }
    return total;
  }

  /// Fully differentiable loss for finite-difference checks: the MPJPE
  /// terms plus score MSE against fixed 0.5 targets, so every parameter
  /// (score heads included) is exercised without stop-gradient targets.
  Var<S> grad_check_loss(Tape<S>& t, const HandSample<S>& sample) {
    ForwardVars f = forward(t, sample.image);
    const Mat<S> gt = sample.pose.joints;
    Mat<S> half = Mat<S>::Constant(1, 1, S(0.5));
    Var<S> total = ad::add(t, ad::mpjpe_to_target(t, f.vit.keypoints, gt),
                           ad::mpjpe_to_target(t, f.convnext.keypoints, gt));
    Var<S> score_terms = ad::add(t, ad::mse_to_target(t, f.vit.score, half),
                                 ad::mse_to_target(t, f.convnext.score, half));
    return ad::add(t, total, score_terms);
  }

  /// Validation objective: fused-prediction MPJPE in mm.
  double validation_objective(const std::vector<HandSample<S>>& samples) {
    double total = 0.0;
    for (const auto& s : samples) {
      HandTriple triple = predict(s.image);
      total += static_cast<double>(
          mpjpe(triple.fused.keypoints, s.pose.template cast<double>()));
    }
    return total / static_cast<double>(samples.size());
  }

 private:
  struct DecoderHead {
    Param<S>* queries = nullptr;
    std::vector<nn::DecoderBlock<S>> blocks;
    nn::LayerNorm<S> final_ln;
    nn::Dense<S> keypoint_head;
    nn::Dense<S> score_head;
  };

  void build_decoder(Rng& rng, const std::string& prefix, DecoderHead& dec) {
    const int c = cfg_.embed_dim;
    dec.queries = &store_.add_normal(prefix + ".queries", cfg_.num_joints, c,
                                     rng, 0.02);
    for (int d = 0; d < cfg_.decoder_depth; ++d)
      dec.blocks.emplace_back(store_, rng,
                              prefix + ".block" + std::to_string(d), c,
                              cfg_.decoder_heads, 4 * c);
    dec.final_ln = nn::LayerNorm<S>(store_, prefix + ".ln", c);
    dec.keypoint_head = nn::Dense<S>(store_, rng, prefix + ".keypoints", c, 3);
    dec.score_head = nn::Dense<S>(store_, rng, prefix + ".score", c, 1);
  }

  void check_image(const ImageTensor<S>& image) const {
    image.validate();
    if (image.h != cfg_.image_h || image.w != cfg_.image_w)
      throw ShapeError("image size does not match the model configuration");
  }

  HandPrediction to_prediction(const Decoded& d, Pathway which) const {
    HandPrediction p;
    p.keypoints.joints = d.keypoints->value.template cast<double>();
    p.keypoints.unit = Unit::mm;
    p.keypoints.joint_set = JointSet::HAND21;
    p.score = static_cast<double>(d.score->value(0, 0));
    p.pathway = which;
    return p;
  }

  HandModelConfig cfg_;
  ParamStore<S> store_;
  nn::PatchEmbed<S> patch_;
  std::vector<nn::EncoderBlock<S>> vit_blocks_;
  nn::Conv<S> stem_;
  std::vector<nn::Conv<S>> downs_;
  std::array<std::vector<nn::ConvNextBlock<S>>, 4> stage_blocks_;
  nn::Dense<S> conv_proj_;
  DecoderHead vit_dec_;
  DecoderHead conv_dec_;
};

}  // namespace egopose::hand
