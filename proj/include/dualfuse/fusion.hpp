#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "dualfuse/layers.hpp"
#include "dualfuse/model.hpp"

namespace dualfuse {

struct EncoderDims {
  std::size_t text_dim = 512;
  std::size_t image_dim = 768;
  std::size_t heads = 4;
  double attn_dropout = 0.05;
  double dropout = 0.1;
};

template <class T>
struct StreamPair {
  Var<T> text;
  Var<T> image;
};

/// One layer of the dual-attention encoder. Which sub-modules exist depends
/// on the variant:
///
///   Full    text: S = SA(T); T' = CMA(S -> I); out_t = LN(T' + S)
///           image: M = MLP(T'); I' = CMA(I -> M); out_i = LN(I' + I)
///   NoCAtt  text: S = SA(T); out_t = LN(S + T)
///           image: I' = SA(I); out_i = LN(I' + I)
///   ICAtt   text as NoCAtt; image: I' = CMA(I -> S); out_i = LN(I' + I)
///   TCAtt   text as Full;   image as NoCAtt
///
/// Residual dropout is applied to the branch output before each add.
template <class T>
class DualAttentionLayer {
 public:
  DualAttentionLayer() = default;
  DualAttentionLayer(const std::string& name, Variant variant, const EncoderDims& d, Rng& rng)
      : variant_(variant), dropout_(d.dropout) {
    text_self_attn = MultiHeadAttention<T>(name + ".text_self_attn", d.text_dim, d.text_dim, d.heads, d.attn_dropout, rng);
    if (has_t2i())
      t2i_cma.emplace(name + ".t2i_cma", d.text_dim, d.image_dim, d.heads, d.attn_dropout, rng);
    text_ln = LayerNorm<T>(name + ".text_ln", d.text_dim);
    if (variant == Variant::kFull) mlp.emplace(name + ".mlp", d.text_dim, d.dropout, rng);
    if (has_i2t())
      i2t_cma.emplace(name + ".i2t_cma", d.image_dim, d.text_dim, d.heads, d.attn_dropout, rng);
    else
      image_self_attn.emplace(name + ".image_self_attn", d.image_dim, d.image_dim, d.heads, d.attn_dropout, rng);
    image_ln = LayerNorm<T>(name + ".image_ln", d.image_dim);
  }

  Variant variant() const { return variant_; }
  bool has_t2i() const { return variant_ == Variant::kFull || variant_ == Variant::kTCAtt; }
  bool has_i2t() const { return variant_ == Variant::kFull || variant_ == Variant::kICAtt; }

  /// text: [B, L_t, D_t], image: [B, L_i, D_i]; both shapes are preserved.
  StreamPair<T> forward(Context<T>& ctx, const Var<T>& text, const Var<T>& image) const {
    const bool train = ctx.training();
    auto drop = [&](const Var<T>& x) { return dropout(x, dropout_, train, ctx.rng()); };

    auto refined = self_attention(ctx, text_self_attn, text);
    Var<T> text_out;
    Var<T> image_ref;
    if (has_t2i()) {
      auto enhanced = cross_modal_attention(ctx, *t2i_cma, refined, image);
      text_out = text_ln.forward(ctx, add(drop(enhanced), refined));
      image_ref = mlp ? mlp->forward(ctx, enhanced) : enhanced;
    } else {
      text_out = text_ln.forward(ctx, add(drop(refined), text));
      image_ref = refined;
    }

    Var<T> image_branch = has_i2t() ? cross_modal_attention(ctx, *i2t_cma, image, image_ref)
                                    : self_attention(ctx, *image_self_attn, image);
    auto image_out = image_ln.forward(ctx, add(drop(image_branch), image));
    return {text_out, image_out};
  }

  ParamList<T> parameters() {
    auto out = text_self_attn.parameters();
    if (t2i_cma) append(out, t2i_cma->parameters());
    append(out, text_ln.parameters());
    if (mlp) append(out, mlp->parameters());
    if (i2t_cma) append(out, i2t_cma->parameters());
    if (image_self_attn) append(out, image_self_attn->parameters());
    append(out, image_ln.parameters());
    return out;
  }

  MultiHeadAttention<T> text_self_attn;
  std::optional<MultiHeadAttention<T>> t2i_cma;
  LayerNorm<T> text_ln;
  std::optional<Mlp<T>> mlp;
  std::optional<MultiHeadAttention<T>> i2t_cma;
  std::optional<MultiHeadAttention<T>> image_self_attn;
  LayerNorm<T> image_ln;

 private:
  Variant variant_ = Variant::kFull;
  double dropout_ = 0.0;
};

/// N stacked layers; layer n consumes both streams produced by layer n-1.
template <class T>
class DualAttentionEncoder {
 public:
  DualAttentionEncoder() = default;
  explicit DualAttentionEncoder(Variant variant) : variant_(variant) {}

  Variant variant() const { return variant_; }

  StreamPair<T> forward(Context<T>& ctx, const Var<T>& text, const Var<T>& image) const {
    StreamPair<T> s{text, image};
    for (const auto& layer : layers) s = layer.forward(ctx, s.text, s.image);
    return s;
  }

  ParamList<T> parameters() {
    ParamList<T> out;
    for (auto& l : layers) append(out, l.parameters());
    return out;
  }

  std::vector<DualAttentionLayer<T>> layers;

 private:
  Variant variant_ = Variant::kFull;
};

template <class T>
DualAttentionEncoder<T> build_variant(Variant variant, const EncoderDims& dims, std::size_t num_layers, Rng& rng) {
  DualAttentionEncoder<T> enc(variant);
  enc.layers.reserve(num_layers);
  for (std::size_t i = 0; i < num_layers; ++i)
    enc.layers.emplace_back("encoder.layers." + std::to_string(i), variant, dims, rng);
  return enc;
}

/// Mean-pools each stream over its sequence axis, concatenates [text, image],
/// then hidden linear + ReLU and the final linear to logits.
template <class T>
class PredictionHead {
 public:
  PredictionHead() = default;
  PredictionHead(std::size_t text_dim, std::size_t image_dim, std::size_t hidden, std::size_t classes, Rng& rng)
      : hidden_layer("head.hidden", text_dim + image_dim, hidden, rng), classifier("head.classifier", hidden, classes, rng) {}

  static Var<T> pool(const Var<T>& text, const Var<T>& image) {
    return concat<T>({mean_axis(text, 1), mean_axis(image, 1)}, 1);
  }

  Var<T> forward(Context<T>& ctx, const Var<T>& pooled) const {
    return classifier.forward(ctx, relu(hidden_layer.forward(ctx, pooled)));
  }

  ParamList<T> parameters() {
    auto out = hidden_layer.parameters();
    append(out, classifier.parameters());
    return out;
  }

  Linear<T> hidden_layer;
  Linear<T> classifier;
};

template <class T>
class FusionModel final : public Model<T> {
 public:
  explicit FusionModel(const ModelSpec& spec) : Model<T>(spec) {
    require(spec.kind == ModelKind::kFusion, ErrorCode::kBadConfig, "FusionModel needs kind=fusion");
    Rng rng(spec.seed);
    const auto& d = spec.dims;
    encoder = build_variant<T>(spec.variant, {d.text_dim, d.image_dim, spec.heads, spec.attn_dropout, spec.dropout},
                               spec.layers, rng);
    head = PredictionHead<T>(d.text_dim, d.image_dim, spec.head_hidden, d.num_classes, rng);
  }

  /// The pooled [text, image] representation, [B, D_t + D_i].
  Var<T> features(Context<T>& ctx, const Var<T>& text, const Var<T>& image) const override {
    this->check_inputs(text, image);
    auto s = encoder.forward(ctx, text, image);
    return PredictionHead<T>::pool(s.text, s.image);
  }

  Var<T> logits(Context<T>& ctx, const Var<T>& text, const Var<T>& image) const override {
    return head.forward(ctx, features(ctx, text, image));
  }

  std::size_t feature_dim() const override { return this->spec().dims.text_dim + this->spec().dims.image_dim; }

  ParamList<T> parameters() override {
    auto out = encoder.parameters();
    append(out, head.parameters());
    return out;
  }

  ParamList<T> backbone_parameters() override { return encoder.parameters(); }

  DualAttentionEncoder<T> encoder;
  PredictionHead<T> head;
};

/// Closed-form parameter count of a FusionModel.
inline std::size_t fusion_parameter_count(const ModelSpec& spec) {
  const std::size_t dt = spec.dims.text_dim, di = spec.dims.image_dim;
  const std::size_t attn_tt = 4 * dt * dt;                       // wq, wk, wv, wo
  const std::size_t attn_ii = 4 * di * di;
  const std::size_t attn_ti = 2 * dt * dt + 2 * di * dt;         // text queries, image keys/values
  const std::size_t attn_it = 2 * di * di + 2 * dt * di;         // image queries, text keys/values
  const std::size_t mlp = dt * 2 * dt + 2 * dt + 2 * dt * dt + dt;
  const std::size_t norms = 2 * dt + 2 * di;
  std::size_t layer = attn_tt + norms;
  switch (spec.variant) {
    case Variant::kFull: layer += attn_ti + mlp + attn_it; break;
    case Variant::kNoCAtt: layer += attn_ii; break;
    case Variant::kICAtt: layer += attn_it; break;
    case Variant::kTCAtt: layer += attn_ti + attn_ii; break;
  }
  const std::size_t h = spec.head_hidden, c = spec.dims.num_classes;
  return spec.layers * layer + (dt + di) * h + h + h * c + c;
}

}  // namespace dualfuse
