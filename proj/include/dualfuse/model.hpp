#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <string_view>

#include "dualfuse/context.hpp"
#include "dualfuse/error.hpp"

namespace dualfuse {

enum class ModelKind { kFusion, kImageOnly, kTextOnly, kEarlyFusion, kLateFusion };

/// Structural variants of the dual-attention encoder.
enum class Variant { kFull, kNoCAtt, kICAtt, kTCAtt };

inline std::string_view to_string(ModelKind k) {
  switch (k) {
    case ModelKind::kFusion: return "fusion";
    case ModelKind::kImageOnly: return "io";
    case ModelKind::kTextOnly: return "to";
    case ModelKind::kEarlyFusion: return "ef";
    case ModelKind::kLateFusion: return "lf";
  }
  return "?";
}

inline std::string_view to_string(Variant v) {
  switch (v) {
    case Variant::kFull: return "full";
    case Variant::kNoCAtt: return "nocatt";
    case Variant::kICAtt: return "icatt";
    case Variant::kTCAtt: return "tcatt";
  }
  return "?";
}

inline ModelKind parse_model_kind(std::string_view s) {
  for (auto k : {ModelKind::kFusion, ModelKind::kImageOnly, ModelKind::kTextOnly, ModelKind::kEarlyFusion,
                 ModelKind::kLateFusion})
    if (s == to_string(k)) return k;
  fail(ErrorCode::kBadConfig, "unknown model '" + std::string(s) + "'");
}

inline Variant parse_variant(std::string_view s) {
  for (auto v : {Variant::kFull, Variant::kNoCAtt, Variant::kICAtt, Variant::kTCAtt})
    if (s == to_string(v)) return v;
  fail(ErrorCode::kUnknownVariant, "unknown variant '" + std::string(s) + "'");
}

struct ModelDims {
  std::size_t text_len = 77;
  std::size_t text_dim = 512;
  std::size_t image_len = 197;
  std::size_t image_dim = 768;
  std::size_t num_classes = 2;

  friend bool operator==(const ModelDims&, const ModelDims&) = default;
};

/// Everything needed to rebuild a model; stored in checkpoints.
struct ModelSpec {
  ModelKind kind = ModelKind::kFusion;
  Variant variant = Variant::kFull;
  ModelDims dims;
  std::size_t layers = 2;
  std::size_t heads = 4;
  std::size_t head_hidden = 512;
  double attn_dropout = 0.05;
  double dropout = 0.1;
  std::uint64_t seed = 0;

  friend bool operator==(const ModelSpec&, const ModelSpec&) = default;
};

inline std::string model_label(const ModelSpec& spec) {
  if (spec.kind != ModelKind::kFusion) return std::string(to_string(spec.kind));
  return "fusion-" + std::string(to_string(spec.variant));
}

/// Common surface of every classifier: logits for training/evaluation and
/// the representation fed to the classifier (used as a zero-shot backbone).
template <class T>
class Model {
 public:
  virtual ~Model() = default;

  /// text: [B, L_t, D_t], image: [B, L_i, D_i] -> logits [B, C].
  virtual Var<T> logits(Context<T>& ctx, const Var<T>& text, const Var<T>& image) const = 0;

  /// Representation right before the final classifier, [B, feature_dim()].
  virtual Var<T> features(Context<T>& ctx, const Var<T>& text, const Var<T>& image) const = 0;
  virtual std::size_t feature_dim() const = 0;

  virtual ParamList<T> parameters() = 0;
  /// Parameters that `features` depends on.
  virtual ParamList<T> backbone_parameters() = 0;

  const ModelSpec& spec() const noexcept { return spec_; }

 protected:
  explicit Model(ModelSpec spec) : spec_(spec) {}

  void check_inputs(const Var<T>& text, const Var<T>& image) const {
    const auto& d = spec_.dims;
    require(text.shape().size() == 3 && text.dim(1) == d.text_len && text.dim(2) == d.text_dim,
            ErrorCode::kShapeMismatch,
            "text input " + shape_str(text.shape()) + ", model expects [B, " + std::to_string(d.text_len) + ", " +
                std::to_string(d.text_dim) + "]");
    require(image.shape().size() == 3 && image.dim(1) == d.image_len && image.dim(2) == d.image_dim,
            ErrorCode::kShapeMismatch,
            "image input " + shape_str(image.shape()) + ", model expects [B, " + std::to_string(d.image_len) + ", " +
                std::to_string(d.image_dim) + "]");
    require(text.dim(0) == image.dim(0), ErrorCode::kShapeMismatch, "text and image batch sizes differ");
  }

 private:
  ModelSpec spec_;
};

}  // namespace dualfuse
