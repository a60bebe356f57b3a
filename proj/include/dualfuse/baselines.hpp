#pragma once

#include <string>

#include "dualfuse/layers.hpp"
#include "dualfuse/model.hpp"

namespace dualfuse {

/// Output extent after conv(k=3, s=1) + maxpool(2), twice.
constexpr std::size_t cnn_trunk_extent(std::size_t length) {
  return window_out(window_out(length, 3, 1) / 2, 3, 1) / 2;
}

/// Two conv(3) + pool(2) stages need at least 10 positions along an axis.
inline void require_trunk_fits(std::size_t length, const char* what) {
  require(length >= 10, ErrorCode::kKernelTooLarge,
          std::string(what) + " extent " + std::to_string(length) + " too small for the CNN trunk (needs >= 10)");
}

/// conv (stride 1) + ReLU + max-pool(2); works for [B, H, W, C] and [B, L, C].
template <class T, class Conv>
Var<T> conv_pool_stage(Context<T>& ctx, const Conv& conv, const Var<T>& x) {
  auto h = relu(conv.forward(ctx, x));
  return x.shape().size() == 4 ? maxpool2d(h, 2, 2) : maxpool1d(h, 2);
}

/// Dense tail shared by all CNN trunks: flatten -> 1024 -> 512, ReLU after each.
template <class T>
class DenseTail {
 public:
  static constexpr std::size_t kHidden = 1024;
  static constexpr std::size_t kFeatures = 512;

  DenseTail() = default;
  DenseTail(const std::string& name, std::size_t flat, Rng& rng)
      : fc1(name + ".fc1", flat, kHidden, rng), fc2(name + ".fc2", kHidden, kFeatures, rng) {}

  Var<T> forward(Context<T>& ctx, const Var<T>& x) const {
    auto flat = reshape(x, {x.dim(0), x.value().size() / x.dim(0)});
    return relu(fc2.forward(ctx, relu(fc1.forward(ctx, flat))));
  }

  ParamList<T> parameters() {
    auto out = fc1.parameters();
    append(out, fc2.parameters());
    return out;
  }

  Linear<T> fc1, fc2;
};

/// conv2d(128, k3) + ReLU + pool2 -> conv2d(256, k3) + ReLU + pool2 -> dense tail.
/// Input [B, H, W, C]; output [B, 512].
template <class T>
class CnnTrunk2d {
 public:
  static constexpr std::size_t kFilters1 = 128;
  static constexpr std::size_t kFilters2 = 256;

  CnnTrunk2d() = default;
  CnnTrunk2d(const std::string& name, std::size_t height, std::size_t width, std::size_t channels, Rng& rng) {
    require_trunk_fits(height, "height");
    require_trunk_fits(width, "width");
    conv1 = Conv2dLayer<T>(name + ".conv1", channels, kFilters1, 3, 1, rng);
    conv2 = Conv2dLayer<T>(name + ".conv2", kFilters1, kFilters2, 3, 1, rng);
    tail = DenseTail<T>(name, flat_size(height, width), rng);
  }

  static std::size_t flat_size(std::size_t height, std::size_t width) {
    return cnn_trunk_extent(height) * cnn_trunk_extent(width) * kFilters2;
  }

  Var<T> forward(Context<T>& ctx, const Var<T>& x) const {
    return tail.forward(ctx, conv_pool_stage(ctx, conv2, conv_pool_stage(ctx, conv1, x)));
  }

  ParamList<T> parameters() {
    auto out = conv1.parameters();
    append(out, conv2.parameters());
    append(out, tail.parameters());
    return out;
  }

  Conv2dLayer<T> conv1, conv2;
  DenseTail<T> tail;
};

/// conv1d(64, k3) + ReLU + pool2 -> conv1d(128, k3) + ReLU + pool2 -> dense tail.
/// Input [B, L, C]; output [B, 512].
template <class T>
class CnnTrunk1d {
 public:
  static constexpr std::size_t kFilters1 = 64;
  static constexpr std::size_t kFilters2 = 128;

  CnnTrunk1d() = default;
  CnnTrunk1d(const std::string& name, std::size_t length, std::size_t channels, Rng& rng) {
    require_trunk_fits(length, "sequence");
    conv1 = Conv1dLayer<T>(name + ".conv1", channels, kFilters1, 3, 1, rng);
    conv2 = Conv1dLayer<T>(name + ".conv2", kFilters1, kFilters2, 3, 1, rng);
    tail = DenseTail<T>(name, flat_size(length), rng);
  }

  static std::size_t flat_size(std::size_t length) { return cnn_trunk_extent(length) * kFilters2; }

  Var<T> forward(Context<T>& ctx, const Var<T>& x) const {
    return tail.forward(ctx, conv_pool_stage(ctx, conv2, conv_pool_stage(ctx, conv1, x)));
  }

  ParamList<T> parameters() {
    auto out = conv1.parameters();
    append(out, conv2.parameters());
    append(out, tail.parameters());
    return out;
  }

  Conv1dLayer<T> conv1, conv2;
  DenseTail<T> tail;
};

/// IO: the image embedding as a one-channel L_i x D_i grid.
template <class T>
class ImageOnlyModel final : public Model<T> {
 public:
  explicit ImageOnlyModel(const ModelSpec& spec) : Model<T>(spec) {
    Rng rng(spec.seed);
    trunk = CnnTrunk2d<T>("image_cnn", spec.dims.image_len, spec.dims.image_dim, 1, rng);
    classifier = Linear<T>("classifier", DenseTail<T>::kFeatures, spec.dims.num_classes, rng);
  }

  Var<T> features(Context<T>& ctx, const Var<T>& text, const Var<T>& image) const override {
    this->check_inputs(text, image);
    return trunk.forward(ctx, reshape(image, {image.dim(0), image.dim(1), image.dim(2), 1}));
  }
  Var<T> logits(Context<T>& ctx, const Var<T>& text, const Var<T>& image) const override {
    return classifier.forward(ctx, features(ctx, text, image));
  }
  std::size_t feature_dim() const override { return DenseTail<T>::kFeatures; }
  ParamList<T> parameters() override {
    auto out = trunk.parameters();
    append(out, classifier.parameters());
    return out;
  }
  ParamList<T> backbone_parameters() override { return trunk.parameters(); }

  CnnTrunk2d<T> trunk;
  Linear<T> classifier;
};

/// TO: 1-D convolutions along the token axis, token features as channels.
template <class T>
class TextOnlyModel final : public Model<T> {
 public:
  explicit TextOnlyModel(const ModelSpec& spec) : Model<T>(spec) {
    Rng rng(spec.seed);
    trunk = CnnTrunk1d<T>("text_cnn", spec.dims.text_len, spec.dims.text_dim, rng);
    classifier = Linear<T>("classifier", DenseTail<T>::kFeatures, spec.dims.num_classes, rng);
  }

  Var<T> features(Context<T>& ctx, const Var<T>& text, const Var<T>& image) const override {
    this->check_inputs(text, image);
    return trunk.forward(ctx, text);
  }
  Var<T> logits(Context<T>& ctx, const Var<T>& text, const Var<T>& image) const override {
    return classifier.forward(ctx, features(ctx, text, image));
  }
  std::size_t feature_dim() const override { return DenseTail<T>::kFeatures; }
  ParamList<T> parameters() override {
    auto out = trunk.parameters();
    append(out, classifier.parameters());
    return out;
  }
  ParamList<T> backbone_parameters() override { return trunk.parameters(); }

  CnnTrunk1d<T> trunk;
  Linear<T> classifier;
};

/// EF: image rows projected D_i -> D_t, stacked over the text rows into an
/// (L_i + L_t) x D_t grid, then the 2-D trunk.
template <class T>
class EarlyFusionModel final : public Model<T> {
 public:
  explicit EarlyFusionModel(const ModelSpec& spec) : Model<T>(spec) {
    Rng rng(spec.seed);
    const auto& d = spec.dims;
    projection = Linear<T>("projection", d.image_dim, d.text_dim, rng);
    trunk = CnnTrunk2d<T>("fused_cnn", d.image_len + d.text_len, d.text_dim, 1, rng);
    classifier = Linear<T>("classifier", DenseTail<T>::kFeatures, d.num_classes, rng);
  }

  /// [B, L_i + L_t, D_t]
  Var<T> fused_input(Context<T>& ctx, const Var<T>& text, const Var<T>& image) const {
    this->check_inputs(text, image);
    return stack_projected(ctx, projection, text, image);
  }

  /// Image rows mapped through `proj`, followed by the text rows along the sequence axis.
  static Var<T> stack_projected(Context<T>& ctx, const Linear<T>& proj, const Var<T>& text, const Var<T>& image) {
    return concat<T>({proj.forward(ctx, image), text}, 1);
  }

  Var<T> features(Context<T>& ctx, const Var<T>& text, const Var<T>& image) const override {
    auto fused = fused_input(ctx, text, image);
    return trunk.forward(ctx, reshape(fused, {fused.dim(0), fused.dim(1), fused.dim(2), 1}));
  }
  Var<T> logits(Context<T>& ctx, const Var<T>& text, const Var<T>& image) const override {
    return classifier.forward(ctx, features(ctx, text, image));
  }
  std::size_t feature_dim() const override { return DenseTail<T>::kFeatures; }
  ParamList<T> parameters() override {
    auto out = projection.parameters();
    append(out, trunk.parameters());
    append(out, classifier.parameters());
    return out;
  }
  ParamList<T> backbone_parameters() override {
    auto out = projection.parameters();
    append(out, trunk.parameters());
    return out;
  }

  Linear<T> projection;
  CnnTrunk2d<T> trunk;
  Linear<T> classifier;
};

/// LF: separate trunks, f_fusion = alpha * f_image + beta * f_text, shared classifier.
template <class T>
class LateFusionModel final : public Model<T> {
 public:
  explicit LateFusionModel(const ModelSpec& spec) : Model<T>(spec) {
    Rng rng(spec.seed);
    const auto& d = spec.dims;
    image_trunk = CnnTrunk2d<T>("image_cnn", d.image_len, d.image_dim, 1, rng);
    text_trunk = CnnTrunk1d<T>("text_cnn", d.text_len, d.text_dim, rng);
    alpha = {"alpha", Tensor<T>({1}, T(0.5))};
    beta = {"beta", Tensor<T>({1}, T(0.5))};
    classifier = Linear<T>("classifier", DenseTail<T>::kFeatures, d.num_classes, rng);
  }

  Var<T> features(Context<T>& ctx, const Var<T>& text, const Var<T>& image) const override {
    this->check_inputs(text, image);
    auto f_image = image_trunk.forward(ctx, reshape(image, {image.dim(0), image.dim(1), image.dim(2), 1}));
    auto f_text = text_trunk.forward(ctx, text);
    return add(scale_by(f_image, ctx.bind(alpha)), scale_by(f_text, ctx.bind(beta)));
  }
  Var<T> logits(Context<T>& ctx, const Var<T>& text, const Var<T>& image) const override {
    return classifier.forward(ctx, features(ctx, text, image));
  }
  std::size_t feature_dim() const override { return DenseTail<T>::kFeatures; }
  ParamList<T> parameters() override {
    auto out = backbone_parameters();
    append(out, classifier.parameters());
    return out;
  }
  ParamList<T> backbone_parameters() override {
    auto out = image_trunk.parameters();
    append(out, text_trunk.parameters());
    out.push_back(&alpha);
    out.push_back(&beta);
    return out;
  }

  CnnTrunk2d<T> image_trunk;
  CnnTrunk1d<T> text_trunk;
  Parameter<T> alpha, beta;
  Linear<T> classifier;
};

}  // namespace dualfuse
