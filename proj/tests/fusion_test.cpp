#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "dualfuse/fusion.hpp"
#include "dualfuse/grad_check.hpp"
#include "test_util.hpp"

namespace dualfuse {
namespace {

// Plain row-major matrices for the scripted oracle; nothing here touches the tape.
using Mat = std::vector<std::vector<double>>;

Mat to_mat(const Tensor<double>& t, std::size_t rows, std::size_t cols) {
  Mat m(rows, std::vector<double>(cols));
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) m[r][c] = t[r * cols + c];
  return m;
}

Mat mm(const Mat& a, const Mat& b) {
  Mat out(a.size(), std::vector<double>(b[0].size(), 0.0));
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t k = 0; k < b.size(); ++k)
      for (std::size_t j = 0; j < b[0].size(); ++j) out[i][j] += a[i][k] * b[k][j];
  return out;
}

Mat weight(const Parameter<double>& p) { return to_mat(p.value, p.value.dim(0), p.value.dim(1)); }

Mat plus(Mat a, const Mat& b) {
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < a[i].size(); ++j) a[i][j] += b[i][j];
  return a;
}

Mat linear(const Mat& x, const Linear<double>& l) {
  Mat y = mm(x, weight(l.weight));
  for (auto& row : y)
    for (std::size_t j = 0; j < row.size(); ++j) row[j] += (*l.bias).value[j];
  return y;
}

// Single-head attention: softmax(Xa Wq (Xb Wk)^T / sqrt(D)) Xb Wv Wo.
Mat attend(const Mat& xa, const Mat& xb, const MultiHeadAttention<double>& a) {
  Mat q = mm(xa, weight(a.wq)), k = mm(xb, weight(a.wk)), v = mm(xb, weight(a.wv));
  const double d = static_cast<double>(q[0].size());
  Mat mixed(xa.size(), std::vector<double>(v[0].size(), 0.0));
  for (std::size_t i = 0; i < q.size(); ++i) {
    std::vector<double> s(k.size());
    for (std::size_t j = 0; j < k.size(); ++j)
      s[j] = std::inner_product(q[i].begin(), q[i].end(), k[j].begin(), 0.0) / std::sqrt(d);
    double mx = *std::max_element(s.begin(), s.end()), z = 0;
    for (auto& e : s) z += (e = std::exp(e - mx));
    for (std::size_t j = 0; j < k.size(); ++j)
      for (std::size_t c = 0; c < v[0].size(); ++c) mixed[i][c] += s[j] / z * v[j][c];
  }
  return mm(mixed, weight(a.wo));
}

Mat norm(const Mat& x, const LayerNorm<double>& ln) {
  Mat out = x;
  for (std::size_t r = 0; r < x.size(); ++r) {
    const double n = static_cast<double>(x[r].size());
    double mean = std::accumulate(x[r].begin(), x[r].end(), 0.0) / n, var = 0;
    for (double e : x[r]) var += (e - mean) * (e - mean);
    var /= n;
    for (std::size_t j = 0; j < x[r].size(); ++j)
      out[r][j] = (x[r][j] - mean) / std::sqrt(var + LayerNorm<double>::kEps) * ln.gamma.value[j] + ln.beta.value[j];
  }
  return out;
}

Mat mlp(const Mat& x, const Mlp<double>& m) {
  Mat h = linear(x, m.fc1);
  for (auto& row : h)
    for (auto& e : row) e = std::max(e, 0.0);
  return linear(h, m.fc2);
}

void randomize(ParamList<double> params, std::uint64_t seed) {
  Rng rng(seed);
  for (auto* p : params) p->value = normal_tensor<double>(rng, p->value.shape(), 0.0, 0.4);
}

constexpr EncoderDims kMicro{.text_dim = 8, .image_dim = 12, .heads = 1, .attn_dropout = 0.05, .dropout = 0.1};

TEST(DualAttentionLayer, FullScaleShapes) {
  Rng rng(1);
  DualAttentionLayer<float> layer("layer", Variant::kFull, EncoderDims{}, rng);
  Context<float> ctx;
  auto out = layer.forward(ctx, ctx.constant(normal_tensor<float>(rng, {1, 77, 512}, 0, 1)),
                           ctx.constant(normal_tensor<float>(rng, {1, 197, 768}, 0, 1)));
  EXPECT_EQ(out.text.shape(), (Shape{1, 77, 512}));
  EXPECT_EQ(out.image.shape(), (Shape{1, 197, 768}));
}

TEST(DualAttentionLayer, ZeroInputsAndProjectionsGiveZeros) {
  Rng rng(2);
  DualAttentionLayer<double> layer("layer", Variant::kFull, kMicro, rng);
  for (auto* p : layer.parameters())
    if (p->name.find("_ln.") == std::string::npos) p->value.fill(0.0);
  Context<double> ctx;
  auto out = layer.forward(ctx, ctx.constant(Tensor<double>({1, 3, 8})), ctx.constant(Tensor<double>({1, 5, 12})));
  for (double v : out.text.value().data()) EXPECT_EQ(v, 0.0);
  for (double v : out.image.value().data()) EXPECT_EQ(v, 0.0);
}

TEST(DualAttentionLayer, MatchesScriptedComposition) {
  Rng rng(3);
  DualAttentionLayer<double> layer("layer", Variant::kFull, kMicro, rng);
  randomize(layer.parameters(), 33);
  auto t = normal_tensor<double>(rng, {1, 3, 8}, 0, 1);
  auto i = normal_tensor<double>(rng, {1, 5, 12}, 0, 1);

  Context<double> ctx;
  auto out = layer.forward(ctx, ctx.constant(t), ctx.constant(i));

  const Mat xt = to_mat(t, 3, 8), xi = to_mat(i, 5, 12);
  const Mat s = attend(xt, xt, layer.text_self_attn);
  const Mat t_dot = attend(s, xi, *layer.t2i_cma);
  const Mat t_hat = norm(plus(t_dot, s), layer.text_ln);
  const Mat m = mlp(t_dot, *layer.mlp);
  const Mat i_dot = attend(xi, m, *layer.i2t_cma);
  const Mat i_hat = norm(plus(i_dot, xi), layer.image_ln);

  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t c = 0; c < 8; ++c) EXPECT_NEAR(out.text.value()[r * 8 + c], t_hat[r][c], 1e-10);
  for (std::size_t r = 0; r < 5; ++r)
    for (std::size_t c = 0; c < 12; ++c) EXPECT_NEAR(out.image.value()[r * 12 + c], i_hat[r][c], 1e-10);
}

TEST(DualAttentionLayer, MismatchedInputRejected) {
  Rng rng(4);
  DualAttentionLayer<float> layer("layer", Variant::kFull, kMicro, rng);
  Context<float> ctx;
  try {
    layer.forward(ctx, ctx.constant(Tensor<float>({1, 3, 8})), ctx.constant(Tensor<float>({1, 5, 10})));
    FAIL() << "expected ShapeMismatch";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kShapeMismatch);
  }
}

struct Inputs {
  Tensor<double> text, image;
};

Inputs micro_inputs(std::uint64_t seed, std::size_t batch = 1) {
  Rng rng(seed);
  return {normal_tensor<double>(rng, {batch, 3, 8}, 0, 1), normal_tensor<double>(rng, {batch, 5, 12}, 0, 1)};
}

std::pair<Tensor<double>, Tensor<double>> run(const DualAttentionEncoder<double>& enc, const Inputs& in) {
  Context<double> ctx;
  auto s = enc.forward(ctx, ctx.constant(in.text), ctx.constant(in.image));
  return {s.text.value(), s.image.value()};
}

TEST(DualAttentionEncoder, ZeroLayersIsIdentity) {
  Rng rng(5);
  auto enc = build_variant<double>(Variant::kFull, kMicro, 0, rng);
  auto in = micro_inputs(6);
  auto [t, i] = run(enc, in);
  EXPECT_EQ(t, in.text);
  EXPECT_EQ(i, in.image);
}

TEST(DualAttentionEncoder, OneLayerEqualsTheLayer) {
  Rng rng(7);
  auto enc = build_variant<double>(Variant::kFull, kMicro, 1, rng);
  auto in = micro_inputs(8);
  Context<double> ctx;
  auto direct = enc.layers[0].forward(ctx, ctx.constant(in.text), ctx.constant(in.image));
  auto [t, i] = run(enc, in);
  EXPECT_EQ(t, direct.text.value());
  EXPECT_EQ(i, direct.image.value());
}

TEST(DualAttentionEncoder, TwoLayersComposeInOrder) {
  Rng rng(9);
  for (auto variant : {Variant::kFull, Variant::kNoCAtt, Variant::kICAtt, Variant::kTCAtt}) {
    auto enc = build_variant<double>(variant, kMicro, 2, rng);
    auto in = micro_inputs(10);
    Context<double> ctx;
    auto first = enc.layers[0].forward(ctx, ctx.constant(in.text), ctx.constant(in.image));
    auto second = enc.layers[1].forward(ctx, ctx.constant(first.text.value()), ctx.constant(first.image.value()));
    auto [t, i] = run(enc, in);
    EXPECT_EQ(t, second.text.value()) << to_string(variant);
    EXPECT_EQ(i, second.image.value()) << to_string(variant);
  }
}

TEST(DualAttentionEncoder, ShapesPreservedForEveryVariant) {
  Rng rng(11);
  for (auto variant : {Variant::kFull, Variant::kNoCAtt, Variant::kICAtt, Variant::kTCAtt})
    for (std::size_t n : {1, 3}) {
      auto enc = build_variant<double>(variant, {.text_dim = 8, .image_dim = 12, .heads = 4}, n, rng);
      auto [t, i] = run(enc, micro_inputs(12, 2));
      EXPECT_EQ(t.shape(), (Shape{2, 3, 8}));
      EXPECT_EQ(i.shape(), (Shape{2, 5, 12}));
    }
}

TEST(DualAttentionEncoder, UnknownVariantRejected) {
  try {
    parse_variant("bidirectional");
    FAIL() << "expected UnknownVariant";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kUnknownVariant);
  }
}

TEST(DualAttentionEncoder, SubmodulesPerVariant) {
  Rng rng(13);
  auto layer = [&](Variant v) { return DualAttentionLayer<double>("l", v, kMicro, rng); };
  auto full = layer(Variant::kFull), none = layer(Variant::kNoCAtt), ic = layer(Variant::kICAtt),
       tc = layer(Variant::kTCAtt);
  EXPECT_TRUE(full.t2i_cma && full.mlp && full.i2t_cma && !full.image_self_attn);
  EXPECT_TRUE(!none.t2i_cma && !none.mlp && !none.i2t_cma && none.image_self_attn);
  EXPECT_TRUE(!ic.t2i_cma && !ic.mlp && ic.i2t_cma && !ic.image_self_attn);
  EXPECT_TRUE(tc.t2i_cma && !tc.mlp && !tc.i2t_cma && tc.image_self_attn);
}

// Does perturbing one input move the other stream's output?
struct Flow {
  bool text_to_image;
  bool image_to_text;
};

Flow probe_flow(Variant variant) {
  Rng rng(14);
  auto enc = build_variant<double>(variant, {.text_dim = 8, .image_dim = 12, .heads = 2}, 2, rng);
  auto base = micro_inputs(15);
  auto [t0, i0] = run(enc, base);

  auto bumped_text = base;
  bumped_text.text[4] += 0.5;
  auto [t1, i1] = run(enc, bumped_text);
  auto bumped_image = base;
  bumped_image.image[7] += 0.5;
  auto [t2, i2] = run(enc, bumped_image);

  // The perturbed stream itself always reacts.
  EXPECT_GT(max_abs_diff(t0, t1), 1e-6);
  EXPECT_GT(max_abs_diff(i0, i2), 1e-6);
  return {max_abs_diff(i0, i1) > 0, max_abs_diff(t0, t2) > 0};
}

TEST(InformationFlow, Full) {
  auto f = probe_flow(Variant::kFull);
  EXPECT_TRUE(f.text_to_image);
  EXPECT_TRUE(f.image_to_text);
}

TEST(InformationFlow, NoCAttKeepsStreamsIndependent) {
  auto f = probe_flow(Variant::kNoCAtt);
  EXPECT_FALSE(f.text_to_image);
  EXPECT_FALSE(f.image_to_text);
}

TEST(InformationFlow, ICAttOnlyTextReachesImage) {
  auto f = probe_flow(Variant::kICAtt);
  EXPECT_TRUE(f.text_to_image);
  EXPECT_FALSE(f.image_to_text);
}

TEST(InformationFlow, TCAttOnlyImageReachesText) {
  auto f = probe_flow(Variant::kTCAtt);
  EXPECT_FALSE(f.text_to_image);
  EXPECT_TRUE(f.image_to_text);
}

ModelSpec micro_spec(Variant variant, std::size_t classes = 3) {
  ModelSpec spec;
  spec.variant = variant;
  spec.dims = {.text_len = 3, .text_dim = 8, .image_len = 5, .image_dim = 12, .num_classes = classes};
  spec.heads = 2;
  spec.head_hidden = 6;
  spec.seed = 17;
  return spec;
}

TEST(FusionModel, ParameterCountMatchesClosedForm) {
  Rng rng(18);
  for (auto variant : {Variant::kFull, Variant::kNoCAtt, Variant::kICAtt, Variant::kTCAtt})
    for (int trial = 0; trial < 4; ++trial) {
      ModelSpec spec = micro_spec(variant, 1 + rng.below(5));
      spec.heads = 1 + rng.below(2);
      spec.dims.text_dim = spec.heads * (1 + rng.below(4));
      spec.dims.image_dim = spec.heads * (1 + rng.below(4));
      spec.layers = rng.below(3);
      spec.head_hidden = 1 + rng.below(9);
      FusionModel<float> model(spec);
      EXPECT_EQ(count_parameters(model.parameters()), fusion_parameter_count(spec)) << model_label(spec);
    }
}

TEST(FusionModel, FullHasMostParameters) {
  for (ModelSpec base : {micro_spec(Variant::kFull), ModelSpec{}}) {
    auto count = [&](Variant v) {
      ModelSpec s = base;
      s.variant = v;
      return fusion_parameter_count(s);
    };
    EXPECT_GT(count(Variant::kFull), count(Variant::kNoCAtt));
    EXPECT_GT(count(Variant::kFull), count(Variant::kICAtt));
    EXPECT_GT(count(Variant::kFull), count(Variant::kTCAtt));
  }
}

TEST(FusionModel, FullScaleConcatLength) {
  ModelSpec spec;
  spec.layers = 1;
  FusionModel<float> model(spec);
  Rng rng(19);
  Context<float> ctx;
  auto feats = model.features(ctx, ctx.constant(normal_tensor<float>(rng, {1, 77, 512}, 0, 1)),
                              ctx.constant(normal_tensor<float>(rng, {1, 197, 768}, 0, 1)));
  EXPECT_EQ(feats.shape(), (Shape{1, 1280}));
  EXPECT_EQ(model.feature_dim(), 1280u);
}

TEST(FusionModel, SingleClassSoftmaxIsOne) {
  FusionModel<double> model(micro_spec(Variant::kFull, 1));
  auto in = micro_inputs(20, 3);
  Context<double> ctx;
  auto probs = softmax_rows(model.logits(ctx, ctx.constant(in.text), ctx.constant(in.image))).value();
  ASSERT_EQ(probs.shape(), (Shape{3, 1}));
  for (double p : probs.data()) EXPECT_EQ(p, 1.0);
}

TEST(FusionModel, WrongInputShapeRejected) {
  FusionModel<float> model(micro_spec(Variant::kFull));
  Context<float> ctx;
  try {
    model.logits(ctx, ctx.constant(Tensor<float>({1, 4, 8})), ctx.constant(Tensor<float>({1, 5, 12})));
    FAIL() << "expected ShapeMismatch";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kShapeMismatch);
  }
}

TEST(FusionModel, IdenticalSamplesGiveIdenticalRows) {
  FusionModel<float> model(micro_spec(Variant::kFull));
  auto one = micro_inputs(21);
  Tensor<float> text({4, 3, 8}), image({4, 5, 12});
  for (std::size_t b = 0; b < 4; ++b) {
    for (std::size_t j = 0; j < 24; ++j) text[b * 24 + j] = static_cast<float>(one.text[j]);
    for (std::size_t j = 0; j < 60; ++j) image[b * 60 + j] = static_cast<float>(one.image[j]);
  }
  Context<float> ctx;
  auto logits = model.logits(ctx, ctx.constant(text), ctx.constant(image)).value();
  for (std::size_t b = 1; b < 4; ++b)
    for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(logits.at(b, c), logits.at(0, c));
}

TEST(FusionModel, BatchPermutationEquivariant) {
  FusionModel<double> model(micro_spec(Variant::kFull));
  auto in = micro_inputs(22, 5);
  const std::vector<std::size_t> perm{3, 0, 4, 1, 2};
  Context<double> ctx;
  auto logits = model.logits(ctx, ctx.constant(in.text), ctx.constant(in.image)).value();
  Context<double> ctx2;
  auto permuted = model
                      .logits(ctx2, ctx2.constant(take_rows(in.text, std::span<const std::size_t>(perm))),
                              ctx2.constant(take_rows(in.image, std::span<const std::size_t>(perm))))
                      .value();
  for (std::size_t b = 0; b < 5; ++b)
    for (std::size_t c = 0; c < 3; ++c) EXPECT_NEAR(permuted.at(b, c), logits.at(perm[b], c), 1e-12);
}

TEST(FusionModel, TrainingModeUsesDropout) {
  FusionModel<float> model(micro_spec(Variant::kFull));
  auto in = micro_inputs(23, 2);
  auto text = in.text.cast<float>(), image = in.image.cast<float>();
  Context<float> eval;
  Context<float> train(true, 5);
  EXPECT_NE(model.logits(eval, eval.constant(text), eval.constant(image)).value(),
            model.logits(train, train.constant(text), train.constant(image)).value());
}

// Finite differences need a point away from ReLU kinks; the fixed input seed
// gives one for every variant.
TEST(FusionModel, WholeModelGradCheck) {
  for (auto variant : {Variant::kFull, Variant::kNoCAtt, Variant::kICAtt, Variant::kTCAtt}) {
    FusionModel<double> m64(micro_spec(variant));
    FusionModel<float> m32(micro_spec(variant));
    copy_parameters<float, double>(m32.parameters(), m64.parameters());
    auto in = micro_inputs(23, 2);
    const std::vector<Label> labels{0, 2};
    LossFn<double> f64 = [&](Context<double>& ctx) {
      return cross_entropy(m64.logits(ctx, ctx.constant(in.text), ctx.constant(in.image)), std::span(labels));
    };
    LossFn<float> f32 = [&](Context<float>& ctx) {
      return cross_entropy(
          m32.logits(ctx, ctx.constant(in.text.cast<float>()), ctx.constant(in.image.cast<float>())),
          std::span(labels));
    };
    auto a = grad_check<double>(f64, m64.parameters(), GradCheckOptions::f64());
    EXPECT_TRUE(a.pass) << model_label(m64.spec()) << " f64 " << a.max_rel_error;
    auto b = grad_check<float, double>(f32, m32.parameters(), f64, m64.parameters(), GradCheckOptions::f32());
    EXPECT_TRUE(b.pass) << model_label(m32.spec()) << " f32 " << b.max_rel_error;
  }
}

}  // namespace
}  // namespace dualfuse
