#pragma once

#include <functional>
#include <string>
#include <type_traits>
#include <vector>

#include "dualfuse/fusion.hpp"
#include "dualfuse/grad_check.hpp"
#include "dualfuse/io.hpp"
#include "dualfuse/layers.hpp"
#include "dualfuse/models.hpp"

namespace dualfuse {

/// One finite-difference check of a layer or model at one precision.
struct GradSuiteEntry {
  std::string name;
  std::string precision;  // "f64" against itself, "f32" against the f64 twin
  GradCheckReport report;
};

namespace detail {

template <class T>
Var<T> probe(Context<T>& ctx, const Var<T>& x) {
  Rng rng(99);
  return sum(mul(x, ctx.constant(normal_tensor<T>(rng, x.shape(), 0.0, 1.0))));
}

template <class T>
Var<T> micro_input(Context<T>& ctx, Shape s, std::uint64_t seed) {
  Rng rng(seed);
  return ctx.constant(normal_tensor<T>(rng, std::move(s), 0.0, 1.0));
}

// Builds the same layer at both precisions (f32 weights copied into f64),
// then checks f64 at the tight tolerance and f32 against the f64 twin.
template <template <class> class Layer, class Make, class Run>
void check_layer(std::vector<GradSuiteEntry>& out, const std::string& name, Make make, Run run) {
  Rng r64(21), r32(21);
  Layer<double> l64 = make(std::type_identity<double>{}, r64);
  Layer<float> l32 = make(std::type_identity<float>{}, r32);
  auto p64 = l64.parameters();
  auto p32 = l32.parameters();
  copy_parameters<float, double>(p32, p64);
  LossFn<double> f64 = [&](Context<double>& ctx) { return probe(ctx, run(ctx, l64)); };
  LossFn<float> f32 = [&](Context<float>& ctx) { return probe(ctx, run(ctx, l32)); };
  out.push_back({name, "f64", grad_check<double>(f64, p64, GradCheckOptions::f64())});
  out.push_back({name, "f32", grad_check<float, double>(f32, p32, f64, p64, GradCheckOptions::f32())});
}

inline void check_model(std::vector<GradSuiteEntry>& out, const ModelSpec& spec, std::uint64_t input_seed,
                        std::size_t max_entries) {
  auto m64 = make_model<double>(spec);
  auto m32 = make_model<float>(spec);
  copy_parameters<float, double>(m32->parameters(), m64->parameters());
  Rng rng(input_seed);
  const auto& d = spec.dims;
  auto text = normal_tensor<double>(rng, {2, d.text_len, d.text_dim}, 0, 1);
  auto image = normal_tensor<double>(rng, {2, d.image_len, d.image_dim}, 0, 1);
  const std::vector<Label> labels{0, 2};
  LossFn<double> f64 = [&](Context<double>& ctx) {
    return cross_entropy(predict(ctx, *m64, text, image), std::span<const Label>(labels));
  };
  const auto text32 = text.cast<float>(), image32 = image.cast<float>();
  LossFn<float> f32 = [&](Context<float>& ctx) {
    return cross_entropy(predict(ctx, *m32, text32, image32), std::span<const Label>(labels));
  };
  auto o64 = GradCheckOptions::f64();
  auto o32 = GradCheckOptions::f32();
  o64.max_entries = o32.max_entries = max_entries;
  const auto name = model_label(spec);
  out.push_back({name, "f64", grad_check<double>(f64, m64->parameters(), o64)});
  out.push_back({name, "f32", grad_check<float, double>(f32, m32->parameters(), f64, m64->parameters(), o32)});
}

}  // namespace detail

/// Micro dims used by the suite: fusion models {L_t 3, D_t 8, L_i 5, D_i 12},
/// CNN baselines 10 x 10 / 10 x 12 (the smallest the trunks accept).
inline ModelSpec micro_fusion_spec(Variant v) {
  ModelSpec s;
  s.kind = ModelKind::kFusion;
  s.variant = v;
  s.dims = {.text_len = 3, .text_dim = 8, .image_len = 5, .image_dim = 12, .num_classes = 3};
  s.heads = 2;
  s.head_hidden = 6;
  s.seed = 17;
  return s;
}

inline ModelSpec micro_baseline_spec(ModelKind kind) {
  ModelSpec s;
  s.kind = kind;
  s.dims = {.text_len = 10, .text_dim = 10, .image_len = 10, .image_dim = 12, .num_classes = 3};
  s.seed = 5;
  return s;
}

/// Every layer and every full model. Fusion models check all parameter
/// entries; the CNN baselines (~10^6 dense weights) sample 24 per tensor.
inline std::vector<GradSuiteEntry> run_grad_suite() {
  using detail::micro_input;
  std::vector<GradSuiteEntry> out;
  detail::check_layer<Linear>(
      out, "linear", [](auto tag, Rng& rng) { return Linear<typename decltype(tag)::type>("lin", 3, 4, rng); },
      [](auto& ctx, const auto& l) { return l.forward(ctx, micro_input(ctx, {2, 2, 3}, 1)); });
  detail::check_layer<LayerNorm>(
      out, "layer_norm",
      [](auto tag, Rng& rng) {
        using T = typename decltype(tag)::type;
        LayerNorm<T> ln("ln", 4);
        ln.gamma.value = normal_tensor<T>(rng, {4}, 1, 0.5);
        ln.beta.value = normal_tensor<T>(rng, {4}, 0, 0.5);
        return ln;
      },
      [](auto& ctx, const auto& l) { return l.forward(ctx, micro_input(ctx, {3, 4}, 2)); });
  detail::check_layer<MultiHeadAttention>(
      out, "cross_modal_attention",
      [](auto tag, Rng& rng) { return MultiHeadAttention<typename decltype(tag)::type>("cma", 4, 3, 2, 0.05, rng); },
      [](auto& ctx, const auto& l) {
        return l.forward(ctx, micro_input(ctx, {2, 3, 4}, 3), micro_input(ctx, {2, 2, 3}, 4));
      });
  detail::check_layer<MultiHeadAttention>(
      out, "self_attention",
      [](auto tag, Rng& rng) { return MultiHeadAttention<typename decltype(tag)::type>("sa", 4, 4, 4, 0.05, rng); },
      [](auto& ctx, const auto& l) { return self_attention(ctx, l, micro_input(ctx, {3, 4}, 5)); });
  detail::check_layer<Mlp>(
      out, "mlp", [](auto tag, Rng& rng) { return Mlp<typename decltype(tag)::type>("mlp", 3, 0.1, rng); },
      [](auto& ctx, const auto& l) { return l.forward(ctx, micro_input(ctx, {2, 3}, 6)); });
  detail::check_layer<Conv2dLayer>(
      out, "conv2d",
      [](auto tag, Rng& rng) { return Conv2dLayer<typename decltype(tag)::type>("conv", 2, 3, 2, 1, rng); },
      [](auto& ctx, const auto& l) { return l.forward(ctx, micro_input(ctx, {2, 3, 4, 2}, 7)); });
  detail::check_layer<Conv1dLayer>(
      out, "conv1d",
      [](auto tag, Rng& rng) { return Conv1dLayer<typename decltype(tag)::type>("conv", 2, 3, 3, 2, rng); },
      [](auto& ctx, const auto& l) { return l.forward(ctx, micro_input(ctx, {2, 7, 2}, 8)); });

  for (auto v : {Variant::kFull, Variant::kNoCAtt, Variant::kICAtt, Variant::kTCAtt})
    detail::check_model(out, micro_fusion_spec(v), 23, 0);
  for (auto k : {ModelKind::kImageOnly, ModelKind::kTextOnly, ModelKind::kEarlyFusion, ModelKind::kLateFusion})
    detail::check_model(out, micro_baseline_spec(k), 14, 24);
  return out;
}

inline io::json grad_suite_to_json(const std::vector<GradSuiteEntry>& entries) {
  io::json out = io::json::array();
  for (const auto& e : entries) {
    std::size_t checked = 0, skipped = 0;
    for (const auto& p : e.report.params) checked += p.checked, skipped += p.skipped;
    out.push_back({{"name", e.name},
                   {"precision", e.precision},
                   {"pass", e.report.pass},
                   {"max_rel_error", e.report.max_rel_error},
                   {"checked", checked},
                   {"skipped", skipped}});
  }
  return out;
}

}  // namespace dualfuse
