#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "dualfuse/context.hpp"
#include "dualfuse/ops.hpp"

namespace dualfuse {

template <class T>
Tensor<T> glorot_uniform(Rng& rng, std::size_t fan_in, std::size_t fan_out, Shape shape) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  return uniform_tensor<T>(rng, std::move(shape), -limit, limit);
}

template <class T>
void append(ParamList<T>& to, ParamList<T> from) {
  to.insert(to.end(), from.begin(), from.end());
}

/// y = x W + b, applied to the last axis of x.
template <class T>
class Linear {
 public:
  Linear() = default;
  Linear(const std::string& name, std::size_t in, std::size_t out, Rng& rng, bool bias = true)
      : weight{name + ".weight", glorot_uniform<T>(rng, in, out, {in, out})} {
    if (bias) this->bias = Parameter<T>{name + ".bias", Tensor<T>({out})};
  }

  std::size_t in_features() const { return weight.value.dim(0); }
  std::size_t out_features() const { return weight.value.dim(1); }

  Var<T> forward(Context<T>& ctx, const Var<T>& x) const {
    auto y = matmul(x, ctx.bind(weight));
    return bias ? add_bias(y, ctx.bind(*bias)) : y;
  }

  ParamList<T> parameters() {
    ParamList<T> out{&weight};
    if (bias) out.push_back(&*bias);
    return out;
  }

  Parameter<T> weight;
  std::optional<Parameter<T>> bias;
};

template <class T>
class LayerNorm {
 public:
  static constexpr double kEps = 1e-5;

  LayerNorm() = default;
  LayerNorm(const std::string& name, std::size_t dim)
      : gamma{name + ".gamma", Tensor<T>({dim}, T(1))}, beta{name + ".beta", Tensor<T>({dim})} {}

  Var<T> forward(Context<T>& ctx, const Var<T>& x) const {
    return layer_norm(x, ctx.bind(gamma), ctx.bind(beta), static_cast<T>(kEps));
  }

  ParamList<T> parameters() { return {&gamma, &beta}; }

  Parameter<T> gamma;
  Parameter<T> beta;
};

/// Multi-head scaled dot-product attention with queries from X_a and
/// keys/values from X_b. The per-head projections are stored column-stacked:
/// head j owns columns [j*H, (j+1)*H) of wq/wk/wv, with H = D_a / heads.
/// Heads are concatenated and mapped through wo (D_a x D_a). No biases.
template <class T>
class MultiHeadAttention {
 public:
  struct Output {
    Var<T> out;
    std::vector<Var<T>> weights;  // per head, [B, L_a, L_b], post-softmax, pre-dropout
  };

  MultiHeadAttention() = default;
  MultiHeadAttention(const std::string& name, std::size_t query_dim, std::size_t kv_dim, std::size_t heads,
                     double attn_dropout, Rng& rng)
      : heads_(heads), attn_dropout_(attn_dropout) {
    require(heads > 0 && query_dim % heads == 0, ErrorCode::kHeadsDontDivide,
            std::to_string(query_dim) + " is not divisible by " + std::to_string(heads) + " heads");
    wq = {name + ".wq", glorot_uniform<T>(rng, query_dim, query_dim, {query_dim, query_dim})};
    wk = {name + ".wk", glorot_uniform<T>(rng, kv_dim, query_dim, {kv_dim, query_dim})};
    wv = {name + ".wv", glorot_uniform<T>(rng, kv_dim, query_dim, {kv_dim, query_dim})};
    wo = {name + ".wo", glorot_uniform<T>(rng, query_dim, query_dim, {query_dim, query_dim})};
  }

  std::size_t heads() const { return heads_; }
  std::size_t query_dim() const { return wq.value.dim(0); }
  std::size_t kv_dim() const { return wk.value.dim(0); }
  std::size_t head_dim() const { return query_dim() / heads_; }

  /// Accepts [L, D] matrices or [B, L, D] batches.
  Output forward_with_weights(Context<T>& ctx, const Var<T>& xa, const Var<T>& xb) const {
    const bool unbatched = xa.shape().size() == 2;
    require(xa.shape().size() == xb.shape().size() && (unbatched || xa.shape().size() == 3), ErrorCode::kShapeMismatch,
            "attention inputs must both be [L, D] or [B, L, D]");
    Var<T> a = unbatched ? reshape(xa, {1, xa.dim(0), xa.dim(1)}) : xa;
    Var<T> b = unbatched ? reshape(xb, {1, xb.dim(0), xb.dim(1)}) : xb;
    require(a.dim(2) == query_dim() && b.dim(2) == kv_dim() && a.dim(0) == b.dim(0), ErrorCode::kShapeMismatch,
            "attention expects query dim " + std::to_string(query_dim()) + " and key dim " + std::to_string(kv_dim()) +
                ", got " + shape_str(a.shape()) + " and " + shape_str(b.shape()));

    const std::size_t h = head_dim();
    auto q = matmul(a, ctx.bind(wq));
    auto k = matmul(b, ctx.bind(wk));
    auto v = matmul(b, ctx.bind(wv));
    const T inv_sqrt = static_cast<T>(1.0 / std::sqrt(static_cast<double>(h)));
    Output result;
    std::vector<Var<T>> head_out;
    for (std::size_t j = 0; j < heads_; ++j) {
      auto qh = slice(q, 2, j * h, h);
      auto kh = slice(k, 2, j * h, h);
      auto vh = slice(v, 2, j * h, h);
      auto weights = softmax_rows(scale(bmm(qh, kh, true), inv_sqrt));
      result.weights.push_back(weights);
      auto dropped = dropout(weights, attn_dropout_, ctx.training(), ctx.rng());
      head_out.push_back(bmm(dropped, vh));
    }
    auto merged = heads_ == 1 ? head_out[0] : concat(head_out, 2);
    auto out = matmul(merged, ctx.bind(wo));
    result.out = unbatched ? reshape(out, {xa.dim(0), query_dim()}) : out;
    return result;
  }

  Var<T> forward(Context<T>& ctx, const Var<T>& xa, const Var<T>& xb) const {
    return forward_with_weights(ctx, xa, xb).out;
  }

  ParamList<T> parameters() { return {&wq, &wk, &wv, &wo}; }

  Parameter<T> wq, wk, wv, wo;

 private:
  std::size_t heads_ = 1;
  double attn_dropout_ = 0.0;
};

template <class T>
Var<T> cross_modal_attention(Context<T>& ctx, const MultiHeadAttention<T>& cma, const Var<T>& xa, const Var<T>& xb) {
  return cma.forward(ctx, xa, xb);
}

template <class T>
Var<T> self_attention(Context<T>& ctx, const MultiHeadAttention<T>& layer, const Var<T>& x) {
  return layer.forward(ctx, x, x);
}

/// d -> 2d -> d with ReLU and dropout after the activation.
template <class T>
class Mlp {
 public:
  Mlp() = default;
  Mlp(const std::string& name, std::size_t dim, double dropout_rate, Rng& rng)
      : fc1(name + ".fc1", dim, 2 * dim, rng), fc2(name + ".fc2", 2 * dim, dim, rng), dropout_(dropout_rate) {}

  Var<T> forward(Context<T>& ctx, const Var<T>& x) const {
    auto h = relu(fc1.forward(ctx, x));
    h = dropout(h, dropout_, ctx.training(), ctx.rng());
    return fc2.forward(ctx, h);
  }

  ParamList<T> parameters() {
    auto out = fc1.parameters();
    append(out, fc2.parameters());
    return out;
  }

  Linear<T> fc1, fc2;

 private:
  double dropout_ = 0.0;
};

/// Valid convolution; `kernel_w == 1` gives the 1-D variant over [B, L, C].
template <class T>
class Conv2dLayer {
 public:
  Conv2dLayer() = default;
  Conv2dLayer(const std::string& name, std::size_t in_channels, std::size_t filters, std::size_t kernel,
              std::size_t stride, Rng& rng)
      : weight{name + ".weight", glorot_uniform<T>(rng, kernel * kernel * in_channels, kernel * kernel * filters,
                                                   {kernel * kernel * in_channels, filters})},
        bias{name + ".bias", Tensor<T>({filters})},
        kernel_(kernel),
        stride_(stride) {}

  /// x: [B, H, W, C] -> [B, H', W', F]. No activation.
  Var<T> forward(Context<T>& ctx, const Var<T>& x) const {
    return conv2d(x, ctx.bind(weight), ctx.bind(bias), kernel_, kernel_, stride_);
  }

  ParamList<T> parameters() { return {&weight, &bias}; }
  std::size_t kernel() const { return kernel_; }
  std::size_t stride() const { return stride_; }

  Parameter<T> weight;
  Parameter<T> bias;

 private:
  std::size_t kernel_ = 1;
  std::size_t stride_ = 1;
};

template <class T>
class Conv1dLayer {
 public:
  Conv1dLayer() = default;
  Conv1dLayer(const std::string& name, std::size_t in_channels, std::size_t filters, std::size_t kernel,
              std::size_t stride, Rng& rng)
      : weight{name + ".weight",
               glorot_uniform<T>(rng, kernel * in_channels, kernel * filters, {kernel * in_channels, filters})},
        bias{name + ".bias", Tensor<T>({filters})},
        kernel_(kernel),
        stride_(stride) {}

  /// x: [B, L, C] -> [B, L', F]. No activation.
  Var<T> forward(Context<T>& ctx, const Var<T>& x) const {
    return conv1d(x, ctx.bind(weight), ctx.bind(bias), kernel_, stride_);
  }

  ParamList<T> parameters() { return {&weight, &bias}; }
  std::size_t kernel() const { return kernel_; }
  std::size_t stride() const { return stride_; }

  Parameter<T> weight;
  Parameter<T> bias;

 private:
  std::size_t kernel_ = 1;
  std::size_t stride_ = 1;
};

}  // namespace dualfuse
