#pragma once

// Differentiable ops over Var handles. Shapes must match exactly; the only
// implicit expansion is the bias-add over rows (`add_bias`).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "dualfuse/error.hpp"
#include "dualfuse/kernels.hpp"
#include "dualfuse/rng.hpp"
#include "dualfuse/tape.hpp"
#include "dualfuse/tensor.hpp"

namespace dualfuse {

using Label = std::uint32_t;

namespace detail {

inline void expect_same(const Shape& a, const Shape& b, const char* op) {
  require(a == b, ErrorCode::kShapeMismatch, std::string(op) + ": " + shape_str(a) + " vs " + shape_str(b));
}

inline std::size_t leading(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t i = 0; i + 1 < s.size(); ++i) n *= s[i];
  return n;
}

// Splits a shape around `axis` into (outer, axis extent, inner).
inline void around_axis(const Shape& s, std::size_t axis, std::size_t& outer, std::size_t& mid, std::size_t& inner) {
  outer = 1;
  inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  mid = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
}

}  // namespace detail

/// Output extent of an unpadded sliding window.
constexpr std::size_t window_out(std::size_t length, std::size_t kernel, std::size_t stride) {
  return (length - kernel) / stride + 1;
}

/// x[..., k] * w[k, n] -> [..., n]. Leading dims of x are treated as rows.
template <class T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  require(as.size() >= 2 && bs.size() == 2, ErrorCode::kShapeMismatch,
          "matmul expects [..., k] x [k, n], got " + shape_str(as) + " x " + shape_str(bs));
  require(as.back() == bs[0], ErrorCode::kShapeMismatch, "matmul inner dims " + shape_str(as) + " x " + shape_str(bs));
  const std::size_t m = detail::leading(as), k = bs[0], n = bs[1];
  Shape os = as;
  os.back() = n;
  Tensor<T> out(os);
  kernels::gemm(a.value().data().data(), b.value().data().data(), out.data().data(), m, k, n, false, false, false);
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->record(std::move(out), {a, b}, [ia, ib, m, k, n](Tape<T>& t, const Tensor<T>& g) {
    if (T* ga = t.grad_buffer(ia)) kernels::gemm(g.data().data(), t.value(ib).data().data(), ga, m, n, k, false, true, true);
    if (T* gb = t.grad_buffer(ib)) kernels::gemm(t.value(ia).data().data(), g.data().data(), gb, k, m, n, true, false, true);
  });
}

/// Batched product: a[B, m, k] * b[B, k, n] (or b[B, n, k] transposed) -> [B, m, n].
template <class T>
Var<T> bmm(const Var<T>& a, const Var<T>& b, bool trans_b = false) {
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  require(as.size() == 3 && bs.size() == 3 && as[0] == bs[0], ErrorCode::kShapeMismatch,
          "bmm expects rank-3 operands with equal batch, got " + shape_str(as) + " x " + shape_str(bs));
  const std::size_t batch = as[0], m = as[1], k = as[2];
  const std::size_t n = trans_b ? bs[1] : bs[2];
  require((trans_b ? bs[2] : bs[1]) == k, ErrorCode::kShapeMismatch,
          "bmm inner dims " + shape_str(as) + " x " + shape_str(bs));
  Tensor<T> out({batch, m, n});
  const T* ap = a.value().data().data();
  const T* bp = b.value().data().data();
  for (std::size_t i = 0; i < batch; ++i)
    kernels::gemm(ap + i * m * k, bp + i * k * n, out.data().data() + i * m * n, m, k, n, false, trans_b, false);
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->record(std::move(out), {a, b}, [=](Tape<T>& t, const Tensor<T>& g) {
    const T* gp = g.data().data();
    if (T* ga = t.grad_buffer(ia)) {
      const T* bv = t.value(ib).data().data();
      for (std::size_t i = 0; i < batch; ++i)
        kernels::gemm(gp + i * m * n, bv + i * k * n, ga + i * m * k, m, n, k, false, !trans_b, true);
    }
    if (T* gb = t.grad_buffer(ib)) {
      const T* av = t.value(ia).data().data();
      for (std::size_t i = 0; i < batch; ++i) {
        if (trans_b)
          kernels::gemm(gp + i * m * n, av + i * m * k, gb + i * k * n, n, m, k, true, false, true);
        else
          kernels::gemm(av + i * m * k, gp + i * m * n, gb + i * k * n, k, m, n, true, false, true);
      }
    }
  });
}

template <class T>
Var<T> transpose(const Var<T>& x) {
  require(x.shape().size() == 2, ErrorCode::kShapeMismatch, "transpose expects a matrix");
  const std::size_t m = x.dim(0), n = x.dim(1);
  Tensor<T> out({n, m});
  const auto& xv = x.value();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = xv[i * n + j];
  const std::size_t ix = x.id;
  return x.tape->record(std::move(out), {x}, [=](Tape<T>& t, const Tensor<T>& g) {
    if (T* gx = t.grad_buffer(ix))
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += g[j * m + i];
  });
}

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  detail::expect_same(a.shape(), b.shape(), "add");
  Tensor<T> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->record(std::move(out), {a, b}, [=](Tape<T>& t, const Tensor<T>& g) {
    for (std::size_t id : {ia, ib})
      if (T* gx = t.grad_buffer(id))
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
}

template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  detail::expect_same(a.shape(), b.shape(), "sub");
  Tensor<T> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->record(std::move(out), {a, b}, [=](Tape<T>& t, const Tensor<T>& g) {
    if (T* ga = t.grad_buffer(ia))
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    if (T* gb = t.grad_buffer(ib))
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
  });
}

/// Elementwise product.
template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  detail::expect_same(a.shape(), b.shape(), "mul");
  Tensor<T> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->record(std::move(out), {a, b}, [=](Tape<T>& t, const Tensor<T>& g) {
    const auto& av = t.value(ia);
    const auto& bv2 = t.value(ib);
    if (T* ga = t.grad_buffer(ia))
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv2[i];
    if (T* gb = t.grad_buffer(ib))
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
  });
}

template <class T>
Var<T> scale(const Var<T>& x, T c) {
  Tensor<T> out = x.value();
  for (auto& v : out.data()) v *= c;
  const std::size_t ix = x.id;
  return x.tape->record(std::move(out), {x}, [=](Tape<T>& t, const Tensor<T>& g) {
    if (T* gx = t.grad_buffer(ix))
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += c * g[i];
  });
}

/// s * x with a trainable scalar s (shape [] or [1]).
template <class T>
Var<T> scale_by(const Var<T>& x, const Var<T>& s) {
  require(s.value().size() == 1, ErrorCode::kShapeMismatch, "scale_by expects a scalar factor");
  const T sv = s.value()[0];
  Tensor<T> out = x.value();
  for (auto& v : out.data()) v *= sv;
  const std::size_t ix = x.id, is = s.id;
  return x.tape->record(std::move(out), {x, s}, [=](Tape<T>& t, const Tensor<T>& g) {
    if (T* gx = t.grad_buffer(ix))
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += sv * g[i];
    if (T* gs = t.grad_buffer(is)) {
      const auto& xv = t.value(ix);
      T acc = 0;
      for (std::size_t i = 0; i < g.size(); ++i) acc += xv[i] * g[i];
      gs[0] += acc;
    }
  });
}

/// x[..., n] + b[n], the bias added to every row.
template <class T>
Var<T> add_bias(const Var<T>& x, const Var<T>& b) {
  require(b.shape().size() == 1 && !x.shape().empty() && x.shape().back() == b.dim(0), ErrorCode::kShapeMismatch,
          "add_bias " + shape_str(x.shape()) + " + " + shape_str(b.shape()));
  const std::size_t n = b.dim(0);
  const std::size_t rows = n ? x.value().size() / n : 0;
  Tensor<T> out = x.value();
  const auto& bv = b.value();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] += bv[j];
  const std::size_t ix = x.id, ib = b.id;
  return x.tape->record(std::move(out), {x, b}, [=](Tape<T>& t, const Tensor<T>& g) {
    if (T* gx = t.grad_buffer(ix))
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    if (T* gb = t.grad_buffer(ib))
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < n; ++j) gb[j] += g[r * n + j];
  });
}

template <class T>
Var<T> relu(const Var<T>& x) {
  Tensor<T> out = x.value();
  for (auto& v : out.data()) v = v > T(0) ? v : T(0);
  const std::size_t ix = x.id, iy = x.tape->size();
  return x.tape->record(std::move(out), {x}, [=](Tape<T>& t, const Tensor<T>& g) {
    const auto& y = t.value(iy);
    if (T* gx = t.grad_buffer(ix))
      for (std::size_t i = 0; i < g.size(); ++i)
        if (y[i] > T(0)) gx[i] += g[i];
  });
}

namespace detail {

template <class T>
void softmax_rows_inplace(std::span<T> data, std::size_t n) {
  if (n == 0) return;
  const std::size_t rows = data.size() / n;
  for (std::size_t r = 0; r < rows; ++r) {
    T* row = data.data() + r * n;
    const T mx = *std::max_element(row, row + n);
    T total = 0;
    for (std::size_t j = 0; j < n; ++j) {
      row[j] = std::exp(row[j] - mx);
      total += row[j];
    }
    for (std::size_t j = 0; j < n; ++j) row[j] /= total;
  }
}

}  // namespace detail

/// Softmax over the last axis with per-row max subtraction.
template <class T>
Var<T> softmax_rows(const Var<T>& x) {
  require(!x.shape().empty(), ErrorCode::kShapeMismatch, "softmax_rows on a scalar");
  const std::size_t n = x.shape().back();
  Tensor<T> out = x.value();
  detail::softmax_rows_inplace<T>(out.data(), n);
  const std::size_t ix = x.id, iy = x.tape->size();
  return x.tape->record(std::move(out), {x}, [=](Tape<T>& t, const Tensor<T>& g) {
    T* gx = t.grad_buffer(ix);
    if (!gx || n == 0) return;
    const auto& y = t.value(iy);
    const std::size_t rows = y.size() / n;
    for (std::size_t r = 0; r < rows; ++r) {
      const std::size_t o = r * n;
      T dot = 0;
      for (std::size_t j = 0; j < n; ++j) dot += g[o + j] * y[o + j];
      for (std::size_t j = 0; j < n; ++j) gx[o + j] += y[o + j] * (g[o + j] - dot);
    }
  });
}

/// Mean over the batch of -log softmax(logits)[label], via log-sum-exp.
template <class T>
Var<T> cross_entropy(const Var<T>& logits, std::span<const Label> labels) {
  require(logits.shape().size() == 2 && logits.dim(0) == labels.size(), ErrorCode::kShapeMismatch,
          "cross_entropy expects logits [B, C] with B labels");
  const std::size_t batch = logits.dim(0), classes = logits.dim(1);
  require(batch > 0, ErrorCode::kShapeMismatch, "cross_entropy on an empty batch");
  for (Label l : labels)
    require(l < classes, ErrorCode::kLabelOutOfRange,
            "label " + std::to_string(l) + " with " + std::to_string(classes) + " classes");
  Tensor<T> probs = logits.value();
  T loss = 0;
  for (std::size_t r = 0; r < batch; ++r) {
    const T* row = logits.value().data().data() + r * classes;
    const T mx = *std::max_element(row, row + classes);
    T total = 0;
    for (std::size_t j = 0; j < classes; ++j) total += std::exp(row[j] - mx);
    const T lse = mx + std::log(total);
    loss += lse - row[labels[r]];
  }
  detail::softmax_rows_inplace<T>(probs.data(), classes);
  loss /= static_cast<T>(batch);
  std::vector<Label> saved(labels.begin(), labels.end());
  const std::size_t il = logits.id;
  return logits.tape->record(Tensor<T>::scalar(loss), {logits},
                             [=, probs = std::move(probs), saved = std::move(saved)](Tape<T>& t, const Tensor<T>& g) {
                               T* gl = t.grad_buffer(il);
                               if (!gl) return;
                               const T s = g[0] / static_cast<T>(batch);
                               for (std::size_t r = 0; r < batch; ++r)
                                 for (std::size_t j = 0; j < classes; ++j)
                                   gl[r * classes + j] += s * (probs[r * classes + j] - (j == saved[r] ? T(1) : T(0)));
                             });
}

template <class T>
Var<T> reshape(const Var<T>& x, Shape shape) {
  Tensor<T> out = x.value().reshaped(std::move(shape));
  const std::size_t ix = x.id;
  return x.tape->record(std::move(out), {x}, [=](Tape<T>& t, const Tensor<T>& g) {
    if (T* gx = t.grad_buffer(ix))
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
}

/// x[..., start:start+len, ...] along `axis`.
template <class T>
Var<T> slice(const Var<T>& x, std::size_t axis, std::size_t start, std::size_t len) {
  const Shape& s = x.shape();
  require(axis < s.size() && start + len <= s[axis], ErrorCode::kShapeMismatch, "slice out of range");
  std::size_t outer, mid, inner;
  detail::around_axis(s, axis, outer, mid, inner);
  Shape os = s;
  os[axis] = len;
  Tensor<T> out(os);
  const auto& xv = x.value();
  for (std::size_t o = 0; o < outer; ++o)
    std::copy_n(xv.data().begin() + static_cast<std::ptrdiff_t>((o * mid + start) * inner), len * inner,
                out.data().begin() + static_cast<std::ptrdiff_t>(o * len * inner));
  const std::size_t ix = x.id;
  return x.tape->record(std::move(out), {x}, [=](Tape<T>& t, const Tensor<T>& g) {
    if (T* gx = t.grad_buffer(ix))
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t i = 0; i < len * inner; ++i) gx[(o * mid + start) * inner + i] += g[o * len * inner + i];
  });
}

/// Joins tensors along `axis`; all other extents must agree.
template <class T>
Var<T> concat(const std::vector<Var<T>>& parts, std::size_t axis) {
  require(!parts.empty(), ErrorCode::kShapeMismatch, "concat of nothing");
  Shape os = parts[0].shape();
  require(axis < os.size(), ErrorCode::kShapeMismatch, "concat axis out of range");
  std::vector<std::size_t> extents;
  os[axis] = 0;
  for (const auto& p : parts) {
    Shape ps = p.shape();
    require(ps.size() == os.size(), ErrorCode::kShapeMismatch, "concat rank mismatch");
    extents.push_back(ps[axis]);
    os[axis] += ps[axis];
    ps[axis] = os[axis];
    require(ps == os, ErrorCode::kShapeMismatch, "concat extents differ off-axis: " + shape_str(p.shape()));
  }
  std::size_t outer, total, inner;
  detail::around_axis(os, axis, outer, total, inner);
  Tensor<T> out(os);
  std::size_t offset = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const auto& pv = parts[p].value();
    const std::size_t e = extents[p];
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(pv.data().begin() + static_cast<std::ptrdiff_t>(o * e * inner), e * inner,
                  out.data().begin() + static_cast<std::ptrdiff_t>((o * total + offset) * inner));
    offset += e;
  }
  std::vector<std::size_t> ids;
  for (const auto& p : parts) ids.push_back(p.id);
  return parts[0].tape->record(std::move(out), parts, [=](Tape<T>& t, const Tensor<T>& g) {
    std::size_t off = 0;
    for (std::size_t p = 0; p < ids.size(); ++p) {
      const std::size_t e = extents[p];
      if (T* gp = t.grad_buffer(ids[p]))
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t i = 0; i < e * inner; ++i) gp[o * e * inner + i] += g[(o * total + off) * inner + i];
      off += e;
    }
  });
}

/// Mean over `axis`; the axis is removed from the shape.
template <class T>
Var<T> mean_axis(const Var<T>& x, std::size_t axis) {
  const Shape& s = x.shape();
  require(axis < s.size() && s[axis] > 0, ErrorCode::kShapeMismatch, "mean_axis over an empty or missing axis");
  std::size_t outer, mid, inner;
  detail::around_axis(s, axis, outer, mid, inner);
  Shape os = s;
  os.erase(os.begin() + static_cast<std::ptrdiff_t>(axis));
  Tensor<T> out(os);
  const auto& xv = x.value();
  const T inv = T(1) / static_cast<T>(mid);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t m = 0; m < mid; ++m)
      for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] += xv[(o * mid + m) * inner + i];
    for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] *= inv;
  }
  const std::size_t ix = x.id;
  return x.tape->record(std::move(out), {x}, [=](Tape<T>& t, const Tensor<T>& g) {
    if (T* gx = t.grad_buffer(ix))
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t m = 0; m < mid; ++m)
          for (std::size_t i = 0; i < inner; ++i) gx[(o * mid + m) * inner + i] += inv * g[o * inner + i];
  });
}

template <class T>
Var<T> sum(const Var<T>& x) {
  T total = 0;
  for (T v : x.value().data()) total += v;
  const std::size_t ix = x.id;
  return x.tape->record(Tensor<T>::scalar(total), {x}, [=](Tape<T>& t, const Tensor<T>& g) {
    if (T* gx = t.grad_buffer(ix)) {
      const std::size_t n = t.value(ix).size();
      for (std::size_t i = 0; i < n; ++i) gx[i] += g[0];
    }
  });
}

/// Inverted dropout: survivors are scaled by 1/(1-rate). Identity in eval mode.
template <class T>
Var<T> dropout(const Var<T>& x, double rate, bool training, Rng& rng) {
  require(rate >= 0.0 && rate < 1.0, ErrorCode::kBadRate, "dropout rate must lie in [0, 1)");
  if (!training || rate == 0.0) return x;
  const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
  Tensor<T> mask(x.shape());
  for (auto& m : mask.data()) m = rng.uniform() >= rate ? keep_scale : T(0);
  Tensor<T> out = x.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= mask[i];
  const std::size_t ix = x.id;
  return x.tape->record(std::move(out), {x}, [=, mask = std::move(mask)](Tape<T>& t, const Tensor<T>& g) {
    if (T* gx = t.grad_buffer(ix))
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += mask[i] * g[i];
  });
}

/// Per-row normalization over the last axis followed by gamma/beta affine.
template <class T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps) {
  require(!x.shape().empty() && gamma.shape() == Shape{x.shape().back()} && beta.shape() == gamma.shape(),
          ErrorCode::kShapeMismatch, "layer_norm " + shape_str(x.shape()) + " with gamma " + shape_str(gamma.shape()));
  const std::size_t d = x.shape().back();
  const std::size_t rows = d ? x.value().size() / d : 0;
  const auto& xv = x.value();
  const auto& gv = gamma.value();
  const auto& bv = beta.value();
  Tensor<T> xhat(x.shape());
  std::vector<T> inv_std(rows);
  Tensor<T> out(x.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = xv.data().data() + r * d;
    T mean = 0;
    for (std::size_t j = 0; j < d; ++j) mean += row[j];
    mean /= static_cast<T>(d);
    T var = 0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= static_cast<T>(d);
    inv_std[r] = T(1) / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      const T h = (row[j] - mean) * inv_std[r];
      xhat[r * d + j] = h;
      out[r * d + j] = h * gv[j] + bv[j];
    }
  }
  const std::size_t ix = x.id, ig = gamma.id, ib = beta.id;
  return x.tape->record(std::move(out), {x, gamma, beta},
                        [=, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape<T>& t, const Tensor<T>& g) {
                          const auto& gam = t.value(ig);
                          if (T* gg = t.grad_buffer(ig))
                            for (std::size_t i = 0; i < g.size(); ++i) gg[i % d] += g[i] * xhat[i];
                          if (T* gb = t.grad_buffer(ib))
                            for (std::size_t i = 0; i < g.size(); ++i) gb[i % d] += g[i];
                          T* gx = t.grad_buffer(ix);
                          if (!gx) return;
                          for (std::size_t r = 0; r < rows; ++r) {
                            T mean_dh = 0, mean_dh_h = 0;
                            for (std::size_t j = 0; j < d; ++j) {
                              const T dh = g[r * d + j] * gam[j];
                              mean_dh += dh;
                              mean_dh_h += dh * xhat[r * d + j];
                            }
                            mean_dh /= static_cast<T>(d);
                            mean_dh_h /= static_cast<T>(d);
                            for (std::size_t j = 0; j < d; ++j) {
                              const T dh = g[r * d + j] * gam[j];
                              gx[r * d + j] += inv_std[r] * (dh - mean_dh - xhat[r * d + j] * mean_dh_h);
                            }
                          }
                        });
}

/// Rows scaled to unit L2 norm over the last axis: x / (|x| + eps).
template <class T>
Var<T> normalize_rows(const Var<T>& x, T eps) {
  require(!x.shape().empty(), ErrorCode::kShapeMismatch, "normalize_rows on a scalar");
  const std::size_t d = x.shape().back();
  const std::size_t rows = d ? x.value().size() / d : 0;
  std::vector<T> norms(rows);
  Tensor<T> out = x.value();
  for (std::size_t r = 0; r < rows; ++r) {
    T ss = 0;
    for (std::size_t j = 0; j < d; ++j) ss += out[r * d + j] * out[r * d + j];
    norms[r] = std::sqrt(ss);
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] /= norms[r] + eps;
  }
  const std::size_t ix = x.id;
  return x.tape->record(std::move(out), {x}, [=, norms = std::move(norms)](Tape<T>& t, const Tensor<T>& g) {
    T* gx = t.grad_buffer(ix);
    if (!gx) return;
    const auto& xv = t.value(ix);
    for (std::size_t r = 0; r < rows; ++r) {
      const T s = norms[r] + eps;
      T dot = 0;
      for (std::size_t j = 0; j < d; ++j) dot += xv[r * d + j] * g[r * d + j];
      const T coeff = norms[r] > T(0) ? dot / (s * s * norms[r]) : T(0);
      for (std::size_t j = 0; j < d; ++j) gx[r * d + j] += g[r * d + j] / s - coeff * xv[r * d + j];
    }
  });
}

/// Valid 2-D convolution. x: [B, H, W, C]; w: [kh*kw*C, F] with rows ordered
/// (di, dj, c); b: [F]. Output [B, H', W', F].
template <class T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& b, std::size_t kh, std::size_t kw, std::size_t stride) {
  const Shape& xs = x.shape();
  require(xs.size() == 4, ErrorCode::kShapeMismatch, "conv2d expects [B, H, W, C], got " + shape_str(xs));
  const std::size_t batch = xs[0], h = xs[1], wd = xs[2], c = xs[3];
  require(stride > 0 && kh > 0 && kw > 0, ErrorCode::kBadConfig, "conv2d kernel and stride must be positive");
  require(h >= kh && wd >= kw, ErrorCode::kKernelTooLarge,
          "kernel " + std::to_string(kh) + "x" + std::to_string(kw) + " exceeds input " + shape_str(xs));
  const std::size_t patch = kh * kw * c;
  require(w.shape().size() == 2 && w.dim(0) == patch, ErrorCode::kShapeMismatch,
          "conv2d weight " + shape_str(w.shape()) + " for patch size " + std::to_string(patch));
  const std::size_t f = w.dim(1);
  require(b.shape() == Shape{f}, ErrorCode::kShapeMismatch, "conv2d bias shape");
  const std::size_t oh = window_out(h, kh, stride), ow = window_out(wd, kw, stride);
  const std::size_t positions = batch * oh * ow;

  Tensor<T> cols({positions, patch});
  const auto& xv = x.value();
  for (std::size_t n = 0; n < batch; ++n)
    for (std::size_t i = 0; i < oh; ++i)
      for (std::size_t j = 0; j < ow; ++j) {
        T* dst = cols.data().data() + ((n * oh + i) * ow + j) * patch;
        for (std::size_t di = 0; di < kh; ++di) {
          const T* src = xv.data().data() + ((n * h + i * stride + di) * wd + j * stride) * c;
          std::copy_n(src, kw * c, dst + di * kw * c);
        }
      }
  Tensor<T> out({batch, oh, ow, f});
  kernels::gemm(cols.data().data(), w.value().data().data(), out.data().data(), positions, patch, f, false, false, false);
  const auto& bv = b.value();
  for (std::size_t p = 0; p < positions; ++p)
    for (std::size_t k = 0; k < f; ++k) out[p * f + k] += bv[k];

  const std::size_t ix = x.id, iw = w.id, ib = b.id;
  return x.tape->record(std::move(out), {x, w, b}, [=, cols = std::move(cols)](Tape<T>& t, const Tensor<T>& g) {
    if (T* gw = t.grad_buffer(iw))
      kernels::gemm(cols.data().data(), g.data().data(), gw, patch, positions, f, true, false, true);
    if (T* gb = t.grad_buffer(ib))
      for (std::size_t p = 0; p < positions; ++p)
        for (std::size_t k = 0; k < f; ++k) gb[k] += g[p * f + k];
    if (T* gx = t.grad_buffer(ix)) {
      Tensor<T> gcols({positions, patch});
      kernels::gemm(g.data().data(), t.value(iw).data().data(), gcols.data().data(), positions, f, patch, false, true,
                    false);
      for (std::size_t n = 0; n < batch; ++n)
        for (std::size_t i = 0; i < oh; ++i)
          for (std::size_t j = 0; j < ow; ++j) {
            const T* src = gcols.data().data() + ((n * oh + i) * ow + j) * patch;
            for (std::size_t di = 0; di < kh; ++di) {
              T* dst = gx + ((n * h + i * stride + di) * wd + j * stride) * c;
              for (std::size_t q = 0; q < kw * c; ++q) dst[q] += src[di * kw * c + q];
            }
          }
    }
  });
}

/// Non-overlapping max pooling over [B, H, W, C]. Gradient goes to the first
/// maximum of each window.
template <class T>
Var<T> maxpool2d(const Var<T>& x, std::size_t ph, std::size_t pw) {
  const Shape& xs = x.shape();
  require(xs.size() == 4, ErrorCode::kShapeMismatch, "maxpool2d expects [B, H, W, C], got " + shape_str(xs));
  require(ph > 0 && pw > 0, ErrorCode::kBadConfig, "pool size must be positive");
  const std::size_t batch = xs[0], h = xs[1], wd = xs[2], c = xs[3];
  require(h >= ph && wd >= pw, ErrorCode::kPoolTooLarge, "pool exceeds input " + shape_str(xs));
  const std::size_t oh = h / ph, ow = wd / pw;
  Tensor<T> out({batch, oh, ow, c});
  std::vector<std::size_t> argmax(out.size());
  const auto& xv = x.value();
  for (std::size_t n = 0; n < batch; ++n)
    for (std::size_t i = 0; i < oh; ++i)
      for (std::size_t j = 0; j < ow; ++j)
        for (std::size_t k = 0; k < c; ++k) {
          std::size_t best = ((n * h + i * ph) * wd + j * pw) * c + k;
          for (std::size_t di = 0; di < ph; ++di)
            for (std::size_t dj = 0; dj < pw; ++dj) {
              const std::size_t idx = ((n * h + i * ph + di) * wd + j * pw + dj) * c + k;
              if (xv[idx] > xv[best]) best = idx;
            }
          const std::size_t o = ((n * oh + i) * ow + j) * c + k;
          out[o] = xv[best];
          argmax[o] = best;
        }
  const std::size_t ix = x.id;
  return x.tape->record(std::move(out), {x}, [=, argmax = std::move(argmax)](Tape<T>& t, const Tensor<T>& g) {
    if (T* gx = t.grad_buffer(ix))
      for (std::size_t o = 0; o < g.size(); ++o) gx[argmax[o]] += g[o];
  });
}

/// Valid 1-D convolution over sequences. x: [B, L, C]; w: [k*C, F].
template <class T>
Var<T> conv1d(const Var<T>& x, const Var<T>& w, const Var<T>& b, std::size_t k, std::size_t stride) {
  const Shape& xs = x.shape();
  require(xs.size() == 3, ErrorCode::kShapeMismatch, "conv1d expects [B, L, C], got " + shape_str(xs));
  auto y = conv2d(reshape(x, {xs[0], xs[1], 1, xs[2]}), w, b, k, 1, stride);
  const Shape& ys = y.shape();
  return reshape(y, {ys[0], ys[1], ys[3]});
}

template <class T>
Var<T> maxpool1d(const Var<T>& x, std::size_t pool) {
  const Shape& xs = x.shape();
  require(xs.size() == 3, ErrorCode::kShapeMismatch, "maxpool1d expects [B, L, C], got " + shape_str(xs));
  auto y = maxpool2d(reshape(x, {xs[0], xs[1], 1, xs[2]}), pool, 1);
  const Shape& ys = y.shape();
  return reshape(y, {ys[0], ys[1], ys[3]});
}

}  // namespace dualfuse
