#pragma once

#include <atomic>
#include <algorithm>
#include <cstddef>
#include <deque>
#include <functional>
#include <optional>
#include <vector>

#include "dualfuse/error.hpp"
#include "dualfuse/tensor.hpp"

namespace dualfuse {

/// Finite-value guard run after each recorded op. On by default in debug builds.
inline std::atomic<bool>& finite_checks() {
#ifdef NDEBUG
  static std::atomic<bool> flag{false};
#else
  static std::atomic<bool> flag{true};
#endif
  return flag;
}

template <class T>
class Tape;

/// Handle to a value recorded on a Tape.
template <class T>
struct Var {
  Tape<T>* tape = nullptr;
  std::size_t id = 0;

  const Tensor<T>& value() const { return tape->value(id); }
  const Shape& shape() const { return tape->value(id).shape(); }
  std::size_t dim(std::size_t i) const { return shape().at(i); }
  bool requires_grad() const { return tape->requires_grad(id); }
};

/// Append-only record of a forward computation. Ops register their output
/// value and a backward closure; `backward` replays the closures in reverse
/// recording order, which is a reverse topological order because inputs are
/// always recorded before their consumers.
template <class T>
class Tape {
 public:
  /// Receives the gradient of the node's output. Writes into input gradients
  /// through `Tape::grad_buffer`.
  using BackwardFn = std::function<void(Tape& tape, const Tensor<T>& grad_out)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> leaf(Tensor<T> value, bool requires_grad) {
    nodes_.push_back(Node{std::move(value), requires_grad, {}, {}});
    return Var<T>{this, nodes_.size() - 1};
  }

  /// Records an op output. The backward closure is dropped when no input
  /// needs a gradient.
  Var<T> record(Tensor<T> value, std::initializer_list<Var<T>> inputs, BackwardFn backward) {
    return record(std::move(value), std::vector<Var<T>>(inputs), std::move(backward));
  }

  Var<T> record(Tensor<T> value, const std::vector<Var<T>>& inputs, BackwardFn backward) {
    bool needs = false;
    std::vector<std::size_t> ids;
    ids.reserve(inputs.size());
    for (const auto& in : inputs) {
      require(in.tape == this, ErrorCode::kShapeMismatch, "op input belongs to a different tape");
      needs = needs || nodes_[in.id].requires_grad;
      ids.push_back(in.id);
    }
    if (finite_checks().load(std::memory_order_relaxed) && !value.all_finite()) {
      const bool inputs_finite = std::all_of(ids.begin(), ids.end(), [&](std::size_t i) { return nodes_[i].value.all_finite(); });
      if (inputs_finite) fail(ErrorCode::kNonFiniteValue, "op produced NaN/Inf from finite inputs");
    }
    nodes_.push_back(Node{std::move(value), needs, std::move(ids), needs ? std::move(backward) : BackwardFn{}});
    return Var<T>{this, nodes_.size() - 1};
  }

  const Tensor<T>& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  const std::vector<std::size_t>& inputs(std::size_t id) const { return nodes_.at(id).inputs; }
  std::size_t size() const noexcept { return nodes_.size(); }
  bool consumed() const noexcept { return consumed_; }

  /// Mutable gradient accumulator for `id`, zero-initialized on first use.
  /// Returns nullptr when the node does not take part in differentiation.
  T* grad_buffer(std::size_t id) {
    if (!nodes_[id].requires_grad) return nullptr;
    auto& g = grads_[id];
    if (!g) g.emplace(nodes_[id].value.shape());
    return g->data().data();
  }

  T* grad_buffer(const Var<T>& v) { return grad_buffer(v.id); }

  void backward(const Var<T>& root) {
    require(!consumed_, ErrorCode::kTapeConsumed, "backward already ran on this tape");
    require(root.tape == this, ErrorCode::kShapeMismatch, "root belongs to a different tape");
    require(nodes_[root.id].value.size() == 1, ErrorCode::kNotScalarRoot,
            "backward root has shape " + shape_str(nodes_[root.id].value.shape()));
    consumed_ = true;
    grads_.assign(nodes_.size(), std::nullopt);
    if (!nodes_[root.id].requires_grad) return;
    grads_[root.id].emplace(nodes_[root.id].value.shape(), T(1));
    for (std::size_t i = root.id + 1; i-- > 0;) {
      auto& node = nodes_[i];
      if (!node.backward || !grads_[i]) continue;
      node.backward(*this, *grads_[i]);
    }
  }

  /// Gradient of the last backward root w.r.t. `v`; nullopt if it never received one.
  const std::optional<Tensor<T>>& grad(const Var<T>& v) const {
    static const std::optional<Tensor<T>> none;
    if (v.id >= grads_.size()) return none;
    return grads_[v.id];
  }

  Tensor<T> grad_or_zeros(std::size_t id) const {
    if (id < grads_.size() && grads_[id]) return *grads_[id];
    return Tensor<T>(value(id).shape());
  }

  Tensor<T> grad_or_zeros(const Var<T>& v) const { return grad_or_zeros(v.id); }

  void reset() {
    nodes_.clear();
    grads_.clear();
    consumed_ = false;
  }

 private:
  struct Node {
    Tensor<T> value;
    bool requires_grad = false;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
  };

  std::deque<Node> nodes_;  // stable references across appends
  std::vector<std::optional<Tensor<T>>> grads_;
  bool consumed_ = false;
};

}  // namespace dualfuse
