#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "dualfuse/rng.hpp"
#include "dualfuse/tape.hpp"
#include "dualfuse/tensor.hpp"

namespace dualfuse {

/// A named trainable tensor owned by a layer.
template <class T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  bool trainable = true;
};

template <class T>
using ParamList = std::vector<Parameter<T>*>;

/// One forward pass: the tape, the train/eval switch and the dropout stream.
/// Parameters are bound to tape leaves on first use.
template <class T>
class Context {
 public:
  using value_type = T;

  explicit Context(bool training = false, std::uint64_t dropout_seed = 0)
      : training_(training), rng_(dropout_seed, 0x5eedu) {}

  Context(const Context&) = delete;
  Context& operator=(const Context&) = delete;

  bool training() const noexcept { return training_; }
  Rng& rng() noexcept { return rng_; }
  Tape<T>& tape() noexcept { return tape_; }

  /// When false, nothing bound through this context asks for gradients.
  void set_grad_enabled(bool on) noexcept { grad_enabled_ = on; }

  Var<T> bind(const Parameter<T>& p) {
    auto it = bound_.find(&p);
    if (it != bound_.end()) return Var<T>{&tape_, it->second};
    Var<T> v = tape_.leaf(p.value, grad_enabled_ && p.trainable);
    bound_.emplace(&p, v.id);
    return v;
  }

  Var<T> constant(Tensor<T> value) { return tape_.leaf(std::move(value), false); }
  Var<T> input(Tensor<T> value, bool requires_grad) { return tape_.leaf(std::move(value), requires_grad); }

  void backward(const Var<T>& root) { tape_.backward(root); }

  /// Gradient accumulated for `p` by the last backward (zeros if unused).
  Tensor<T> grad(const Parameter<T>& p) const {
    auto it = bound_.find(&p);
    if (it == bound_.end()) return Tensor<T>(p.value.shape());
    return tape_.grad_or_zeros(it->second);
  }

 private:
  Tape<T> tape_;
  bool training_;
  bool grad_enabled_ = true;
  Rng rng_;
  std::unordered_map<const Parameter<T>*, std::size_t> bound_;
};

template <class T>
std::size_t count_parameters(const ParamList<T>& params) {
  std::size_t n = 0;
  for (const auto* p : params) n += p->value.size();
  return n;
}

/// FNV-1a over the raw parameter bytes; used to prove a backbone stayed frozen.
template <class T>
std::uint64_t checksum(const ParamList<T>& params) {
  std::uint64_t h = 1469598103934665603ULL;
  for (const auto* p : params) {
    const auto* bytes = reinterpret_cast<const unsigned char*>(p->value.data().data());
    for (std::size_t i = 0; i < p->value.size() * sizeof(T); ++i) {
      h ^= bytes[i];
      h *= 1099511628211ULL;
    }
  }
  return h;
}

/// Copies values between two parameter lists of identical layout, converting precision.
template <class Src, class Dst>
void copy_parameters(const ParamList<Src>& from, const ParamList<Dst>& to) {
  require(from.size() == to.size(), ErrorCode::kShapeMismatch, "parameter lists differ in length");
  for (std::size_t i = 0; i < from.size(); ++i) {
    require(from[i]->value.shape() == to[i]->value.shape(), ErrorCode::kShapeMismatch,
            "parameter " + from[i]->name + " shape differs");
    to[i]->value = from[i]->value.template cast<Dst>();
  }
}

}  // namespace dualfuse
