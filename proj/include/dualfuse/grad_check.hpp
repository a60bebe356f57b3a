#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "dualfuse/context.hpp"
#include "dualfuse/error.hpp"
#include "dualfuse/rng.hpp"

namespace dualfuse {

/// Builds a scalar loss on the given context. Must be deterministic in eval mode.
template <class T>
using LossFn = std::function<Var<T>(Context<T>&)>;

struct GradCheckOptions {
  double step = 1e-3;
  double tolerance = 1e-3;
  // Per-element error is |a - n| / max(|a|, |n|, abs_floor), so gradients
  // below the floor are judged on absolute error.
  double abs_floor = 1e-3;
  // 0 checks every entry; otherwise a seeded sample of this many per parameter.
  std::size_t max_entries = 0;
  std::uint64_t seed = 7;
  // Entries whose difference quotients (h vs 2h central, left vs right
  // one-sided) disagree by more than the tolerance straddle a kink (ReLU,
  // max-pool) and are skipped; the check
  // fails if more than this fraction of a parameter is skipped.
  double max_skipped_fraction = 0.25;

  /// f32 tape checked against an f64 twin, h = 1e-4, relative tolerance 1e-3.
  static GradCheckOptions f32() { return {.step = 1e-4, .tolerance = 1e-3}; }
  /// f64 tape, h = 1e-5, relative tolerance 1e-6.
  static GradCheckOptions f64() { return {.step = 1e-5, .tolerance = 1e-6}; }
};

struct ParamGradCheck {
  std::string name;
  std::size_t checked = 0;
  std::size_t skipped = 0;
  double max_abs_error = 0.0;
  double max_rel_error = 0.0;
  bool pass = true;
};

struct GradCheckReport {
  std::vector<ParamGradCheck> params;
  double max_rel_error = 0.0;
  bool pass = true;
};

namespace detail {

template <class U>
double eval_loss(const LossFn<U>& f) {
  Context<U> ctx(false);
  ctx.set_grad_enabled(false);
  return static_cast<double>(f(ctx).value().item());
}

}  // namespace detail

/// Compares tape gradients of `f` against central differences of `oracle_f`.
/// The two may run at different precisions (e.g. an f32 tape checked against
/// an f64 twin); `oracle_params` must hold the same values as `params`.
template <class T, class U>
GradCheckReport grad_check(const LossFn<T>& f, const ParamList<T>& params, const LossFn<U>& oracle_f,
                           const ParamList<U>& oracle_params, const GradCheckOptions& opts = {}) {
  require(params.size() == oracle_params.size(), ErrorCode::kShapeMismatch, "grad_check parameter lists differ");

  std::vector<Tensor<T>> analytic;
  {
    Context<T> ctx(false);
    auto loss = f(ctx);
    ctx.backward(loss);
    for (const auto* p : params) analytic.push_back(ctx.grad(*p));
  }

  const double base = detail::eval_loss(oracle_f);
  const double again = detail::eval_loss(oracle_f);
  require(base == again || (std::isnan(base) && std::isnan(again)), ErrorCode::kNonDeterministicFunction,
          "two evaluations at the same point differ");

  Rng rng(opts.seed);
  GradCheckReport report;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Parameter<U>& p = *oracle_params[pi];
    ParamGradCheck pc;
    pc.name = params[pi]->name;

    std::vector<std::size_t> idx(p.value.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    if (opts.max_entries && idx.size() > opts.max_entries) {
      for (std::size_t i = 0; i < opts.max_entries; ++i) {
        const std::size_t j = i + rng.below(static_cast<std::uint32_t>(idx.size() - i));
        std::swap(idx[i], idx[j]);
      }
      idx.resize(opts.max_entries);
      std::sort(idx.begin(), idx.end());
    }

    for (std::size_t e : idx) {
      const U orig = p.value[e];
      // Loss at orig + k*step for k = -2..2; the offsets actually representable in U are kept.
      double f[5], x[5];
      for (int k = -2; k <= 2; ++k) {
        const U v = static_cast<U>(orig + static_cast<U>(k * opts.step));
        x[k + 2] = static_cast<double>(v) - static_cast<double>(orig);
        if (k == 0) {
          f[2] = base;
          continue;
        }
        p.value[e] = v;
        f[k + 2] = detail::eval_loss(oracle_f);
      }
      p.value[e] = orig;
      const double c1 = (f[3] - f[1]) / (x[3] - x[1]);
      const double c2 = (f[4] - f[0]) / (x[4] - x[0]);
      // Second-order one-sided differences; smooth functions make them agree to O(h^3).
      const double right = (-3.0 * f[2] + 4.0 * f[3] - f[4]) / (2.0 * x[3]);
      const double left = (3.0 * f[2] - 4.0 * f[1] + f[0]) / (-2.0 * x[1]);
      // One Richardson step cancels the h^2 truncation term.
      const double numeric = (4.0 * c1 - c2) / 3.0;
      const double a = static_cast<double>(analytic[pi][e]);
      const double abs_err = std::abs(a - numeric);
      const double denom = std::max({std::abs(a), std::abs(numeric), opts.abs_floor});
      ++pc.checked;
      if (std::max(std::abs(c1 - c2), std::abs(right - left)) > opts.tolerance * denom) {
        ++pc.skipped;
        continue;
      }
      pc.max_abs_error = std::max(pc.max_abs_error, abs_err);
      pc.max_rel_error = std::max(pc.max_rel_error, abs_err / denom);
    }
    pc.pass = pc.max_rel_error <= opts.tolerance &&
              static_cast<double>(pc.skipped) <= opts.max_skipped_fraction * static_cast<double>(pc.checked);
    report.max_rel_error = std::max(report.max_rel_error, pc.max_rel_error);
    report.pass = report.pass && pc.pass;
    report.params.push_back(std::move(pc));
  }
  return report;
}

template <class T>
GradCheckReport grad_check(const LossFn<T>& f, const ParamList<T>& params, const GradCheckOptions& opts = {}) {
  return grad_check<T, T>(f, params, f, params, opts);
}

}  // namespace dualfuse
