#pragma once

#include <memory>

#include "dualfuse/baselines.hpp"
#include "dualfuse/fusion.hpp"
#include "dualfuse/model.hpp"

namespace dualfuse {

template <class T>
std::unique_ptr<Model<T>> make_model(const ModelSpec& spec) {
  switch (spec.kind) {
    case ModelKind::kFusion: return std::make_unique<FusionModel<T>>(spec);
    case ModelKind::kImageOnly: return std::make_unique<ImageOnlyModel<T>>(spec);
    case ModelKind::kTextOnly: return std::make_unique<TextOnlyModel<T>>(spec);
    case ModelKind::kEarlyFusion: return std::make_unique<EarlyFusionModel<T>>(spec);
    case ModelKind::kLateFusion: return std::make_unique<LateFusionModel<T>>(spec);
  }
  fail(ErrorCode::kBadConfig, "unknown model kind");
}

/// Logits for a batch of plain tensors.
template <class T>
Var<T> predict(Context<T>& ctx, const Model<T>& model, const Tensor<T>& text, const Tensor<T>& image) {
  return model.logits(ctx, ctx.constant(text), ctx.constant(image));
}

}  // namespace dualfuse
