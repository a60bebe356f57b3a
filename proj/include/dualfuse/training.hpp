#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "dualfuse/data_io.hpp"
#include "dualfuse/io.hpp"
#include "dualfuse/model.hpp"
#include "dualfuse/ops.hpp"

namespace dualfuse {

struct TrainConfig {
  double lr = 1e-4;
  std::size_t lr_decay_epoch = 20;  // epochs after this one run at lr * lr_decay_factor
  double lr_decay_factor = 0.1;
  std::size_t batch = 64;
  std::size_t epochs = 40;
  double clip_norm = 0.8;
  std::size_t patience = 10;
  double attn_dropout = 0.05;
  double dropout = 0.1;
  std::uint64_t seed = 0;

  void validate() const {
    require(lr > 0 && lr_decay_factor > 0 && clip_norm > 0 && batch > 0 && epochs > 0 && patience > 0,
            ErrorCode::kBadConfig, "training hyperparameters must be positive");
    require(patience <= epochs, ErrorCode::kBadConfig, "patience exceeds the epoch budget");
    require(attn_dropout >= 0 && attn_dropout < 1 && dropout >= 0 && dropout < 1, ErrorCode::kBadConfig,
            "dropout rates must lie in [0, 1)");
  }

  /// Learning rate for a 1-based epoch number.
  double lr_at(std::size_t epoch) const { return epoch > lr_decay_epoch ? lr * lr_decay_factor : lr; }
};

// ---------------------------------------------------------------------------
// Optimizer

template <class T>
struct AdamState {
  static constexpr double kBeta1 = 0.9;
  static constexpr double kBeta2 = 0.999;
  static constexpr double kEps = 1e-8;

  std::vector<Tensor<T>> m, v;
  std::size_t t = 0;
};

/// Bias-corrected Adam; moments are created on the first call.
template <class T>
void adam_step(AdamState<T>& state, const ParamList<T>& params, const std::vector<Tensor<T>>& grads, double lr) {
  require(params.size() == grads.size(), ErrorCode::kShapeMismatch, "adam_step: one gradient per parameter");
  if (state.m.empty()) {
    for (const auto* p : params) {
      state.m.emplace_back(p->value.shape());
      state.v.emplace_back(p->value.shape());
    }
  }
  require(state.m.size() == params.size(), ErrorCode::kShapeMismatch, "adam_step: state built for other parameters");
  for (std::size_t i = 0; i < params.size(); ++i)
    require(grads[i].shape() == params[i]->value.shape() && state.m[i].shape() == grads[i].shape(),
            ErrorCode::kShapeMismatch, "adam_step: gradient shape differs for " + params[i]->name);

  ++state.t;
  const double b1 = AdamState<T>::kBeta1, b2 = AdamState<T>::kBeta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i]->trainable) continue;
    auto& w = params[i]->value;
    auto& m = state.m[i];
    auto& v = state.v[i];
    const auto& g = grads[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      const double gj = static_cast<double>(g[j]);
      const double mj = b1 * static_cast<double>(m[j]) + (1.0 - b1) * gj;
      const double vj = b2 * static_cast<double>(v[j]) + (1.0 - b2) * gj * gj;
      m[j] = static_cast<T>(mj);
      v[j] = static_cast<T>(vj);
      w[j] = static_cast<T>(static_cast<double>(w[j]) - lr * (mj / c1) / (std::sqrt(vj / c2) + AdamState<T>::kEps));
    }
  }
}

/// Global L2-norm clipping. Returns the norm before clipping.
template <class T>
double clip_gradients(std::vector<Tensor<T>>& grads, double max_norm) {
  double sq = 0;
  for (const auto& g : grads)
    for (T x : g.data()) sq += static_cast<double>(x) * static_cast<double>(x);
  const double norm = std::sqrt(sq);
  require(std::isfinite(norm), ErrorCode::kNonFiniteGradient, "gradient norm is not finite");
  if (norm > max_norm) {
    const T s = static_cast<T>(max_norm / norm);
    for (auto& g : grads)
      for (T& x : g.data()) x *= s;
  }
  return norm;
}

/// Tracks the best validation loss; `should_stop` after `patience` epochs without improvement.
class EarlyStopping {
 public:
  explicit EarlyStopping(std::size_t patience) : patience_(patience) {}

  /// Returns true when this epoch is the new best.
  bool update(std::size_t epoch, double val_loss) {
    if (val_loss < best_loss_) {
      best_loss_ = val_loss;
      best_epoch_ = epoch;
      stale_ = 0;
      return true;
    }
    ++stale_;
    return false;
  }

  bool should_stop() const { return stale_ >= patience_; }
  std::size_t best_epoch() const { return best_epoch_; }
  double best_loss() const { return best_loss_; }

 private:
  std::size_t patience_;
  std::size_t best_epoch_ = 0;
  std::size_t stale_ = 0;
  double best_loss_ = std::numeric_limits<double>::infinity();
};

// ---------------------------------------------------------------------------
// Metrics

using ConfusionMatrix = std::vector<std::vector<std::uint64_t>>;  // [true][predicted]

struct MetricsReport {
  double oa = 0, aa = 0, kappa = 0;
  double topk_oa = 0;
  std::size_t k = 1;
  double loss = 0;
  ConfusionMatrix confusion;
};

/// k = 5 by default, 3 for six classes or fewer.
inline std::size_t default_topk(std::size_t classes) { return classes <= 6 ? 3 : 5; }

/// (p_o - p_e) / (1 - p_e); when p_e = 1 the result is 1 if p_o = 1 and 0 otherwise.
/// Evaluated as (N*diag - sum r_i c_i) / (N^2 - sum r_i c_i) in exact integers,
/// so the one rounding happens in the final division.
inline double cohen_kappa(const ConfusionMatrix& cm) {
  const std::size_t c = cm.size();
  std::uint64_t total = 0, diag = 0;
  std::vector<std::uint64_t> rows(c, 0), cols(c, 0);
  for (std::size_t i = 0; i < c; ++i) {
    require(cm[i].size() == c, ErrorCode::kShapeMismatch, "confusion matrix must be square");
    for (std::size_t j = 0; j < c; ++j) {
      total += cm[i][j];
      rows[i] += cm[i][j];
      cols[j] += cm[i][j];
    }
    diag += cm[i][i];
  }
  require(total > 0, ErrorCode::kEmptyMatrix, "confusion matrix has no entries");
  if (total < (std::uint64_t{1} << 32)) {  // N^2 fits
    std::uint64_t chance = 0;
    for (std::size_t i = 0; i < c; ++i) chance += rows[i] * cols[i];
    const std::uint64_t observed = total * diag, all = total * total;
    if (chance == all) return observed == all ? 1.0 : 0.0;
    const double num = observed >= chance ? static_cast<double>(observed - chance) : -static_cast<double>(chance - observed);
    return num / static_cast<double>(all - chance);
  }
  const double n = static_cast<double>(total);
  const double po = static_cast<double>(diag) / n;
  double pe = 0;
  for (std::size_t i = 0; i < c; ++i) pe += static_cast<double>(rows[i]) * static_cast<double>(cols[i]);
  pe /= n * n;
  if (pe == 1.0) return po == 1.0 ? 1.0 : 0.0;
  return (po - pe) / (1.0 - pe);
}

/// Rank of the true class among the logits: classes scoring higher, plus
/// equal-scoring classes with a lower id. Rank 0 is the argmax prediction.
template <class T>
std::size_t label_rank(std::span<const T> logits, Label y) {
  std::size_t rank = 0;
  for (std::size_t c = 0; c < logits.size(); ++c)
    if (logits[c] > logits[y] || (logits[c] == logits[y] && c < y)) ++rank;
  return rank;
}

/// Metrics from a [N, C] logit matrix; top-k counts rank < k.
template <class T>
MetricsReport compute_metrics(const Tensor<T>& logits, std::span<const Label> labels, std::size_t k) {
  require(!labels.empty(), ErrorCode::kEmptyEvalSet, "no samples to evaluate");
  require(logits.shape().size() == 2 && logits.dim(0) == labels.size(), ErrorCode::kShapeMismatch,
          "logits must be [N, C] with one row per label");
  const std::size_t c = logits.dim(1);
  MetricsReport r;
  r.k = k;
  r.confusion.assign(c, std::vector<std::uint64_t>(c, 0));
  std::size_t topk = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    require(labels[i] < c, ErrorCode::kLabelOutOfRange, "label " + std::to_string(labels[i]) + " out of range");
    std::span<const T> row(logits.data().data() + i * c, c);
    std::size_t pred = 0;
    for (std::size_t j = 1; j < c; ++j)
      if (row[j] > row[pred]) pred = j;
    ++r.confusion[labels[i]][pred];
    if (label_rank(row, labels[i]) < k) ++topk;
  }
  const double n = static_cast<double>(labels.size());
  std::uint64_t diag = 0;
  double recall_sum = 0;
  std::size_t present = 0;
  for (std::size_t i = 0; i < c; ++i) {
    diag += r.confusion[i][i];
    std::uint64_t support = 0;
    for (auto v : r.confusion[i]) support += v;
    if (support) {
      recall_sum += static_cast<double>(r.confusion[i][i]) / static_cast<double>(support);
      ++present;
    }
  }
  r.oa = static_cast<double>(diag) / n;
  r.aa = recall_sum / static_cast<double>(present);
  r.kappa = cohen_kappa(r.confusion);
  r.topk_oa = static_cast<double>(topk) / n;
  return r;
}

// ---------------------------------------------------------------------------
// Batching, evaluation, training

template <class T>
struct SampleBatch {
  Tensor<T> text, image;
  std::vector<Label> labels;
};

template <class T>
SampleBatch<T> make_batch(const EmbeddingDataset& ds, std::span<const std::size_t> idx) {
  SampleBatch<T> b;
  if constexpr (std::is_same_v<T, float>) {
    b.text = take_rows(ds.text, idx);
    b.image = take_rows(ds.image, idx);
  } else {
    b.text = take_rows(ds.text, idx).template cast<T>();
    b.image = take_rows(ds.image, idx).template cast<T>();
  }
  b.labels.reserve(idx.size());
  for (auto i : idx) b.labels.push_back(ds.labels.at(i));
  return b;
}

template <class T>
void check_dataset_fits(const Model<T>& model, const EmbeddingDataset& ds, bool check_classes = true) {
  const auto& d = model.spec().dims;
  require(ds.image_shape() == Shape{d.image_len, d.image_dim} && ds.text_shape() == Shape{d.text_len, d.text_dim},
          ErrorCode::kShapeMismatch,
          "dataset shapes image " + shape_str(ds.image_shape()) + " / text " + shape_str(ds.text_shape()) +
              " do not match the model");
  require(!check_classes || ds.num_classes() == d.num_classes, ErrorCode::kShapeMismatch,
          "dataset has " + std::to_string(ds.num_classes()) + " classes, model " + std::to_string(d.num_classes));
}

/// Eval-mode logits for `indices`, in order, as an [N, C] matrix.
template <class T>
Tensor<T> predict_logits(const Model<T>& model, const EmbeddingDataset& ds, std::span<const std::size_t> indices,
                         std::size_t batch = 256) {
  const std::size_t c = model.spec().dims.num_classes;
  Tensor<T> out({indices.size(), c});
  for (std::size_t at = 0; at < indices.size(); at += batch) {
    auto idx = indices.subspan(at, std::min(batch, indices.size() - at));
    auto b = make_batch<T>(ds, idx);
    Context<T> ctx(false);
    ctx.set_grad_enabled(false);
    auto logits = model.logits(ctx, ctx.constant(std::move(b.text)), ctx.constant(std::move(b.image)));
    std::copy(logits.value().data().begin(), logits.value().data().end(), out.data().begin() + at * c);
  }
  return out;
}

/// Mean cross-entropy of an [N, C] logit matrix.
template <class T>
double mean_cross_entropy(const Tensor<T>& logits, std::span<const Label> labels) {
  const std::size_t c = logits.dim(1);
  double total = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const T* row = logits.data().data() + i * c;
    double mx = row[0];
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, static_cast<double>(row[j]));
    double z = 0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp(static_cast<double>(row[j]) - mx);
    total += mx + std::log(z) - static_cast<double>(row[labels[i]]);
  }
  return total / static_cast<double>(labels.size());
}

/// Dropout off; argmax predictions fill the confusion matrix.
template <class T>
MetricsReport evaluate(const Model<T>& model, const EmbeddingDataset& ds, std::span<const std::size_t> indices,
                       std::size_t k) {
  require(!indices.empty(), ErrorCode::kEmptyEvalSet, "no samples to evaluate");
  check_dataset_fits(model, ds);
  auto logits = predict_logits(model, ds, indices);
  std::vector<Label> labels;
  for (auto i : indices) labels.push_back(ds.labels.at(i));
  auto r = compute_metrics(logits, std::span<const Label>(labels), k);
  r.loss = mean_cross_entropy(logits, std::span<const Label>(labels));
  return r;
}

struct EpochRecord {
  std::size_t epoch = 0;
  double lr = 0, train_loss = 0, val_loss = 0, val_oa = 0;
};

struct TrainResult {
  std::vector<EpochRecord> history;
  std::size_t best_epoch = 0;
  double best_val_loss = 0;
  std::size_t steps = 0;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Minibatch Adam on `splits.train` with per-epoch validation on `splits.val`.
/// Stops after `patience` epochs without a lower validation loss and leaves
/// the model holding the parameters of the best epoch.
template <class T>
TrainResult train_model(Model<T>& model, const EmbeddingDataset& ds, const Splits& splits, const TrainConfig& cfg,
                        const EpochCallback& on_epoch = {}) {
  cfg.validate();
  check_dataset_fits(model, ds);
  require(!splits.train.empty(), ErrorCode::kEmptyEvalSet, "empty training split");
  require(!splits.val.empty(), ErrorCode::kEmptyEvalSet, "empty validation split");

  auto params = model.parameters();
  AdamState<T> adam;
  EarlyStopping stopper(cfg.patience);
  std::vector<Tensor<T>> best;
  Rng order(cfg.seed, 0x0bd3u);
  std::uint64_t dropout_seed = cfg.seed * 0x9e3779b97f4a7c15ULL;
  std::vector<Label> val_labels;
  for (auto i : splits.val) val_labels.push_back(ds.labels.at(i));

  TrainResult result;
  std::vector<std::size_t> idx = splits.train;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const double lr = cfg.lr_at(epoch);
    order.shuffle(idx);
    double loss_sum = 0;
    for (std::size_t at = 0; at < idx.size(); at += cfg.batch) {
      std::span<const std::size_t> part(idx.data() + at, std::min(cfg.batch, idx.size() - at));
      auto b = make_batch<T>(ds, part);
      Context<T> ctx(true, ++dropout_seed);
      auto loss = cross_entropy(model.logits(ctx, ctx.constant(std::move(b.text)), ctx.constant(std::move(b.image))),
                                std::span<const Label>(b.labels));
      ctx.backward(loss);
      std::vector<Tensor<T>> grads;
      grads.reserve(params.size());
      for (const auto* p : params) grads.push_back(ctx.grad(*p));
      clip_gradients(grads, cfg.clip_norm);
      adam_step(adam, params, grads, lr);
      loss_sum += static_cast<double>(loss.value().item()) * static_cast<double>(part.size());
      ++result.steps;
    }

    auto val_logits = predict_logits(model, ds, splits.val);
    EpochRecord rec{epoch, lr, loss_sum / static_cast<double>(idx.size()),
                    mean_cross_entropy(val_logits, std::span<const Label>(val_labels)),
                    compute_metrics(val_logits, std::span<const Label>(val_labels), 1).oa};
    result.history.push_back(rec);
    if (on_epoch) on_epoch(rec);
    if (stopper.update(epoch, rec.val_loss)) {
      best.clear();
      for (const auto* p : params) best.push_back(p->value);
    }
    if (stopper.should_stop()) break;
  }
  for (std::size_t i = 0; i < params.size(); ++i) params[i]->value = best[i];
  result.best_epoch = stopper.best_epoch();
  result.best_val_loss = stopper.best_loss();
  return result;
}

// ---------------------------------------------------------------------------
// Report files

inline io::json epoch_to_json(const EpochRecord& r) {
  return {{"epoch", r.epoch}, {"lr", r.lr}, {"train_loss", r.train_loss}, {"val_loss", r.val_loss}, {"val_OA", r.val_oa}};
}

inline std::string history_jsonl(const std::vector<EpochRecord>& history) {
  std::string out;
  for (const auto& r : history) out += epoch_to_json(r).dump() + "\n";
  return out;
}

inline io::json metrics_to_json(const MetricsReport& r) {
  return {{"OA", r.oa},
          {"AA", r.aa},
          {"Kappa", r.kappa},
          {"topk_OA", r.topk_oa},
          {"k", r.k},
          {"loss", r.loss},
          {"confusion", r.confusion}};
}

/// Header row of class names (with a leading empty cell), then one row per true class.
inline std::string confusion_csv(const ConfusionMatrix& cm, const std::vector<std::string>& class_names) {
  std::string out = "true\\pred";
  for (const auto& n : class_names) out += "," + n;
  out += "\n";
  for (std::size_t i = 0; i < cm.size(); ++i) {
    out += class_names.at(i);
    for (auto v : cm[i]) out += "," + std::to_string(v);
    out += "\n";
  }
  return out;
}

}  // namespace dualfuse
