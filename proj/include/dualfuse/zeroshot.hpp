#pragma once

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "dualfuse/data_io.hpp"
#include "dualfuse/io.hpp"
#include "dualfuse/layers.hpp"
#include "dualfuse/model.hpp"
#include "dualfuse/models.hpp"
#include "dualfuse/training.hpp"

namespace dualfuse {

// ---------------------------------------------------------------------------
// Class attributes

/// One precomputed attribute vector per class, [C, D_attr].
struct AttributeSet {
  Tensor<float> vectors;

  std::size_t num_classes() const { return vectors.shape().empty() ? 0 : vectors.dim(0); }
  std::size_t dim() const { return vectors.shape().size() == 2 ? vectors.dim(1) : 0; }

  void validate() const {
    require(vectors.shape().size() == 2 && vectors.dim(0) > 0 && vectors.dim(1) > 0, ErrorCode::kShapeMismatch,
            "attributes must be a non-empty [C, D_attr] matrix, got " + shape_str(vectors.shape()));
    for (float v : vectors.data()) require(std::isfinite(v), ErrorCode::kNonFiniteValue, "non-finite attribute");
  }
};

inline void save_attributes(const AttributeSet& attrs, const io::fs::path& dir) {
  attrs.validate();
  io::write_json(dir / "attributes.json", {{"version", 1},
                                           {"dtype", "f32le"},
                                           {"num_classes", attrs.num_classes()},
                                           {"attr_dim", attrs.dim()}});
  io::write_file(dir / "attributes.bin", io::encode_le<float>(attrs.vectors.data()));
}

inline AttributeSet load_attributes(const io::fs::path& dir) {
  const auto where = dir / "attributes.json";
  const auto m = io::read_json(where);
  require(io::field<int>(m, "version", where) == 1 && io::field<std::string>(m, "dtype", where) == "f32le",
          ErrorCode::kBadMagic, where.string() + ": not a version 1 f32le attribute file");
  const auto c = io::field<std::size_t>(m, "num_classes", where), d = io::field<std::size_t>(m, "attr_dim", where);
  require(c > 0 && d > 0, ErrorCode::kShapeMismatchWithManifest, where.string() + ": empty attribute matrix");
  AttributeSet a{Tensor<float>({c, d}, io::decode_le<float>(io::read_file(dir / "attributes.bin"), c * d,
                                                              "attributes.bin"))};
  a.validate();
  return a;
}

/// Synthetic attributes: a fixed random linear image of each class's
/// token-averaged (image mean, text mean) pair plus a little noise. Classes
/// that share one modality's mean still get distinct attributes.
inline AttributeSet synthetic_attributes(const SyntheticConfig& cfg, std::uint64_t seed, std::size_t attr_dim,
                                         double noise = 0.05) {
  require(attr_dim > 0, ErrorCode::kBadConfig, "attr_dim must be positive");
  const ClassMeans means = synthetic_class_means(cfg, seed);
  const std::size_t di = cfg.image_dim, dt = cfg.text_dim;
  Rng rng(seed, 0xa77bu);
  Tensor<double> map = normal_tensor<double>(rng, {attr_dim, di + dt}, 0.0, 1.0);
  // Token averages of unit rows have norm ~ 1/sqrt(L); rescale both
  // modalities to unit scale so each contributes equally.
  const double si = std::sqrt(static_cast<double>(cfg.image_len)), st = std::sqrt(static_cast<double>(cfg.text_len));
  AttributeSet a{Tensor<float>({cfg.classes, attr_dim})};
  std::vector<double> pooled(di + dt);
  for (std::size_t c = 0; c < cfg.classes; ++c) {
    std::fill(pooled.begin(), pooled.end(), 0.0);
    for (std::size_t l = 0; l < cfg.image_len; ++l)
      for (std::size_t j = 0; j < di; ++j) pooled[j] += means.image[c].at(l, j) * si / static_cast<double>(cfg.image_len);
    for (std::size_t l = 0; l < cfg.text_len; ++l)
      for (std::size_t j = 0; j < dt; ++j) pooled[di + j] += means.text[c].at(l, j) * st / static_cast<double>(cfg.text_len);
    for (std::size_t r = 0; r < attr_dim; ++r) {
      double s = 0;
      for (std::size_t j = 0; j < di + dt; ++j) s += map.at(r, j) * pooled[j];
      a.vectors.at(c, r) = static_cast<float>(s / std::sqrt(2.0) + noise * rng.normal());
    }
  }
  return a;
}

// ---------------------------------------------------------------------------
// Known/unknown partition

struct KnownUnknownSplit {
  std::vector<Label> known, unknown;  // ascending class ids
  std::string ratio;
};

/// "25/5" -> {25, 5}.
inline std::pair<std::size_t, std::size_t> parse_ratio(std::string_view ratio) {
  const auto slash = ratio.find('/');
  std::size_t a = 0, b = 0;
  bool ok = slash != std::string_view::npos;
  if (ok) {
    auto r1 = std::from_chars(ratio.data(), ratio.data() + slash, a);
    auto r2 = std::from_chars(ratio.data() + slash + 1, ratio.data() + ratio.size(), b);
    ok = r1.ec == std::errc{} && r1.ptr == ratio.data() + slash && r2.ec == std::errc{} &&
         r2.ptr == ratio.data() + ratio.size();
  }
  require(ok, ErrorCode::kRatioMismatch, "ratio must look like K/U, got '" + std::string(ratio) + "'");
  return {a, b};
}

inline KnownUnknownSplit split_classes(std::size_t classes, std::string_view ratio, std::uint64_t seed) {
  const auto [k, u] = parse_ratio(ratio);
  require(k + u == classes && k > 0 && u > 0, ErrorCode::kRatioMismatch,
          "ratio " + std::string(ratio) + " does not partition " + std::to_string(classes) + " classes");
  std::vector<Label> ids(classes);
  std::iota(ids.begin(), ids.end(), Label{0});
  Rng rng(seed, 0xc1a55u);
  rng.shuffle(ids);
  KnownUnknownSplit s{{ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(k)},
                      {ids.begin() + static_cast<std::ptrdiff_t>(k), ids.end()},
                      std::string(ratio)};
  std::sort(s.known.begin(), s.known.end());
  std::sort(s.unknown.begin(), s.unknown.end());
  return s;
}

// ---------------------------------------------------------------------------
// Instrumented loader

/// Hands out samples of allowed classes only and logs every index it touched.
class KnownClassLoader {
 public:
  KnownClassLoader(const EmbeddingDataset& ds, const std::vector<Label>& allowed)
      : ds_(&ds), allowed_(ds.num_classes(), false) {
    for (Label c : allowed) allowed_.at(c) = true;
  }

  /// Indices of all samples whose class is allowed, in dataset order.
  std::vector<std::size_t> eligible() const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < ds_->size(); ++i)
      if (allowed_[ds_->labels[i]]) out.push_back(i);
    return out;
  }

  template <class T>
  SampleBatch<T> fetch(std::span<const std::size_t> idx) {
    for (auto i : idx) {
      require(i < ds_->size() && allowed_[ds_->labels[i]], ErrorCode::kLabelOutOfRange,
              "loader asked for sample " + std::to_string(i) + " outside the allowed classes");
      touched_.push_back(i);
    }
    return make_batch<T>(*ds_, idx);
  }

  const std::vector<std::size_t>& touched() const { return touched_; }

 private:
  const EmbeddingDataset* ds_;
  std::vector<bool> allowed_;
  std::vector<std::size_t> touched_;
};

// ---------------------------------------------------------------------------
// Head

/// Frozen backbone features and class attributes projected into a shared
/// space and compared by cosine / tau.
template <class T>
class ZeroShotHead {
 public:
  static constexpr double kTemperature = 0.07;
  static constexpr double kNormEps = 1e-12;

  ZeroShotHead(Model<T>& backbone, std::size_t attr_dim, std::size_t emb_dim, std::uint64_t seed)
      : backbone_(&backbone) {
    Rng rng(seed, 0x2e50u);
    data_proj = Linear<T>("zeroshot.data_proj", backbone.feature_dim(), emb_dim, rng);
    attr_proj = Linear<T>("zeroshot.attr_proj", attr_dim, emb_dim, rng);
  }

  Model<T>& backbone() const { return *backbone_; }

  /// Backbone features in eval mode, never recorded for gradients.
  Tensor<T> features(const SampleBatch<T>& b) const {
    Context<T> ctx(false);
    ctx.set_grad_enabled(false);
    return backbone_->features(ctx, ctx.constant(b.text), ctx.constant(b.image)).value();
  }

  /// Cosine similarities [B, K] between projected features [B, F] and projected attributes [K, D_attr].
  Var<T> cosine(Context<T>& ctx, const Var<T>& feats, const Var<T>& attrs) const {
    auto z = normalize_rows(data_proj.forward(ctx, feats), T(kNormEps));
    auto a = normalize_rows(attr_proj.forward(ctx, attrs), T(kNormEps));
    return matmul(z, transpose(a));
  }

  Var<T> logits(Context<T>& ctx, const Var<T>& feats, const Var<T>& attrs) const {
    return scale(cosine(ctx, feats, attrs), T(1.0 / kTemperature));
  }

  ParamList<T> parameters() {
    auto out = data_proj.parameters();
    for (auto* p : attr_proj.parameters()) out.push_back(p);
    return out;
  }

  Linear<T> data_proj, attr_proj;

 private:
  Model<T>* backbone_;
};

/// Rows of `attrs` for the listed classes, [K, D_attr].
template <class T>
Tensor<T> attribute_rows(const AttributeSet& attrs, const std::vector<Label>& classes) {
  std::vector<std::size_t> rows(classes.begin(), classes.end());
  for (auto r : rows)
    require(r < attrs.num_classes(), ErrorCode::kLabelOutOfRange, "class " + std::to_string(r) + " has no attributes");
  auto t = take_rows(attrs.vectors, std::span<const std::size_t>(rows));
  if constexpr (std::is_same_v<T, float>) return t;
  else return t.template cast<T>();
}

// ---------------------------------------------------------------------------
// Training

struct ZeroShotConfig {
  double lr = 1e-3;
  std::size_t epochs = 30;
  std::size_t batch = 64;
  std::size_t emb_dim = 64;
  double clip_norm = 0.8;
  std::uint64_t seed = 0;

  void validate() const {
    require(lr > 0 && epochs > 0 && batch > 0 && emb_dim > 0 && clip_norm > 0, ErrorCode::kBadConfig,
            "zero-shot hyperparameters must be positive");
  }
};

struct ZeroShotTrainResult {
  std::vector<double> epoch_loss;
  std::vector<std::size_t> touched;  // every sample index the loader handed out
  std::uint64_t backbone_checksum = 0;
};

/// Trains only the two projections with class-wise cross-entropy over the
/// known classes. `train_indices` may name any samples; only those of known
/// classes are used.
template <class T>
ZeroShotTrainResult train_zeroshot(ZeroShotHead<T>& head, const EmbeddingDataset& ds, const AttributeSet& attrs,
                                   const std::vector<Label>& known, std::span<const std::size_t> train_indices,
                                   const ZeroShotConfig& cfg) {
  cfg.validate();
  attrs.validate();
  require(!known.empty(), ErrorCode::kEmptyCandidates, "no known classes to train on");
  require(attrs.num_classes() == ds.num_classes(), ErrorCode::kShapeMismatch,
          "attribute rows do not match the dataset classes");
  check_dataset_fits(head.backbone(), ds, false);

  auto backbone_params = head.backbone().backbone_parameters();
  const auto before = checksum(backbone_params);

  std::vector<std::size_t> local(ds.num_classes(), known.size());
  for (std::size_t k = 0; k < known.size(); ++k) local.at(known[k]) = k;

  KnownClassLoader loader(ds, known);
  std::vector<std::size_t> idx;
  for (auto i : train_indices)
    if (local.at(ds.labels.at(i)) < known.size()) idx.push_back(i);
  require(!idx.empty(), ErrorCode::kEmptyEvalSet, "no training samples of known classes");

  // The backbone is frozen, so its features are computed once.
  Tensor<T> feats({idx.size(), head.backbone().feature_dim()});
  for (std::size_t at = 0; at < idx.size(); at += 256) {
    std::span<const std::size_t> part(idx.data() + at, std::min<std::size_t>(256, idx.size() - at));
    const auto f = head.features(loader.fetch<T>(part));
    std::copy(f.data().begin(), f.data().end(), feats.data().begin() + static_cast<std::ptrdiff_t>(at * f.dim(1)));
  }
  const Tensor<T> known_attrs = attribute_rows<T>(attrs, known);

  auto params = head.parameters();
  AdamState<T> adam;
  Rng order(cfg.seed, 0x2e0du);
  std::vector<std::size_t> pos(idx.size());
  std::iota(pos.begin(), pos.end(), std::size_t{0});
  ZeroShotTrainResult result;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    order.shuffle(pos);
    double loss_sum = 0;
    for (std::size_t at = 0; at < pos.size(); at += cfg.batch) {
      std::span<const std::size_t> part(pos.data() + at, std::min(cfg.batch, pos.size() - at));
      std::vector<Label> y;
      for (auto p : part) y.push_back(static_cast<Label>(local[ds.labels[idx[p]]]));
      Context<T> ctx(true);
      auto loss = cross_entropy(head.logits(ctx, ctx.constant(take_rows(feats, part)), ctx.constant(known_attrs)),
                                std::span<const Label>(y));
      ctx.backward(loss);
      std::vector<Tensor<T>> grads;
      for (const auto* p : params) grads.push_back(ctx.grad(*p));
      clip_gradients(grads, cfg.clip_norm);
      adam_step(adam, params, grads, cfg.lr);
      loss_sum += static_cast<double>(loss.value().item()) * static_cast<double>(part.size());
    }
    result.epoch_loss.push_back(loss_sum / static_cast<double>(pos.size()));
  }

  result.backbone_checksum = checksum(backbone_params);
  require(result.backbone_checksum == before, ErrorCode::kBackboneMutated,
          "backbone parameters changed during zero-shot training");
  result.touched = loader.touched();
  return result;
}

// ---------------------------------------------------------------------------
// Inference

/// Index into `candidates` of the best match for each row of `feats`.
template <class T>
std::vector<Label> zeroshot_predict(const ZeroShotHead<T>& head, const Tensor<T>& feats, const AttributeSet& attrs,
                                    const std::vector<Label>& candidates) {
  require(!candidates.empty(), ErrorCode::kEmptyCandidates, "zero-shot inference needs at least one candidate");
  Context<T> ctx(false);
  ctx.set_grad_enabled(false);
  const auto cos = head.cosine(ctx, ctx.constant(feats), ctx.constant(attribute_rows<T>(attrs, candidates))).value();
  const std::size_t k = candidates.size();
  std::vector<Label> out(feats.dim(0));
  for (std::size_t i = 0; i < out.size(); ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < k; ++j)
      if (cos[i * k + j] > cos[i * k + best]) best = j;
    out[i] = candidates[best];
  }
  return out;
}

template <class T>
Label zeroshot_infer(const ZeroShotHead<T>& head, const SampleBatch<T>& sample, const AttributeSet& attrs,
                     const std::vector<Label>& candidates) {
  require(sample.text.dim(0) == 1, ErrorCode::kShapeMismatch, "zeroshot_infer takes one sample");
  return zeroshot_predict(head, head.features(sample), attrs, candidates).front();
}

/// Top-1 accuracy over `indices` with the given candidate classes.
template <class T>
double zeroshot_top1(const ZeroShotHead<T>& head, const EmbeddingDataset& ds, std::span<const std::size_t> indices,
                     const AttributeSet& attrs, const std::vector<Label>& candidates) {
  require(!indices.empty(), ErrorCode::kEmptyEvalSet, "no samples to evaluate");
  std::size_t hits = 0;
  for (std::size_t at = 0; at < indices.size(); at += 256) {
    auto part = indices.subspan(at, std::min<std::size_t>(256, indices.size() - at));
    auto pred = zeroshot_predict(head, head.features(make_batch<T>(ds, part)), attrs, candidates);
    for (std::size_t i = 0; i < part.size(); ++i) hits += pred[i] == ds.labels[part[i]];
  }
  return static_cast<double>(hits) / static_cast<double>(indices.size());
}

// ---------------------------------------------------------------------------
// Experiment

struct ZeroShotRun {
  std::string ratio;
  std::string backbone;
  std::vector<Label> known, unknown;
  double top1 = 0;
  std::size_t unknown_samples = 0;
  std::uint64_t backbone_checksum = 0;
  bool backbone_frozen = false;
};

/// Pretrains `backbone_spec` on the known classes only, fits the zero-shot
/// projections on the same known-class training samples, and scores top-1
/// over every sample of the unknown classes.
inline ZeroShotRun run_zeroshot(const EmbeddingDataset& ds, const AttributeSet& attrs, const KnownUnknownSplit& split,
                                ModelSpec backbone_spec, const TrainConfig& backbone_cfg, const ZeroShotConfig& zcfg) {
  KnownClassLoader pretrain_loader(ds, split.known);
  const auto known_idx = pretrain_loader.eligible();
  EmbeddingDataset known_ds = ds.subset(known_idx);
  std::vector<std::size_t> local(ds.num_classes(), 0);
  for (std::size_t k = 0; k < split.known.size(); ++k) local[split.known[k]] = k;
  for (auto& l : known_ds.labels) l = static_cast<Label>(local[l]);
  known_ds.class_names.clear();
  for (Label c : split.known) known_ds.class_names.push_back(ds.class_names.at(c));

  backbone_spec.dims.num_classes = split.known.size();
  auto model = make_model<float>(backbone_spec);
  const auto splits = make_splits(known_ds.size(), {.seed = backbone_cfg.seed});
  train_model(*model, known_ds, splits, backbone_cfg);

  ZeroShotHead<float> head(*model, attrs.dim(), zcfg.emb_dim, zcfg.seed);
  const auto frozen = checksum(model->backbone_parameters());
  // Same training samples as the backbone saw, mapped back to dataset indices.
  std::vector<std::size_t> train_idx;
  for (auto i : splits.train) train_idx.push_back(known_idx[i]);
  auto r = train_zeroshot(head, ds, attrs, split.known, train_idx, zcfg);

  std::vector<std::size_t> unknown_idx;
  std::vector<bool> is_unknown(ds.num_classes(), false);
  for (Label c : split.unknown) is_unknown[c] = true;
  for (std::size_t i = 0; i < ds.size(); ++i)
    if (is_unknown[ds.labels[i]]) unknown_idx.push_back(i);

  ZeroShotRun run;
  run.ratio = split.ratio;
  run.backbone = model_label(backbone_spec);
  run.known = split.known;
  run.unknown = split.unknown;
  run.top1 = zeroshot_top1(head, ds, unknown_idx, attrs, split.unknown);
  run.unknown_samples = unknown_idx.size();
  run.backbone_checksum = r.backbone_checksum;
  run.backbone_frozen = r.backbone_checksum == frozen;
  return run;
}

inline io::json zeroshot_run_to_json(const ZeroShotRun& r) {
  return {{"ratio", r.ratio},
          {"backbone", r.backbone},
          {"known", r.known},
          {"unknown", r.unknown},
          {"top1", r.top1},
          {"unknown_samples", r.unknown_samples},
          {"backbone_frozen", r.backbone_frozen}};
}

}  // namespace dualfuse
