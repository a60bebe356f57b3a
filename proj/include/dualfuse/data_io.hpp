#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "dualfuse/io.hpp"
#include "dualfuse/ops.hpp"
#include "dualfuse/rng.hpp"
#include "dualfuse/tensor.hpp"

namespace dualfuse {

/// Paired image/text embeddings with labels. Stored in f32, the on-disk dtype.
struct EmbeddingDataset {
  Tensor<float> image;  // [NS, L_i, D_i]
  Tensor<float> text;   // [NS, L_t, D_t]
  std::vector<Label> labels;
  std::vector<std::string> class_names;

  std::size_t size() const { return labels.size(); }
  std::size_t num_classes() const { return class_names.size(); }
  Shape image_shape() const { return {image.dim(1), image.dim(2)}; }
  Shape text_shape() const { return {text.dim(1), text.dim(2)}; }

  void validate() const {
    require(image.shape().size() == 3 && text.shape().size() == 3, ErrorCode::kShapeMismatch,
            "dataset tensors must be [NS, L, D]");
    require(image.dim(0) == labels.size() && text.dim(0) == labels.size(), ErrorCode::kShapeMismatch,
            "image, text and labels disagree on the sample count");
    for (Label l : labels)
      require(l < class_names.size(), ErrorCode::kLabelOutOfRange,
              "label " + std::to_string(l) + " with " + std::to_string(class_names.size()) + " classes");
  }

  /// The samples at `indices`, in that order.
  EmbeddingDataset subset(std::span<const std::size_t> indices) const {
    EmbeddingDataset out;
    out.image = take_rows(image, indices);
    out.text = take_rows(text, indices);
    out.class_names = class_names;
    out.labels.reserve(indices.size());
    for (std::size_t i : indices) out.labels.push_back(labels.at(i));
    return out;
  }
};

inline void save_dataset(const EmbeddingDataset& ds, const io::fs::path& dir) {
  ds.validate();
  io::fs::create_directories(dir);
  io::json manifest = {{"version", 1},
                       {"num_samples", ds.size()},
                       {"num_classes", ds.num_classes()},
                       {"class_names", ds.class_names},
                       {"image_shape", ds.image_shape()},
                       {"text_shape", ds.text_shape()},
                       {"dtype", "f32le"}};
  io::write_json(dir / "manifest.json", manifest);
  io::write_file(dir / "image.bin", io::encode_le<float>(ds.image.data()));
  io::write_file(dir / "text.bin", io::encode_le<float>(ds.text.data()));
  io::write_file(dir / "labels.bin", io::encode_le<Label>(ds.labels));
}

inline EmbeddingDataset load_dataset(const io::fs::path& dir) {
  const auto where = dir / "manifest.json";
  const io::json m = io::read_json(where);
  require(io::field<int>(m, "version", where) == 1, ErrorCode::kBadMagic, where.string() + ": unsupported version");
  require(io::field<std::string>(m, "dtype", where) == "f32le", ErrorCode::kBadMagic,
          where.string() + ": dtype must be f32le");
  const auto ns = io::field<std::size_t>(m, "num_samples", where);
  const auto nc = io::field<std::size_t>(m, "num_classes", where);
  auto names = io::field<std::vector<std::string>>(m, "class_names", where);
  const auto ishape = io::field<std::vector<std::size_t>>(m, "image_shape", where);
  const auto tshape = io::field<std::vector<std::size_t>>(m, "text_shape", where);
  require(ishape.size() == 2 && tshape.size() == 2, ErrorCode::kShapeMismatchWithManifest,
          where.string() + ": image_shape and text_shape must be [L, D]");
  require(names.size() == nc, ErrorCode::kShapeMismatchWithManifest,
          where.string() + ": class_names has " + std::to_string(names.size()) + " entries for " +
              std::to_string(nc) + " classes");

  EmbeddingDataset ds;
  ds.class_names = std::move(names);
  Shape is{ns, ishape[0], ishape[1]}, ts{ns, tshape[0], tshape[1]};
  ds.image = Tensor<float>(is, io::decode_le<float>(io::read_file(dir / "image.bin"), numel(is), "image.bin"));
  ds.text = Tensor<float>(ts, io::decode_le<float>(io::read_file(dir / "text.bin"), numel(ts), "text.bin"));
  ds.labels = io::decode_le<Label>(io::read_file(dir / "labels.bin"), ns, "labels.bin");
  for (Label l : ds.labels)
    require(l < nc, ErrorCode::kShapeMismatchWithManifest,
            "labels.bin holds class " + std::to_string(l) + " but the manifest declares " + std::to_string(nc));
  return ds;
}

// ---------------------------------------------------------------------------
// Splits

struct SplitSpec {
  double test_fraction = 0.10;
  double val_fraction = 0.20;  // of what remains after the test set
  std::size_t folds = 5;
  std::uint64_t seed = 0;
};

struct Splits {
  std::vector<std::size_t> train, val, test;
};

/// Test set first (round(0.1 NS)), then the rest split 8:2 into train/val.
/// `remaining()` is train followed by val: the pool the folds partition.
inline Splits make_splits(std::size_t ns, const SplitSpec& spec) {
  require(ns >= 10, ErrorCode::kTooFewSamples, "need at least 10 samples, got " + std::to_string(ns));
  require(spec.test_fraction > 0 && spec.test_fraction < 1 && spec.val_fraction > 0 && spec.val_fraction < 1,
          ErrorCode::kBadConfig, "split fractions must lie in (0, 1)");
  std::vector<std::size_t> perm(ns);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  Rng rng(spec.seed, 0x5b1175u);
  rng.shuffle(perm);
  const auto n_test = static_cast<std::size_t>(std::llround(spec.test_fraction * static_cast<double>(ns)));
  const std::size_t rest = ns - n_test;
  const auto n_val = static_cast<std::size_t>(std::llround(spec.val_fraction * static_cast<double>(rest)));
  Splits s;
  s.test.assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(n_test));
  s.train.assign(perm.begin() + static_cast<std::ptrdiff_t>(n_test),
                 perm.begin() + static_cast<std::ptrdiff_t>(n_test + rest - n_val));
  s.val.assign(perm.begin() + static_cast<std::ptrdiff_t>(n_test + rest - n_val), perm.end());
  return s;
}

/// Shuffles `pool` and cuts it into k contiguous parts whose sizes differ by at most one.
inline std::vector<std::vector<std::size_t>> kfold(std::vector<std::size_t> pool, std::size_t k, std::uint64_t seed) {
  require(k >= 2 && pool.size() >= k, ErrorCode::kTooFewSamples,
          std::to_string(pool.size()) + " samples cannot form " + std::to_string(k) + " folds");
  Rng rng(seed, 0xf01du);
  rng.shuffle(pool);
  std::vector<std::vector<std::size_t>> folds(k);
  const std::size_t base = pool.size() / k, extra = pool.size() % k;
  std::size_t at = 0;
  for (std::size_t f = 0; f < k; ++f) {
    const std::size_t n = base + (f < extra ? 1 : 0);
    folds[f].assign(pool.begin() + static_cast<std::ptrdiff_t>(at), pool.begin() + static_cast<std::ptrdiff_t>(at + n));
    at += n;
  }
  return folds;
}

/// Fold `k` validates; the other folds train; the held-out test set is shared.
inline Splits fold_splits(const std::vector<std::vector<std::size_t>>& folds, std::size_t k,
                          std::vector<std::size_t> test) {
  Splits s;
  s.val = folds.at(k);
  for (std::size_t f = 0; f < folds.size(); ++f)
    if (f != k) s.train.insert(s.train.end(), folds[f].begin(), folds[f].end());
  s.test = std::move(test);
  return s;
}

inline io::json splits_to_json(const Splits& s, const std::vector<std::vector<std::size_t>>& folds, const SplitSpec& spec) {
  return {{"seed", spec.seed}, {"train", s.train}, {"val", s.val}, {"test", s.test}, {"folds", folds}};
}

// ---------------------------------------------------------------------------
// Synthetic data

struct SyntheticConfig {
  std::size_t classes = 8;
  std::size_t per_class = 200;
  std::size_t image_len = 12;
  std::size_t image_dim = 16;
  std::size_t text_len = 10;
  std::size_t text_dim = 12;
  double sigma = 0.1;
  /// Pairs sharing one image mean: separable only through text.
  std::vector<std::pair<std::size_t, std::size_t>> image_confusable;
  /// Pairs sharing one text mean: separable only through the image.
  std::vector<std::pair<std::size_t, std::size_t>> text_confusable;

  void validate() const {
    require(classes >= 1 && image_len && image_dim && text_len && text_dim, ErrorCode::kBadConfig,
            "synthetic shapes and class count must be positive");
    require(std::isfinite(sigma) && sigma >= 0, ErrorCode::kBadConfig, "sigma must be finite and >= 0");
    std::vector<bool> used(classes, false);
    for (const auto* pairs : {&image_confusable, &text_confusable})
      for (auto [a, b] : *pairs) {
        require(a < classes && b < classes && a != b, ErrorCode::kBadConfig,
                "confusable pair (" + std::to_string(a) + ", " + std::to_string(b) + ") is out of range");
        require(!used[a] && !used[b], ErrorCode::kBadConfig, "confusable pairs must be disjoint");
        used[a] = used[b] = true;
      }
  }
};

struct ClassMeans {
  std::vector<Tensor<float>> image;  // per class [L_i, D_i], unit-norm rows
  std::vector<Tensor<float>> text;   // per class [L_t, D_t]
};

namespace detail {

inline Tensor<float> unit_rows(Rng& rng, std::size_t rows, std::size_t cols) {
  Tensor<double> t = normal_tensor<double>(rng, {rows, cols}, 0.0, 1.0);
  Tensor<float> out({rows, cols});
  for (std::size_t r = 0; r < rows; ++r) {
    double n = 0;
    for (std::size_t c = 0; c < cols; ++c) n += t.at(r, c) * t.at(r, c);
    n = std::sqrt(n);
    for (std::size_t c = 0; c < cols; ++c) out.at(r, c) = static_cast<float>(t.at(r, c) / n);
  }
  return out;
}

}  // namespace detail

/// The per-class mean matrices that `generate_synthetic` draws samples around.
inline ClassMeans synthetic_class_means(const SyntheticConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed, 0x3ea2u);
  ClassMeans m;
  for (std::size_t c = 0; c < cfg.classes; ++c) {
    m.image.push_back(detail::unit_rows(rng, cfg.image_len, cfg.image_dim));
    m.text.push_back(detail::unit_rows(rng, cfg.text_len, cfg.text_dim));
  }
  for (auto [a, b] : cfg.image_confusable) m.image[b] = m.image[a];
  for (auto [a, b] : cfg.text_confusable) m.text[b] = m.text[a];
  return m;
}

/// Class-major samples: mean + N(0, sigma^2) per element.
inline EmbeddingDataset generate_synthetic(const SyntheticConfig& cfg, std::uint64_t seed) {
  const ClassMeans means = synthetic_class_means(cfg, seed);
  Rng noise(seed, 0x701eu);
  const std::size_t ns = cfg.classes * cfg.per_class;
  const std::size_t is = cfg.image_len * cfg.image_dim, ts = cfg.text_len * cfg.text_dim;
  EmbeddingDataset ds;
  ds.image = Tensor<float>({ns, cfg.image_len, cfg.image_dim});
  ds.text = Tensor<float>({ns, cfg.text_len, cfg.text_dim});
  for (std::size_t c = 0; c < cfg.classes; ++c) ds.class_names.push_back("class_" + std::to_string(c));
  for (std::size_t c = 0, n = 0; c < cfg.classes; ++c)
    for (std::size_t k = 0; k < cfg.per_class; ++k, ++n) {
      for (std::size_t j = 0; j < is; ++j)
        ds.image[n * is + j] = static_cast<float>(means.image[c][j] + cfg.sigma * noise.normal());
      for (std::size_t j = 0; j < ts; ++j)
        ds.text[n * ts + j] = static_cast<float>(means.text[c][j] + cfg.sigma * noise.normal());
      ds.labels.push_back(static_cast<Label>(c));
    }
  return ds;
}

}  // namespace dualfuse
