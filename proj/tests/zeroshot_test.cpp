#include <gtest/gtest.h>

#include <unistd.h>

#include <cstring>
#include <set>

#include "dualfuse/grad_check.hpp"
#include "dualfuse/zeroshot.hpp"

namespace dualfuse {
namespace {

namespace fs = std::filesystem;

template <class F>
void expect_error(ErrorCode code, F&& f) {
  try {
    f();
    FAIL() << "expected " << to_string(code);
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), code) << e.what();
  }
}

ModelSpec micro_backbone(std::size_t classes = 4) {
  ModelSpec s;
  s.dims = {.text_len = 3, .text_dim = 8, .image_len = 5, .image_dim = 12, .num_classes = classes};
  s.heads = 2;
  s.head_hidden = 6;
  s.seed = 17;
  return s;
}

SyntheticConfig micro_data(std::size_t classes = 6, std::size_t per_class = 8) {
  return {.classes = classes, .per_class = per_class, .image_len = 5, .image_dim = 12, .text_len = 3, .text_dim = 8,
          .sigma = 0.2};
}

TEST(SplitClasses, SizesDisjointUnionAndSeeded) {
  for (auto [ratio, k, u] : {std::tuple{"25/5", 25u, 5u}, {"20/10", 20u, 10u}, {"15/15", 15u, 15u}}) {
    auto s = split_classes(30, ratio, 3);
    EXPECT_EQ(s.known.size(), k);
    EXPECT_EQ(s.unknown.size(), u);
    std::set<Label> all(s.known.begin(), s.known.end());
    all.insert(s.unknown.begin(), s.unknown.end());
    EXPECT_EQ(all.size(), 30u);
    EXPECT_EQ(*all.rbegin(), 29u);
    auto again = split_classes(30, ratio, 3);
    EXPECT_EQ(again.known, s.known);
    EXPECT_EQ(again.unknown, s.unknown);
  }
  EXPECT_NE(split_classes(30, "15/15", 3).known, split_classes(30, "15/15", 4).known);
}

TEST(SplitClasses, RatioMismatchRejected) {
  for (auto bad : {"20/5", "30/0", "abc", "25/5x", "/30"})
    expect_error(ErrorCode::kRatioMismatch, [&] { split_classes(30, bad, 0); });
}

class TempDir {
 public:
  TempDir() : path_(fs::temp_directory_path() / ("dualfuse_zs_" + std::to_string(::getpid()) + "_" + std::to_string(n_++))) {
    fs::remove_all(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  const fs::path& path() const { return path_; }

 private:
  static inline int n_ = 0;
  fs::path path_;
};

TEST(Attributes, RoundTripBitwiseAndCorruptionRejected) {
  TempDir dir;
  auto a = synthetic_attributes(micro_data(), 1, 7);
  save_attributes(a, dir.path());
  auto back = load_attributes(dir.path());
  ASSERT_EQ(back.vectors.shape(), a.vectors.shape());
  EXPECT_EQ(std::memcmp(back.vectors.data().data(), a.vectors.data().data(), a.vectors.size() * 4), 0);

  const auto bin = io::read_file(dir.path() / "attributes.bin");
  io::write_file(dir.path() / "attributes.bin", bin.substr(1));
  expect_error(ErrorCode::kTruncatedFile, [&] { load_attributes(dir.path()); });
  io::write_file(dir.path() / "attributes.bin", bin + std::string(4, '\0'));
  expect_error(ErrorCode::kShapeMismatchWithManifest, [&] { load_attributes(dir.path()); });
  io::write_json(dir.path() / "attributes.json", {{"version", 2}, {"dtype", "f32le"}});
  expect_error(ErrorCode::kBadMagic, [&] { load_attributes(dir.path()); });
}

TEST(Attributes, ConfusablePairsStillDiffer) {
  auto cfg = micro_data();
  cfg.image_confusable = {{0, 1}};
  cfg.text_confusable = {{2, 3}};
  auto a = synthetic_attributes(cfg, 2, 9, 0.0);
  auto row_gap = [&](std::size_t x, std::size_t y) {
    double d = 0;
    for (std::size_t j = 0; j < 9; ++j) d += std::abs(a.vectors.at(x, j) - a.vectors.at(y, j));
    return d;
  };
  EXPECT_GT(row_gap(0, 1), 0.1);
  EXPECT_GT(row_gap(2, 3), 0.1);
}

TEST(Head, CosineBoundedAndLogitsFinite) {
  auto backbone = make_model<double>(micro_backbone());
  ZeroShotHead<double> head(*backbone, 7, 5, 1);
  Rng rng(2);
  Context<double> ctx;
  auto feats = ctx.constant(normal_tensor<double>(rng, {16, backbone->feature_dim()}, 0, 10));
  auto attrs = ctx.constant(normal_tensor<double>(rng, {6, 7}, 0, 0.01));
  auto cos = head.cosine(ctx, feats, attrs).value();
  EXPECT_EQ(cos.shape(), (Shape{16, 6}));
  for (double c : cos.data()) {
    EXPECT_GE(c, -1.0);
    EXPECT_LE(c, 1.0);
  }
  for (double l : head.logits(ctx, feats, attrs).value().data()) EXPECT_TRUE(std::isfinite(l));
}

TEST(Head, CosineIsScaleInvariant) {
  auto backbone = make_model<double>(micro_backbone());
  ZeroShotHead<double> head(*backbone, 7, 5, 1);
  head.data_proj.bias->value.fill(0.0);  // so scaling features scales z
  Rng rng(3);
  auto f = normal_tensor<double>(rng, {10, backbone->feature_dim()}, 0, 1);
  AttributeSet attrs{normal_tensor<float>(rng, {6, 7}, 0, 1)};
  auto f3 = f;
  for (double& v : f3.data()) v *= 3;
  Context<double> ctx;
  auto a = ctx.constant(attribute_rows<double>(attrs, {0, 1, 2, 3, 4, 5}));
  auto c1 = head.cosine(ctx, ctx.constant(f), a).value(), c3 = head.cosine(ctx, ctx.constant(f3), a).value();
  for (std::size_t i = 0; i < c1.size(); ++i) EXPECT_NEAR(c1[i], c3[i], 1e-12);
  EXPECT_EQ(zeroshot_predict(head, f, attrs, {1, 3, 5}), zeroshot_predict(head, f3, attrs, {1, 3, 5}));
}

TEST(Head, ProjectionGradientsMatchFiniteDifferences) {
  auto spec = micro_backbone();
  auto b32 = make_model<float>(spec);
  auto b64 = make_model<double>(spec);
  ZeroShotHead<float> h32(*b32, 7, 5, 4);
  ZeroShotHead<double> h64(*b64, 7, 5, 4);
  Rng rng(5);
  auto feats = normal_tensor<double>(rng, {6, b64->feature_dim()}, 0, 1);
  auto attrs = normal_tensor<double>(rng, {4, 7}, 0, 1);
  const std::vector<Label> y{0, 1, 2, 3, 1, 2};
  auto loss64 = [&](Context<double>& ctx) {
    return cross_entropy(h64.logits(ctx, ctx.constant(feats), ctx.constant(attrs)), std::span<const Label>(y));
  };
  auto loss32 = [&](Context<float>& ctx) {
    return cross_entropy(h32.logits(ctx, ctx.constant(feats.cast<float>()), ctx.constant(attrs.cast<float>())),
                         std::span<const Label>(y));
  };
  auto r64 = grad_check<double>(loss64, h64.parameters(), GradCheckOptions::f64());
  EXPECT_TRUE(r64.pass) << r64.max_rel_error;
  auto r32 = grad_check<float, double>(loss32, h32.parameters(), loss64, h64.parameters(), GradCheckOptions::f32());
  EXPECT_TRUE(r32.pass) << r32.max_rel_error;
}

TEST(Inference, SingleCandidateAlwaysWins) {
  auto cfg = micro_data();
  auto ds = generate_synthetic(cfg, 6);
  auto backbone = make_model<float>(micro_backbone(6));
  ZeroShotHead<float> head(*backbone, 7, 5, 1);
  auto attrs = synthetic_attributes(cfg, 6, 7);
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < ds.size(); ++i)
    if (ds.labels[i] == 4) idx.push_back(i);
  EXPECT_EQ(zeroshot_top1(head, ds, idx, attrs, {4}), 1.0);
  std::vector<std::size_t> one{idx[0]};
  EXPECT_EQ(zeroshot_infer(head, make_batch<float>(ds, one), attrs, {4}), 4u);
  expect_error(ErrorCode::kEmptyCandidates, [&] { zeroshot_infer(head, make_batch<float>(ds, one), attrs, {}); });
}

TEST(Inference, AgreesWithNearestMeanWhenAttributesAreClassMeans) {
  // Identity projections over token-averaged inputs, attributes = token-averaged
  // class means: cosine scoring should pick the nearest class mean.
  SyntheticConfig cfg{.classes = 12, .per_class = 25, .image_len = 5, .image_dim = 12, .text_len = 3, .text_dim = 8,
                      .sigma = 0.1};
  auto ds = generate_synthetic(cfg, 7);
  auto means = synthetic_class_means(cfg, 7);
  const std::size_t f = 20;
  auto pool = [&](const Tensor<float>& img, const Tensor<float>& txt, std::size_t base_i, std::size_t base_t,
                  double* out) {
    std::fill(out, out + f, 0.0);
    for (std::size_t l = 0; l < 5; ++l)
      for (std::size_t j = 0; j < 12; ++j) out[j] += img[base_i + l * 12 + j] / 5.0;
    for (std::size_t l = 0; l < 3; ++l)
      for (std::size_t j = 0; j < 8; ++j) out[12 + j] += txt[base_t + l * 8 + j] / 3.0;
  };
  AttributeSet attrs{Tensor<float>({12, f})};
  for (std::size_t c = 0; c < 12; ++c) {
    double row[20];
    pool(means.image[c], means.text[c], 0, 0, row);
    for (std::size_t j = 0; j < f; ++j) attrs.vectors.at(c, j) = static_cast<float>(row[j]);
  }
  Tensor<double> feats({ds.size(), f});
  for (std::size_t i = 0; i < ds.size(); ++i) pool(ds.image, ds.text, i * 60, i * 24, &feats.at(i, 0));

  auto backbone = make_model<double>(micro_backbone());
  ZeroShotHead<double> head(*backbone, f, f, 1);
  for (auto* lin : {&head.data_proj, &head.attr_proj}) {
    lin->weight.value = Tensor<double>({f, f});
    for (std::size_t j = 0; j < f; ++j) lin->weight.value.at(j, j) = 1.0;
    lin->bias->value.fill(0.0);
  }
  // data_proj expects feature_dim inputs; the micro fusion backbone has 20.
  ASSERT_EQ(backbone->feature_dim(), f);

  const std::vector<Label> unknown{1, 4, 5, 8, 10, 11};
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < ds.size(); ++i)
    if (std::find(unknown.begin(), unknown.end(), ds.labels[i]) != unknown.end()) idx.push_back(i);
  auto pred = zeroshot_predict(head, take_rows(feats, std::span<const std::size_t>(idx)), attrs, unknown);

  const std::size_t is = 60, ts = 24;
  std::size_t agree = 0;
  for (std::size_t n = 0; n < idx.size(); ++n) {
    double best = 1e300;
    Label oracle = 0;
    for (Label c : unknown) {
      double d = 0;
      for (std::size_t j = 0; j < is; ++j) d += std::pow(ds.image[idx[n] * is + j] - means.image[c][j], 2);
      for (std::size_t j = 0; j < ts; ++j) d += std::pow(ds.text[idx[n] * ts + j] - means.text[c][j], 2);
      if (d < best) best = d, oracle = c;
    }
    agree += pred[n] == oracle;
  }
  EXPECT_GE(static_cast<double>(agree) / static_cast<double>(idx.size()), 0.95);
}

TEST(Training, OneKnownClassGivesZeroLoss) {
  auto cfg = micro_data();
  auto ds = generate_synthetic(cfg, 8);
  auto backbone = make_model<float>(micro_backbone(6));
  ZeroShotHead<float> head(*backbone, 7, 5, 1);
  std::vector<std::size_t> all(ds.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  auto r = train_zeroshot(head, ds, synthetic_attributes(cfg, 8, 7), {3}, all, {.epochs = 3, .batch = 4});
  for (double l : r.epoch_loss) EXPECT_EQ(l, 0.0);
}

TEST(Training, BackboneFrozenAndUnknownSamplesNeverTouched) {
  auto cfg = micro_data(6, 10);
  auto ds = generate_synthetic(cfg, 9);
  auto backbone = make_model<float>(micro_backbone(6));
  std::vector<Tensor<float>> before;
  for (const auto* p : backbone->parameters()) before.push_back(p->value);
  const auto sum_before = checksum(backbone->backbone_parameters());

  ZeroShotHead<float> head(*backbone, 7, 5, 1);
  const auto head_before = checksum(head.parameters());
  const auto split = split_classes(6, "4/2", 1);
  std::vector<std::size_t> all(ds.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  auto r = train_zeroshot(head, ds, synthetic_attributes(cfg, 9, 7), split.known, all, {.epochs = 5, .batch = 8});

  EXPECT_EQ(r.backbone_checksum, sum_before);
  auto params = backbone->parameters();
  for (std::size_t i = 0; i < params.size(); ++i)
    EXPECT_EQ(std::memcmp(params[i]->value.data().data(), before[i].data().data(), before[i].size() * 4), 0);
  EXPECT_NE(checksum(head.parameters()), head_before);

  EXPECT_EQ(r.touched.size(), 40u);
  for (auto i : r.touched)
    EXPECT_TRUE(std::find(split.known.begin(), split.known.end(), ds.labels[i]) != split.known.end()) << i;
  EXPECT_LT(r.epoch_loss.back(), r.epoch_loss.front());
}

TEST(Loader, RefusesUnknownClassSamples) {
  auto ds = generate_synthetic(micro_data(), 10);
  KnownClassLoader loader(ds, {0, 2});
  std::vector<std::size_t> ok{0, 17}, bad{0, 8};
  EXPECT_EQ(loader.fetch<float>(ok).labels, (std::vector<Label>{0, 2}));
  expect_error(ErrorCode::kLabelOutOfRange, [&] { loader.fetch<float>(bad); });
  EXPECT_EQ(loader.touched(), (std::vector<std::size_t>{0, 17, 0}));
  EXPECT_EQ(loader.eligible().size(), 16u);
}

TEST(Experiment, ReportsFrozenBackboneAndAccuracyInRange) {
  auto cfg = micro_data(6, 12);
  auto ds = generate_synthetic(cfg, 11);
  auto attrs = synthetic_attributes(cfg, 11, 7);
  auto run = run_zeroshot(ds, attrs, split_classes(6, "4/2", 2), micro_backbone(6),
                          {.lr = 1e-3, .batch = 8, .epochs = 2, .patience = 2, .seed = 1}, {.epochs = 2, .emb_dim = 5});
  EXPECT_TRUE(run.backbone_frozen);
  EXPECT_EQ(run.unknown_samples, 24u);
  EXPECT_GE(run.top1, 0.0);
  EXPECT_LE(run.top1, 1.0);
  auto j = zeroshot_run_to_json(run);
  EXPECT_EQ(j["ratio"], "4/2");
  EXPECT_EQ(j["backbone"], "fusion-full");
}

}  // namespace
}  // namespace dualfuse
