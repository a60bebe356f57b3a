#include <gtest/gtest.h>

#include <unistd.h>

#include <cstdlib>
#include <cstring>
#include <set>

#include "dualfuse/data_io.hpp"

namespace dualfuse {
namespace {

namespace fs = std::filesystem;

class TempDir {
 public:
  TempDir() {
    static int counter = 0;
    path_ = fs::temp_directory_path() / ("dualfuse_data_io_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
};

EmbeddingDataset random_dataset(std::size_t ns, Shape is, Shape ts, std::size_t classes, std::uint64_t seed) {
  Rng rng(seed);
  EmbeddingDataset ds;
  ds.image = normal_tensor<float>(rng, {ns, is[0], is[1]}, 0, 3);
  ds.text = normal_tensor<float>(rng, {ns, ts[0], ts[1]}, 0, 3);
  for (std::size_t c = 0; c < classes; ++c) ds.class_names.push_back("c" + std::to_string(c));
  for (std::size_t i = 0; i < ns; ++i) ds.labels.push_back(static_cast<Label>(rng.below(classes)));
  return ds;
}

void expect_bitwise_equal(const EmbeddingDataset& a, const EmbeddingDataset& b) {
  EXPECT_EQ(a.image.shape(), b.image.shape());
  EXPECT_EQ(a.text.shape(), b.text.shape());
  EXPECT_EQ(std::memcmp(a.image.data().data(), b.image.data().data(), a.image.size() * 4), 0);
  EXPECT_EQ(std::memcmp(a.text.data().data(), b.text.data().data(), a.text.size() * 4), 0);
  EXPECT_EQ(a.labels, b.labels);
  EXPECT_EQ(a.class_names, b.class_names);
}

template <class F>
void expect_error(ErrorCode code, F&& f) {
  try {
    f();
    FAIL() << "expected " << to_string(code);
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), code) << e.what();
  }
}

TEST(DatasetFormat, RoundTripIsBitwise) {
  Rng rng(1);
  for (int trial = 0; trial < 6; ++trial) {
    TempDir dir;
    auto ds = random_dataset(rng.below(20), {1 + rng.below(5), 1 + rng.below(6)}, {1 + rng.below(4), 1 + rng.below(7)},
                             1 + rng.below(5), 10 + trial);
    if (ds.size()) ds.image[0] = -0.0f;  // sign of zero survives
    save_dataset(ds, dir.path());
    expect_bitwise_equal(ds, load_dataset(dir.path()));
  }
}

TEST(DatasetFormat, EmptyDatasetIsValid) {
  TempDir dir;
  auto ds = random_dataset(0, {3, 4}, {2, 5}, 3, 2);
  save_dataset(ds, dir.path());
  auto back = load_dataset(dir.path());
  EXPECT_EQ(back.size(), 0u);
  EXPECT_EQ(back.num_classes(), 3u);
  EXPECT_EQ(fs::file_size(dir.path() / "image.bin"), 0u);
}

TEST(DatasetFormat, ManifestAndLayout) {
  TempDir dir;
  auto ds = random_dataset(3, {2, 4}, {5, 3}, 2, 3);
  save_dataset(ds, dir.path());
  auto m = io::read_json(dir.path() / "manifest.json");
  EXPECT_EQ(m["version"], 1);
  EXPECT_EQ(m["num_samples"], 3);
  EXPECT_EQ(m["num_classes"], 2);
  EXPECT_EQ(m["dtype"], "f32le");
  EXPECT_EQ(m["image_shape"], io::json::array({2, 4}));
  EXPECT_EQ(m["text_shape"], io::json::array({5, 3}));
  EXPECT_EQ(fs::file_size(dir.path() / "image.bin"), 3u * 2 * 4 * 4);
  EXPECT_EQ(fs::file_size(dir.path() / "text.bin"), 3u * 5 * 3 * 4);
  EXPECT_EQ(fs::file_size(dir.path() / "labels.bin"), 3u * 4);
  // Little-endian: the first label's low byte comes first.
  auto raw = io::read_file(dir.path() / "labels.bin");
  EXPECT_EQ(static_cast<unsigned char>(raw[0]), ds.labels[0] & 0xff);
  EXPECT_EQ(raw[3], 0);
}

TEST(DatasetFormat, TruncatedImageRejected) {
  TempDir dir;
  save_dataset(random_dataset(4, {2, 3}, {2, 2}, 2, 4), dir.path());
  fs::resize_file(dir.path() / "image.bin", fs::file_size(dir.path() / "image.bin") - 1);
  expect_error(ErrorCode::kTruncatedFile, [&] { load_dataset(dir.path()); });
}

TEST(DatasetFormat, OversizedTextRejected) {
  TempDir dir;
  save_dataset(random_dataset(4, {2, 3}, {2, 2}, 2, 5), dir.path());
  io::write_file(dir.path() / "text.bin", io::read_file(dir.path() / "text.bin") + "abcd");
  expect_error(ErrorCode::kShapeMismatchWithManifest, [&] { load_dataset(dir.path()); });
}

TEST(DatasetFormat, BadManifestRejected) {
  TempDir dir;
  save_dataset(random_dataset(2, {1, 1}, {1, 1}, 2, 6), dir.path());
  const auto manifest = dir.path() / "manifest.json";
  const auto good = io::read_file(manifest);

  io::write_file(manifest, "\x89PNG not json");
  expect_error(ErrorCode::kBadMagic, [&] { load_dataset(dir.path()); });

  auto m = io::json::parse(good);
  m["dtype"] = "f16le";
  io::write_json(manifest, m);
  expect_error(ErrorCode::kBadMagic, [&] { load_dataset(dir.path()); });

  m = io::json::parse(good);
  m["version"] = 2;
  io::write_json(manifest, m);
  expect_error(ErrorCode::kBadMagic, [&] { load_dataset(dir.path()); });

  m = io::json::parse(good);
  m["class_names"] = {"only_one"};
  io::write_json(manifest, m);
  expect_error(ErrorCode::kShapeMismatchWithManifest, [&] { load_dataset(dir.path()); });

  m = io::json::parse(good);
  m["num_samples"] = 3;
  io::write_json(manifest, m);
  expect_error(ErrorCode::kTruncatedFile, [&] { load_dataset(dir.path()); });
}

TEST(DatasetFormat, LabelBeyondManifestClassesRejected) {
  TempDir dir;
  auto ds = random_dataset(3, {1, 2}, {1, 2}, 2, 7);
  save_dataset(ds, dir.path());
  std::vector<Label> bad{0, 5, 1};
  io::write_file(dir.path() / "labels.bin", io::encode_le<Label>(bad));
  expect_error(ErrorCode::kShapeMismatchWithManifest, [&] { load_dataset(dir.path()); });
}

TEST(Splits, ThousandSamples) {
  auto s = make_splits(1000, {.seed = 3});
  EXPECT_EQ(s.test.size(), 100u);
  EXPECT_EQ(s.train.size(), 720u);
  EXPECT_EQ(s.val.size(), 180u);
}

TEST(Splits, PartitionAndRatiosForRandomSizes) {
  Rng rng(4);
  for (int trial = 0; trial < 60; ++trial) {
    const std::size_t ns = 10 + rng.below(10000 - 10 + 1);
    auto s = make_splits(ns, {.seed = static_cast<std::uint64_t>(trial)});
    std::vector<int> seen(ns, 0);
    for (const auto* part : {&s.train, &s.val, &s.test})
      for (auto i : *part) ++seen.at(i);
    EXPECT_TRUE(std::all_of(seen.begin(), seen.end(), [](int c) { return c == 1; })) << ns;
    const double n = static_cast<double>(ns);
    EXPECT_LE(std::abs(static_cast<double>(s.train.size()) - 0.72 * n), 1.0) << ns;
    EXPECT_LE(std::abs(static_cast<double>(s.val.size()) - 0.18 * n), 1.0) << ns;
    EXPECT_LE(std::abs(static_cast<double>(s.test.size()) - 0.10 * n), 1.0) << ns;
  }
}

TEST(Splits, DeterministicPerSeed) {
  auto a = make_splits(500, {.seed = 9}), b = make_splits(500, {.seed = 9}), c = make_splits(500, {.seed = 10});
  EXPECT_EQ(a.train, b.train);
  EXPECT_EQ(a.test, b.test);
  EXPECT_NE(a.train, c.train);
}

TEST(Splits, TooFewSamples) {
  expect_error(ErrorCode::kTooFewSamples, [] { make_splits(9, {}); });
}

TEST(Folds, PartitionTheRemainingPool) {
  Rng rng(5);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t ns = 10 + rng.below(3000);
    auto s = make_splits(ns, {.seed = static_cast<std::uint64_t>(trial)});
    std::vector<std::size_t> pool = s.train;
    pool.insert(pool.end(), s.val.begin(), s.val.end());
    auto folds = kfold(pool, 5, trial);
    ASSERT_EQ(folds.size(), 5u);
    std::set<std::size_t> all;
    std::size_t total = 0, lo = ns, hi = 0;
    for (const auto& f : folds) {
      all.insert(f.begin(), f.end());
      total += f.size();
      lo = std::min(lo, f.size());
      hi = std::max(hi, f.size());
    }
    EXPECT_EQ(total, pool.size());
    EXPECT_EQ(all, std::set<std::size_t>(pool.begin(), pool.end()));
    EXPECT_LE(hi - lo, 1u);
    for (auto t : s.test) EXPECT_FALSE(all.count(t));

    auto fs2 = fold_splits(folds, 2, s.test);
    EXPECT_EQ(fs2.val, folds[2]);
    EXPECT_EQ(fs2.train.size() + fs2.val.size(), pool.size());
  }
}

TEST(Synthetic, ReproducibleAndShaped) {
  SyntheticConfig cfg{.classes = 3, .per_class = 4, .image_len = 2, .image_dim = 3, .text_len = 4, .text_dim = 2};
  auto a = generate_synthetic(cfg, 11), b = generate_synthetic(cfg, 11), c = generate_synthetic(cfg, 12);
  EXPECT_EQ(a.image, b.image);
  EXPECT_EQ(a.text, b.text);
  EXPECT_NE(a.image, c.image);
  EXPECT_EQ(a.image.shape(), (Shape{12, 2, 3}));
  EXPECT_EQ(a.text.shape(), (Shape{12, 4, 2}));
  EXPECT_EQ(a.num_classes(), 3u);
}

TEST(Synthetic, MeansHaveUnitRows) {
  SyntheticConfig cfg{.classes = 4, .image_len = 3, .image_dim = 5, .text_len = 2, .text_dim = 7};
  auto m = synthetic_class_means(cfg, 1);
  for (const auto* side : {&m.image, &m.text})
    for (const auto& t : *side)
      for (std::size_t r = 0; r < t.dim(0); ++r) {
        double n = 0;
        for (std::size_t c = 0; c < t.dim(1); ++c) n += double(t.at(r, c)) * t.at(r, c);
        EXPECT_NEAR(n, 1.0, 1e-6);
      }
}

// Nearest class mean on one modality; ties go to the lowest class id.
std::vector<Label> nearest_mean(const Tensor<float>& x, const std::vector<Tensor<float>>& means) {
  const std::size_t n = x.dim(0), stride = x.size() / std::max<std::size_t>(n, 1);
  std::vector<Label> out;
  for (std::size_t i = 0; i < n; ++i) {
    double best = 1e300;
    Label arg = 0;
    for (std::size_t c = 0; c < means.size(); ++c) {
      double d = 0;
      for (std::size_t j = 0; j < stride; ++j) d += std::pow(double(x[i * stride + j]) - means[c][j], 2);
      if (d < best - 1e-12) best = d, arg = static_cast<Label>(c);
    }
    out.push_back(arg);
  }
  return out;
}

double accuracy_on(const std::vector<Label>& pred, const std::vector<Label>& truth, std::set<Label> classes) {
  std::size_t hit = 0, total = 0;
  for (std::size_t i = 0; i < truth.size(); ++i)
    if (classes.count(truth[i])) ++total, hit += pred[i] == truth[i];
  return double(hit) / double(total);
}

TEST(Synthetic, NoiselessIsSeparableOnEitherModality) {
  SyntheticConfig cfg{.classes = 6, .per_class = 5, .sigma = 0.0};
  auto ds = generate_synthetic(cfg, 2);
  auto m = synthetic_class_means(cfg, 2);
  EXPECT_EQ(nearest_mean(ds.image, m.image), ds.labels);
  EXPECT_EQ(nearest_mean(ds.text, m.text), ds.labels);
}

TEST(Synthetic, ConfusablePairsNeedTheOtherModality) {
  SyntheticConfig cfg{.classes = 6, .per_class = 40, .sigma = 0.02, .image_confusable = {{0, 1}},
                      .text_confusable = {{2, 3}}};
  auto ds = generate_synthetic(cfg, 3);
  auto m = synthetic_class_means(cfg, 3);
  EXPECT_EQ(m.image[0], m.image[1]);
  EXPECT_EQ(m.text[2], m.text[3]);
  auto by_image = nearest_mean(ds.image, m.image), by_text = nearest_mean(ds.text, m.text);
  EXPECT_LE(accuracy_on(by_image, ds.labels, {0, 1}), 0.5);
  EXPECT_EQ(accuracy_on(by_text, ds.labels, {0, 1}), 1.0);
  EXPECT_LE(accuracy_on(by_text, ds.labels, {2, 3}), 0.5);
  EXPECT_EQ(accuracy_on(by_image, ds.labels, {2, 3}), 1.0);
}

TEST(Synthetic, BadConfigRejected) {
  expect_error(ErrorCode::kBadConfig, [] { generate_synthetic({.classes = 4, .image_confusable = {{0, 4}}}, 1); });
  expect_error(ErrorCode::kBadConfig,
               [] { generate_synthetic({.classes = 4, .image_confusable = {{0, 1}}, .text_confusable = {{1, 2}}}, 1); });
  expect_error(ErrorCode::kBadConfig, [] { generate_synthetic({.classes = 4, .sigma = -1}, 1); });
  expect_error(ErrorCode::kBadConfig, [] { generate_synthetic({.classes = 0}, 1); });
}

}  // namespace
}  // namespace dualfuse
