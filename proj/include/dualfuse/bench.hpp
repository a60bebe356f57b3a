#pragma once

#include <atomic>
#include <cmath>
#include <cstdio>
#include <functional>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include "dualfuse/data_io.hpp"
#include "dualfuse/models.hpp"
#include "dualfuse/training.hpp"

namespace dualfuse {

/// The eight compared models, in table order.
inline std::vector<std::pair<std::string, ModelSpec>> bench_models(const ModelSpec& base) {
  std::vector<std::pair<std::string, ModelSpec>> out;
  auto add = [&](std::string name, ModelKind kind, Variant v) {
    ModelSpec s = base;
    s.kind = kind;
    s.variant = v;
    out.emplace_back(std::move(name), s);
  };
  add("IO", ModelKind::kImageOnly, Variant::kFull);
  add("TO", ModelKind::kTextOnly, Variant::kFull);
  add("EF", ModelKind::kEarlyFusion, Variant::kFull);
  add("LF", ModelKind::kLateFusion, Variant::kFull);
  add("NoCAtt", ModelKind::kFusion, Variant::kNoCAtt);
  add("ICAtt", ModelKind::kFusion, Variant::kICAtt);
  add("TCAtt", ModelKind::kFusion, Variant::kTCAtt);
  add("Full", ModelKind::kFusion, Variant::kFull);
  return out;
}

struct BenchConfig {
  ModelSpec base;  // kind/variant are overwritten per row; dims must match the data
  TrainConfig train;
  SplitSpec split;
  std::size_t threads = 1;
};

struct BenchRow {
  std::string name;
  std::vector<MetricsReport> folds;  // test-set metrics of each fold's model

  std::vector<double> values(double MetricsReport::*field) const {
    std::vector<double> v;
    for (const auto& f : folds) v.push_back(f.*field);
    return v;
  }
};

struct MeanStd {
  double mean = 0, std = 0;  // std with n - 1 in the denominator
};

inline MeanStd mean_std(const std::vector<double>& v) {
  MeanStd r;
  if (v.empty()) return r;
  for (double x : v) r.mean += x;
  r.mean /= static_cast<double>(v.size());
  if (v.size() > 1) {
    double ss = 0;
    for (double x : v) ss += (x - r.mean) * (x - r.mean);
    r.std = std::sqrt(ss / static_cast<double>(v.size() - 1));
  }
  return r;
}

/// Percent cell such as "97.61 (0.42)".
inline std::string mean_std_cell(const std::vector<double>& v) {
  const auto m = mean_std(v);
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.2f (%.2f)", 100.0 * m.mean, 100.0 * m.std);
  return buf;
}

using BenchProgress = std::function<void(const std::string& model, std::size_t fold, const MetricsReport&)>;

/// Every model retrained from scratch on each fold; metrics on the shared test split.
inline std::vector<BenchRow> run_bench(const EmbeddingDataset& ds, const BenchConfig& cfg,
                                       const BenchProgress& progress = {}) {
  ds.validate();
  const auto models = bench_models(cfg.base);
  const Splits holdout = make_splits(ds.size(), cfg.split);
  std::vector<std::size_t> pool = holdout.train;
  pool.insert(pool.end(), holdout.val.begin(), holdout.val.end());
  const auto folds = kfold(pool, cfg.split.folds, cfg.split.seed);
  const std::size_t k = default_topk(ds.num_classes());

  std::vector<BenchRow> rows;
  for (const auto& [name, spec] : models) rows.push_back({name, std::vector<MetricsReport>(folds.size())});

  const std::size_t jobs = models.size() * folds.size();
  std::atomic<std::size_t> next{0};
  std::mutex report;
  auto worker = [&] {
    for (std::size_t j; (j = next++) < jobs;) {
      const std::size_t m = j / folds.size(), f = j % folds.size();
      ModelSpec spec = models[m].second;
      spec.seed = cfg.base.seed + f;
      TrainConfig tc = cfg.train;
      tc.seed = cfg.train.seed + f;
      auto model = make_model<float>(spec);
      const Splits s = fold_splits(folds, f, holdout.test);
      train_model(*model, ds, s, tc);
      rows[m].folds[f] = evaluate(*model, ds, s.test, k);
      if (progress) {
        std::lock_guard lock(report);
        progress(models[m].first, f, rows[m].folds[f]);
      }
    }
  };
  const std::size_t n = std::max<std::size_t>(1, std::min(cfg.threads, jobs));
  if (n == 1) {
    worker();
  } else {
    std::vector<std::jthread> pool_threads;
    for (std::size_t t = 0; t < n; ++t) pool_threads.emplace_back(worker);
  }
  return rows;
}

inline io::json bench_to_json(const std::vector<BenchRow>& rows) {
  io::json out = io::json::array();
  for (const auto& r : rows) {
    io::json folds = io::json::array();
    for (const auto& f : r.folds) folds.push_back({{"OA", f.oa}, {"AA", f.aa}, {"Kappa", f.kappa}});
    const auto oa = mean_std(r.values(&MetricsReport::oa)), aa = mean_std(r.values(&MetricsReport::aa)),
               kappa = mean_std(r.values(&MetricsReport::kappa));
    out.push_back({{"model", r.name},
                   {"OA", {{"mean", oa.mean}, {"std", oa.std}}},
                   {"AA", {{"mean", aa.mean}, {"std", aa.std}}},
                   {"Kappa", {{"mean", kappa.mean}, {"std", kappa.std}}},
                   {"folds", folds}});
  }
  return out;
}

/// Markdown table, one row per model, "mean (std)" percent cells.
inline std::string bench_table(const std::vector<BenchRow>& rows) {
  std::string out = "| Model | OA | AA | Kappa |\n|---|---|---|---|\n";
  for (const auto& r : rows)
    out += "| " + r.name + " | " + mean_std_cell(r.values(&MetricsReport::oa)) + " | " +
           mean_std_cell(r.values(&MetricsReport::aa)) + " | " + mean_std_cell(r.values(&MetricsReport::kappa)) + " |\n";
  return out;
}

}  // namespace dualfuse
