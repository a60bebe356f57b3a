#pragma once

#include <cstdlib>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "dualfuse/bench.hpp"
#include "dualfuse/checkpoint.hpp"
#include "dualfuse/data_io.hpp"
#include "dualfuse/grad_suite.hpp"
#include "dualfuse/io.hpp"
#include "dualfuse/training.hpp"
#include "dualfuse/zeroshot.hpp"

namespace dualfuse::cli {

/// Model selector, training hyperparameters and paths in one JSON document.
struct RunConfig {
  std::string model = "fusion";
  std::string variant = "full";
  std::optional<ModelDims> dims;  // taken from the dataset when absent
  std::size_t layers = 2;
  std::size_t heads = 4;
  std::size_t head_hidden = 512;
  TrainConfig train;
  std::string data;
  std::string out;

  ModelSpec spec(const ModelDims& data_dims) const {
    ModelSpec s;
    s.kind = parse_model_kind(model);
    s.variant = parse_variant(variant);
    s.dims = data_dims;
    if (dims) {
      require(*dims == data_dims, ErrorCode::kShapeMismatch, "config dims do not match the dataset");
    }
    s.layers = layers;
    s.heads = heads;
    s.head_hidden = head_hidden;
    s.attn_dropout = train.attn_dropout;
    s.dropout = train.dropout;
    s.seed = train.seed;
    return s;
  }
};

namespace detail {

template <class V>
void take(const io::json& j, const char* key, V& into) {
  if (!j.contains(key)) return;
  try {
    into = j.at(key).get<V>();
  } catch (const io::json::exception&) {
    throw Error(ErrorCode::kBadConfig, std::string("config key '") + key + "' has the wrong type");
  }
}

}  // namespace detail

inline RunConfig parse_run_config(const io::json& j) {
  static const std::set<std::string> known{"model",   "variant",    "dims",           "layers",          "heads",
                                           "head_hidden", "lr",     "lr_decay_epoch", "lr_decay_factor", "batch",
                                           "epochs",  "clip_norm",  "patience",       "attn_dropout",    "dropout",
                                           "seed",    "data",       "out"};
  require(j.is_object(), ErrorCode::kBadConfig, "config must be a JSON object");
  for (const auto& [key, value] : j.items())
    require(known.count(key) > 0, ErrorCode::kBadConfig, "unknown config key '" + key + "'");
  RunConfig c;
  using detail::take;
  take(j, "model", c.model);
  take(j, "variant", c.variant);
  if (j.contains("dims")) {
    const auto& d = j.at("dims");
    static const std::set<std::string> dim_keys{"text_len", "text_dim", "image_len", "image_dim", "num_classes"};
    require(d.is_object(), ErrorCode::kBadConfig, "config dims must be an object");
    for (const auto& [key, value] : d.items())
      require(dim_keys.count(key) > 0, ErrorCode::kBadConfig, "unknown config key 'dims." + key + "'");
    ModelDims md;
    take(d, "text_len", md.text_len);
    take(d, "text_dim", md.text_dim);
    take(d, "image_len", md.image_len);
    take(d, "image_dim", md.image_dim);
    take(d, "num_classes", md.num_classes);
    c.dims = md;
  }
  take(j, "layers", c.layers);
  take(j, "heads", c.heads);
  take(j, "head_hidden", c.head_hidden);
  take(j, "lr", c.train.lr);
  take(j, "lr_decay_epoch", c.train.lr_decay_epoch);
  take(j, "lr_decay_factor", c.train.lr_decay_factor);
  take(j, "batch", c.train.batch);
  take(j, "epochs", c.train.epochs);
  take(j, "clip_norm", c.train.clip_norm);
  take(j, "patience", c.train.patience);
  take(j, "attn_dropout", c.train.attn_dropout);
  take(j, "dropout", c.train.dropout);
  take(j, "seed", c.train.seed);
  take(j, "data", c.data);
  take(j, "out", c.out);
  parse_model_kind(c.model);
  parse_variant(c.variant);
  c.train.validate();
  return c;
}

inline std::size_t worker_count() {
  std::size_t n = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("DUALFUSE_THREADS")) {
    const long v = std::strtol(env, nullptr, 10);
    if (v > 0) n = std::min<std::size_t>(n, static_cast<std::size_t>(v));
  }
  return n;
}

/// "0:1,2:3" -> {{0,1},{2,3}}.
inline std::vector<std::pair<std::size_t, std::size_t>> parse_pairs(const std::string& s) {
  std::vector<std::pair<std::size_t, std::size_t>> out;
  std::stringstream ss(s);
  for (std::string item; std::getline(ss, item, ',');) {
    if (item.empty()) continue;
    const auto colon = item.find(':');
    require(colon != std::string::npos, ErrorCode::kBadConfig, "pair '" + item + "' must look like a:b");
    try {
      out.emplace_back(std::stoul(item.substr(0, colon)), std::stoul(item.substr(colon + 1)));
    } catch (const std::logic_error&) {
      throw Error(ErrorCode::kBadConfig, "pair '" + item + "' must look like a:b");
    }
  }
  return out;
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  for (std::string item; std::getline(ss, item, ',');)
    if (!item.empty()) out.push_back(item);
  return out;
}

inline ModelDims dataset_dims(const EmbeddingDataset& ds) {
  return {.text_len = ds.text_shape()[0],
          .text_dim = ds.text_shape()[1],
          .image_len = ds.image_shape()[0],
          .image_dim = ds.image_shape()[1],
          .num_classes = ds.num_classes()};
}

/// Holdout split, or fold k of the 5-fold scheme over train+val.
inline Splits resolve_splits(std::size_t ns, std::uint64_t seed, int fold) {
  const SplitSpec spec{.seed = seed};
  Splits s = make_splits(ns, spec);
  if (fold < 0) return s;
  std::vector<std::size_t> pool = s.train;
  pool.insert(pool.end(), s.val.begin(), s.val.end());
  const auto folds = kfold(pool, spec.folds, seed);
  require(static_cast<std::size_t>(fold) < folds.size(), ErrorCode::kBadConfig, "fold index out of range");
  return fold_splits(folds, static_cast<std::size_t>(fold), s.test);
}

struct Streams {
  std::ostream& out;
  std::ostream& err;
};

/// Entry point behind the dualfuse binary. 0 success, 1 runtime error, 2 usage error.
inline int run_cli(int argc, const char* const* argv, Streams io_streams = {std::cout, std::cerr}) {
  auto& out = io_streams.out;
  auto& err = io_streams.err;
  CLI::App app{"dualfuse: multimodal dual-attention scene classification over precomputed embeddings"};
  app.require_subcommand(1);

  // synth
  SyntheticConfig syn;
  std::uint64_t syn_seed = 0;
  std::string syn_out, img_pairs, txt_pairs;
  std::size_t attr_dim = 0;
  double attr_noise = 0.05;
  auto* synth = app.add_subcommand("synth", "generate a synthetic embedding dataset");
  synth->add_option("--classes", syn.classes)->capture_default_str();
  synth->add_option("--per-class", syn.per_class)->capture_default_str();
  synth->add_option("--image-len", syn.image_len)->capture_default_str();
  synth->add_option("--image-dim", syn.image_dim)->capture_default_str();
  synth->add_option("--text-len", syn.text_len)->capture_default_str();
  synth->add_option("--text-dim", syn.text_dim)->capture_default_str();
  synth->add_option("--sigma", syn.sigma)->capture_default_str();
  synth->add_option("--image-confusable", img_pairs, "class pairs sharing the image mean, e.g. 0:1,2:3");
  synth->add_option("--text-confusable", txt_pairs, "class pairs sharing the text mean");
  synth->add_option("--attr-dim", attr_dim, "also write class attributes of this width")->capture_default_str();
  synth->add_option("--attr-noise", attr_noise)->capture_default_str();
  synth->add_option("--seed", syn_seed)->capture_default_str();
  synth->add_option("--out", syn_out)->required();

  // split
  std::string split_data, split_out;
  std::uint64_t split_seed = 0;
  auto* split = app.add_subcommand("split", "write the holdout split and 5 folds");
  split->add_option("--data", split_data)->required();
  split->add_option("--seed", split_seed)->capture_default_str();
  split->add_option("--out", split_out)->required();

  // train
  std::string train_config;
  std::optional<std::string> t_model, t_variant, t_data, t_out;
  std::optional<std::uint64_t> t_seed;
  std::optional<std::size_t> t_epochs, t_batch, t_patience, t_layers, t_heads, t_hidden;
  std::optional<double> t_lr;
  int t_fold = -1;
  auto* train = app.add_subcommand("train", "train one model and write a checkpoint");
  train->add_option("--config", train_config, "RunConfig JSON; flags override it");
  train->add_option("--model", t_model, "fusion|io|to|ef|lf");
  train->add_option("--variant", t_variant, "full|nocatt|icatt|tcatt");
  train->add_option("--data", t_data);
  train->add_option("--out", t_out);
  train->add_option("--seed", t_seed);
  train->add_option("--epochs", t_epochs);
  train->add_option("--batch", t_batch);
  train->add_option("--patience", t_patience);
  train->add_option("--lr", t_lr);
  train->add_option("--layers", t_layers);
  train->add_option("--heads", t_heads);
  train->add_option("--head-hidden", t_hidden);
  train->add_option("--fold", t_fold, "train on fold k of the 5-fold scheme instead of the holdout split");

  // eval
  std::string e_ckpt, e_data, e_out, e_subset = "test";
  std::uint64_t e_seed = 0;
  int e_fold = -1;
  std::size_t e_topk = 0;
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  eval->add_option("--checkpoint", e_ckpt)->required();
  eval->add_option("--data", e_data)->required();
  eval->add_option("--out", e_out)->required();
  eval->add_option("--subset", e_subset)->check(CLI::IsMember({"train", "val", "test", "all"}))->capture_default_str();
  eval->add_option("--seed", e_seed, "split seed used for training")->capture_default_str();
  eval->add_option("--fold", e_fold)->capture_default_str();
  eval->add_option("--topk", e_topk, "0 picks 3 or 5 by class count")->capture_default_str();

  // gradcheck
  std::string g_dims = "micro", g_out;
  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference check of every layer and model");
  gradcheck->add_option("--dims", g_dims)->check(CLI::IsMember({"micro"}))->capture_default_str();
  gradcheck->add_option("--out", g_out, "write the JSON report here");

  // zeroshot
  std::string z_data, z_attrs, z_out, z_ratios = "25/5,20/10,15/15", z_backbones = "fusion,io";
  std::uint64_t z_seed = 0;
  std::size_t z_epochs = 20, z_head_epochs = 40, z_hidden = 64, z_emb = 64;
  double z_lr = 1e-3;
  auto* zeroshot = app.add_subcommand("zeroshot", "known/unknown class experiments with a frozen backbone");
  zeroshot->add_option("--data", z_data)->required();
  zeroshot->add_option("--attributes", z_attrs, "directory with attributes.json/.bin (default: --data)");
  zeroshot->add_option("--ratios", z_ratios)->capture_default_str();
  zeroshot->add_option("--backbones", z_backbones, "comma list of fusion, a fusion variant (full/nocatt/icatt/tcatt) or io/to/ef/lf")
      ->capture_default_str();
  zeroshot->add_option("--epochs", z_epochs, "backbone pretraining epochs")->capture_default_str();
  zeroshot->add_option("--lr", z_lr, "backbone learning rate")->capture_default_str();
  zeroshot->add_option("--head-hidden", z_hidden)->capture_default_str();
  zeroshot->add_option("--head-epochs", z_head_epochs)->capture_default_str();
  zeroshot->add_option("--emb-dim", z_emb)->capture_default_str();
  zeroshot->add_option("--seed", z_seed)->capture_default_str();
  zeroshot->add_option("--out", z_out)->required();

  // bench
  std::string b_data, b_out, b_config;
  std::optional<std::uint64_t> b_seed;
  std::optional<std::size_t> b_epochs;
  std::optional<double> b_lr;
  auto* bench = app.add_subcommand("bench", "all baselines, ablations and the full model over 5 folds");
  bench->add_option("--data", b_data)->required();
  bench->add_option("--out", b_out)->required();
  bench->add_option("--config", b_config, "RunConfig JSON for shared hyperparameters");
  bench->add_option("--seed", b_seed);
  bench->add_option("--epochs", b_epochs);
  bench->add_option("--lr", b_lr);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp& e) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  }

  try {
    if (*synth) {
      syn.image_confusable = parse_pairs(img_pairs);
      syn.text_confusable = parse_pairs(txt_pairs);
      const auto ds = generate_synthetic(syn, syn_seed);
      save_dataset(ds, syn_out);
      if (attr_dim > 0) save_attributes(synthetic_attributes(syn, syn_seed, attr_dim, attr_noise), syn_out);
      out << "wrote " << ds.size() << " samples, " << ds.num_classes() << " classes to " << syn_out << "\n";
    } else if (*split) {
      const auto ds = load_dataset(split_data);
      const SplitSpec spec{.seed = split_seed};
      const auto s = make_splits(ds.size(), spec);
      std::vector<std::size_t> pool = s.train;
      pool.insert(pool.end(), s.val.begin(), s.val.end());
      io::write_json(split_out, splits_to_json(s, kfold(pool, spec.folds, spec.seed), spec));
      out << "train " << s.train.size() << " / val " << s.val.size() << " / test " << s.test.size() << "\n";
    } else if (*train) {
      RunConfig cfg = train_config.empty() ? RunConfig{} : parse_run_config(io::read_json(train_config));
      if (t_model) cfg.model = *t_model;
      if (t_variant) cfg.variant = *t_variant;
      if (t_data) cfg.data = *t_data;
      if (t_out) cfg.out = *t_out;
      if (t_seed) cfg.train.seed = *t_seed;
      if (t_epochs) cfg.train.epochs = *t_epochs, cfg.train.patience = std::min(cfg.train.patience, *t_epochs);
      if (t_batch) cfg.train.batch = *t_batch;
      if (t_patience) cfg.train.patience = *t_patience;
      if (t_lr) cfg.train.lr = *t_lr;
      if (t_layers) cfg.layers = *t_layers;
      if (t_heads) cfg.heads = *t_heads;
      if (t_hidden) cfg.head_hidden = *t_hidden;
      if (cfg.data.empty() || cfg.out.empty()) {
        err << "error: train needs --data and --out (or config keys data/out)\n";
        return 2;
      }
      cfg.train.validate();
      const auto ds = load_dataset(cfg.data);
      const auto spec = cfg.spec(dataset_dims(ds));
      const auto splits = resolve_splits(ds.size(), cfg.train.seed, t_fold);
      auto model = make_model<float>(spec);
      const io::fs::path dir = cfg.out;
      auto result = train_model(*model, ds, splits, cfg.train, [&](const EpochRecord& r) {
        out << "epoch " << r.epoch << " lr " << r.lr << " train_loss " << r.train_loss << " val_loss " << r.val_loss
            << " val_OA " << r.val_oa << "\n";
      });
      save_checkpoint(*model, dir);
      io::write_file(dir / "history.jsonl", history_jsonl(result.history));
      out << "best epoch " << result.best_epoch << " val_loss " << result.best_val_loss << "; checkpoint in " << dir.string()
          << "\n";
    } else if (*eval) {
      const auto ds = load_dataset(e_data);
      auto model = load_checkpoint<float>(e_ckpt);
      const auto s = resolve_splits(ds.size(), e_seed, e_fold);
      std::vector<std::size_t> idx;
      if (e_subset == "train") idx = s.train;
      else if (e_subset == "val") idx = s.val;
      else if (e_subset == "test") idx = s.test;
      else {
        idx.resize(ds.size());
        std::iota(idx.begin(), idx.end(), std::size_t{0});
      }
      const auto report = evaluate(*model, ds, idx, e_topk ? e_topk : default_topk(ds.num_classes()));
      const io::fs::path dir = e_out;
      io::write_json(dir / "metrics.json", metrics_to_json(report));
      io::write_file(dir / "confusion.csv", confusion_csv(report.confusion, ds.class_names));
      out << "OA " << report.oa << " AA " << report.aa << " Kappa " << report.kappa << " top" << report.k << " "
          << report.topk_oa << "\n";
    } else if (*gradcheck) {
      const auto entries = run_grad_suite();
      bool all = true;
      for (const auto& e : entries) {
        all = all && e.report.pass;
        out << (e.report.pass ? "PASS " : "FAIL ") << e.name << " " << e.precision << " max_rel_error "
            << e.report.max_rel_error << "\n";
      }
      if (!g_out.empty()) io::write_json(g_out, {{"dims", g_dims}, {"pass", all}, {"entries", grad_suite_to_json(entries)}});
      return all ? 0 : 1;
    } else if (*zeroshot) {
      const auto ds = load_dataset(z_data);
      const auto attrs = load_attributes(z_attrs.empty() ? z_data : z_attrs);
      require(attrs.num_classes() == ds.num_classes(), ErrorCode::kShapeMismatch,
              "attribute rows do not match the dataset classes");
      TrainConfig tc{.lr = z_lr, .epochs = z_epochs, .patience = std::min<std::size_t>(10, z_epochs), .seed = z_seed};
      const ZeroShotConfig zc{.epochs = z_head_epochs, .emb_dim = z_emb, .seed = z_seed};
      io::json runs = io::json::array();
      for (const auto& ratio : split_list(z_ratios)) {
        const auto classes = split_classes(ds.num_classes(), ratio, z_seed);
        for (const auto& b : split_list(z_backbones)) {
          ModelSpec spec;
          if (b == "io" || b == "to" || b == "ef" || b == "lf") {
            spec.kind = parse_model_kind(b);
          } else {
            spec.kind = ModelKind::kFusion;
            spec.variant = b == "fusion" ? Variant::kFull : parse_variant(b);
          }
          spec.dims = dataset_dims(ds);
          spec.head_hidden = z_hidden;
          spec.seed = z_seed;
          const auto run = run_zeroshot(ds, attrs, classes, spec, tc, zc);
          out << ratio << " " << run.backbone << " top1 " << run.top1 << (run.backbone_frozen ? "" : " (backbone moved!)")
              << "\n";
          runs.push_back(zeroshot_run_to_json(run));
        }
      }
      io::write_json(io::fs::path(z_out) / "zeroshot_report.json", {{"seed", z_seed}, {"runs", runs}});
    } else if (*bench) {
      RunConfig cfg = b_config.empty() ? RunConfig{} : parse_run_config(io::read_json(b_config));
      if (b_seed) cfg.train.seed = *b_seed;
      if (b_epochs) cfg.train.epochs = *b_epochs, cfg.train.patience = std::min(cfg.train.patience, *b_epochs);
      if (b_lr) cfg.train.lr = *b_lr;
      cfg.train.validate();
      const auto ds = load_dataset(b_data);
      BenchConfig bc{.base = cfg.spec(dataset_dims(ds)),
                     .train = cfg.train,
                     .split = {.seed = cfg.train.seed},
                     .threads = worker_count()};
      const auto rows = run_bench(ds, bc, [&](const std::string& m, std::size_t f, const MetricsReport& r) {
        out << m << " fold " << f << " OA " << r.oa << "\n";
      });
      const io::fs::path dir = b_out;
      io::write_json(dir / "bench.json", {{"seed", cfg.train.seed}, {"rows", bench_to_json(rows)}});
      io::write_file(dir / "bench.md", bench_table(rows));
      out << bench_table(rows);
    }
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return e.code() == ErrorCode::kBadConfig || e.code() == ErrorCode::kUnknownVariant ? 2 : 1;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

}  // namespace dualfuse::cli
