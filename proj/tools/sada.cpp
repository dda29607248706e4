// Command-line interface for the stain-aware domain alignment toolkit:
// stain decomposition, batch re-staining augmentation, the toy two-stage
// training harness, gradient verification, and F1 evaluation.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "sada/augmentation.hpp"
#include "sada/imaging.hpp"
#include "sada/kmeans.hpp"
#include "sada/losses.hpp"
#include "sada/matrix.hpp"
#include "sada/metrics.hpp"
#include "sada/snmf.hpp"
#include "sada/synth.hpp"
#include "sada/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 2;
constexpr int kExitIo = 3;
constexpr int kExitNumeric = 4;
constexpr int kSchemaVersion = 1;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// All outputs go through a temp file plus rename so failures never leave a
// partial file behind.
void write_file_atomic(const fs::path& path, const std::string& contents) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw sada::IoError("cannot open " + tmp.string() + " for writing");
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    if (!out) throw sada::IoError("write failed for " + tmp.string());
  }
  fs::rename(tmp, path);
}

void write_ppm_atomic(const fs::path& path, const sada::RgbImage& img) {
  std::ostringstream buf;
  sada::save_ppm(img, buf);
  write_file_atomic(path, buf.str());
}

std::string curve_to_csv(const std::vector<double>& curve) {
  std::string out = "step,value\n";
  char line[64];
  for (std::size_t i = 0; i < curve.size(); ++i) {
    std::snprintf(line, sizeof line, "%zu,%.9g\n", i, curve[i]);
    out += line;
  }
  return out;
}

json confusion_to_json(const sada::Confusion& confusion) {
  json rows = json::array();
  for (std::size_t t = 0; t < confusion.classes; ++t) {
    json row = json::array();
    for (std::size_t p = 0; p < confusion.classes; ++p) row.push_back(confusion.at(t, p));
    rows.push_back(row);
  }
  return rows;
}

json report_to_json(const sada::TrainReport& report) {
  json out;
  out["stage1_steps"] = report.stage1_curve.size();
  out["stage2_steps"] = report.stage2_curve.size();
  if (!report.stage1_curve.empty()) {
    out["stage1_loss_first"] = report.stage1_curve.front();
    out["stage1_loss_last"] = report.stage1_curve.back();
  }
  if (!report.stage2_curve.empty()) {
    out["stage2_loss_first"] = report.stage2_curve.front();
    out["stage2_loss_last"] = report.stage2_curve.back();
  }
  out["holdout"] = {{"confusion", confusion_to_json(report.holdout_confusion)},
                    {"f1_micro", report.holdout_f1.micro},
                    {"f1_macro", report.holdout_f1.macro},
                    {"per_class", report.holdout_f1.per_class}};
  out["indomain"] = {{"confusion", confusion_to_json(report.indomain_confusion)},
                     {"f1_micro", report.indomain_f1.micro},
                     {"f1_macro", report.indomain_f1.macro},
                     {"per_class", report.indomain_f1.per_class}};
  return out;
}

// ---------------------------------------------------------------------------
// decompose
// ---------------------------------------------------------------------------

int cmd_decompose(const std::string& input, const std::string& out_dir,
                  const sada::SnmfConfig& cfg) {
  sada::RgbImage img;
  try {
    img = sada::load_ppm(fs::path(input));
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitIo;
  }
  sada::StainDecomposition dec;
  sada::Matrix od;
  try {
    od = sada::to_optical_density(img);
    dec = sada::fit_snmf(od, cfg);
  } catch (const std::exception& e) {
    std::cerr << "error: snmf failed: " << e.what() << "\n";
    return kExitNumeric;
  }
  try {
    fs::create_directories(out_dir);
    const sada::Matrix rec = sada::reconstruct(dec);
    const double rmse = std::sqrt(sada::frobenius_sq_diff(od, rec) /
                                  static_cast<double>(od.size()));
    write_file_atomic(fs::path(out_dir) / "W.csv", sada::matrix_to_csv(dec.basis));
    write_file_atomic(fs::path(out_dir) / "H.csv", sada::matrix_to_csv(dec.density));
    write_ppm_atomic(fs::path(out_dir) / "reconstruction.ppm",
                     sada::from_optical_density(rec, img.width, img.height));
    json stats;
    stats["version"] = kSchemaVersion;
    stats["width"] = img.width;
    stats["height"] = img.height;
    stats["stains"] = cfg.stains;
    stats["lambda"] = cfg.lambda;
    stats["seed"] = cfg.seed;
    stats["rmse"] = rmse;
    stats["objective_trace_length"] = dec.objective_trace.size();
    stats["objective_final"] = dec.objective_trace.back();
    write_file_atomic(fs::path(out_dir) / "stats.json", stats.dump(2) + "\n");
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitIo;
  }
  return kExitOk;
}

// ---------------------------------------------------------------------------
// augment
// ---------------------------------------------------------------------------

int cmd_augment(const std::string& input_dir, const std::string& out_dir, std::size_t k,
                std::uint64_t seed, const sada::SnmfConfig& cfg) {
  std::vector<fs::path> files;
  try {
    for (const auto& entry : fs::directory_iterator(input_dir))
      if (entry.is_regular_file() && entry.path().extension() == ".ppm")
        files.push_back(entry.path());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitIo;
  }
  std::sort(files.begin(), files.end());  // lexicographic order defines the batch
  if (files.size() < k) {
    std::cerr << "error: need at least k=" << k << " images, found " << files.size()
              << "\n";
    return kExitUsage;
  }
  std::vector<sada::RgbImage> images;
  try {
    for (const auto& f : files) images.push_back(sada::load_ppm(f));
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitIo;
  }
  sada::BatchTransforms batch;
  try {
    batch = sada::generate_batch_transforms(images, k, cfg, seed);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitNumeric;
  }
  try {
    fs::create_directories(out_dir);
    json manifest;
    manifest["version"] = kSchemaVersion;
    manifest["seed"] = seed;
    manifest["k"] = k;
    json inputs = json::array();
    for (std::size_t i = 0; i < files.size(); ++i)
      inputs.push_back({{"file", files[i].filename().string()},
                        {"cluster", batch.clusters.labels[i]}});
    manifest["inputs"] = inputs;
    json entries = json::array();
    for (std::size_t i = 0; i < batch.transforms.size(); ++i) {
      for (const auto& sample : batch.transforms[i]) {
        const std::string name = "aug_" + std::to_string(sample.source_index) + "_" +
                                 std::to_string(sample.donor_cluster) + ".ppm";
        write_ppm_atomic(fs::path(out_dir) / name, sample.image);
        entries.push_back({{"output", name},
                           {"source", sample.source_index},
                           {"source_file", files[sample.source_index].filename().string()},
                           {"source_cluster", batch.clusters.labels[sample.source_index]},
                           {"donor", sample.target_index},
                           {"donor_file", files[sample.target_index].filename().string()},
                           {"donor_cluster", sample.donor_cluster}});
      }
    }
    manifest["entries"] = entries;
    write_file_atomic(fs::path(out_dir) / "manifest.json", manifest.dump(2) + "\n");
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitIo;
  }
  return kExitOk;
}

// ---------------------------------------------------------------------------
// train-toy
// ---------------------------------------------------------------------------

template <typename T>
T field_or(const json& obj, const std::string& key, T fallback) {
  if (!obj.contains(key)) return fallback;
  try {
    return obj.at(key).get<T>();
  } catch (const json::exception&) {
    throw UsageError("config error at " + key + ": wrong type");
  }
}

sada::SynthDomainSpec domain_from_json(const json& obj, const std::string& path) {
  sada::SynthDomainSpec spec;
  if (!obj.contains("id")) throw UsageError("config error at " + path + ".id: required");
  spec.id = field_or<int>(obj, "id", 0);
  const auto tint = field_or<std::vector<double>>(obj, "tint", {1.0, 1.0, 1.0});
  if (tint.size() != 3) throw UsageError("config error at " + path + ".tint: need 3 values");
  for (int c = 0; c < 3; ++c) {
    if (!(tint[c] > 0.0))
      throw UsageError("config error at " + path + ".tint: entries must be > 0");
    spec.tint[c] = tint[c];
  }
  spec.noise_sigma = field_or<double>(obj, "noise_sigma", 1.0);
  if (spec.noise_sigma < 0.0)
    throw UsageError("config error at " + path + ".noise_sigma: must be >= 0");
  spec.tint_jitter = field_or<double>(obj, "tint_jitter", 0.10);
  spec.class_shapes = sada::default_class_shapes();
  return spec;
}

// The tuned desk-scale experiment: two training tints plus a held-out tint
// extrapolated along the training-stain axis.
std::vector<sada::SynthDomainSpec> default_domains() {
  std::vector<sada::SynthDomainSpec> domains(3);
  domains[0].id = 0;
  domains[0].tint = {1.00, 1.00, 1.00};
  domains[1].id = 1;
  domains[1].tint = {1.45, 0.72, 1.10};
  domains[2].id = 2;
  domains[2].tint = {0.505, 1.308, 0.890};
  for (auto& d : domains) {
    d.noise_sigma = 1.0;
    d.tint_jitter = 0.10;
    d.class_shapes = sada::default_class_shapes();
  }
  return domains;
}

struct ToyConfig {
  sada::TrainConfig train;
  std::vector<sada::SynthDomainSpec> domains = default_domains();
  std::vector<double> ratios = {6.0, 3.0, 2.0, 1.5, 1.5};
  std::size_t n_per_class = 16;
  std::size_t n_per_class_test = 24;
  int holdout_domain = 2;
  std::uint64_t data_seed = 9000;
  std::string mode = "sada";
};

ToyConfig parse_toy_config(const json& root) {
  ToyConfig cfg;
  cfg.train.steps_per_stage = 2000;
  cfg.train.batch_size = 32;
  cfg.train.learning_rate = 0.003;
  cfg.train.learning_rate_stage2 = 0.8;
  cfg.train.learning_rate_erm = 0.4;
  cfg.train.k = 3;
  cfg.train.beta = 0.1;
  cfg.train.tau = 0.07;
  cfg.train.seed = 1;
  cfg.train.encoder.feature_dim = 64;
  cfg.train.encoder.embed_dim = 32;
  cfg.train.encoder.local_dim = 32;

  cfg.mode = field_or<std::string>(root, "mode", cfg.mode);
  if (cfg.mode != "sada" && cfg.mode != "erm" && cfg.mode != "loo")
    throw UsageError("config error at mode: expected sada, erm, or loo");
  cfg.train.steps_per_stage =
      field_or<std::size_t>(root, "steps_per_stage", cfg.train.steps_per_stage);
  cfg.train.batch_size = field_or<std::size_t>(root, "batch_size", cfg.train.batch_size);
  cfg.train.learning_rate = field_or<double>(root, "learning_rate", cfg.train.learning_rate);
  cfg.train.learning_rate_stage2 =
      field_or<double>(root, "learning_rate_stage2", cfg.train.learning_rate_stage2);
  cfg.train.learning_rate_erm =
      field_or<double>(root, "learning_rate_erm", cfg.train.learning_rate_erm);
  cfg.train.k = field_or<std::size_t>(root, "k", cfg.train.k);
  cfg.train.beta = field_or<double>(root, "beta", cfg.train.beta);
  cfg.train.tau = field_or<double>(root, "tau", cfg.train.tau);
  cfg.train.seed = field_or<std::uint64_t>(root, "seed", cfg.train.seed);
  cfg.train.pooled_batches = field_or<bool>(root, "pooled_batches", cfg.train.pooled_batches);
  if (root.contains("encoder")) {
    const json& enc = root.at("encoder");
    cfg.train.encoder.image_size = field_or<int>(enc, "image_size", cfg.train.encoder.image_size);
    cfg.train.encoder.patch_grid = field_or<int>(enc, "patch_grid", cfg.train.encoder.patch_grid);
    cfg.train.encoder.feature_dim =
        field_or<std::size_t>(enc, "feature_dim", cfg.train.encoder.feature_dim);
    cfg.train.encoder.embed_dim =
        field_or<std::size_t>(enc, "embed_dim", cfg.train.encoder.embed_dim);
    cfg.train.encoder.local_dim =
        field_or<std::size_t>(enc, "local_dim", cfg.train.encoder.local_dim);
  }
  if (root.contains("snmf")) {
    const json& sn = root.at("snmf");
    cfg.train.snmf.stains = field_or<std::size_t>(sn, "stains", cfg.train.snmf.stains);
    cfg.train.snmf.lambda = field_or<double>(sn, "lambda", cfg.train.snmf.lambda);
    cfg.train.snmf.max_iters = field_or<std::size_t>(sn, "max_iters", cfg.train.snmf.max_iters);
    cfg.train.snmf.tol = field_or<double>(sn, "tol", cfg.train.snmf.tol);
    cfg.train.snmf.od_mask_threshold =
        field_or<double>(sn, "od_mask_threshold", cfg.train.snmf.od_mask_threshold);
  }
  if (root.contains("data")) {
    const json& data = root.at("data");
    cfg.n_per_class = field_or<std::size_t>(data, "n_per_class", cfg.n_per_class);
    cfg.n_per_class_test =
        field_or<std::size_t>(data, "n_per_class_test", cfg.n_per_class_test);
    cfg.ratios = field_or<std::vector<double>>(data, "ratios", cfg.ratios);
    cfg.data_seed = field_or<std::uint64_t>(data, "data_seed", cfg.data_seed);
    cfg.holdout_domain = field_or<int>(data, "holdout_domain", cfg.holdout_domain);
    if (data.contains("domains")) {
      if (!data.at("domains").is_array() || data.at("domains").size() < 3)
        throw UsageError("config error at data.domains: need an array of >= 3 domains");
      cfg.domains.clear();
      for (std::size_t i = 0; i < data.at("domains").size(); ++i)
        cfg.domains.push_back(domain_from_json(data.at("domains")[i],
                                               "data.domains[" + std::to_string(i) + "]"));
    }
  }
  for (double r : cfg.ratios)
    if (!(r > 0.0)) throw UsageError("config error at data.ratios: entries must be > 0");
  bool holdout_found = false;
  for (const auto& d : cfg.domains) holdout_found |= (d.id == cfg.holdout_domain);
  if (!holdout_found)
    throw UsageError("config error at data.holdout_domain: no such domain id");
  try {
    cfg.train.validate();
  } catch (const std::exception& e) {
    throw UsageError(std::string("config error: ") + e.what());
  }
  return cfg;
}

int cmd_train_toy(const std::string& config_path, const std::string& out_dir) {
  json root;
  try {
    std::ifstream in(config_path);
    if (!in) {
      std::cerr << "error: cannot open " << config_path << "\n";
      return kExitIo;
    }
    root = json::parse(in);
  } catch (const json::exception& e) {
    std::cerr << "error: config parse: " << e.what() << "\n";
    return kExitUsage;
  }
  ToyConfig cfg;
  try {
    cfg = parse_toy_config(root);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  }

  try {
    const auto train_sets =
        sada::synth_dataset(cfg.domains, cfg.n_per_class, cfg.ratios, cfg.data_seed);
    const auto test_sets = sada::synth_dataset(cfg.domains, cfg.n_per_class_test,
                                               cfg.ratios, cfg.data_seed + 1);
    fs::create_directories(out_dir);
    json report;
    report["version"] = kSchemaVersion;
    report["mode"] = cfg.mode;
    report["seed"] = cfg.train.seed;

    if (cfg.mode == "loo") {
      const auto folds = sada::loo_experiment(train_sets, test_sets, cfg.train);
      json folds_json = json::array();
      for (const auto& fold : folds) {
        json f;
        f["held_out_domain"] = fold.held_out_domain;
        f["sada"] = report_to_json(fold.sada);
        f["erm"] = report_to_json(fold.erm);
        folds_json.push_back(f);
      }
      report["folds"] = folds_json;
    } else {
      std::vector<sada::LabeledImages> train_subset, test_subset, holdout_subset;
      for (std::size_t d = 0; d < cfg.domains.size(); ++d) {
        if (cfg.domains[d].id == cfg.holdout_domain) {
          holdout_subset.push_back(test_sets[d]);
        } else {
          train_subset.push_back(train_sets[d]);
          test_subset.push_back(test_sets[d]);
        }
      }
      const sada::Dataset train = sada::Dataset::concat(train_subset);
      const sada::Dataset indomain = sada::Dataset::concat(test_subset);
      const sada::Dataset holdout = sada::Dataset::concat(holdout_subset);
      report["held_out_domain"] = cfg.holdout_domain;

      sada::TrainReport tr;
      if (cfg.mode == "sada") {
        const sada::Stage1Model stage1 = sada::train_stage1(train, cfg.train);
        const sada::Stage2Result stage2 = sada::train_stage2(stage1, train, cfg.train);
        tr.stage1_curve = stage1.loss_curve;
        tr.stage2_curve = stage2.loss_curve;
        tr.holdout_confusion = sada::evaluate(stage1.encoder, stage2.classifier, holdout);
        tr.indomain_confusion = sada::evaluate(stage1.encoder, stage2.classifier, indomain);
      } else {
        const sada::ErmModel erm = sada::train_erm_baseline(train, cfg.train);
        tr.stage2_curve = erm.loss_curve;
        tr.holdout_confusion = sada::evaluate(erm.encoder, erm.classifier, holdout);
        tr.indomain_confusion = sada::evaluate(erm.encoder, erm.classifier, indomain);
      }
      tr.holdout_f1 = sada::f1_scores(tr.holdout_confusion);
      tr.indomain_f1 = sada::f1_scores(tr.indomain_confusion);
      report["report"] = report_to_json(tr);
      write_file_atomic(fs::path(out_dir) / "stage1_loss.csv", curve_to_csv(tr.stage1_curve));
      write_file_atomic(fs::path(out_dir) / "stage2_loss.csv", curve_to_csv(tr.stage2_curve));
    }
    write_file_atomic(fs::path(out_dir) / "report.json", report.dump(2) + "\n");
  } catch (const sada::IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitIo;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitNumeric;
  }
  return kExitOk;
}

// ---------------------------------------------------------------------------
// grad-check
// ---------------------------------------------------------------------------

void fill_unit_rows(std::vector<double>& v, std::size_t count, std::size_t dim,
                    sada::Rng& rng) {
  v.resize(count * dim);
  for (std::size_t i = 0; i < count; ++i) {
    double norm = 0.0;
    for (std::size_t c = 0; c < dim; ++c) {
      v[i * dim + c] = rng.normal();
      norm += v[i * dim + c] * v[i * dim + c];
    }
    norm = std::sqrt(norm);
    for (std::size_t c = 0; c < dim; ++c) v[i * dim + c] /= norm;
  }
}

int cmd_grad_check(std::uint64_t seed) {
  json results = json::array();
  bool all_ok = true;
  const double bar = 1e-4;
  try {
    {  // local_align_loss
      sada::Rng rng(sada::Rng::derive(seed, 1));
      const std::size_t n = 3, t = 2, p = 4, d = 6;
      sada::ProjectedMaps raw(n, p, d);
      sada::TransformedMaps tr(n, t, p, d);
      fill_unit_rows(raw.values, n * p, d, rng);
      fill_unit_rows(tr.values, n * t * p, d, rng);
      const sada::LossResult res = sada::local_align_loss(raw, tr);
      auto fn = [&](const std::vector<std::vector<double>>& in) {
        sada::ProjectedMaps r2 = raw;
        r2.values = in[0];
        sada::TransformedMaps t2 = tr;
        t2.values = in[1];
        return sada::local_align_loss(r2, t2).value;
      };
      const auto rep = sada::finite_diff_check(fn, {raw.values, tr.values},
                                               {res.grad("E"), res.grad("E_t")}, 200,
                                               1e-5, seed);
      results.push_back({{"loss_name", "local_align_loss"},
                         {"max_rel_err", rep.max_rel_err},
                         {"n_coords", rep.coords_checked},
                         {"seed", seed}});
      all_ok &= rep.max_rel_err < bar;
    }
    {  // disc_loss
      sada::Rng rng(sada::Rng::derive(seed, 2));
      sada::EmbeddingBatch batch(6, 2, 8);
      batch.tau = 0.5;
      fill_unit_rows(batch.z, 6, 8, rng);
      fill_unit_rows(batch.z_t, 12, 8, rng);
      for (std::size_t i = 0; i < 6; ++i) batch.labels[i] = static_cast<int>(i % 3);
      const sada::LossResult res = sada::disc_loss(batch);
      auto fn = [&](const std::vector<std::vector<double>>& in) {
        sada::EmbeddingBatch b2 = batch;
        b2.z = in[0];
        b2.z_t = in[1];
        return sada::disc_loss(b2).value;
      };
      const auto rep = sada::finite_diff_check(fn, {batch.z, batch.z_t},
                                               {res.grad("z"), res.grad("z_t")}, 200,
                                               1e-5, seed);
      results.push_back({{"loss_name", "disc_loss"},
                         {"max_rel_err", rep.max_rel_err},
                         {"n_coords", rep.coords_checked},
                         {"seed", seed}});
      all_ok &= rep.max_rel_err < bar;
    }
    {  // cross_entropy composed with softmax
      sada::Rng rng(sada::Rng::derive(seed, 3));
      const std::size_t n = 6, c = 5;
      sada::Matrix logits(n, c);
      std::vector<int> ys(n);
      for (std::size_t i = 0; i < n; ++i) {
        ys[i] = static_cast<int>(rng.uniform_index(c));
        for (std::size_t j = 0; j < c; ++j) logits(i, j) = rng.normal();
      }
      const sada::LossResult res = sada::cross_entropy_with_softmax(logits, ys);
      auto fn = [&](const std::vector<std::vector<double>>& in) {
        sada::Matrix l2(n, c);
        std::copy(in[0].begin(), in[0].end(), l2.data());
        return sada::cross_entropy_with_softmax(l2, ys).value;
      };
      std::vector<double> flat(logits.data(), logits.data() + logits.size());
      const auto rep =
          sada::finite_diff_check(fn, {flat}, {res.grad("logits")}, 200, 1e-5, seed);
      results.push_back({{"loss_name", "cross_entropy_softmax"},
                         {"max_rel_err", rep.max_rel_err},
                         {"n_coords", rep.coords_checked},
                         {"seed", seed}});
      all_ok &= rep.max_rel_err < bar;
    }
    {  // rep_loss = disc + beta * local alignment over disjoint inputs
      sada::Rng rng(sada::Rng::derive(seed, 4));
      const double beta = 0.1;
      sada::EmbeddingBatch batch(4, 2, 6);
      batch.tau = 0.5;
      fill_unit_rows(batch.z, 4, 6, rng);
      fill_unit_rows(batch.z_t, 8, 6, rng);
      for (std::size_t i = 0; i < 4; ++i) batch.labels[i] = static_cast<int>(i % 2);
      sada::ProjectedMaps raw(4, 3, 6);
      sada::TransformedMaps tr(4, 2, 3, 6);
      fill_unit_rows(raw.values, 12, 6, rng);
      fill_unit_rows(tr.values, 24, 6, rng);
      const sada::LossResult rep_res =
          sada::rep_loss(sada::disc_loss(batch), sada::local_align_loss(raw, tr), beta);
      auto fn = [&](const std::vector<std::vector<double>>& in) {
        sada::EmbeddingBatch b2 = batch;
        b2.z = in[0];
        b2.z_t = in[1];
        sada::ProjectedMaps r2 = raw;
        r2.values = in[2];
        sada::TransformedMaps t2 = tr;
        t2.values = in[3];
        return sada::rep_loss(sada::disc_loss(b2), sada::local_align_loss(r2, t2), beta)
            .value;
      };
      const auto rep = sada::finite_diff_check(
          fn, {batch.z, batch.z_t, raw.values, tr.values},
          {rep_res.grad("z"), rep_res.grad("z_t"), rep_res.grad("E"), rep_res.grad("E_t")},
          200, 1e-5, seed);
      results.push_back({{"loss_name", "rep_loss"},
                         {"max_rel_err", rep.max_rel_err},
                         {"n_coords", rep.coords_checked},
                         {"seed", seed}});
      all_ok &= rep.max_rel_err < bar;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitNumeric;
  }
  std::cout << results.dump(2) << "\n";
  return all_ok ? kExitOk : kExitNumeric;
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

std::vector<int> read_label_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw sada::IoError("cannot open " + path.string());
  std::vector<int> labels;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::size_t pos = 0;
    const int value = std::stoi(line, &pos);
    while (pos < line.size() && std::isspace(static_cast<unsigned char>(line[pos]))) ++pos;
    if (pos != line.size())
      throw UsageError("bad label line in " + path.string() + ": " + line);
    if (value < 0) throw UsageError("negative label in " + path.string());
    labels.push_back(value);
  }
  return labels;
}

int cmd_eval(const std::string& pred_path, const std::string& truth_path) {
  std::vector<int> pred, truth;
  try {
    pred = read_label_csv(pred_path);
    truth = read_label_csv(truth_path);
  } catch (const sada::IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitIo;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  }
  if (pred.size() != truth.size() || pred.empty()) {
    std::cerr << "error: prediction and truth files must have the same nonzero length\n";
    return kExitUsage;
  }
  int max_label = 0;
  for (int y : pred) max_label = std::max(max_label, y);
  for (int y : truth) max_label = std::max(max_label, y);
  sada::Confusion confusion(static_cast<std::size_t>(max_label) + 1);
  for (std::size_t i = 0; i < pred.size(); ++i)
    ++confusion.at(static_cast<std::size_t>(truth[i]), static_cast<std::size_t>(pred[i]));
  const sada::F1Scores scores = sada::f1_scores(confusion);
  json out;
  out["version"] = kSchemaVersion;
  out["n"] = pred.size();
  out["f1_micro"] = scores.micro;
  out["f1_macro"] = scores.macro;
  out["per_class"] = scores.per_class;
  std::cout << out.dump(2) << "\n";
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Stain-aware domain alignment toolkit"};
  app.require_subcommand(1);

  sada::SnmfConfig snmf_cfg;
  std::uint64_t seed = 0;
  std::string input, out_dir = ".";
  std::size_t k = 3;

  auto add_snmf_flags = [&](CLI::App* cmd) {
    cmd->add_option("--stains", snmf_cfg.stains, "number of stain components r");
    cmd->add_option("--lambda", snmf_cfg.lambda, "sparsity weight on density maps");
    cmd->add_option("--iters", snmf_cfg.max_iters, "maximum solver iterations");
    cmd->add_option("--tol", snmf_cfg.tol, "relative objective-change stop");
    cmd->add_option("--mask-threshold", snmf_cfg.od_mask_threshold,
                    "mean-OD cutoff for basis fitting");
  };

  CLI::App* decompose = app.add_subcommand("decompose", "factor one image into stains");
  decompose->add_option("image", input, "input P6 ppm")->required();
  decompose->add_option("--out", out_dir, "output directory");
  decompose->add_option("--seed", seed, "rng seed")->required();
  add_snmf_flags(decompose);

  CLI::App* augment = app.add_subcommand("augment", "re-stain a batch of images");
  augment->add_option("dir", input, "directory of P6 ppm images")->required();
  augment->add_option("--out", out_dir, "output directory");
  augment->add_option("--k", k, "number of stain clusters");
  augment->add_option("--seed", seed, "rng seed")->required();
  add_snmf_flags(augment);

  std::string config_path;
  CLI::App* train = app.add_subcommand("train-toy", "run the toy two-stage experiment");
  train->add_option("config", config_path, "json config file")->required();
  train->add_option("--out", out_dir, "output directory");

  CLI::App* grad = app.add_subcommand("grad-check", "verify analytic loss gradients");
  grad->add_option("--seed", seed, "rng seed");

  std::string pred_path, truth_path;
  CLI::App* eval = app.add_subcommand("eval", "f1 metrics from label csv files");
  eval->add_option("--pred", pred_path, "predicted labels, one per line")->required();
  eval->add_option("--truth", truth_path, "true labels, one per line")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    snmf_cfg.seed = seed;
    snmf_cfg.validate();
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  }

  if (decompose->parsed()) return cmd_decompose(input, out_dir, snmf_cfg);
  if (augment->parsed()) {
    if (k < 2) {
      std::cerr << "error: k must be >= 2\n";
      return kExitUsage;
    }
    return cmd_augment(input, out_dir, k, seed, snmf_cfg);
  }
  if (train->parsed()) return cmd_train_toy(config_path, out_dir);
  if (grad->parsed()) return cmd_grad_check(seed);
  if (eval->parsed()) return cmd_eval(pred_path, truth_path);
  return kExitUsage;
}
