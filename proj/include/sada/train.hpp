#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "sada/augmentation.hpp"
#include "sada/imaging.hpp"
#include "sada/kmeans.hpp"
#include "sada/losses.hpp"
#include "sada/metrics.hpp"
#include "sada/nn.hpp"
#include "sada/parallel.hpp"
#include "sada/rng.hpp"
#include "sada/snmf.hpp"
#include "sada/synth.hpp"

namespace sada {

// ---------------------------------------------------------------------------
// Encoder: shared affine patch map + rectifier (feature map), global average
// pool, and a linear projector f_p. Stands in for the paper-scale backbone
// while keeping a spatial feature map for the local alignment loss.
// ---------------------------------------------------------------------------

struct EncoderConfig {
  int image_size = 32;
  int patch_grid = 4;            // g x g positions
  std::size_t feature_dim = 64;  // D_b
  std::size_t embed_dim = 32;    // D_z (projector output)
  std::size_t local_dim = 32;    // D_e (local projector output)

  int patch_size() const { return image_size / patch_grid; }
  std::size_t positions() const { return static_cast<std::size_t>(patch_grid) * patch_grid; }
  std::size_t patch_input_dim() const {
    return 3 * static_cast<std::size_t>(patch_size()) * patch_size();
  }

  void validate() const {
    if (image_size < 8 || patch_grid < 1 || image_size % patch_grid != 0)
      throw std::invalid_argument("encoder: image_size must be a positive multiple of patch_grid");
    if (feature_dim == 0 || embed_dim == 0 || local_dim == 0)
      throw std::invalid_argument("encoder: zero dimension");
  }
};

class PatchLinearEncoder {
 public:
  PatchLinearEncoder() = default;
  PatchLinearEncoder(const EncoderConfig& cfg, Rng& rng)
      : cfg_(cfg),
        patch_map(cfg.patch_input_dim(), cfg.feature_dim, rng),
        projector(cfg.feature_dim, cfg.embed_dim, rng) {}

  const EncoderConfig& config() const { return cfg_; }

  // Row-major positions x patch_input_dim, intensities centered to [-0.5, 0.5].
  void extract_patches(const RgbImage& img, double* out) const {
    const int s = cfg_.patch_size();
    const int g = cfg_.patch_grid;
    if (img.width != cfg_.image_size || img.height != cfg_.image_size)
      throw std::invalid_argument("encoder: image size mismatch");
    std::size_t pos = 0;
    for (int gy = 0; gy < g; ++gy) {
      for (int gx = 0; gx < g; ++gx, ++pos) {
        double* dst = out + pos * cfg_.patch_input_dim();
        std::size_t w = 0;
        for (int c = 0; c < 3; ++c)
          for (int y = 0; y < s; ++y)
            for (int x = 0; x < s; ++x) {
              const std::size_t pixel =
                  static_cast<std::size_t>(gy * s + y) * img.width + (gx * s + x);
              dst[w++] = img.at(pixel, c) / 255.0 - 0.5;
            }
      }
    }
  }

  std::uint64_t parameter_hash() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    h = hash_doubles(h, patch_map.w);
    h = hash_doubles(h, patch_map.b);
    h = hash_doubles(h, projector.w);
    h = hash_doubles(h, projector.b);
    return h;
  }

  AffineLayer patch_map;   // patch pixels -> D_b, rectified
  AffineLayer projector;   // f_p: D_b -> D_z

 private:
  EncoderConfig cfg_;
};

// ---------------------------------------------------------------------------
// Configuration and reports
// ---------------------------------------------------------------------------

struct TrainConfig {
  std::size_t steps_per_stage = 4000;
  std::size_t batch_size = 32;
  double learning_rate = 5e-5;   // stage-1 rate; the paper's default, retune per run
  double learning_rate_stage2 = 0.8;
  double learning_rate_erm = 0.4;
  std::size_t k = 3;
  double beta = 0.1;
  double tau = 0.1;
  std::uint64_t seed = 1;
  bool pooled_batches = true;    // false draws each batch from one domain, round-robin
  EncoderConfig encoder;
  SnmfConfig snmf = {2, 0.1, 120, 1e-6, 0, 0.15};

  // Zero steps and a zero learning rate are both legal no-op settings.
  void validate() const {
    if (batch_size == 0) throw std::invalid_argument("train: batch_size must be > 0");
    if (learning_rate < 0.0 || learning_rate_stage2 < 0.0 || learning_rate_erm < 0.0)
      throw std::invalid_argument("train: learning rates must be >= 0");
    if (k < 2) throw std::invalid_argument("train: k must be >= 2");
    if (batch_size < k) throw std::invalid_argument("train: batch_size must be >= k");
    if (beta < 0.0) throw std::invalid_argument("train: beta must be >= 0");
    if (!(tau > 0.0)) throw std::invalid_argument("train: tau must be > 0");
    encoder.validate();
    snmf.validate();
  }
};

struct Dataset {
  std::vector<RgbImage> images;
  std::vector<int> labels;
  std::vector<int> domains;

  std::size_t size() const { return images.size(); }
  std::size_t n_classes() const {
    int mx = -1;
    for (int y : labels) mx = std::max(mx, y);
    return static_cast<std::size_t>(mx + 1);
  }

  static Dataset concat(const std::vector<LabeledImages>& sets) {
    Dataset out;
    for (const auto& set : sets) {
      out.images.insert(out.images.end(), set.images.begin(), set.images.end());
      out.labels.insert(out.labels.end(), set.labels.begin(), set.labels.end());
      out.domains.insert(out.domains.end(), set.images.size(), set.domain_id);
    }
    return out;
  }
};

struct Stage1Model {
  PatchLinearEncoder encoder;
  LocalProjector local;
  std::vector<double> loss_curve;
};

// Linear classification head over pooled features; train-set standardization
// is folded into the head so evaluation applies the same affine map.
struct LinearClassifier {
  AffineLayer linear;
  std::vector<double> mean;
  std::vector<double> scale;

  std::size_t classes() const { return linear.out; }

  void logits(const double* pooled, double* out, double* standardized_buf) const {
    for (std::size_t i = 0; i < linear.in; ++i)
      standardized_buf[i] = (pooled[i] - mean[i]) / scale[i];
    linear.forward(standardized_buf, out);
  }
};

struct Stage2Result {
  LinearClassifier classifier;
  std::vector<double> loss_curve;
};

struct ErmModel {
  PatchLinearEncoder encoder;
  LinearClassifier classifier;
  std::vector<double> loss_curve;
};

struct TrainReport {
  std::vector<double> stage1_curve;
  std::vector<double> stage2_curve;
  Confusion holdout_confusion;
  F1Scores holdout_f1;
  Confusion indomain_confusion;
  F1Scores indomain_f1;
};

struct PairedReport {
  int held_out_domain = 0;
  TrainReport sada;
  TrainReport erm;
};

// ---------------------------------------------------------------------------
// Internal forward/backward machinery
// ---------------------------------------------------------------------------

namespace detail {

constexpr std::uint64_t kInitStream = 0x494e4954;
constexpr std::uint64_t kDecompStream = 0x44454350;
constexpr std::uint64_t kStage1Batch = 0x53314254;
constexpr std::uint64_t kStage2Batch = 0x53324254;
constexpr std::uint64_t kErmBatch = 0x45524d42;
constexpr std::uint64_t kStepKmeans = 0x4b4d5354;
constexpr std::uint64_t kStepDonor = 0x444e5354;

// Per-sample activations for one full encoder + heads pass.
struct SampleBuffers {
  std::vector<double> patches;   // positions x patch_dim
  std::vector<double> pre1;      // positions x Db
  std::vector<double> feat;      // positions x Db (rectified)
  std::vector<double> pooled;    // Db
  std::vector<double> u;         // Dz (pre-normalization)
  std::vector<double> z;         // Dz (unit)
  double u_norm = 0.0;
  std::vector<double> pre2;      // positions x Db (local hidden pre-activation)
  std::vector<double> hid;       // positions x Db (rectified)
  std::vector<double> local_out; // positions x De

  void allocate(const EncoderConfig& cfg) {
    patches.assign(cfg.positions() * cfg.patch_input_dim(), 0.0);
    pre1.assign(cfg.positions() * cfg.feature_dim, 0.0);
    feat.assign(cfg.positions() * cfg.feature_dim, 0.0);
    pooled.assign(cfg.feature_dim, 0.0);
    u.assign(cfg.embed_dim, 0.0);
    z.assign(cfg.embed_dim, 0.0);
    pre2.assign(cfg.positions() * cfg.feature_dim, 0.0);
    hid.assign(cfg.positions() * cfg.feature_dim, 0.0);
    local_out.assign(cfg.positions() * cfg.local_dim, 0.0);
  }
};

// Forward through patch map, pool, and projector with L2 normalization.
inline void forward_features(const PatchLinearEncoder& enc, SampleBuffers& buf) {
  const EncoderConfig& cfg = enc.config();
  const std::size_t positions = cfg.positions();
  const std::size_t db = cfg.feature_dim;
  for (std::size_t p = 0; p < positions; ++p) {
    enc.patch_map.forward(buf.patches.data() + p * cfg.patch_input_dim(),
                          buf.pre1.data() + p * db);
  }
  buf.feat = buf.pre1;
  relu_inplace(buf.feat.data(), buf.feat.size());
  std::fill(buf.pooled.begin(), buf.pooled.end(), 0.0);
  for (std::size_t p = 0; p < positions; ++p) {
    const double* f = buf.feat.data() + p * db;
    for (std::size_t i = 0; i < db; ++i) buf.pooled[i] += f[i];
  }
  const double inv_p = 1.0 / static_cast<double>(positions);
  for (double& x : buf.pooled) x *= inv_p;
}

inline void forward_projection(const PatchLinearEncoder& enc, SampleBuffers& buf) {
  enc.projector.forward(buf.pooled.data(), buf.u.data());
  double norm = 0.0;
  for (double x : buf.u) norm += x * x;
  norm = std::sqrt(norm);
  buf.u_norm = std::max(norm, 1e-12);
  for (std::size_t i = 0; i < buf.u.size(); ++i) buf.z[i] = buf.u[i] / buf.u_norm;
}

inline void forward_local(const LocalProjector& local, const EncoderConfig& cfg,
                          SampleBuffers& buf) {
  const std::size_t positions = cfg.positions();
  const std::size_t db = cfg.feature_dim;
  for (std::size_t p = 0; p < positions; ++p)
    local.hidden.forward(buf.feat.data() + p * db, buf.pre2.data() + p * db);
  buf.hid = buf.pre2;
  relu_inplace(buf.hid.data(), buf.hid.size());
  for (std::size_t p = 0; p < positions; ++p)
    local.output.forward(buf.hid.data() + p * db, buf.local_out.data() + p * cfg.local_dim);
}

struct EncoderGrads {
  AffineGrads patch_map;
  AffineGrads projector;
  AffineGrads local_hidden;
  AffineGrads local_output;

  EncoderGrads(const PatchLinearEncoder& enc, const LocalProjector& local)
      : patch_map(enc.patch_map), projector(enc.projector),
        local_hidden(local.hidden), local_output(local.output) {}

  void reset() {
    patch_map.reset();
    projector.reset();
    local_hidden.reset();
    local_output.reset();
  }

  void accumulate(const EncoderGrads& other) {
    auto add = [](std::vector<double>& dst, const std::vector<double>& src) {
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
    };
    add(patch_map.w, other.patch_map.w);
    add(patch_map.b, other.patch_map.b);
    add(projector.w, other.projector.w);
    add(projector.b, other.projector.b);
    add(local_hidden.w, other.local_hidden.w);
    add(local_hidden.b, other.local_hidden.b);
    add(local_output.w, other.local_output.w);
    add(local_output.b, other.local_output.b);
  }
};

// Backward for one sample. gz (Dz) and g_local (positions x De) may be null;
// g_pooled (Db) may be null. Accumulates parameter gradients into `grads`.
inline void backward_sample(const PatchLinearEncoder& enc, const LocalProjector& local,
                            const SampleBuffers& buf, const double* gz,
                            const double* g_local, const double* g_pooled,
                            EncoderGrads& grads) {
  const EncoderConfig& cfg = enc.config();
  const std::size_t positions = cfg.positions();
  const std::size_t db = cfg.feature_dim;
  std::vector<double> g_feat(positions * db, 0.0);
  std::vector<double> g_pool_total(db, 0.0);

  if (gz != nullptr) {
    // z = u / |u|
    double dot = 0.0;
    for (std::size_t i = 0; i < buf.z.size(); ++i) dot += buf.z[i] * gz[i];
    std::vector<double> gu(buf.u.size());
    for (std::size_t i = 0; i < buf.u.size(); ++i)
      gu[i] = (gz[i] - buf.z[i] * dot) / buf.u_norm;
    std::vector<double> gp(db, 0.0);
    enc.projector.backward(buf.pooled.data(), gu.data(), gp.data(),
                           grads.projector.w, grads.projector.b);
    for (std::size_t i = 0; i < db; ++i) g_pool_total[i] += gp[i];
  }
  if (g_pooled != nullptr)
    for (std::size_t i = 0; i < db; ++i) g_pool_total[i] += g_pooled[i];

  if (g_local != nullptr) {
    std::vector<double> gh(db);
    for (std::size_t p = 0; p < positions; ++p) {
      std::fill(gh.begin(), gh.end(), 0.0);
      local.output.backward(buf.hid.data() + p * db, g_local + p * cfg.local_dim,
                            gh.data(), grads.local_output.w, grads.local_output.b);
      relu_backward(buf.pre2.data() + p * db, gh.data(), db);
      local.hidden.backward(buf.feat.data() + p * db, gh.data(), g_feat.data() + p * db,
                            grads.local_hidden.w, grads.local_hidden.b);
    }
  }

  const double inv_p = 1.0 / static_cast<double>(positions);
  for (std::size_t p = 0; p < positions; ++p) {
    double* gf = g_feat.data() + p * db;
    for (std::size_t i = 0; i < db; ++i) gf[i] += g_pool_total[i] * inv_p;
    relu_backward(buf.pre1.data() + p * db, gf, db);
    enc.patch_map.backward(buf.patches.data() + p * cfg.patch_input_dim(), gf, nullptr,
                           grads.patch_map.w, grads.patch_map.b);
  }
}

inline std::vector<std::vector<std::size_t>> domain_index_lists(const Dataset& data) {
  std::vector<int> ids;
  for (int d : data.domains)
    if (std::find(ids.begin(), ids.end(), d) == ids.end()) ids.push_back(d);
  std::vector<std::vector<std::size_t>> lists(ids.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    const std::size_t which =
        std::find(ids.begin(), ids.end(), data.domains[i]) - ids.begin();
    lists[which].push_back(i);
  }
  return lists;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Stage 1: domain-invariant feature learning
// ---------------------------------------------------------------------------

// Each step draws a batch, re-stains every sample toward the k-1 other stain
// clusters (decompositions are computed once per image up front; their RNG
// streams are derived from (seed, image index) so the cache is equivalent to
// decomposing inside the step), encodes raw and transformed samples, and
// descends disc + beta * local alignment.
inline Stage1Model train_stage1(const Dataset& train, const TrainConfig& cfg) {
  cfg.validate();
  if (train.size() < cfg.batch_size)
    throw std::invalid_argument("train_stage1: dataset smaller than batch");
  const EncoderConfig& ec = cfg.encoder;
  const std::size_t n = train.size();
  const std::size_t t_count = cfg.k - 1;
  const std::size_t positions = ec.positions();

  // Decomposition cache, one seeded stream per image.
  std::vector<StainDecomposition> decomps(n);
  {
    std::vector<std::string> errors(n);
    parallel_for(n, [&](std::size_t i) {
      try {
        SnmfConfig sc = cfg.snmf;
        sc.seed = Rng::derive(cfg.seed, detail::kDecompStream + i);
        decomps[i] = fit_snmf(to_optical_density(train.images[i]), sc);
      } catch (const std::exception& e) {
        errors[i] = e.what();
      }
    });
    for (const auto& err : errors)
      if (!err.empty()) throw std::runtime_error("train_stage1: snmf failed: " + err);
  }

  Rng init_rng(Rng::derive(cfg.seed, detail::kInitStream));
  Stage1Model model{PatchLinearEncoder(ec, init_rng),
                    LocalProjector(ec.feature_dim, ec.local_dim, init_rng),
                    {}};

  // Cached raw patches.
  std::vector<std::vector<double>> raw_patches(n);
  parallel_for(n, [&](std::size_t i) {
    raw_patches[i].resize(positions * ec.patch_input_dim());
    model.encoder.extract_patches(train.images[i], raw_patches[i].data());
  });

  const auto domain_lists = detail::domain_index_lists(train);
  Rng batch_rng(Rng::derive(cfg.seed, detail::kStage1Batch));

  const std::size_t batch = cfg.batch_size;
  const std::size_t total = batch * (1 + t_count);
  std::vector<detail::SampleBuffers> buffers(total);
  for (auto& buf : buffers) buf.allocate(ec);
  std::vector<detail::EncoderGrads> slot_grads(
      total, detail::EncoderGrads(model.encoder, model.local));

  std::vector<std::size_t> idx(batch);
  std::vector<StainBasis> batch_bases(batch);
  model.loss_curve.reserve(cfg.steps_per_stage);

  for (std::size_t step = 0; step < cfg.steps_per_stage; ++step) {
    if (cfg.pooled_batches || domain_lists.size() <= 1) {
      for (std::size_t b = 0; b < batch; ++b) idx[b] = batch_rng.uniform_index(n);
    } else {
      const auto& list = domain_lists[step % domain_lists.size()];
      for (std::size_t b = 0; b < batch; ++b)
        idx[b] = list[batch_rng.uniform_index(list.size())];
    }
    for (std::size_t b = 0; b < batch; ++b) batch_bases[b] = decomps[idx[b]].basis;
    const ClusterModel clusters =
        kmeans_fit(batch_bases, cfg.k, Rng::derive(cfg.seed, detail::kStepKmeans + step));
    std::vector<std::vector<std::size_t>> members(cfg.k);
    for (std::size_t b = 0; b < batch; ++b)
      members[clusters.labels[b] - 1].push_back(b);

    // Donor selection, then restain + patch extraction per transformed sample.
    Rng donor_rng(Rng::derive(cfg.seed, detail::kStepDonor + step));
    std::vector<std::size_t> donor_of(batch * t_count);
    for (std::size_t b = 0; b < batch; ++b) {
      std::size_t t = 0;
      for (std::size_t c = 1; c <= cfg.k; ++c) {
        if (static_cast<int>(c) == clusters.labels[b]) continue;
        const auto& pool = members[c - 1];
        donor_of[b * t_count + t] =
            pool.empty() ? b : idx[pool[donor_rng.uniform_index(pool.size())]];
        ++t;
      }
    }
    parallel_for(batch * t_count, [&](std::size_t j) {
      const std::size_t b = j / t_count;
      const std::size_t src = idx[b];
      const std::size_t donor = donor_of[j];
      const RgbImage transformed =
          restain(decomps[src].density, decomps[donor].density, decomps[donor].basis,
                  255.0, train.images[src].width, train.images[src].height);
      model.encoder.extract_patches(transformed, buffers[batch + j].patches.data());
    });

    // Forward raw + transformed.
    parallel_for(total, [&](std::size_t s) {
      if (s < batch) buffers[s].patches = raw_patches[idx[s]];
      detail::forward_features(model.encoder, buffers[s]);
      detail::forward_projection(model.encoder, buffers[s]);
      detail::forward_local(model.local, ec, buffers[s]);
    });

    // Losses over the projected embeddings and local maps.
    EmbeddingBatch emb(batch, t_count, ec.embed_dim);
    emb.tau = cfg.tau;
    ProjectedMaps raw_maps(batch, positions, ec.local_dim);
    TransformedMaps tr_maps(batch, t_count, positions, ec.local_dim);
    for (std::size_t b = 0; b < batch; ++b) {
      emb.labels[b] = train.labels[idx[b]];
      std::copy(buffers[b].z.begin(), buffers[b].z.end(), emb.raw(b));
      std::copy(buffers[b].local_out.begin(), buffers[b].local_out.end(),
                raw_maps.at(b, 0));
      for (std::size_t t = 0; t < t_count; ++t) {
        const auto& buf = buffers[batch + b * t_count + t];
        std::copy(buf.z.begin(), buf.z.end(), emb.transformed(b, t));
        std::copy(buf.local_out.begin(), buf.local_out.end(), tr_maps.at(b, t, 0));
      }
    }
    const LossResult disc = disc_loss(emb);
    LossResult la;
    if (cfg.beta != 0.0) {
      la = local_align_loss(raw_maps, tr_maps);
    } else {
      la.gradients = {{"E", std::vector<double>(raw_maps.values.size(), 0.0)},
                      {"E_t", std::vector<double>(tr_maps.values.size(), 0.0)}};
    }
    const LossResult rep = rep_loss(disc, la, cfg.beta);
    if (!std::isfinite(rep.value))
      throw std::runtime_error("train_stage1: non-finite loss at step " +
                               std::to_string(step));
    model.loss_curve.push_back(rep.value);

    const auto& gz = rep.grad("z");
    const auto& gzt = rep.grad("z_t");
    const auto& ge = rep.grad("E");
    const auto& get = rep.grad("E_t");

    parallel_for(total, [&](std::size_t s) {
      slot_grads[s].reset();
      const double* gz_s;
      const double* gl_s;
      if (s < batch) {
        gz_s = gz.data() + s * ec.embed_dim;
        gl_s = ge.data() + s * positions * ec.local_dim;
      } else {
        const std::size_t j = s - batch;
        gz_s = gzt.data() + j * ec.embed_dim;
        gl_s = get.data() + j * positions * ec.local_dim;
      }
      detail::backward_sample(model.encoder, model.local, buffers[s], gz_s, gl_s,
                              nullptr, slot_grads[s]);
    });
    for (std::size_t s = 1; s < total; ++s) slot_grads[0].accumulate(slot_grads[s]);
    const auto& g = slot_grads[0];
    model.encoder.patch_map.apply_sgd(g.patch_map.w, g.patch_map.b, cfg.learning_rate);
    model.encoder.projector.apply_sgd(g.projector.w, g.projector.b, cfg.learning_rate);
    model.local.hidden.apply_sgd(g.local_hidden.w, g.local_hidden.b, cfg.learning_rate);
    model.local.output.apply_sgd(g.local_output.w, g.local_output.b, cfg.learning_rate);
  }
  return model;
}

// ---------------------------------------------------------------------------
// Pooled features, stage 2, ERM, evaluation
// ---------------------------------------------------------------------------

inline std::vector<std::vector<double>> pooled_features(const PatchLinearEncoder& enc,
                                                        const Dataset& data) {
  std::vector<std::vector<double>> pooled(data.size());
  parallel_for(data.size(), [&](std::size_t i) {
    detail::SampleBuffers buf;
    buf.allocate(enc.config());
    enc.extract_patches(data.images[i], buf.patches.data());
    detail::forward_features(enc, buf);
    pooled[i] = buf.pooled;
  });
  return pooled;
}

// Trains the linear classification head on frozen pooled embeddings.
// The encoder is never updated; a parameter hash guards the stage boundary.
inline Stage2Result train_stage2(const Stage1Model& frozen, const Dataset& train,
                                 const TrainConfig& cfg) {
  cfg.validate();
  if (train.size() == 0) throw std::invalid_argument("train_stage2: empty dataset");
  const std::uint64_t hash_before = frozen.encoder.parameter_hash();
  const std::size_t classes = train.n_classes();
  const std::size_t db = cfg.encoder.feature_dim;

  const auto pooled = pooled_features(frozen.encoder, train);

  Stage2Result result;
  result.classifier.mean.assign(db, 0.0);
  result.classifier.scale.assign(db, 1.0);
  for (const auto& f : pooled)
    for (std::size_t i = 0; i < db; ++i) result.classifier.mean[i] += f[i];
  for (double& m : result.classifier.mean) m /= static_cast<double>(pooled.size());
  std::vector<double> var(db, 0.0);
  for (const auto& f : pooled)
    for (std::size_t i = 0; i < db; ++i) {
      const double d = f[i] - result.classifier.mean[i];
      var[i] += d * d;
    }
  for (std::size_t i = 0; i < db; ++i)
    result.classifier.scale[i] = std::sqrt(var[i] / static_cast<double>(pooled.size())) + 1e-8;

  std::vector<std::vector<double>> standardized(pooled.size(), std::vector<double>(db));
  for (std::size_t s = 0; s < pooled.size(); ++s)
    for (std::size_t i = 0; i < db; ++i)
      standardized[s][i] = (pooled[s][i] - result.classifier.mean[i]) / result.classifier.scale[i];

  result.classifier.linear.in = db;
  result.classifier.linear.out = classes;
  result.classifier.linear.w.assign(db * classes, 0.0);
  result.classifier.linear.b.assign(classes, 0.0);

  Rng batch_rng(Rng::derive(cfg.seed, detail::kStage2Batch));
  AffineGrads grads(result.classifier.linear);
  Matrix logits(cfg.batch_size, classes);
  std::vector<int> ys(cfg.batch_size);
  result.loss_curve.reserve(cfg.steps_per_stage);
  for (std::size_t step = 0; step < cfg.steps_per_stage; ++step) {
    grads.reset();
    std::vector<std::size_t> idx(cfg.batch_size);
    for (std::size_t b = 0; b < cfg.batch_size; ++b) {
      idx[b] = batch_rng.uniform_index(train.size());
      ys[b] = train.labels[idx[b]];
      result.classifier.linear.forward(standardized[idx[b]].data(), logits.row(b));
    }
    const LossResult ce = cross_entropy_with_softmax(logits, ys);
    if (!std::isfinite(ce.value))
      throw std::runtime_error("train_stage2: non-finite loss at step " +
                               std::to_string(step));
    result.loss_curve.push_back(ce.value);
    const auto& glogits = ce.grad("logits");
    for (std::size_t b = 0; b < cfg.batch_size; ++b)
      result.classifier.linear.backward(standardized[idx[b]].data(),
                                        glogits.data() + b * classes, nullptr,
                                        grads.w, grads.b);
    result.classifier.linear.apply_sgd(grads.w, grads.b, cfg.learning_rate_stage2);
  }

  if (frozen.encoder.parameter_hash() != hash_before)
    throw std::logic_error("train_stage2: encoder parameters changed");
  return result;
}

// End-to-end cross-entropy baseline: same encoder architecture and init
// stream, no augmentation, no contrastive terms.
inline ErmModel train_erm_baseline(const Dataset& train, const TrainConfig& cfg) {
  cfg.validate();
  if (train.size() < cfg.batch_size)
    throw std::invalid_argument("train_erm_baseline: dataset smaller than batch");
  const EncoderConfig& ec = cfg.encoder;
  const std::size_t classes = train.n_classes();
  const std::size_t db = ec.feature_dim;

  Rng init_rng(Rng::derive(cfg.seed, detail::kInitStream));
  ErmModel model;
  model.encoder = PatchLinearEncoder(ec, init_rng);
  model.classifier.mean.assign(db, 0.0);
  model.classifier.scale.assign(db, 1.0);
  model.classifier.linear.in = db;
  model.classifier.linear.out = classes;
  model.classifier.linear.w.assign(db * classes, 0.0);
  model.classifier.linear.b.assign(classes, 0.0);

  std::vector<std::vector<double>> raw_patches(train.size());
  parallel_for(train.size(), [&](std::size_t i) {
    raw_patches[i].resize(ec.positions() * ec.patch_input_dim());
    model.encoder.extract_patches(train.images[i], raw_patches[i].data());
  });

  Rng batch_rng(Rng::derive(cfg.seed, detail::kErmBatch));
  std::vector<detail::SampleBuffers> buffers(cfg.batch_size);
  for (auto& buf : buffers) buf.allocate(ec);
  LocalProjector unused_local(1, 1, init_rng);
  std::vector<detail::EncoderGrads> slot_grads(
      cfg.batch_size, detail::EncoderGrads(model.encoder, unused_local));
  AffineGrads head_grads(model.classifier.linear);
  Matrix logits(cfg.batch_size, classes);
  std::vector<int> ys(cfg.batch_size);
  std::vector<std::size_t> idx(cfg.batch_size);
  model.loss_curve.reserve(cfg.steps_per_stage);

  for (std::size_t step = 0; step < cfg.steps_per_stage; ++step) {
    for (std::size_t b = 0; b < cfg.batch_size; ++b) {
      idx[b] = batch_rng.uniform_index(train.size());
      ys[b] = train.labels[idx[b]];
    }
    parallel_for(cfg.batch_size, [&](std::size_t b) {
      buffers[b].patches = raw_patches[idx[b]];
      detail::forward_features(model.encoder, buffers[b]);
    });
    for (std::size_t b = 0; b < cfg.batch_size; ++b)
      model.classifier.linear.forward(buffers[b].pooled.data(), logits.row(b));
    const LossResult ce = cross_entropy_with_softmax(logits, ys);
    if (!std::isfinite(ce.value))
      throw std::runtime_error("train_erm_baseline: non-finite loss at step " +
                               std::to_string(step));
    model.loss_curve.push_back(ce.value);
    const auto& glogits = ce.grad("logits");

    head_grads.reset();
    std::vector<std::vector<double>> g_pooled(cfg.batch_size, std::vector<double>(db, 0.0));
    for (std::size_t b = 0; b < cfg.batch_size; ++b)
      model.classifier.linear.backward(buffers[b].pooled.data(),
                                       glogits.data() + b * classes,
                                       g_pooled[b].data(), head_grads.w, head_grads.b);
    parallel_for(cfg.batch_size, [&](std::size_t b) {
      slot_grads[b].reset();
      detail::backward_sample(model.encoder, unused_local, buffers[b], nullptr, nullptr,
                              g_pooled[b].data(), slot_grads[b]);
    });
    for (std::size_t b = 1; b < cfg.batch_size; ++b) slot_grads[0].accumulate(slot_grads[b]);
    model.encoder.patch_map.apply_sgd(slot_grads[0].patch_map.w, slot_grads[0].patch_map.b,
                                      cfg.learning_rate_erm);
    model.encoder.projector.apply_sgd(slot_grads[0].projector.w, slot_grads[0].projector.b,
                                      cfg.learning_rate_erm);
    model.classifier.linear.apply_sgd(head_grads.w, head_grads.b, cfg.learning_rate_erm);
  }
  return model;
}

inline Confusion evaluate(const PatchLinearEncoder& encoder,
                          const LinearClassifier& classifier, const Dataset& data) {
  if (data.size() == 0) throw std::invalid_argument("evaluate: empty dataset");
  const std::size_t classes = classifier.classes();
  const auto pooled = pooled_features(encoder, data);
  Confusion confusion(classes);
  std::vector<double> logits(classes);
  std::vector<double> buf(classifier.linear.in);
  for (std::size_t i = 0; i < data.size(); ++i) {
    classifier.logits(pooled[i].data(), logits.data(), buf.data());
    std::size_t best = 0;
    for (std::size_t c = 1; c < classes; ++c)
      if (logits[c] > logits[best]) best = c;
    ++confusion.at(static_cast<std::size_t>(data.labels[i]), best);
  }
  return confusion;
}

// ---------------------------------------------------------------------------
// Leave-one-domain-out experiment
// ---------------------------------------------------------------------------

// For each domain: train SADA (stage 1 + stage 2) and the ERM baseline on the
// remaining domains, evaluate both on the held-out domain's test set and on
// the held-in domains' test sets.
inline std::vector<PairedReport> loo_experiment(
    const std::vector<LabeledImages>& train_sets,
    const std::vector<LabeledImages>& test_sets, const TrainConfig& cfg) {
  if (train_sets.size() < 3)
    throw std::invalid_argument("loo_experiment: need at least 3 domains");
  if (test_sets.size() != train_sets.size())
    throw std::invalid_argument("loo_experiment: train/test domain mismatch");

  std::vector<PairedReport> reports;
  for (std::size_t hold = 0; hold < train_sets.size(); ++hold) {
    std::vector<LabeledImages> train_subset, test_subset;
    for (std::size_t d = 0; d < train_sets.size(); ++d) {
      if (d == hold) continue;
      train_subset.push_back(train_sets[d]);
      test_subset.push_back(test_sets[d]);
    }
    const Dataset train = Dataset::concat(train_subset);
    const Dataset indomain_test = Dataset::concat(test_subset);
    const Dataset holdout_test = Dataset::concat({test_sets[hold]});

    PairedReport paired;
    paired.held_out_domain = train_sets[hold].domain_id;

    const Stage1Model stage1 = train_stage1(train, cfg);
    const Stage2Result stage2 = train_stage2(stage1, train, cfg);
    paired.sada.stage1_curve = stage1.loss_curve;
    paired.sada.stage2_curve = stage2.loss_curve;
    paired.sada.holdout_confusion = evaluate(stage1.encoder, stage2.classifier, holdout_test);
    paired.sada.holdout_f1 = f1_scores(paired.sada.holdout_confusion);
    paired.sada.indomain_confusion = evaluate(stage1.encoder, stage2.classifier, indomain_test);
    paired.sada.indomain_f1 = f1_scores(paired.sada.indomain_confusion);

    const ErmModel erm = train_erm_baseline(train, cfg);
    paired.erm.stage2_curve = erm.loss_curve;
    paired.erm.holdout_confusion = evaluate(erm.encoder, erm.classifier, holdout_test);
    paired.erm.holdout_f1 = f1_scores(paired.erm.holdout_confusion);
    paired.erm.indomain_confusion = evaluate(erm.encoder, erm.classifier, indomain_test);
    paired.erm.indomain_f1 = f1_scores(paired.erm.indomain_confusion);

    reports.push_back(std::move(paired));
  }
  return reports;
}

}  // namespace sada
