#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "sada/matrix.hpp"
#include "sada/nn.hpp"
#include "sada/rng.hpp"

namespace sada {

// A loss value plus one gradient block per differentiable input, keyed by
// name ("z", "z_t", "E", "E_t", "logits", ...). rep_loss merges blocks by
// name, so losses over disjoint inputs combine as well as losses over the
// same input.
struct GradBlock {
  std::string name;
  std::vector<double> values;
};

struct LossResult {
  double value = 0.0;
  std::vector<GradBlock> gradients;

  const std::vector<double>& grad(const std::string& name) const {
    for (const auto& block : gradients)
      if (block.name == name) return block.values;
    throw std::invalid_argument("LossResult: no gradient block named " + name);
  }
};

// ---------------------------------------------------------------------------
// Local alignment (feature-map level)
// ---------------------------------------------------------------------------

// Projected feature maps for raw samples: samples x positions x dim.
struct ProjectedMaps {
  std::size_t samples = 0;
  std::size_t positions = 0;
  std::size_t dim = 0;
  std::vector<double> values;

  ProjectedMaps() = default;
  ProjectedMaps(std::size_t n, std::size_t p, std::size_t d)
      : samples(n), positions(p), dim(d), values(n * p * d, 0.0) {}
  double* at(std::size_t i, std::size_t p) { return values.data() + (i * positions + p) * dim; }
  const double* at(std::size_t i, std::size_t p) const {
    return values.data() + (i * positions + p) * dim;
  }
};

// Projected maps for transformed samples: samples x transforms x positions x dim.
struct TransformedMaps {
  std::size_t samples = 0;
  std::size_t transforms = 0;
  std::size_t positions = 0;
  std::size_t dim = 0;
  std::vector<double> values;

  TransformedMaps() = default;
  TransformedMaps(std::size_t n, std::size_t t, std::size_t p, std::size_t d)
      : samples(n), transforms(t), positions(p), dim(d), values(n * t * p * d, 0.0) {}
  double* at(std::size_t i, std::size_t t, std::size_t p) {
    return values.data() + ((i * transforms + t) * positions + p) * dim;
  }
  const double* at(std::size_t i, std::size_t t, std::size_t p) const {
    return values.data() + ((i * transforms + t) * positions + p) * dim;
  }
};

// Sum over samples and spatial positions of the mean (over the k-1
// transforms) squared distance between unit-normalized embeddings:
//   L = sum_i sum_p (1/(k-1)) sum_t || E_ip/|E_ip| - E^t_ip/|E^t_ip| ||^2
// Gradients flow through both normalizations. Blocks: "E", "E_t".
inline LossResult local_align_loss(const ProjectedMaps& raw,
                                   const TransformedMaps& transformed) {
  if (raw.samples != transformed.samples || raw.positions != transformed.positions ||
      raw.dim != transformed.dim)
    throw std::invalid_argument("local_align_loss: shape mismatch");
  if (transformed.transforms < 1)
    throw std::invalid_argument("local_align_loss: needs k >= 2 (at least one transform)");

  const std::size_t d = raw.dim;
  const double inv_t = 1.0 / static_cast<double>(transformed.transforms);
  LossResult result;
  result.gradients = {{"E", std::vector<double>(raw.values.size(), 0.0)},
                      {"E_t", std::vector<double>(transformed.values.size(), 0.0)}};
  auto& g_raw = result.gradients[0].values;
  auto& g_tr = result.gradients[1].values;

  std::vector<double> u(d), ut(d);
  for (std::size_t i = 0; i < raw.samples; ++i) {
    for (std::size_t p = 0; p < raw.positions; ++p) {
      const double* e = raw.at(i, p);
      double norm_e = 0.0;
      for (std::size_t c = 0; c < d; ++c) norm_e += e[c] * e[c];
      norm_e = std::sqrt(norm_e);
      if (norm_e < 1e-12) throw std::domain_error("local_align_loss: zero-norm embedding");
      for (std::size_t c = 0; c < d; ++c) u[c] = e[c] / norm_e;
      double* ge = g_raw.data() + (i * raw.positions + p) * d;

      for (std::size_t t = 0; t < transformed.transforms; ++t) {
        const double* et = transformed.at(i, t, p);
        double norm_t = 0.0;
        for (std::size_t c = 0; c < d; ++c) norm_t += et[c] * et[c];
        norm_t = std::sqrt(norm_t);
        if (norm_t < 1e-12) throw std::domain_error("local_align_loss: zero-norm embedding");
        double dot = 0.0;
        for (std::size_t c = 0; c < d; ++c) {
          ut[c] = et[c] / norm_t;
          dot += u[c] * ut[c];
        }
        result.value += inv_t * (2.0 - 2.0 * dot);
        double* gt = g_tr.data() + ((i * transformed.transforms + t) * raw.positions + p) * d;
        const double ce = 2.0 * inv_t / norm_e;
        const double ct = 2.0 * inv_t / norm_t;
        for (std::size_t c = 0; c < d; ++c) {
          ge[c] += ce * (dot * u[c] - ut[c]);
          gt[c] += ct * (dot * ut[c] - u[c]);
        }
      }
    }
  }
  return result;
}

// ---------------------------------------------------------------------------
// Domain-invariant supervised contrastive loss
// ---------------------------------------------------------------------------

// Unit-norm feature embeddings for a mini-batch: N raw vectors plus
// (k-1) transformed vectors per sample, with class labels and temperature.
struct EmbeddingBatch {
  std::size_t samples = 0;
  std::size_t transforms = 0;  // k - 1; zero degenerates anchors to z_i
  std::size_t dim = 0;
  std::vector<double> z;    // samples x dim
  std::vector<double> z_t;  // samples x transforms x dim
  std::vector<int> labels;  // class label per sample
  double tau = 0.1;

  EmbeddingBatch() = default;
  EmbeddingBatch(std::size_t n, std::size_t t, std::size_t d)
      : samples(n), transforms(t), dim(d), z(n * d, 0.0), z_t(n * t * d, 0.0),
        labels(n, 0) {}

  double* raw(std::size_t i) { return z.data() + i * dim; }
  const double* raw(std::size_t i) const { return z.data() + i * dim; }
  double* transformed(std::size_t i, std::size_t t) {
    return z_t.data() + (i * transforms + t) * dim;
  }
  const double* transformed(std::size_t i, std::size_t t) const {
    return z_t.data() + (i * transforms + t) * dim;
  }

  // Invariant check for embeddings produced by the encoder path. Not called
  // by disc_loss itself: the loss extends smoothly off the unit sphere,
  // which the finite-difference harness relies on.
  bool unit_norm(double tol = 1e-6) const {
    auto ok = [&](const double* v) {
      double s = 0.0;
      for (std::size_t c = 0; c < dim; ++c) s += v[c] * v[c];
      return std::abs(std::sqrt(s) - 1.0) <= tol;
    };
    for (std::size_t i = 0; i < samples; ++i) {
      if (!ok(raw(i))) return false;
      for (std::size_t t = 0; t < transforms; ++t)
        if (!ok(transformed(i, t))) return false;
    }
    return true;
  }
};

struct DiscOptions {
  // Literal reading of the loss: the softmax denominator runs over the N raw
  // embeddings only. Enabling this widens it to raw plus transformed.
  bool denominator_includes_transforms = false;
};

// Anchors are the re-normalized means of {z_i, z_i^1, ..., z_i^{k-1}}; the
// positive set of anchor i is every same-class raw and transformed embedding.
// Returns gradient blocks "z" and "z_t".
inline LossResult disc_loss(const EmbeddingBatch& batch, const DiscOptions& opts = {}) {
  const std::size_t n = batch.samples;
  const std::size_t t_count = batch.transforms;
  const std::size_t d = batch.dim;
  if (n < 2) throw std::invalid_argument("disc_loss: needs at least two samples");
  if (!(batch.tau > 0.0)) throw std::invalid_argument("disc_loss: tau must be > 0");
  const double tau = batch.tau;
  const double k = static_cast<double>(t_count + 1);

  // Anchors.
  std::vector<double> anchors(n * d);
  std::vector<double> mean_norms(n);
  for (std::size_t i = 0; i < n; ++i) {
    double* a = anchors.data() + i * d;
    const double* zi = batch.raw(i);
    for (std::size_t c = 0; c < d; ++c) a[c] = zi[c];
    for (std::size_t t = 0; t < t_count; ++t) {
      const double* zt = batch.transformed(i, t);
      for (std::size_t c = 0; c < d; ++c) a[c] += zt[c];
    }
    double norm = 0.0;
    for (std::size_t c = 0; c < d; ++c) {
      a[c] /= k;
      norm += a[c] * a[c];
    }
    norm = std::sqrt(norm);
    if (norm < 1e-12) throw std::domain_error("disc_loss: zero-norm anchor");
    mean_norms[i] = norm;
    for (std::size_t c = 0; c < d; ++c) a[c] /= norm;
  }

  // Class statistics: positive-set sizes and positive sums.
  std::vector<double> pos_sum(n * d, 0.0);  // indexed by class via first member
  std::vector<std::size_t> class_count(n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    double* s = pos_sum.data() + i * d;
    for (std::size_t j = 0; j < n; ++j) {
      if (batch.labels[j] != batch.labels[i]) continue;
      ++class_count[i];
      const double* zj = batch.raw(j);
      for (std::size_t c = 0; c < d; ++c) s[c] += zj[c];
      for (std::size_t t = 0; t < t_count; ++t) {
        const double* zt = batch.transformed(j, t);
        for (std::size_t c = 0; c < d; ++c) s[c] += zt[c];
      }
    }
    if (class_count[i] == 0) throw std::invalid_argument("disc_loss: class with no members");
  }

  const bool wide = opts.denominator_includes_transforms;
  const std::size_t pool = wide ? n * (1 + t_count) : n;
  auto pool_vec = [&](std::size_t m) -> const double* {
    if (m < n) return batch.raw(m);
    const std::size_t rest = m - n;
    return batch.transformed(rest / t_count, rest % t_count);
  };

  LossResult result;
  result.gradients = {{"z", std::vector<double>(batch.z.size(), 0.0)},
                      {"z_t", std::vector<double>(batch.z_t.size(), 0.0)}};
  auto& gz = result.gradients[0].values;
  auto& gzt = result.gradients[1].values;

  std::vector<double> logits(pool);
  std::vector<double> probs(pool);
  std::vector<double> ga(d);
  for (std::size_t i = 0; i < n; ++i) {
    const double* a = anchors.data() + i * d;
    double max_logit = -std::numeric_limits<double>::infinity();
    for (std::size_t m = 0; m < pool; ++m) {
      const double* v = pool_vec(m);
      double dot = 0.0;
      for (std::size_t c = 0; c < d; ++c) dot += a[c] * v[c];
      logits[m] = dot / tau;
      max_logit = std::max(max_logit, logits[m]);
    }
    double sum_exp = 0.0;
    for (std::size_t m = 0; m < pool; ++m) {
      probs[m] = std::exp(logits[m] - max_logit);
      sum_exp += probs[m];
    }
    const double lse = max_logit + std::log(sum_exp);
    for (std::size_t m = 0; m < pool; ++m) probs[m] /= sum_exp;

    const std::size_t pos_size = class_count[i] * static_cast<std::size_t>(k);
    const double* s = pos_sum.data() + i * d;
    double a_dot_s = 0.0;
    for (std::size_t c = 0; c < d; ++c) a_dot_s += a[c] * s[c];
    const double inv_pos_tau = 1.0 / (static_cast<double>(pos_size) * tau);
    result.value += lse - a_dot_s * inv_pos_tau;

    // Denominator path: every pool member gains p * a / tau.
    for (std::size_t m = 0; m < pool; ++m) {
      const double w = probs[m] / tau;
      double* g = (m < n) ? gz.data() + m * d
                          : gzt.data() + (m - n) * d;
      for (std::size_t c = 0; c < d; ++c) g[c] += w * a[c];
    }
    // Positive path: same-class raw and transformed embeddings.
    for (std::size_t j = 0; j < n; ++j) {
      if (batch.labels[j] != batch.labels[i]) continue;
      double* g = gz.data() + j * d;
      for (std::size_t c = 0; c < d; ++c) g[c] -= inv_pos_tau * a[c];
      for (std::size_t t = 0; t < t_count; ++t) {
        double* gt = gzt.data() + (j * t_count + t) * d;
        for (std::size_t c = 0; c < d; ++c) gt[c] -= inv_pos_tau * a[c];
      }
    }
    // Anchor path through the re-normalized mean.
    std::fill(ga.begin(), ga.end(), 0.0);
    for (std::size_t m = 0; m < pool; ++m) {
      const double* v = pool_vec(m);
      const double w = probs[m] / tau;
      for (std::size_t c = 0; c < d; ++c) ga[c] += w * v[c];
    }
    for (std::size_t c = 0; c < d; ++c) ga[c] -= s[c] * inv_pos_tau;
    double a_dot_ga = 0.0;
    for (std::size_t c = 0; c < d; ++c) a_dot_ga += a[c] * ga[c];
    const double scale = 1.0 / (mean_norms[i] * k);
    double* gzi = gz.data() + i * d;
    for (std::size_t c = 0; c < d; ++c) {
      const double gm = scale * (ga[c] - a[c] * a_dot_ga);
      gzi[c] += gm;
      for (std::size_t t = 0; t < t_count; ++t)
        gzt[(i * t_count + t) * d + c] += gm;
    }
  }
  return result;
}

// ---------------------------------------------------------------------------
// Cross-entropy and softmax
// ---------------------------------------------------------------------------

inline Matrix softmax(const Matrix& logits) {
  Matrix out(logits.rows(), logits.cols());
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    const double* in = logits.row(i);
    double* o = out.row(i);
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < logits.cols(); ++j) mx = std::max(mx, in[j]);
    double sum = 0.0;
    for (std::size_t j = 0; j < logits.cols(); ++j) {
      o[j] = std::exp(in[j] - mx);
      sum += o[j];
    }
    for (std::size_t j = 0; j < logits.cols(); ++j) o[j] /= sum;
  }
  return out;
}

// Mean negative log-probability of the true class. Probabilities are clamped
// to >= 1e-12 inside the log. Gradient block "probs".
inline LossResult cross_entropy(const Matrix& probs, const std::vector<int>& labels) {
  if (probs.rows() != labels.size())
    throw std::invalid_argument("cross_entropy: label count mismatch");
  if (probs.rows() == 0) throw std::invalid_argument("cross_entropy: empty batch");
  for (std::size_t i = 0; i < probs.rows(); ++i) {
    double sum = 0.0;
    for (std::size_t j = 0; j < probs.cols(); ++j) {
      if (probs(i, j) < 0.0) throw std::invalid_argument("cross_entropy: negative probability");
      sum += probs(i, j);
    }
    if (std::abs(sum - 1.0) > 1e-6)
      throw std::invalid_argument("cross_entropy: row does not sum to 1");
  }
  const double inv_n = 1.0 / static_cast<double>(probs.rows());
  LossResult result;
  result.gradients = {{"probs", std::vector<double>(probs.size(), 0.0)}};
  auto& g = result.gradients[0].values;
  for (std::size_t i = 0; i < probs.rows(); ++i) {
    const int y = labels[i];
    if (y < 0 || static_cast<std::size_t>(y) >= probs.cols())
      throw std::invalid_argument("cross_entropy: label out of range");
    const double p = std::max(probs(i, y), 1e-12);
    result.value += -std::log(p) * inv_n;
    g[i * probs.cols() + y] = -inv_n / p;
  }
  return result;
}

// cross_entropy(softmax(logits), labels) with the gradient taken with respect
// to the logits: (softmax - onehot) / N. Gradient block "logits".
inline LossResult cross_entropy_with_softmax(const Matrix& logits,
                                             const std::vector<int>& labels) {
  const Matrix probs = softmax(logits);
  LossResult plain = cross_entropy(probs, labels);
  LossResult result;
  result.value = plain.value;
  result.gradients = {{"logits", std::vector<double>(logits.size(), 0.0)}};
  auto& g = result.gradients[0].values;
  const double inv_n = 1.0 / static_cast<double>(logits.rows());
  for (std::size_t i = 0; i < logits.rows(); ++i)
    for (std::size_t j = 0; j < logits.cols(); ++j) {
      const double onehot = (static_cast<std::size_t>(labels[i]) == j) ? 1.0 : 0.0;
      g[i * logits.cols() + j] = (probs(i, j) - onehot) * inv_n;
    }
  return result;
}

// ---------------------------------------------------------------------------
// Stage-1 objective: disc + beta * local alignment
// ---------------------------------------------------------------------------

// value = disc.value + beta * la.value. Gradient blocks sharing a name are
// combined elementwise; blocks unique to one side are carried through with
// their scale (1 for disc, beta for la).
inline LossResult rep_loss(const LossResult& disc, const LossResult& la, double beta) {
  if (!std::isfinite(disc.value) || !std::isfinite(la.value))
    throw std::invalid_argument("rep_loss: non-finite component");
  LossResult result;
  result.value = disc.value + beta * la.value;
  for (const auto& block : disc.gradients)
    result.gradients.push_back(block);
  for (const auto& block : la.gradients) {
    GradBlock* existing = nullptr;
    for (auto& out : result.gradients)
      if (out.name == block.name) { existing = &out; break; }
    if (existing != nullptr) {
      if (existing->values.size() != block.values.size())
        throw std::invalid_argument("rep_loss: mismatched gradient shapes for " + block.name);
      for (std::size_t i = 0; i < block.values.size(); ++i)
        existing->values[i] += beta * block.values[i];
    } else {
      GradBlock scaled = block;
      for (double& x : scaled.values) x *= beta;
      result.gradients.push_back(std::move(scaled));
    }
  }
  return result;
}

// ---------------------------------------------------------------------------
// Gradient verification
// ---------------------------------------------------------------------------

struct FiniteDiffReport {
  double max_rel_err = 0.0;
  std::size_t coords_checked = 0;
};

// Central differences on a random subset of at least min_coords coordinates
// across all input blocks. Relative error uses max(1e-8, |numeric|) in the
// denominator. Throws std::domain_error when a perturbed evaluation is not
// finite.
inline FiniteDiffReport finite_diff_check(
    const std::function<double(const std::vector<std::vector<double>>&)>& loss_fn,
    std::vector<std::vector<double>> inputs,
    const std::vector<std::vector<double>>& analytic, std::size_t min_coords = 200,
    double epsilon = 1e-5, std::uint64_t seed = 20240915) {
  if (inputs.size() != analytic.size())
    throw std::invalid_argument("finite_diff_check: block count mismatch");
  std::size_t total = 0;
  for (std::size_t b = 0; b < inputs.size(); ++b) {
    if (inputs[b].size() != analytic[b].size())
      throw std::invalid_argument("finite_diff_check: block shape mismatch");
    total += inputs[b].size();
  }
  if (total == 0) throw std::invalid_argument("finite_diff_check: no coordinates");

  std::vector<std::size_t> order(total);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(seed);
  const std::size_t n_check = std::min(total, std::max<std::size_t>(min_coords, 1));
  for (std::size_t i = 0; i < n_check; ++i) {
    const std::size_t j = i + rng.uniform_index(total - i);
    std::swap(order[i], order[j]);
  }

  FiniteDiffReport report;
  report.coords_checked = n_check;
  for (std::size_t pick = 0; pick < n_check; ++pick) {
    std::size_t flat = order[pick];
    std::size_t block = 0;
    while (flat >= inputs[block].size()) {
      flat -= inputs[block].size();
      ++block;
    }
    const double saved = inputs[block][flat];
    inputs[block][flat] = saved + epsilon;
    const double up = loss_fn(inputs);
    inputs[block][flat] = saved - epsilon;
    const double down = loss_fn(inputs);
    inputs[block][flat] = saved;
    if (!std::isfinite(up) || !std::isfinite(down))
      throw std::domain_error("finite_diff_check: non-finite loss at perturbed point");
    const double numeric = (up - down) / (2.0 * epsilon);
    const double rel = std::abs(analytic[block][flat] - numeric) /
                       std::max(1e-8, std::abs(numeric));
    report.max_rel_err = std::max(report.max_rel_err, rel);
  }
  return report;
}

// ---------------------------------------------------------------------------
// Local projector f_l: affine -> rectifier -> affine, D_b -> D_b -> D_e
// ---------------------------------------------------------------------------

struct LocalProjector {
  AffineLayer hidden;
  AffineLayer output;

  LocalProjector() = default;
  LocalProjector(std::size_t feature_dim, std::size_t embed_dim, Rng& rng)
      : hidden(feature_dim, feature_dim, rng), output(feature_dim, embed_dim, rng) {
    // Nonzero output bias keeps projections of rectifier-dead positions away
    // from the zero vector the alignment loss rejects.
    for (double& b : output.b) b = rng.uniform(0.01, 0.05) * (rng.uniform() < 0.5 ? -1.0 : 1.0);
  }

  std::size_t in_dim() const { return hidden.in; }
  std::size_t out_dim() const { return output.out; }

  // pre_buf receives the pre-activation needed by backward.
  void forward(const double* x, double* pre_buf, double* y) const {
    hidden.forward(x, pre_buf);
    std::vector<double> act(pre_buf, pre_buf + hidden.out);
    relu_inplace(act.data(), act.size());
    output.forward(act.data(), y);
  }
};

}  // namespace sada
