#pragma once

#include <algorithm>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "sada/matrix.hpp"
#include "sada/rng.hpp"
#include "sada/snmf.hpp"

namespace sada {

// K-means over flattened stain bases. Labels are 1-based domain ids in
// {1, ..., k}; relabeling is canonical (cluster of the first sample is 1,
// the next previously-unseen cluster is 2, ...) so results are deterministic
// for a given (bases, k, seed).
struct ClusterModel {
  std::size_t k = 0;
  std::vector<std::vector<double>> centroids;  // k vectors of dim 3*r
  std::vector<int> labels;                     // per-sample, in {1..k}
  double inertia = 0.0;
  std::vector<double> inertia_trace;           // one value per Lloyd iteration

  bool fitted() const { return k > 0 && !centroids.empty(); }
};

// Column-major flatten of a 3 x r basis into a 3r-vector.
inline std::vector<double> flatten_basis(const Matrix& basis) {
  std::vector<double> v;
  v.reserve(basis.rows() * basis.cols());
  for (std::size_t j = 0; j < basis.cols(); ++j)
    for (std::size_t c = 0; c < basis.rows(); ++c) v.push_back(basis(c, j));
  return v;
}

namespace detail {

inline double sq_dist(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

}  // namespace detail

inline ClusterModel kmeans_fit(const std::vector<StainBasis>& bases, std::size_t k,
                               std::uint64_t seed) {
  const std::size_t n = bases.size();
  if (k < 1) throw std::invalid_argument("kmeans_fit: k must be >= 1");
  if (n < k) throw std::invalid_argument("kmeans_fit: batch smaller than k");
  std::vector<std::vector<double>> pts;
  pts.reserve(n);
  for (const auto& b : bases) {
    pts.push_back(flatten_basis(b));
    if (pts.back().size() != pts.front().size())
      throw std::invalid_argument("kmeans_fit: mismatched stain counts");
  }

  Rng rng(seed);

  // k-means++ seeding.
  std::vector<std::vector<double>> centroids;
  centroids.reserve(k);
  std::vector<char> chosen(n, 0);
  std::size_t first = rng.uniform_index(n);
  centroids.push_back(pts[first]);
  chosen[first] = 1;
  std::vector<double> d2(n);
  while (centroids.size() < k) {
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      double best = std::numeric_limits<double>::infinity();
      for (const auto& c : centroids) best = std::min(best, detail::sq_dist(pts[i], c));
      d2[i] = best;
      total += best;
    }
    std::size_t pick = n;
    if (total > 0.0) {
      const double target = rng.uniform(0.0, total);
      double cum = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        cum += d2[i];
        if (cum >= target) { pick = i; break; }
      }
      if (pick == n) pick = n - 1;
    } else {
      // all remaining mass at zero distance: take the first unchosen point
      for (std::size_t i = 0; i < n; ++i)
        if (!chosen[i]) { pick = i; break; }
      if (pick == n) pick = 0;
    }
    chosen[pick] = 1;
    centroids.push_back(pts[pick]);
  }

  // Lloyd iterations to assignment fixpoint (or 100 iterations).
  std::vector<std::size_t> assign(n, 0);
  std::vector<double> trace;
  bool have_assign = false;
  for (int iter = 0; iter < 100; ++iter) {
    bool changed = false;
    double inertia = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t best = 0;
      double bestd = detail::sq_dist(pts[i], centroids[0]);
      for (std::size_t c = 1; c < k; ++c) {
        const double d = detail::sq_dist(pts[i], centroids[c]);
        if (d < bestd) { bestd = d; best = c; }
      }
      if (!have_assign || assign[i] != best) changed = true;
      assign[i] = best;
      inertia += bestd;
    }
    trace.push_back(inertia);
    if (have_assign && !changed) break;
    have_assign = true;

    // Means per cluster; empty clusters steal the point farthest from its centroid.
    std::vector<std::size_t> counts(k, 0);
    for (std::size_t i = 0; i < n; ++i) ++counts[assign[i]];
    for (std::size_t c = 0; c < k; ++c) {
      if (counts[c] > 0) continue;
      std::size_t far = n;
      double fard = -1.0;
      for (std::size_t i = 0; i < n; ++i) {
        if (counts[assign[i]] <= 1) continue;
        const double d = detail::sq_dist(pts[i], centroids[assign[i]]);
        if (d > fard) { fard = d; far = i; }
      }
      if (far == n) continue;
      --counts[assign[far]];
      assign[far] = c;
      counts[c] = 1;
      changed = true;
    }
    const std::vector<std::vector<double>> old_centroids = centroids;
    for (std::size_t c = 0; c < k; ++c)
      std::fill(centroids[c].begin(), centroids[c].end(), 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      auto& cen = centroids[assign[i]];
      for (std::size_t d = 0; d < cen.size(); ++d) cen[d] += pts[i][d];
    }
    for (std::size_t c = 0; c < k; ++c) {
      if (counts[c] == 0) {
        centroids[c] = old_centroids[c];
        continue;
      }
      for (double& x : centroids[c]) x /= static_cast<double>(counts[c]);
    }
  }

  // Canonical relabeling in sample order.
  std::vector<int> remap(k, 0);
  int next = 0;
  for (std::size_t i = 0; i < n; ++i)
    if (remap[assign[i]] == 0) remap[assign[i]] = ++next;
  for (std::size_t c = 0; c < k; ++c)
    if (remap[c] == 0) remap[c] = ++next;

  ClusterModel model;
  model.k = k;
  model.centroids.resize(k);
  for (std::size_t c = 0; c < k; ++c) model.centroids[remap[c] - 1] = centroids[c];
  model.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) model.labels[i] = remap[assign[i]];
  model.inertia = trace.back();
  model.inertia_trace = std::move(trace);
  return model;
}

// Nearest centroid by Euclidean distance; ties break toward the smaller label.
inline int assign(const ClusterModel& model, const StainBasis& basis) {
  if (!model.fitted()) throw std::invalid_argument("assign: unfitted model");
  const std::vector<double> p = flatten_basis(basis);
  if (p.size() != model.centroids.front().size())
    throw std::invalid_argument("assign: mismatched stain counts");
  int best = 1;
  double bestd = detail::sq_dist(p, model.centroids[0]);
  for (std::size_t c = 1; c < model.k; ++c) {
    const double d = detail::sq_dist(p, model.centroids[c]);
    if (d < bestd) {
      bestd = d;
      best = static_cast<int>(c) + 1;
    }
  }
  return best;
}

// {"k": k, "labels": [..]}
inline std::string labels_to_json(const ClusterModel& model) {
  std::string out = "{\"k\": " + std::to_string(model.k) + ", \"labels\": [";
  for (std::size_t i = 0; i < model.labels.size(); ++i) {
    if (i) out += ", ";
    out += std::to_string(model.labels[i]);
  }
  out += "]}";
  return out;
}

}  // namespace sada
