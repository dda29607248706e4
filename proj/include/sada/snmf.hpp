#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <vector>

#include "sada/matrix.hpp"
#include "sada/rng.hpp"

namespace sada {

// 3 x r stain color matrix with unit-norm columns.
using StainBasis = Matrix;
// r x n per-pixel stain concentrations.
using DensityMaps = Matrix;

struct SnmfConfig {
  std::size_t stains = 2;          // r, at most 3
  double lambda = 0.1;             // L1 weight on the density maps
  std::size_t max_iters = 200;
  double tol = 1e-6;               // relative objective-change stop
  std::uint64_t seed = 0;
  double od_mask_threshold = 0.15; // mean-OD cutoff for basis fitting

  void validate() const {
    if (stains < 1 || stains > 3) throw std::invalid_argument("snmf: r must be <= 3 and >= 1");
    if (lambda < 0.0) throw std::invalid_argument("snmf: lambda must be >= 0");
    if (max_iters < 1) throw std::invalid_argument("snmf: max_iters must be >= 1");
    if (!(tol > 0.0)) throw std::invalid_argument("snmf: tol must be > 0");
  }
};

struct StainDecomposition {
  StainBasis basis;                  // 3 x r
  DensityMaps density;               // r x n
  std::vector<double> objective_trace;
};

// 0.5 * ||V - W H||_F^2 + lambda * sum(H)
inline double snmf_objective(const Matrix& od, const StainDecomposition& dec,
                             double lambda) {
  const Matrix rec = multiply(dec.basis, dec.density);
  double l1 = 0.0;
  for (std::size_t i = 0; i < dec.density.rows(); ++i) {
    const double* row = dec.density.row(i);
    for (std::size_t j = 0; j < dec.density.cols(); ++j) l1 += row[j];
  }
  return 0.5 * frobenius_sq_diff(od, rec) + lambda * l1;
}

inline Matrix reconstruct(const StainDecomposition& dec) {
  if (dec.basis.cols() != dec.density.rows())
    throw std::invalid_argument("reconstruct: shape mismatch");
  return multiply(dec.basis, dec.density);
}

namespace detail {

constexpr double kSnmfEps = 1e-12;

// H <- H .* (W^T V) ./ (W^T W H + lambda + eps)
inline void update_density(const Matrix& v, const Matrix& w, Matrix& h, double lambda) {
  const Matrix wtv = multiply_at_b(w, v);
  const Matrix wtw = multiply_at_b(w, w);
  const Matrix wtwh = multiply(wtw, h);
  for (std::size_t i = 0; i < h.rows(); ++i) {
    double* hrow = h.row(i);
    const double* num = wtv.row(i);
    const double* den = wtwh.row(i);
    for (std::size_t j = 0; j < h.cols(); ++j)
      hrow[j] *= num[j] / (den[j] + lambda + kSnmfEps);
  }
}

// Multiplicative update for unit-norm columns of W (Eggert & Koerner form).
// Keeps every column exactly unit length, which is what makes the traced
// objective non-increasing even with the L1 term active.
inline void update_basis(const Matrix& v, Matrix& w, const Matrix& h) {
  const Matrix vht = multiply_a_bt(v, h);       // 3 x r
  const Matrix hht = multiply_a_bt(h, h);       // r x r
  const Matrix whht = multiply(w, hht);         // 3 x r
  for (std::size_t j = 0; j < w.cols(); ++j) {
    double wa = 0.0, wb = 0.0;
    for (std::size_t c = 0; c < 3; ++c) {
      wa += w(c, j) * vht(c, j);
      wb += w(c, j) * whht(c, j);
    }
    double col[3];
    double norm_sq = 0.0;
    for (std::size_t c = 0; c < 3; ++c) {
      const double num = vht(c, j) + w(c, j) * wb;
      const double den = whht(c, j) + w(c, j) * wa + kSnmfEps;
      col[c] = w(c, j) * num / den;
      norm_sq += col[c] * col[c];
    }
    const double norm = std::sqrt(norm_sq);
    if (norm < 1e-12) continue;  // degenerate column: keep previous unit direction
    for (std::size_t c = 0; c < 3; ++c) w(c, j) = col[c] / norm;
  }
}

inline double masked_objective(const Matrix& v, const Matrix& w, const Matrix& h,
                               double lambda) {
  const Matrix rec = multiply(w, h);
  double s = 0.5 * frobenius_sq_diff(v, rec);
  for (std::size_t i = 0; i < h.rows(); ++i) {
    const double* row = h.row(i);
    for (std::size_t j = 0; j < h.cols(); ++j) s += lambda * row[j];
  }
  return s;
}

}  // namespace detail

// Sparse NMF of optical density: min 0.5||V - WH||_F^2 + lambda*sum(H)
// subject to W, H >= 0 and unit-norm W columns.
//
// The basis is fit on pixels whose mean OD clears cfg.od_mask_threshold
// (background exclusion); the density maps are then solved for every pixel
// with W held fixed. objective_trace records the masked-fit objective, one
// value at initialization and one per iteration; it is non-increasing.
// Columns are ordered by descending total density.
inline StainDecomposition fit_snmf(const Matrix& od, const SnmfConfig& cfg) {
  cfg.validate();
  if (od.rows() != 3) throw std::invalid_argument("fit_snmf: od must be 3 x n");
  const std::size_t n = od.cols();
  const std::size_t r = cfg.stains;
  if (n < r) throw std::invalid_argument("fit_snmf: need at least r pixels");
  if (!od.all_finite()) throw std::invalid_argument("fit_snmf: non-finite input");

  // Basis-fitting mask; falls back to all pixels when too few clear the bar.
  std::vector<std::size_t> kept;
  kept.reserve(n);
  for (std::size_t p = 0; p < n; ++p) {
    const double mean = (od(0, p) + od(1, p) + od(2, p)) / 3.0;
    if (mean >= cfg.od_mask_threshold) kept.push_back(p);
  }
  if (kept.size() < r) {
    kept.resize(n);
    std::iota(kept.begin(), kept.end(), std::size_t{0});
  }
  Matrix vm(3, kept.size());
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t j = 0; j < kept.size(); ++j) vm(c, j) = od(c, kept[j]);

  Rng rng(cfg.seed);
  Matrix w(3, r);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t j = 0; j < r; ++j) w(c, j) = rng.uniform(0.1, 1.0);
  for (std::size_t j = 0; j < r; ++j) {
    double norm = 0.0;
    for (std::size_t c = 0; c < 3; ++c) norm += w(c, j) * w(c, j);
    norm = std::sqrt(norm);
    for (std::size_t c = 0; c < 3; ++c) w(c, j) /= norm;
  }
  Matrix hm(r, vm.cols());
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < vm.cols(); ++j) hm(i, j) = rng.uniform(0.1, 1.0);

  StainDecomposition dec;
  dec.objective_trace.push_back(detail::masked_objective(vm, w, hm, cfg.lambda));
  for (std::size_t it = 0; it < cfg.max_iters; ++it) {
    detail::update_density(vm, w, hm, cfg.lambda);
    detail::update_basis(vm, w, hm);
    const double f = detail::masked_objective(vm, w, hm, cfg.lambda);
    const double prev = dec.objective_trace.back();
    dec.objective_trace.push_back(f);
    if (std::abs(prev - f) < cfg.tol * std::max(prev, detail::kSnmfEps)) break;
  }

  // Density solve over all pixels, basis fixed.
  Matrix h(r, n);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < n; ++j) h(i, j) = rng.uniform(0.1, 1.0);
  double prev = detail::masked_objective(od, w, h, cfg.lambda);
  for (std::size_t it = 0; it < cfg.max_iters; ++it) {
    detail::update_density(od, w, h, cfg.lambda);
    const double f = detail::masked_objective(od, w, h, cfg.lambda);
    if (std::abs(prev - f) < cfg.tol * std::max(prev, detail::kSnmfEps)) break;
    prev = f;
  }

  // Deterministic column order: descending total density.
  std::vector<std::size_t> order(r);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::vector<double> totals(r, 0.0);
  for (std::size_t i = 0; i < r; ++i) {
    const double* row = h.row(i);
    for (std::size_t j = 0; j < n; ++j) totals[i] += row[j];
  }
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return totals[a] > totals[b]; });

  dec.basis = Matrix(3, r);
  dec.density = Matrix(r, n);
  for (std::size_t k = 0; k < r; ++k) {
    for (std::size_t c = 0; c < 3; ++c) dec.basis(c, k) = w(c, order[k]);
    const double* src = h.row(order[k]);
    double* dst = dec.density.row(k);
    for (std::size_t j = 0; j < n; ++j) dst[j] = src[j];
  }
  return dec;
}

}  // namespace sada
