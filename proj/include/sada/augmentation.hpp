#pragma once

#include <algorithm>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "sada/imaging.hpp"
#include "sada/kmeans.hpp"
#include "sada/matrix.hpp"
#include "sada/parallel.hpp"
#include "sada/snmf.hpp"

namespace sada {

// One domain-transformed sample: source re-stained with a donor's basis and
// density statistics. donor_cluster always differs from the source's cluster.
struct AugmentedSample {
  std::size_t source_index = 0;
  std::size_t target_index = 0;  // donor sample
  int donor_cluster = 0;
  RgbImage image;
};

// Nearest-rank 99th percentile: sorted ascending, 1-based index ceil(0.99*m).
inline double row_percentile99(const double* row, std::size_t m) {
  if (m == 0) throw std::invalid_argument("row_percentile99: empty row");
  std::vector<double> sorted(row, row + m);
  std::sort(sorted.begin(), sorted.end());
  const std::size_t rank = static_cast<std::size_t>(std::ceil(0.99 * static_cast<double>(m)));
  return sorted[std::max<std::size_t>(rank, 1) - 1];
}

inline double row_percentile99(const std::vector<double>& row) {
  return row_percentile99(row.data(), row.size());
}

// Norm(H_i, H_t): row j of h_src scaled by P(h_tgt row j) / P(h_src row j).
// Rows whose own percentile is below 1e-8 are returned unscaled.
inline DensityMaps normalize_density(const DensityMaps& h_src, const DensityMaps& h_tgt) {
  if (h_src.rows() != h_tgt.rows())
    throw std::invalid_argument("normalize_density: stain count mismatch");
  DensityMaps out(h_src.rows(), h_src.cols());
  for (std::size_t j = 0; j < h_src.rows(); ++j) {
    const double p_src = row_percentile99(h_src.row(j), h_src.cols());
    const double p_tgt = row_percentile99(h_tgt.row(j), h_tgt.cols());
    const double* src = h_src.row(j);
    double* dst = out.row(j);
    if (p_src < 1e-8) {
      std::copy(src, src + h_src.cols(), dst);
      continue;
    }
    const double scale = p_tgt / p_src;
    for (std::size_t p = 0; p < h_src.cols(); ++p) dst[p] = src[p] * scale;
  }
  return out;
}

// x* = X0 exp(-W_t Norm(H_i, H_t)), quantized back to 8-bit RGB.
inline RgbImage restain(const DensityMaps& h_src, const DensityMaps& h_tgt,
                        const StainBasis& w_tgt, double x0, int width, int height) {
  if (w_tgt.cols() != h_src.rows())
    throw std::invalid_argument("restain: shape mismatch");
  const DensityMaps normalized = normalize_density(h_src, h_tgt);
  return from_optical_density(multiply(w_tgt, normalized), width, height, x0);
}

struct BatchTransforms {
  std::vector<StainDecomposition> decompositions;  // one per input image
  ClusterModel clusters;
  // transforms[i] holds exactly k-1 samples for raw sample i.
  std::vector<std::vector<AugmentedSample>> transforms;
};

namespace detail {

// Per-purpose stream tags mixed into the master seed.
constexpr std::uint64_t kSnmfStream = 0x534e4d46;    // per-image decomposition
constexpr std::uint64_t kKmeansStream = 0x4b4d4e53;  // clustering
constexpr std::uint64_t kDonorStream = 0x444f4e52;   // donor draws

}  // namespace detail

// Full batch pipeline: decompose every image, cluster the bases, then for
// each sample and each cluster other than its own pick one donor uniformly
// at random and re-stain. Per-image decompositions run in parallel (capped
// by SADA_THREADS); every random draw derives from `seed`, so outputs do not
// depend on scheduling.
inline BatchTransforms generate_batch_transforms(const std::vector<RgbImage>& images,
                                                 std::size_t k, const SnmfConfig& snmf_cfg,
                                                 std::uint64_t seed) {
  if (images.size() < k)
    throw std::invalid_argument("generate_batch_transforms: batch smaller than k");
  if (k < 2) throw std::invalid_argument("generate_batch_transforms: k must be >= 2");

  BatchTransforms result;
  result.decompositions.resize(images.size());
  std::vector<std::string> errors(images.size());
  parallel_for(images.size(), [&](std::size_t i) {
    try {
      SnmfConfig cfg = snmf_cfg;
      cfg.seed = Rng::derive(seed, detail::kSnmfStream + i);
      result.decompositions[i] = fit_snmf(to_optical_density(images[i]), cfg);
    } catch (const std::exception& e) {
      errors[i] = e.what();
    }
  });
  for (const auto& err : errors)
    if (!err.empty()) throw std::runtime_error("snmf failed: " + err);

  std::vector<StainBasis> bases;
  bases.reserve(images.size());
  for (const auto& dec : result.decompositions) bases.push_back(dec.basis);
  result.clusters = kmeans_fit(bases, k, Rng::derive(seed, detail::kKmeansStream));

  // Cluster membership lists in sample order.
  std::vector<std::vector<std::size_t>> members(k);
  for (std::size_t i = 0; i < images.size(); ++i)
    members[result.clusters.labels[i] - 1].push_back(i);

  Rng donor_rng(Rng::derive(seed, detail::kDonorStream));
  result.transforms.resize(images.size());
  for (std::size_t i = 0; i < images.size(); ++i) {
    const int own = result.clusters.labels[i];
    for (int c = 1; c <= static_cast<int>(k); ++c) {
      if (c == own) continue;
      const auto& pool = members[c - 1];
      const std::size_t donor = pool[donor_rng.uniform_index(pool.size())];
      AugmentedSample sample;
      sample.source_index = i;
      sample.target_index = donor;
      sample.donor_cluster = c;
      sample.image = restain(result.decompositions[i].density,
                             result.decompositions[donor].density,
                             result.decompositions[donor].basis, 255.0,
                             images[i].width, images[i].height);
      result.transforms[i].push_back(std::move(sample));
    }
  }
  return result;
}

}  // namespace sada
