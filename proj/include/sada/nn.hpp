#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <vector>

#include "sada/rng.hpp"

namespace sada {

// y = W x + b with W stored row-major (out x in). Gradients accumulate into
// a parallel AffineGrads so one batch can be backpropagated sample by sample
// in a fixed order.
struct AffineLayer {
  std::size_t in = 0;
  std::size_t out = 0;
  std::vector<double> w;
  std::vector<double> b;

  AffineLayer() = default;
  AffineLayer(std::size_t in_dim, std::size_t out_dim, Rng& rng)
      : in(in_dim), out(out_dim), w(in_dim * out_dim), b(out_dim, 0.0) {
    const double limit = std::sqrt(6.0 / static_cast<double>(in_dim + out_dim));
    for (double& x : w) x = rng.uniform(-limit, limit);
  }

  void forward(const double* x, double* y) const {
    for (std::size_t o = 0; o < out; ++o) {
      const double* wr = w.data() + o * in;
      double s = b[o];
      for (std::size_t i = 0; i < in; ++i) s += wr[i] * x[i];
      y[o] = s;
    }
  }

  // gx may be null when the input gradient is not needed.
  void backward(const double* x, const double* gy, double* gx,
                std::vector<double>& gw, std::vector<double>& gb) const {
    for (std::size_t o = 0; o < out; ++o) {
      const double g = gy[o];
      gb[o] += g;
      double* gwr = gw.data() + o * in;
      const double* wr = w.data() + o * in;
      if (gx != nullptr) {
        for (std::size_t i = 0; i < in; ++i) {
          gwr[i] += g * x[i];
          gx[i] += g * wr[i];
        }
      } else {
        for (std::size_t i = 0; i < in; ++i) gwr[i] += g * x[i];
      }
    }
  }

  void apply_sgd(const std::vector<double>& gw, const std::vector<double>& gb,
                 double lr) {
    for (std::size_t i = 0; i < w.size(); ++i) w[i] -= lr * gw[i];
    for (std::size_t i = 0; i < b.size(); ++i) b[i] -= lr * gb[i];
  }
};

struct AffineGrads {
  std::vector<double> w;
  std::vector<double> b;

  explicit AffineGrads(const AffineLayer& layer)
      : w(layer.w.size(), 0.0), b(layer.b.size(), 0.0) {}
  void reset() {
    std::fill(w.begin(), w.end(), 0.0);
    std::fill(b.begin(), b.end(), 0.0);
  }
};

inline void relu_inplace(double* x, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i)
    if (x[i] < 0.0) x[i] = 0.0;
}

// Masks the incoming gradient by the rectifier's active set (pre > 0).
inline void relu_backward(const double* pre, double* g, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i)
    if (pre[i] <= 0.0) g[i] = 0.0;
}

// FNV-1a over the raw bytes of parameter vectors; used to assert that frozen
// stages leave parameters untouched.
inline std::uint64_t hash_doubles(std::uint64_t h, const std::vector<double>& v) {
  const unsigned char* bytes = reinterpret_cast<const unsigned char*>(v.data());
  for (std::size_t i = 0; i < v.size() * sizeof(double); ++i) {
    h ^= bytes[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace sada
