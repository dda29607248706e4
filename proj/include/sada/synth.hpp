#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "sada/imaging.hpp"
#include "sada/matrix.hpp"
#include "sada/rng.hpp"

namespace sada {

// Procedural blob parameters controlling a class's morphology. The renderer
// draws an elliptical body (optionally several, optionally hollow) whose
// interior density can carry a stripe texture.
struct ClassShape {
  double radius = 7.0;
  double eccentricity = 1.0;   // minor axis = radius * eccentricity
  double texture_freq = 0.0;   // stripe frequency in cycles per pixel
  double hole_radius = 0.0;    // > 0 carves out a concentric hole (ring)
  int blob_count = 1;
};

// One synthetic acquisition site: a stain tint applied multiplicatively in
// OD space, pixel noise, per-image tint jitter, and the class shape table.
struct SynthDomainSpec {
  int id = 0;
  std::array<double, 3> tint = {1.0, 1.0, 1.0};
  double noise_sigma = 0.0;
  double tint_jitter = 0.10;
  std::vector<ClassShape> class_shapes;
};

// Five morphology classes that differ in pooled patch statistics: small
// disc, large disc, twin discs, striped disc, ring.
inline std::vector<ClassShape> default_class_shapes() {
  return {
      {4.5, 1.0, 0.0, 0.0, 1},
      {10.5, 1.0, 0.0, 0.0, 1},
      {3.5, 1.0, 0.0, 0.0, 2},
      {8.0, 1.0, 1.0 / 5.5, 0.0, 1},
      {9.5, 1.0, 0.0, 6.0, 1},
  };
}

struct LabeledImages {
  int domain_id = 0;
  std::vector<RgbImage> images;
  std::vector<int> labels;
};

namespace detail {

// Haematoxylin/eosin-like OD directions; unit columns.
inline const Matrix& reference_stain_basis() {
  static const Matrix basis = [] {
    Matrix w(3, 2);
    const double h[3] = {0.65, 0.70, 0.29};
    const double e[3] = {0.07, 0.99, 0.11};
    double nh = 0.0, ne = 0.0;
    for (int c = 0; c < 3; ++c) {
      nh += h[c] * h[c];
      ne += e[c] * e[c];
    }
    nh = std::sqrt(nh);
    ne = std::sqrt(ne);
    for (int c = 0; c < 3; ++c) {
      w(c, 0) = h[c] / nh;
      w(c, 1) = e[c] / ne;
    }
    return w;
  }();
  return basis;
}

}  // namespace detail

// Renders one stained cell image: class controls the blob geometry, the
// domain tint scales the OD channels, and seeded noise perturbs intensities.
inline RgbImage render_cell_image(const ClassShape& shape, const SynthDomainSpec& domain,
                                  Rng& rng, int size = 32) {
  if (size < 8) throw std::invalid_argument("render_cell_image: degenerate image size");
  const double cx = size / 2.0 + rng.uniform(-2.5, 2.5);
  const double cy = size / 2.0 + rng.uniform(-2.5, 2.5);
  const double angle = rng.uniform(0.0, 3.14159265358979323846);
  const double phase = rng.uniform(0.0, 6.28318530717958647692);
  const double ca = std::cos(angle), sa = std::sin(angle);

  const std::size_t n = static_cast<std::size_t>(size) * size;
  std::vector<double> body(n, 0.0);
  auto add_ellipse = [&](double ecx, double ecy, double r) {
    const double minor = r * shape.eccentricity;
    for (int y = 0; y < size; ++y) {
      for (int x = 0; x < size; ++x) {
        const double dx = x - ecx, dy = y - ecy;
        const double u = ca * dx + sa * dy;
        const double v = -sa * dx + ca * dy;
        const double d2 = (u * u) / (r * r) + (v * v) / (minor * minor);
        if (d2 < 1.0) {
          double value = 1.0;
          if (shape.texture_freq > 0.0)
            value = (0.95 + 0.90 * std::cos(6.283185307179586 * shape.texture_freq * u + phase)) / 0.95;
          if (shape.hole_radius > 0.0) {
            const double hole = (u * u + v * v) / (shape.hole_radius * shape.hole_radius);
            if (hole < 1.0) value = 0.0;
          }
          body[static_cast<std::size_t>(y) * size + x] = std::max(body[static_cast<std::size_t>(y) * size + x], value);
        }
      }
    }
  };
  if (shape.blob_count >= 2) {
    const double off = 2.0 * shape.radius;
    add_ellipse(cx - off * ca, cy - off * sa, shape.radius);
    add_ellipse(cx + off * ca, cy + off * sa, shape.radius);
  } else {
    add_ellipse(cx, cy, shape.radius);
  }

  double jitter[3];
  for (int c = 0; c < 3; ++c)
    jitter[c] = 1.0 + rng.uniform(-domain.tint_jitter, domain.tint_jitter);

  const Matrix& w0 = detail::reference_stain_basis();
  Matrix od(3, n);
  for (std::size_t p = 0; p < n; ++p) {
    const int y = static_cast<int>(p) / size;
    const double b = body[p];
    const double h1 = std::max(b, 0.0) * 0.95 + 0.06;
    const double h2 = std::max(0.45 + 0.20 * std::min(b, 1.0) +
                                   0.10 * std::sin(6.283185307179586 * y / size + phase),
                               0.0);
    for (int c = 0; c < 3; ++c)
      od(c, p) = domain.tint[c] * jitter[c] * (w0(c, 0) * h1 + w0(c, 1) * h2);
  }
  RgbImage img = from_optical_density(od, size, size);
  if (domain.noise_sigma > 0.0) {
    for (std::size_t p = 0; p < n; ++p) {
      for (int c = 0; c < 3; ++c) {
        const double noisy = img.at(p, c) + rng.normal() * domain.noise_sigma;
        img.at(p, c) = static_cast<std::uint8_t>(
            std::clamp<long long>(std::llround(noisy), 0, 255));
      }
    }
  }
  return img;
}

// Deterministic multi-domain dataset: class c contributes
// round(n_per_class * ratios[c]) images per domain.
inline std::vector<LabeledImages> synth_dataset(const std::vector<SynthDomainSpec>& domains,
                                                std::size_t n_per_class,
                                                const std::vector<double>& ratios,
                                                std::uint64_t seed, int image_size = 32) {
  if (domains.size() < 3) throw std::invalid_argument("synth_dataset: need at least 3 domains");
  if (ratios.size() < 2) throw std::invalid_argument("synth_dataset: need at least 2 classes");
  for (double r : ratios)
    if (!(r > 0.0)) throw std::invalid_argument("synth_dataset: ratios must be > 0");
  for (const auto& d : domains)
    if (d.class_shapes.size() < ratios.size())
      throw std::invalid_argument("synth_dataset: domain is missing class shapes");

  std::vector<LabeledImages> out;
  out.reserve(domains.size());
  for (std::size_t di = 0; di < domains.size(); ++di) {
    Rng rng(Rng::derive(seed, 0x53594e44 + di));
    LabeledImages set;
    set.domain_id = domains[di].id;
    for (std::size_t c = 0; c < ratios.size(); ++c) {
      const long long count = std::llround(static_cast<double>(n_per_class) * ratios[c]);
      for (long long i = 0; i < count; ++i) {
        set.images.push_back(
            render_cell_image(domains[di].class_shapes[c], domains[di], rng, image_size));
        set.labels.push_back(static_cast<int>(c));
      }
    }
    out.push_back(std::move(set));
  }
  return out;
}

}  // namespace sada
