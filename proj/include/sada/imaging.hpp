#pragma once

#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "sada/matrix.hpp"

namespace sada {

// 8-bit RGB raster, interleaved row-major (r, g, b per pixel).
struct RgbImage {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> data;

  std::size_t pixel_count() const { return static_cast<std::size_t>(width) * height; }

  std::uint8_t at(std::size_t pixel, int channel) const { return data[3 * pixel + channel]; }
  std::uint8_t& at(std::size_t pixel, int channel) { return data[3 * pixel + channel]; }

  bool valid() const {
    return width > 0 && height > 0 && data.size() == 3 * pixel_count();
  }

  friend bool operator==(const RgbImage& a, const RgbImage& b) {
    return a.width == b.width && a.height == b.height && a.data == b.data;
  }
};

enum class PpmError { BadHeader, UnsupportedMaxval, TruncatedData };

class PpmIoError : public std::runtime_error {
 public:
  PpmIoError(PpmError kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}
  PpmError kind() const { return kind_; }

 private:
  PpmError kind_;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Beer-Lambert transforms
// ---------------------------------------------------------------------------

// V[c,p] = -ln(max(X[c,p], 1) / x0). Intensities are clamped to >= 1 before
// the log, so saturated dark pixels map to the finite ceiling ln(x0).
inline Matrix to_optical_density(const RgbImage& img, double x0 = 255.0) {
  if (!img.valid()) throw std::invalid_argument("to_optical_density: invalid image");
  if (!(x0 > 0.0)) throw std::invalid_argument("to_optical_density: x0 must be > 0");
  const std::size_t n = img.pixel_count();
  Matrix od(3, n);
  for (int c = 0; c < 3; ++c) {
    double* row = od.row(c);
    for (std::size_t p = 0; p < n; ++p) {
      const double x = std::max<int>(img.at(p, c), 1);
      row[p] = -std::log(x / x0);
    }
  }
  return od;
}

// X[c,p] = clamp(round(x0 * exp(-V[c,p])), 0, 255), ties rounded away from zero.
inline RgbImage from_optical_density(const Matrix& od, int width, int height,
                                     double x0 = 255.0) {
  if (od.rows() != 3) throw std::invalid_argument("from_optical_density: od must have 3 rows");
  if (width <= 0 || height <= 0 ||
      od.cols() != static_cast<std::size_t>(width) * height)
    throw std::invalid_argument("from_optical_density: dimension mismatch");
  RgbImage img;
  img.width = width;
  img.height = height;
  img.data.resize(3 * od.cols());
  for (int c = 0; c < 3; ++c) {
    const double* row = od.row(c);
    for (std::size_t p = 0; p < od.cols(); ++p) {
      const long long v = std::llround(x0 * std::exp(-row[p]));
      img.at(p, c) = static_cast<std::uint8_t>(std::clamp<long long>(v, 0, 255));
    }
  }
  return img;
}

// ---------------------------------------------------------------------------
// Binary PPM (P6, maxval 255)
// ---------------------------------------------------------------------------

namespace detail {

// Skips whitespace and '#' comments between header tokens.
inline void skip_ppm_space(std::istream& in) {
  for (;;) {
    int c = in.peek();
    if (c == '#') {
      while (c != '\n' && c != EOF) c = in.get();
    } else if (c != EOF && std::isspace(static_cast<unsigned char>(c))) {
      in.get();
    } else {
      return;
    }
  }
}

inline long read_ppm_int(std::istream& in) {
  skip_ppm_space(in);
  long value = 0;
  bool any = false;
  for (;;) {
    const int c = in.peek();
    if (c == EOF || !std::isdigit(static_cast<unsigned char>(c))) break;
    in.get();
    any = true;
    value = value * 10 + (c - '0');
    if (value > 1000000000L) throw PpmIoError(PpmError::BadHeader, "header value out of range");
  }
  if (!any) throw PpmIoError(PpmError::BadHeader, "malformed header");
  return value;
}

}  // namespace detail

inline RgbImage load_ppm(std::istream& in) {
  char magic[2] = {0, 0};
  in.read(magic, 2);
  if (!in || magic[0] != 'P' || magic[1] != '6')
    throw PpmIoError(PpmError::BadHeader, "not a P6 ppm");
  const long width = detail::read_ppm_int(in);
  const long height = detail::read_ppm_int(in);
  const long maxval = detail::read_ppm_int(in);
  if (width <= 0 || height <= 0)
    throw PpmIoError(PpmError::BadHeader, "non-positive dimensions");
  if (maxval != 255)
    throw PpmIoError(PpmError::UnsupportedMaxval,
                     "unsupported maxval " + std::to_string(maxval));
  const int sep = in.get();
  if (sep == EOF || !std::isspace(static_cast<unsigned char>(sep)))
    throw PpmIoError(PpmError::BadHeader, "missing separator after maxval");
  RgbImage img;
  img.width = static_cast<int>(width);
  img.height = static_cast<int>(height);
  img.data.resize(3 * img.pixel_count());
  in.read(reinterpret_cast<char*>(img.data.data()),
          static_cast<std::streamsize>(img.data.size()));
  if (static_cast<std::size_t>(in.gcount()) != img.data.size())
    throw PpmIoError(PpmError::TruncatedData, "truncated data");
  return img;
}

inline RgbImage load_ppm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return load_ppm(in);
}

inline void save_ppm(const RgbImage& img, std::ostream& out) {
  if (!img.valid()) throw std::invalid_argument("save_ppm: invalid image");
  out << "P6\n" << img.width << ' ' << img.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.data.data()),
            static_cast<std::streamsize>(img.data.size()));
  if (!out) throw IoError("ppm write failed");
}

inline void save_ppm(const RgbImage& img, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  save_ppm(img, out);
}

}  // namespace sada
