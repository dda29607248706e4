#pragma once

#include <cmath>
#include <cstddef>
#include <cstdio>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace sada {

// Dense row-major matrix of doubles. Small and dependency-free; every
// operation iterates in a fixed order so results are bit-reproducible.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), v_(rows * cols, fill) {}

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return v_.size(); }

  double& operator()(std::size_t i, std::size_t j) { return v_[i * cols_ + j]; }
  double operator()(std::size_t i, std::size_t j) const { return v_[i * cols_ + j]; }

  double* data() { return v_.data(); }
  const double* data() const { return v_.data(); }
  double* row(std::size_t i) { return v_.data() + i * cols_; }
  const double* row(std::size_t i) const { return v_.data() + i * cols_; }

  bool all_finite() const {
    for (double x : v_)
      if (!std::isfinite(x)) return false;
    return true;
  }

  friend bool operator==(const Matrix& a, const Matrix& b) {
    return a.rows_ == b.rows_ && a.cols_ == b.cols_ && a.v_ == b.v_;
  }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> v_;
};

// C = A * B
inline Matrix multiply(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) throw std::invalid_argument("multiply: shape mismatch");
  Matrix c(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) continue;
      const double* brow = b.row(k);
      double* crow = c.row(i);
      for (std::size_t j = 0; j < b.cols(); ++j) crow[j] += aik * brow[j];
    }
  }
  return c;
}

// C = A^T * B
inline Matrix multiply_at_b(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows()) throw std::invalid_argument("multiply_at_b: shape mismatch");
  Matrix c(a.cols(), b.cols());
  for (std::size_t k = 0; k < a.rows(); ++k) {
    const double* arow = a.row(k);
    const double* brow = b.row(k);
    for (std::size_t i = 0; i < a.cols(); ++i) {
      const double aki = arow[i];
      if (aki == 0.0) continue;
      double* crow = c.row(i);
      for (std::size_t j = 0; j < b.cols(); ++j) crow[j] += aki * brow[j];
    }
  }
  return c;
}

// C = A * B^T
inline Matrix multiply_a_bt(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) throw std::invalid_argument("multiply_a_bt: shape mismatch");
  Matrix c(a.rows(), b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const double* arow = a.row(i);
    for (std::size_t j = 0; j < b.rows(); ++j) {
      const double* brow = b.row(j);
      double s = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) s += arow[k] * brow[k];
      c(i, j) = s;
    }
  }
  return c;
}

inline double frobenius_sq_diff(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw std::invalid_argument("frobenius_sq_diff: shape mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const double* ar = a.row(i);
    const double* br = b.row(i);
    for (std::size_t j = 0; j < a.cols(); ++j) {
      const double d = ar[j] - br[j];
      s += d * d;
    }
  }
  return s;
}

// CSV wire format: first line "rows,cols", then one line per row with
// comma-separated values at 9 significant digits.
inline std::string matrix_to_csv(const Matrix& m) {
  std::string out;
  out.reserve(m.size() * 18 + 32);
  char buf[64];
  std::snprintf(buf, sizeof buf, "%zu,%zu\n", m.rows(), m.cols());
  out += buf;
  for (std::size_t i = 0; i < m.rows(); ++i) {
    for (std::size_t j = 0; j < m.cols(); ++j) {
      std::snprintf(buf, sizeof buf, "%.9g", m(i, j));
      out += buf;
      out += (j + 1 == m.cols()) ? '\n' : ',';
    }
  }
  return out;
}

inline Matrix matrix_from_csv(std::istream& in) {
  char sep = 0;
  std::size_t rows = 0, cols = 0;
  if (!(in >> rows >> sep >> cols) || sep != ',')
    throw std::runtime_error("matrix csv: bad header line");
  Matrix m(rows, cols);
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < cols; ++j) {
      double x = 0.0;
      if (j > 0 && !(in >> sep && sep == ','))
        throw std::runtime_error("matrix csv: missing separator");
      if (!(in >> x)) throw std::runtime_error("matrix csv: truncated values");
      m(i, j) = x;
    }
  }
  return m;
}

}  // namespace sada
