#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "gemgate/errors.hpp"

namespace gemgate {

using Vec = std::vector<double>;

// Dense row-major square/rectangular matrix. Small d (<= 128) throughout, so
// no blocking or external BLAS.
class Mat {
 public:
  Mat() = default;
  Mat(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  static Mat identity(std::size_t n, double scale = 1.0) {
    Mat m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = scale;
    return m;
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  double& operator()(std::size_t i, std::size_t j) { return data_[i * cols_ + j]; }
  double operator()(std::size_t i, std::size_t j) const { return data_[i * cols_ + j]; }
  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  bool empty() const { return data_.empty(); }

  bool all_finite() const {
    for (double v : data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

 private:
  std::size_t rows_ = 0, cols_ = 0;
  Vec data_;
};

inline bool all_finite(std::span<const double> xs) {
  for (double v : xs)
    if (!std::isfinite(v)) return false;
  return true;
}

inline Vec sub(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw DimensionError("vector subtraction: size mismatch");
  Vec out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] - b[i];
  return out;
}

inline Vec add(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw DimensionError("vector addition: size mismatch");
  Vec out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] + b[i];
  return out;
}

inline void axpy(double alpha, std::span<const double> x, Vec& y) {
  for (std::size_t i = 0; i < x.size(); ++i) y[i] += alpha * x[i];
}

inline double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw DimensionError("dot: size mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double norm2(std::span<const double> a) { return std::sqrt(dot(a, a)); }

// Cholesky factorization of a symmetric positive-definite matrix, A = L L^T.
// Throws NumericError when a pivot goes non-positive (singular or indefinite
// input).
inline Mat cholesky(const Mat& a) {
  const std::size_t n = a.rows();
  if (a.cols() != n) throw DimensionError("cholesky: matrix not square");
  Mat l(n, n);
  for (std::size_t j = 0; j < n; ++j) {
    double diag = a(j, j);
    for (std::size_t k = 0; k < j; ++k) diag -= l(j, k) * l(j, k);
    if (!(diag > 0.0) || !std::isfinite(diag))
      throw NumericError("cholesky: non-positive pivot at row " + std::to_string(j));
    l(j, j) = std::sqrt(diag);
    for (std::size_t i = j + 1; i < n; ++i) {
      double s = a(i, j);
      for (std::size_t k = 0; k < j; ++k) s -= l(i, k) * l(j, k);
      l(i, j) = s / l(j, j);
    }
  }
  return l;
}

// Solves A x = b given the Cholesky factor L of A.
inline Vec chol_solve(const Mat& l, std::span<const double> b) {
  const std::size_t n = l.rows();
  if (b.size() != n) throw DimensionError("chol_solve: rhs size mismatch");
  Vec y(n);
  for (std::size_t i = 0; i < n; ++i) {
    double s = b[i];
    for (std::size_t k = 0; k < i; ++k) s -= l(i, k) * y[k];
    y[i] = s / l(i, i);
  }
  Vec x(n);
  for (std::size_t ii = n; ii-- > 0;) {
    double s = y[ii];
    for (std::size_t k = ii + 1; k < n; ++k) s -= l(k, ii) * x[k];
    x[ii] = s / l(ii, ii);
  }
  return x;
}

// log det(A) from its Cholesky factor.
inline double log_det_from_cholesky(const Mat& l) {
  double s = 0.0;
  for (std::size_t i = 0; i < l.rows(); ++i) s += std::log(l(i, i));
  return 2.0 * s;
}

// Numerically stable log(sum_i exp(x_i)) over doubles (shift by max).
inline double logsumexp(std::span<const double> xs) {
  if (xs.empty()) throw DimensionError("logsumexp: empty input");
  double m = xs[0];
  for (double v : xs) m = std::max(m, v);
  if (!std::isfinite(m)) return m;  // all -inf, or a stray inf propagates
  double s = 0.0;
  for (double v : xs) s += std::exp(v - m);
  return m + std::log(s);
}

// Softmax over doubles, shift by max.
inline Vec softmax(std::span<const double> xs) {
  if (xs.empty()) throw DimensionError("softmax: empty input");
  double m = xs[0];
  for (double v : xs) m = std::max(m, v);
  Vec out(xs.size());
  double s = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    out[i] = std::exp(xs[i] - m);
    s += out[i];
  }
  for (double& v : out) v /= s;
  return out;
}

// Mean of a list of equally sized vectors.
inline Vec mean_vector(const std::vector<Vec>& xs) {
  if (xs.empty()) throw DimensionError("mean_vector: empty input");
  Vec m(xs[0].size(), 0.0);
  for (const Vec& x : xs) axpy(1.0, x, m);
  for (double& v : m) v /= static_cast<double>(xs.size());
  return m;
}

// Sample covariance (normalized by n) around the sample mean.
inline Mat covariance_matrix(const std::vector<Vec>& xs) {
  if (xs.empty()) throw DimensionError("covariance_matrix: empty input");
  const std::size_t d = xs[0].size();
  const Vec m = mean_vector(xs);
  Mat c(d, d);
  for (const Vec& x : xs) {
    for (std::size_t i = 0; i < d; ++i) {
      const double xi = x[i] - m[i];
      for (std::size_t j = 0; j < d; ++j) c(i, j) += xi * (x[j] - m[j]);
    }
  }
  const double inv_n = 1.0 / static_cast<double>(xs.size());
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < d; ++j) c(i, j) *= inv_n;
  return c;
}

}  // namespace gemgate
