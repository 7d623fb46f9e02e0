#pragma once

#include <algorithm>
#include <cstddef>
#include <span>
#include <vector>

namespace qaid {

/// Dense row-major matrix of doubles.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::vector<double>& data() { return data_; }
  const std::vector<double>& data() const { return data_; }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  bool same_shape(const Matrix& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

inline double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) s += a[k] * b[k];
  return s;
}

/// out += x * W for a row vector x (len W.rows()) and out (len W.cols()).
inline void add_vec_mat(std::span<const double> x, const Matrix& w, std::span<double> out) {
  for (std::size_t j = 0; j < w.rows(); ++j) {
    const double xj = x[j];
    if (xj == 0.0) continue;
    const auto wr = w.row(j);
    for (std::size_t k = 0; k < wr.size(); ++k) out[k] += xj * wr[k];
  }
}

/// out += W * y for y (len W.cols()) and out (len W.rows()); the transpose product.
inline void add_mat_vec(const Matrix& w, std::span<const double> y, std::span<double> out) {
  for (std::size_t j = 0; j < w.rows(); ++j) out[j] += dot(w.row(j), y);
}

/// W += x^T y.
inline void add_outer(std::span<const double> x, std::span<const double> y, Matrix& w) {
  for (std::size_t j = 0; j < w.rows(); ++j) {
    const double xj = x[j];
    if (xj == 0.0) continue;
    auto wr = w.row(j);
    for (std::size_t k = 0; k < wr.size(); ++k) wr[k] += xj * y[k];
  }
}

inline void add_to(std::span<double> acc, std::span<const double> v, double scale = 1.0) {
  for (std::size_t k = 0; k < acc.size(); ++k) acc[k] += scale * v[k];
}

}  // namespace qaid
