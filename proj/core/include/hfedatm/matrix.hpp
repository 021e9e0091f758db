#pragma once

#include <cstddef>
#include <stdexcept>
#include <vector>

namespace hfedatm {

// Dense row-major matrix of doubles. All aggregation math runs in 64-bit.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0) {}
  Matrix(std::size_t r, std::size_t c, std::vector<double> d)
      : rows(r), cols(c), data(std::move(d)) {
    if (data.size() != rows * cols)
      throw std::invalid_argument("Matrix: data length != rows*cols");
  }

  double& at(std::size_t i, std::size_t j) { return data[i * cols + j]; }
  double at(std::size_t i, std::size_t j) const { return data[i * cols + j]; }

  static Matrix zeros(std::size_t r, std::size_t c) { return Matrix(r, c); }
  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m.at(i, i) = 1.0;
    return m;
  }

  bool same_shape(const Matrix& o) const { return rows == o.rows && cols == o.cols; }
};

// 4-D filter bank tensor W[k][c][y][x], contiguous with x fastest.
struct Tensor4 {
  std::size_t k = 0, c = 0, h = 0, w = 0;
  std::vector<double> data;

  Tensor4() = default;
  Tensor4(std::size_t k_, std::size_t c_, std::size_t h_, std::size_t w_)
      : k(k_), c(c_), h(h_), w(w_), data(k_ * c_ * h_ * w_, 0.0) {}

  std::size_t size() const { return data.size(); }
  double& at(std::size_t a, std::size_t ci, std::size_t y, std::size_t x) {
    return data[((a * c + ci) * h + y) * w + x];
  }
  double at(std::size_t a, std::size_t ci, std::size_t y, std::size_t x) const {
    return data[((a * c + ci) * h + y) * w + x];
  }
};

Matrix matmul(const Matrix& a, const Matrix& b);
Matrix transpose(const Matrix& a);
Matrix add(const Matrix& a, const Matrix& b);
Matrix sub(const Matrix& a, const Matrix& b);
Matrix scale(const Matrix& a, double s);
double fro_norm(const Matrix& a);
double max_abs_diff(const Matrix& a, const Matrix& b);
bool all_finite(const Matrix& a);

// Max |a(i,j) - a(j,i)| over the square matrix a.
double symmetry_residual(const Matrix& a);

}  // namespace hfedatm
