#pragma once

#include <array>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <span>
#include <vector>

namespace fal {

using Vec = std::vector<double>;

/// Dense row-major matrix of doubles.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0);
  Matrix(std::size_t rows, std::size_t cols, Vec data);
  Matrix(std::initializer_list<std::initializer_list<double>> rows);

  static Matrix identity(std::size_t n);
  static Matrix diag(std::span<const double> d);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& operator()(std::size_t i, std::size_t j) { return data_[i * cols_ + j]; }
  double operator()(std::size_t i, std::size_t j) const { return data_[i * cols_ + j]; }

  std::span<double> row(std::size_t i) { return {data_.data() + i * cols_, cols_}; }
  std::span<const double> row(std::size_t i) const {
    return {data_.data() + i * cols_, cols_};
  }
  Vec col(std::size_t j) const;

  std::span<const double> data() const { return data_; }
  std::span<double> data() { return data_; }

  Matrix transpose() const;
  bool all_finite() const;
  double frobenius() const;

  Matrix& operator+=(const Matrix& o);
  Matrix& operator-=(const Matrix& o);
  Matrix& operator*=(double s);

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  Vec data_;
};

Matrix operator+(Matrix a, const Matrix& b);
Matrix operator-(Matrix a, const Matrix& b);
Matrix operator*(Matrix a, double s);
Matrix operator*(double s, Matrix a);
Matrix matmul(const Matrix& a, const Matrix& b);
Vec matvec(const Matrix& a, std::span<const double> x);
/// a^T x without materializing the transpose.
Vec matvec_t(const Matrix& a, std::span<const double> x);
Matrix outer(std::span<const double> u, std::span<const double> v);

double dot(std::span<const double> a, std::span<const double> b);
double norm2(std::span<const double> a);
double squared_distance(std::span<const double> a, std::span<const double> b);

/// Dense order-3 tensor. Index (i, j, k) lives at (i * d2 + j) * d3 + k, so
/// mode 1 varies slowest and mode 3 fastest.
class Tensor3 {
 public:
  using Dims = std::array<std::size_t, 3>;

  Tensor3() = default;
  explicit Tensor3(Dims dims, double fill = 0.0);
  Tensor3(Dims dims, Vec data);

  const Dims& dims() const { return dims_; }
  std::size_t dim(int mode) const { return dims_.at(static_cast<std::size_t>(mode - 1)); }

  double& operator()(std::size_t i, std::size_t j, std::size_t k) {
    return data_[(i * dims_[1] + j) * dims_[2] + k];
  }
  double operator()(std::size_t i, std::size_t j, std::size_t k) const {
    return data_[(i * dims_[1] + j) * dims_[2] + k];
  }

  std::span<const double> data() const { return data_; }

  friend bool operator==(const Tensor3&, const Tensor3&) = default;

 private:
  Dims dims_{0, 0, 0};
  Vec data_;
};

struct SvdResult {
  Matrix u;               // rows x r, orthonormal columns
  Vec singular_values;    // r values, descending
  Matrix v;               // cols x r, orthonormal columns
};

/// Thin SVD (two-sided Jacobi).
SvdResult svd(const Matrix& m);

Vec softmax(std::span<const double> v, double temperature = 1.0);
Vec log_softmax(std::span<const double> v, double temperature = 1.0);

/// Mode-n product: contracts `mode` of t with the columns of m.
Tensor3 n_mode_product(const Tensor3& t, const Matrix& m, int mode);

Matrix kron(const Matrix& a, const Matrix& b);

/// Flattening that matches the Tensor3 storage order (mode 1 slowest).
Vec vec(const Tensor3& t);

using ScalarFn = std::function<double(std::span<const double>)>;

/// Central differences, one coordinate at a time.
Vec finite_diff_grad(const ScalarFn& f, std::span<const double> x, double h = 1e-6);

} // namespace fal
