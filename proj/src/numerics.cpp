#include "falkit/numerics.h"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include <Eigen/SVD>

#include "falkit/errors.h"

namespace fal {

Matrix::Matrix(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, Vec data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows * cols) {
    throw ShapeError(
        "Matrix: data length " + std::to_string(data_.size()) + " != " +
        std::to_string(rows) + "x" + std::to_string(cols));
  }
}

Matrix::Matrix(std::initializer_list<std::initializer_list<double>> rows) {
  rows_ = rows.size();
  cols_ = rows_ ? rows.begin()->size() : 0;
  data_.reserve(rows_ * cols_);
  for (const auto& r : rows) {
    if (r.size() != cols_) {
      throw ShapeError("Matrix: ragged initializer");
    }
    data_.insert(data_.end(), r.begin(), r.end());
  }
}

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    m(i, i) = 1.0;
  }
  return m;
}

Matrix Matrix::diag(std::span<const double> d) {
  Matrix m(d.size(), d.size());
  for (std::size_t i = 0; i < d.size(); ++i) {
    m(i, i) = d[i];
  }
  return m;
}

Vec Matrix::col(std::size_t j) const {
  Vec out(rows_);
  for (std::size_t i = 0; i < rows_; ++i) {
    out[i] = (*this)(i, j);
  }
  return out;
}

Matrix Matrix::transpose() const {
  Matrix t(cols_, rows_);
  for (std::size_t i = 0; i < rows_; ++i) {
    for (std::size_t j = 0; j < cols_; ++j) {
      t(j, i) = (*this)(i, j);
    }
  }
  return t;
}

bool Matrix::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double x) { return std::isfinite(x); });
}

double Matrix::frobenius() const {
  return norm2(data_);
}

Matrix& Matrix::operator+=(const Matrix& o) {
  if (rows_ != o.rows_ || cols_ != o.cols_) {
    throw ShapeError("Matrix +=: shape mismatch");
  }
  for (std::size_t i = 0; i < data_.size(); ++i) {
    data_[i] += o.data_[i];
  }
  return *this;
}

Matrix& Matrix::operator-=(const Matrix& o) {
  if (rows_ != o.rows_ || cols_ != o.cols_) {
    throw ShapeError("Matrix -=: shape mismatch");
  }
  for (std::size_t i = 0; i < data_.size(); ++i) {
    data_[i] -= o.data_[i];
  }
  return *this;
}

Matrix& Matrix::operator*=(double s) {
  for (double& x : data_) {
    x *= s;
  }
  return *this;
}

Matrix operator+(Matrix a, const Matrix& b) {
  a += b;
  return a;
}

Matrix operator-(Matrix a, const Matrix& b) {
  a -= b;
  return a;
}

Matrix operator*(Matrix a, double s) {
  a *= s;
  return a;
}

Matrix operator*(double s, Matrix a) {
  a *= s;
  return a;
}

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: inner dimensions differ");
  }
  Matrix c(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) {
        continue;
      }
      for (std::size_t j = 0; j < b.cols(); ++j) {
        c(i, j) += aik * b(k, j);
      }
    }
  }
  return c;
}

Vec matvec(const Matrix& a, std::span<const double> x) {
  if (a.cols() != x.size()) {
    throw ShapeError("matvec: dimension mismatch");
  }
  Vec y(a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    y[i] = dot(a.row(i), x);
  }
  return y;
}

Vec matvec_t(const Matrix& a, std::span<const double> x) {
  if (a.rows() != x.size()) {
    throw ShapeError("matvec_t: dimension mismatch");
  }
  Vec y(a.cols(), 0.0);
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const auto r = a.row(i);
    for (std::size_t j = 0; j < a.cols(); ++j) {
      y[j] += r[j] * x[i];
    }
  }
  return y;
}

Matrix outer(std::span<const double> u, std::span<const double> v) {
  Matrix m(u.size(), v.size());
  for (std::size_t i = 0; i < u.size(); ++i) {
    for (std::size_t j = 0; j < v.size(); ++j) {
      m(i, j) = u[i] * v[j];
    }
  }
  return m;
}

double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) {
    throw ShapeError("dot: length mismatch");
  }
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    s += a[i] * b[i];
  }
  return s;
}

double norm2(std::span<const double> a) {
  // Scaled accumulation avoids overflow for large entries.
  double scale = 0.0;
  for (double x : a) {
    scale = std::max(scale, std::abs(x));
  }
  if (scale == 0.0 || !std::isfinite(scale)) {
    return scale;
  }
  double s = 0.0;
  for (double x : a) {
    const double y = x / scale;
    s += y * y;
  }
  return scale * std::sqrt(s);
}

double squared_distance(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) {
    throw ShapeError("squared_distance: length mismatch");
  }
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

Tensor3::Tensor3(Dims dims, double fill)
    : dims_(dims), data_(dims[0] * dims[1] * dims[2], fill) {}

Tensor3::Tensor3(Dims dims, Vec data) : dims_(dims), data_(std::move(data)) {
  if (data_.size() != dims[0] * dims[1] * dims[2]) {
    throw ShapeError("Tensor3: data length does not match dims");
  }
}

SvdResult svd(const Matrix& m) {
  if (m.empty()) {
    throw InvalidInput("svd: empty matrix");
  }
  if (!m.all_finite()) {
    throw InvalidInput("svd: non-finite entry");
  }
  using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  const Eigen::Map<const RowMajor> a(m.data().data(), static_cast<Eigen::Index>(m.rows()),
                                     static_cast<Eigen::Index>(m.cols()));
  const Eigen::JacobiSVD<Eigen::MatrixXd> dec(a, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const Eigen::MatrixXd& u = dec.matrixU();
  const Eigen::MatrixXd& v = dec.matrixV();
  const std::size_t r = std::min(m.rows(), m.cols());
  SvdResult out{Matrix(m.rows(), r), Vec(r), Matrix(m.cols(), r)};
  for (std::size_t k = 0; k < r; ++k) {
    const auto kk = static_cast<Eigen::Index>(k);
    out.singular_values[k] = dec.singularValues()(kk);
    for (std::size_t i = 0; i < m.rows(); ++i) {
      out.u(i, k) = u(static_cast<Eigen::Index>(i), kk);
    }
    for (std::size_t j = 0; j < m.cols(); ++j) {
      out.v(j, k) = v(static_cast<Eigen::Index>(j), kk);
    }
  }
  return out;
}

Vec softmax(std::span<const double> v, double temperature) {
  Vec out = log_softmax(v, temperature);
  for (double& x : out) {
    x = std::exp(x);
  }
  return out;
}

Vec log_softmax(std::span<const double> v, double temperature) {
  if (!(temperature > 0.0)) {
    throw InvalidInput("softmax: temperature must be positive");
  }
  if (v.empty()) {
    throw InvalidInput("softmax: empty input");
  }
  double mx = -INFINITY;
  for (double x : v) {
    if (!std::isfinite(x)) {
      throw InvalidInput("softmax: non-finite logit");
    }
    mx = std::max(mx, x / temperature);
  }
  double s = 0.0;
  for (double x : v) {
    s += std::exp(x / temperature - mx);
  }
  const double lse = mx + std::log(s);
  Vec out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    out[i] = v[i] / temperature - lse;
  }
  return out;
}

Tensor3 n_mode_product(const Tensor3& t, const Matrix& m, int mode) {
  if (mode < 1 || mode > 3) {
    throw ShapeError("n_mode_product: mode must be 1, 2 or 3");
  }
  if (m.cols() != t.dim(mode)) {
    throw ShapeError("n_mode_product: matrix columns " + std::to_string(m.cols()) +
                     " != tensor dim " + std::to_string(t.dim(mode)));
  }
  Tensor3::Dims od = t.dims();
  od[static_cast<std::size_t>(mode - 1)] = m.rows();
  Tensor3 out(od);
  const auto& d = t.dims();
  for (std::size_t i = 0; i < od[0]; ++i) {
    for (std::size_t j = 0; j < od[1]; ++j) {
      for (std::size_t k = 0; k < od[2]; ++k) {
        double s = 0.0;
        if (mode == 1) {
          for (std::size_t x = 0; x < d[0]; ++x) s += m(i, x) * t(x, j, k);
        } else if (mode == 2) {
          for (std::size_t x = 0; x < d[1]; ++x) s += m(j, x) * t(i, x, k);
        } else {
          for (std::size_t x = 0; x < d[2]; ++x) s += m(k, x) * t(i, j, x);
        }
        out(i, j, k) = s;
      }
    }
  }
  return out;
}

Matrix kron(const Matrix& a, const Matrix& b) {
  if (a.empty() || b.empty()) {
    throw InvalidInput("kron: empty operand");
  }
  Matrix out(a.rows() * b.rows(), a.cols() * b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t j = 0; j < a.cols(); ++j) {
      const double aij = a(i, j);
      for (std::size_t p = 0; p < b.rows(); ++p) {
        for (std::size_t q = 0; q < b.cols(); ++q) {
          out(i * b.rows() + p, j * b.cols() + q) = aij * b(p, q);
        }
      }
    }
  }
  return out;
}

Vec vec(const Tensor3& t) {
  return {t.data().begin(), t.data().end()};
}

Vec finite_diff_grad(const ScalarFn& f, std::span<const double> x, double h) {
  if (!(h > 0.0)) {
    throw InvalidInput("finite_diff_grad: step must be positive");
  }
  Vec probe(x.begin(), x.end());
  Vec g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double xi = probe[i];
    probe[i] = xi + h;
    const double fp = f(probe);
    probe[i] = xi - h;
    const double fm = f(probe);
    probe[i] = xi;
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      throw NumericalError("finite_diff_grad: non-finite function value at coordinate " +
                           std::to_string(i));
    }
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

} // namespace fal
