#include "falkit/spectral.h"

#include <cmath>

#include "falkit/errors.h"

namespace fal {

namespace {

SvdResult checked_svd(const Matrix& w) {
  if (w.rows() == 0 || w.cols() == 0) {
    throw InvalidInput("predictor matrix must be at least 1x1");
  }
  SvdResult s = svd(w);
  const double smax = s.singular_values.front();
  const double smin = s.singular_values.back();
  if (!(smin > kRankTol * smax)) {
    throw DegenerateMatrix("smallest singular value " + std::to_string(smin) +
                           " below tolerance relative to " + std::to_string(smax));
  }
  return s;
}

bool nearly_equal(double a, double b) {
  return std::abs(a - b) <= kGapTol * std::max(std::abs(a), std::abs(b));
}

} // namespace

double condition_number(const Matrix& w) {
  const SvdResult s = checked_svd(w);
  return s.singular_values.front() / s.singular_values.back();
}

double sv_entropy(const Matrix& w) {
  const SvdResult s = checked_svd(w);
  const Vec logp = log_softmax(s.singular_values);
  double h = 0.0;
  for (double lp : logp) {
    h += std::exp(lp) * lp;
  }
  return h;
}

Matrix grad_condition_number(const Matrix& w) {
  const SvdResult s = checked_svd(w);
  const std::size_t r = s.singular_values.size();
  if (r < 2) {
    // A single singular value: kappa == 1 identically.
    return Matrix(w.rows(), w.cols());
  }
  const double smax = s.singular_values[0];
  const double smin = s.singular_values[r - 1];
  if (nearly_equal(smax, s.singular_values[1]) || nearly_equal(smin, s.singular_values[r - 2])) {
    throw NonSmoothPoint("grad_condition_number: repeated extreme singular value");
  }
  const Vec u1 = s.u.col(0);
  const Vec v1 = s.v.col(0);
  const Vec ur = s.u.col(r - 1);
  const Vec vr = s.v.col(r - 1);
  Matrix g = outer(u1, v1) * (1.0 / smin);
  g -= outer(ur, vr) * (smax / (smin * smin));
  return g;
}

Matrix grad_sv_entropy(const Matrix& w) {
  const SvdResult s = checked_svd(w);
  const std::size_t r = s.singular_values.size();
  for (std::size_t i = 0; i + 1 < r; ++i) {
    if (nearly_equal(s.singular_values[i], s.singular_values[i + 1])) {
      throw NonSmoothPoint("grad_sv_entropy: repeated singular values");
    }
  }
  const Vec logp = log_softmax(s.singular_values);
  double h = 0.0;
  for (double lp : logp) {
    h += std::exp(lp) * lp;
  }
  // dH/dsigma_j = p_j (log p_j - H); dsigma_j/dW = u_j v_j^T.
  Matrix g(w.rows(), w.cols());
  for (std::size_t j = 0; j < r; ++j) {
    const double coef = std::exp(logp[j]) * (logp[j] - h);
    const Vec uj = s.u.col(j);
    const Vec vj = s.v.col(j);
    for (std::size_t a = 0; a < w.rows(); ++a) {
      for (std::size_t b = 0; b < w.cols(); ++b) {
        g(a, b) += coef * uj[a] * vj[b];
      }
    }
  }
  return g;
}

double spectral_regularizer(const Matrix& w, double lambda1, double lambda2) {
  if (lambda1 < 0.0 || lambda2 < 0.0) {
    throw InvalidInput("spectral_regularizer: weights must be non-negative");
  }
  double out = 0.0;
  if (lambda1 > 0.0) {
    out += lambda1 * condition_number(w);
  }
  const double f = w.frobenius();
  return out + lambda2 * f * f;
}

Matrix grad_spectral_regularizer(const Matrix& w, double lambda1, double lambda2) {
  Matrix g = w * (2.0 * lambda2);
  if (lambda1 > 0.0) {
    g += grad_condition_number(w) * lambda1;
  }
  return g;
}

double entropy_regularizer(const Matrix& w, double lambda1) {
  if (lambda1 < 0.0) {
    throw InvalidInput("entropy_regularizer: weight must be non-negative");
  }
  return lambda1 == 0.0 ? 0.0 : lambda1 * sv_entropy(w);
}

} // namespace fal
