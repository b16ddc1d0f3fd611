#pragma once

#include "falkit/numerics.h"

namespace fal {

// Spectral measures over a predictor matrix W (N predictors x k dims). All of
// them use the r = min(N, k) singular values of W.

/// Relative rank tolerance: sigma_min <= kRankTol * sigma_max is degenerate.
inline constexpr double kRankTol = 1e-12;
/// Relative gap below which two singular values count as repeated.
inline constexpr double kGapTol = 1e-9;

/// sigma_max / sigma_min. Throws DegenerateMatrix for (numerically)
/// linearly dependent rows or columns.
double condition_number(const Matrix& w);

/// sum_i p_i log p_i with p = softmax(sigma(W)). Lies in [-log r, 0].
double sv_entropy(const Matrix& w);

/// Gradient of condition_number. Needs distinct extreme singular values.
Matrix grad_condition_number(const Matrix& w);

/// Gradient of sv_entropy. Needs all singular values distinct.
Matrix grad_sv_entropy(const Matrix& w);

/// lambda1 * kappa(W) + lambda2 * ||W||_F^2. kappa is skipped when
/// lambda1 == 0, so degenerate W is accepted in that case.
double spectral_regularizer(const Matrix& w, double lambda1, double lambda2);
Matrix grad_spectral_regularizer(const Matrix& w, double lambda1, double lambda2);

double entropy_regularizer(const Matrix& w, double lambda1);

} // namespace fal
