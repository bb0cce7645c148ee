#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <vector>

#include "missfactor/data.hpp"
#include "missfactor/errors.hpp"
#include "missfactor/stats.hpp"

namespace missfactor {

// Stabilization probabilities gamma_i = P(r_i = 1 | U_i) from a logistic
// regression of the missingness indicator on (1 | U).  A degenerate fit
// falls back to the constant observed rate.
inline Vector stabilization_probabilities(const Vector& r, const Matrix& U) {
  const Eigen::Index n = r.size();
  if (U.rows() != n) throw InputError("stabilization: shape mismatch");
  Matrix X(n, U.cols() + 1);
  X.col(0).setOnes();
  X.rightCols(U.cols()) = U;
  Vector eta;
  try {
    const LogisticFit fit = logistic_fit(r, X);
    eta = X * fit.coef;
  } catch (const NumericError&) {
    const double rate = r.sum() / static_cast<double>(n);
    return Vector::Constant(n, rate);
  }
  Vector gamma(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double e = eta(i);
    gamma(i) = e >= 0.0 ? 1.0 / (1.0 + std::exp(-e))
                        : std::exp(e) / (1.0 + std::exp(e));
  }
  return gamma;
}

namespace detail {

inline Matrix weighted_gram(const Matrix& Z, const Vector& weights) {
  return Z.transpose() * weights.asDiagonal() * Z;
}

inline void check_condition(const Matrix& G) {
  Eigen::SelfAdjointEigenSolver<Matrix> es(G);
  const double lo = es.eigenvalues().minCoeff();
  const double hi = es.eigenvalues().maxCoeff();
  if (!(lo > 0.0) || hi / lo > 1e12) {
    throw SingularWeightedDesignError("weighted design is numerically singular");
  }
}

}  // namespace detail

// Weighted least squares with the combined weights w * gamma; cells with
// w = 0 (missing y) drop out of every sum.
inline Vector ipw_point(const Vector& y, const Matrix& Z, const Vector& w_hat,
                        const Vector& gamma_hat) {
  const Eigen::Index n = y.size();
  if (Z.rows() != n || w_hat.size() != n || gamma_hat.size() != n) {
    throw InputError("ipw_point: shape mismatch");
  }
  const Vector weights = w_hat.cwiseProduct(gamma_hat);
  const Matrix G = detail::weighted_gram(Z, weights);
  detail::check_condition(G);
  return G.ldlt().solve(Z.transpose() * weights.cwiseProduct(y));
}

struct WeightedFit {
  Vector eta;
  Matrix covariance;
  Vector leverage;   // of W^{1/2} Z
  Vector residuals;  // y - Z eta
  Vector gamma;
  bool leverage_capped = false;
};

// Finite-sample corrected sandwich: the middle matrix inflates each cell's
// score by (1 - h_i)^{-2} and substitutes v_hat for the squared weight,
// accounting for the uncertainty in the estimated weights.
inline Matrix ipw_variance(const Vector& y, const Matrix& Z,
                           const Vector& w_hat, const Vector& v_hat,
                           const Vector& gamma_hat, const Vector& eta,
                           Vector* leverage_out = nullptr,
                           bool* capped_out = nullptr) {
  const Eigen::Index n = y.size(), q = Z.cols();
  const Vector weights = w_hat.cwiseProduct(gamma_hat);
  const Matrix G = detail::weighted_gram(Z, weights);
  detail::check_condition(G);
  const Matrix Ginv = G.ldlt().solve(Matrix::Identity(q, q));
  Vector lev(n);
  bool capped = false;
  Matrix mid = Matrix::Zero(q, q);
  for (Eigen::Index i = 0; i < n; ++i) {
    const Vector z = Z.row(i).transpose();
    lev(i) = weights(i) * z.dot(Ginv * z);
    if (weights(i) == 0.0) continue;
    double onemh = 1.0 - lev(i);
    if (onemh < 1e-8) {
      onemh = 1e-8;  // cell correction capped
      capped = true;
    }
    const double e = y(i) - z.dot(eta);
    const double s = gamma_hat(i) * gamma_hat(i) * v_hat(i) * e * e /
                     (onemh * onemh);
    mid += s * z * z.transpose();
  }
  if (leverage_out) *leverage_out = lev;
  if (capped_out) *capped_out = capped;
  return Ginv * mid * Ginv;
}

inline WeightedFit ipw_fit(const Vector& y, const Matrix& Z,
                           const Vector& w_hat, const Vector& v_hat,
                           const Vector& gamma_hat) {
  WeightedFit fit;
  fit.eta = ipw_point(y, Z, w_hat, gamma_hat);
  fit.gamma = gamma_hat;
  fit.covariance = ipw_variance(y, Z, w_hat, v_hat, gamma_hat, fit.eta,
                                &fit.leverage, &fit.leverage_capped);
  fit.residuals = y - Z * fit.eta;
  return fit;
}

// Masked OLS branch for nearly complete features: homoskedastic variance
// with df = Tr(R) - q.
inline OlsFit ols_complete(const Vector& y, const Matrix& Z, const Vector& r) {
  return ols_masked(y, Z, r);
}

}  // namespace missfactor
