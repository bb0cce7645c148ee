#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "missfactor/data.hpp"
#include "missfactor/errors.hpp"
#include "missfactor/gmm.hpp"
#include "missfactor/rng.hpp"
#include "missfactor/stats.hpp"

namespace missfactor {

// Empirical-likelihood weights: eta_i = 1 / (n (1 + lambda' h_i)) with lambda
// the Newton solution of the dual problem.  The moment columns may be rank
// deficient (instruments can be collinear in resamples), so the solve runs in
// the row space of H.
inline Vector el_weights(const Matrix& H, int max_iter = 50,
                         double tol = 1e-10) {
  const Eigen::Index n = H.rows();
  if (n < 2) throw InsufficientDataError("el_weights needs at least 2 rows");

  Eigen::BDCSVD<Matrix> svd(H, Eigen::ComputeThinV);
  const double smax = svd.singularValues().size() > 0
                          ? svd.singularValues()(0)
                          : 0.0;
  Eigen::Index rank = 0;
  for (Eigen::Index k = 0; k < svd.singularValues().size(); ++k) {
    if (svd.singularValues()(k) > 1e-12 * std::max(1.0, smax)) ++rank;
  }
  if (rank == 0) return Vector::Constant(n, 1.0 / static_cast<double>(n));
  const Matrix Vr = svd.matrixV().leftCols(rank);
  const Matrix G = H * Vr;  // n x rank, reduced coordinates

  Vector lambda = Vector::Zero(rank);
  Vector w(n);
  for (int it = 0; it < max_iter; ++it) {
    w = Vector::Ones(n) + G * lambda;
    if ((w.array() <= 0.0).any()) {
      throw HullViolationError("EL dual left the feasible region");
    }
    // grad of the mean constraint: n^{-1} sum h_i / w_i
    const Vector g = G.transpose() * w.cwiseInverse() / static_cast<double>(n);
    if (g.lpNorm<Eigen::Infinity>() <= tol) {
      Vector eta = (static_cast<double>(n) * w).cwiseInverse();
      return eta;
    }
    Matrix Hess = Matrix::Zero(rank, rank);
    for (Eigen::Index i = 0; i < n; ++i) {
      const Vector gi = G.row(i).transpose();
      Hess += gi * gi.transpose() / (w(i) * w(i));
    }
    Hess /= static_cast<double>(n);
    Eigen::LDLT<Matrix> ldlt(Hess);
    Vector dir = ldlt.solve(g);
    if (!dir.allFinite()) {
      throw HullViolationError("EL dual Hessian is singular");
    }
    // Backtrack to stay strictly inside {1 + lambda' h > 0}.
    double t = 1.0;
    for (int bs = 0; bs < 60; ++bs) {
      const Vector cand = lambda + t * dir;
      if (((Vector::Ones(n) + G * cand).array() > 1e-12).all()) break;
      t *= 0.5;
    }
    const Vector cand = lambda + t * dir;
    if (!((Vector::Ones(n) + G * cand).array() > 0.0).all()) {
      throw HullViolationError("zero is outside the hull of the moments");
    }
    lambda = cand;
    if (lambda.norm() > 1e8) {
      throw HullViolationError("EL dual diverged");
    }
  }
  throw HullViolationError("EL dual did not converge");
}

struct BootstrapResult {
  double j_observed = 0.0;
  std::vector<double> j_null;
  double p_value = 1.0;
  Vector el;                    // resampling weights actually used
  bool hull_violation = false;  // fell back to uniform weights
  int failed_replicates = 0;
};

// Bootstrap null for the Sargan-Hansen J: resample cells from the
// EL-reweighted empirical distribution (which satisfies the moment condition
// exactly) and rerun the full two-step GMM on each replicate.
inline BootstrapResult bootstrap_j_null(const Vector& y, const Vector& r,
                                        const Matrix& U,
                                        const MissingnessLink& link,
                                        const GmmFit& fit, int B,
                                        std::uint64_t seed) {
  if (B < 99) throw ConfigError("bootstrap_j_null needs B >= 99");
  const Eigen::Index n = y.size();
  BootstrapResult out;
  out.j_observed = fit.J;

  Matrix H(n, 3);
  for (Eigen::Index i = 0; i < n; ++i) {
    H.row(i) = moment_h(y(i), r(i), U(i, 0), U(i, 1), link, fit.alpha,
                        fit.delta)
                   .transpose();
  }
  try {
    out.el = el_weights(H);
  } catch (const HullViolationError&) {
    out.el = Vector::Constant(n, 1.0 / static_cast<double>(n));
    out.hull_violation = true;
  }

  Vector cum(n);
  double acc = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    acc += out.el(i);
    cum(i) = acc;
  }
  cum(n - 1) = 1.0;

  out.j_null.reserve(static_cast<std::size_t>(B));
  int attempts = 0, ge = 0;
  const int max_attempts = 2 * B;
  Vector yb(n), rb(n);
  Matrix Ub(n, 2);
  while (static_cast<int>(out.j_null.size()) < B) {
    if (attempts >= max_attempts) {
      throw BootstrapDegenerateError(
          "more than B bootstrap replicates failed to refit");
    }
    RngStream rng(seed, {0x6a62ULL, static_cast<std::uint64_t>(attempts)});
    ++attempts;
    for (Eigen::Index i = 0; i < n; ++i) {
      const double u = rng.uniform();
      const double* beg = cum.data();
      const auto idx = static_cast<Eigen::Index>(
          std::upper_bound(beg, beg + n, u) - beg);
      const Eigen::Index j = std::min(idx, n - 1);
      yb(i) = y(j);
      rb(i) = r(j);
      Ub.row(i) = U.row(j);
    }
    try {
      const GmmFit fb = two_step_gmm(yb, rb, Ub, link);
      out.j_null.push_back(fb.J);
      if (fb.J >= out.j_observed) ++ge;
    } catch (const NumericError&) {
      ++out.failed_replicates;
    }
  }
  out.p_value = (1.0 + static_cast<double>(ge)) / (static_cast<double>(B) + 1.0);
  return out;
}

struct MechanismFlags {
  std::vector<double> lfdr;
  std::vector<bool> in_subset;  // lfdr >= threshold: mechanism fit acceptable
  double pi0 = 1.0;
  bool fallback = false;  // too few features to estimate the lfdr
};

// Flags features whose bootstrap J p-value has small local fdr, i.e. likely
// genuine mechanism misfit.  Those features are excluded from latent factor
// estimation but still reported downstream.
inline MechanismFlags flag_mechanism_fit(const std::vector<double>& p_values,
                                         double lfdr_threshold = 0.8) {
  MechanismFlags out;
  const std::size_t m = p_values.size();
  if (m == 0) return out;
  if (m < 50) {
    // Not enough features for a density estimate; keep everything.
    out.fallback = true;
    out.lfdr.assign(m, 1.0);
    out.in_subset.assign(m, true);
    return out;
  }
  const auto res = local_fdr(p_values);
  out.lfdr = res.lfdr;
  out.pi0 = res.pi0;
  out.fallback = res.fallback;
  out.in_subset.resize(m);
  for (std::size_t g = 0; g < m; ++g) {
    out.in_subset[g] = out.lfdr[g] >= lfdr_threshold;
  }
  return out;
}

}  // namespace missfactor
