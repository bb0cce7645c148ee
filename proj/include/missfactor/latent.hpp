#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "missfactor/data.hpp"
#include "missfactor/errors.hpp"
#include "missfactor/factor.hpp"
#include "missfactor/ipw.hpp"
#include "missfactor/parallel.hpp"
#include "missfactor/stats.hpp"

namespace missfactor {

struct C2Estimate {
  Matrix C2;          // n x K, orthogonal to X, C2'C2 = n I
  Matrix beta_tilde;  // |features| x d, rows follow `features`
  Matrix ell;         // |features| x K
  std::vector<int> features;  // feature indices entering the objective
  double objective = 0.0;
  int sweeps = 0;
  bool converged = false;
};

// Latent factors orthogonal to the design, by block coordinate descent on the
// weighted quasi-likelihood: per-feature (beta_tilde, ell) given C2, then a
// rowwise generalized least squares update of C2, then projection back onto
// {C2'X = 0, C2'C2 = n I}.  `omega` holds one weight row per feature (the
// mask for nearly complete features, w_hat * gamma_hat for the missing set).
inline C2Estimate estimate_C2(const Matrix& Y, const Matrix& omega,
                              const std::vector<int>& features,
                              const Matrix& X, const Matrix& C2_init, int K,
                              double tol = 1e-8, int max_sweeps = 500) {
  const Eigen::Index n = Y.cols(), d = X.cols();
  const auto G = static_cast<Eigen::Index>(features.size());
  if (G == 0) throw EmptyInputError("estimate_C2: no features");
  if (K < 1 || K >= n - d) throw RankError("estimate_C2 needs 1 <= K < n - d");
  if (C2_init.rows() != n || C2_init.cols() != K) {
    throw InputError("estimate_C2: bad initial C2 shape");
  }

  // Orthonormal basis of col(X) for the projection step.
  Eigen::ColPivHouseholderQR<Matrix> xqr(X);
  if (xqr.rank() < d) throw SingularDesignError("estimate_C2: X rank deficient");
  const Matrix Qx = xqr.householderQ() * Matrix::Identity(n, d);

  C2Estimate out;
  out.features = features;
  out.C2 = C2_init;
  out.beta_tilde = Matrix::Zero(G, d);
  out.ell = Matrix::Zero(G, K);
  const double sqrt_n = std::sqrt(static_cast<double>(n));

  Matrix Z(n, d + K);
  Z.leftCols(d) = X;
  double prev_obj = std::numeric_limits<double>::infinity();
  Matrix C2_prev = out.C2;

  auto refit_features = [&]() {
    Z.rightCols(K) = out.C2;
    double obj = 0.0;
    for (Eigen::Index gi = 0; gi < G; ++gi) {
      const int g = features[static_cast<std::size_t>(gi)];
      const Vector w = omega.row(g).transpose();
      const Vector y = Y.row(g).transpose();
      const Matrix Gm = Z.transpose() * w.asDiagonal() * Z;
      const Vector rhs = Z.transpose() * w.cwiseProduct(y);
      const Vector theta = Gm.ldlt().solve(rhs);
      out.beta_tilde.row(gi) = theta.head(d).transpose();
      out.ell.row(gi) = theta.tail(K).transpose();
      const Vector resid = y - Z * theta;
      obj += resid.cwiseProduct(w.cwiseSqrt()).squaredNorm();
    }
    return obj;
  };

  for (int sweep = 0; sweep < max_sweeps; ++sweep) {
    out.sweeps = sweep + 1;
    const double obj = refit_features();
    if (std::isfinite(prev_obj) && obj > prev_obj * (1.0 + 1e-6) + 1e-12) {
      // The constraint projection can overshoot; the previous iterate was no
      // worse, so keep it and stop.
      out.C2 = C2_prev;
      out.objective = refit_features();
      out.converged = obj - prev_obj <= 1e-3 * std::max(1.0, prev_obj);
      return out;
    }
    const bool done = std::isfinite(prev_obj) &&
                      std::abs(prev_obj - obj) <= tol * std::max(1.0, std::abs(obj));
    prev_obj = obj;
    out.objective = obj;
    if (done) {
      out.converged = true;
      break;
    }
    C2_prev = out.C2;

    // Rowwise update: each sample's factor row solves a K x K system pooling
    // the features' weighted residuals against their loadings.
    Matrix C2_new(n, K);
    for (Eigen::Index i = 0; i < n; ++i) {
      Matrix A = Matrix::Zero(K, K);
      Vector b = Vector::Zero(K);
      for (Eigen::Index gi = 0; gi < G; ++gi) {
        const int g = features[static_cast<std::size_t>(gi)];
        const double w = omega(g, i);
        if (w == 0.0) continue;
        const Vector lg = out.ell.row(gi).transpose();
        const double resid = Y(g, i) - X.row(i).dot(out.beta_tilde.row(gi));
        A += w * lg * lg.transpose();
        b += w * resid * lg;
      }
      A += 1e-10 * Matrix::Identity(K, K);
      C2_new.row(i) = A.ldlt().solve(b).transpose();
    }

    // Project onto the constraint set: orthogonalize against X, then polar
    // renormalization to C2'C2 = n I.
    C2_new -= Qx * (Qx.transpose() * C2_new);
    Eigen::BDCSVD<Matrix> svd(C2_new, Eigen::ComputeThinU | Eigen::ComputeThinV);
    if (svd.singularValues().minCoeff() <=
        1e-12 * std::max(1.0, svd.singularValues().maxCoeff())) {
      throw ConvergenceError("estimate_C2: factor block collapsed in rank");
    }
    out.C2 = sqrt_n * svd.matrixU() * svd.matrixV().transpose();
  }
  if (!out.converged) {
    out.objective = refit_features();
  } else {
    // beta/ell already match the current C2 from the last refit.
  }
  return out;
}

struct OmegaEstimate {
  Matrix Omega;  // d_interest x K
  int empty_screens = 0;  // rounds where a coordinate kept its previous value
};

// Per-round refit: given the current C (n x K), produce the interest-block
// coefficient estimates and their variances, one row per feature.
using OmegaRefit =
    std::function<void(const Matrix& C, Matrix* beta, Matrix* var)>;

// Algorithm: precision-weighted regression of the contaminated interest
// coefficients on the loadings, then R refinement rounds that re-estimate
// each feature's coefficient under C^(r) = X_interest Omega^(r) + C2, screen
// out features with q <= eps_q (likely real signals), and re-regress.
inline OmegaEstimate estimate_Omega(const Matrix& beta_tilde, const Matrix& ell,
                                    const Matrix& tau, const Matrix& X_interest,
                                    const Matrix& C2, const OmegaRefit& refit,
                                    double eps_q = 0.1, int R = 3) {
  const Eigen::Index G = beta_tilde.rows(), d = beta_tilde.cols(),
                     K = ell.cols();
  if (ell.rows() != G || tau.rows() != G || tau.cols() != d) {
    throw InputError("estimate_Omega: shape mismatch");
  }
  for (Eigen::Index g = 0; g < G; ++g) {
    for (Eigen::Index j = 0; j < d; ++j) {
      if (!(tau(g, j) > 0.0) || !std::isfinite(tau(g, j))) {
        throw InputError("estimate_Omega: nonpositive or nonfinite tau");
      }
    }
  }

  auto solve_screened = [&](const std::vector<char>& keep, Eigen::Index j,
                            bool* ok) -> Vector {
    Matrix A = Matrix::Zero(K, K);
    Vector b = Vector::Zero(K);
    double kept = 0.0;
    for (Eigen::Index g = 0; g < G; ++g) {
      if (!keep[static_cast<std::size_t>(g)]) continue;
      kept += 1.0;
      const Vector lg = ell.row(g).transpose();
      const double prec = 1.0 / tau(g, j);
      A += prec * lg * lg.transpose();
      b += prec * beta_tilde(g, j) * lg;
    }
    if (kept == 0.0) {
      *ok = false;
      return Vector::Zero(K);
    }
    Eigen::FullPivLU<Matrix> lu(A);
    if (!lu.isInvertible()) {
      throw SingularDesignError("estimate_Omega: loading gram matrix singular");
    }
    *ok = true;
    return lu.solve(b);
  };

  OmegaEstimate out;
  out.Omega = Matrix::Zero(d, K);
  const std::vector<char> all(static_cast<std::size_t>(G), 1);
  for (Eigen::Index j = 0; j < d; ++j) {
    bool ok = false;
    out.Omega.row(j) = solve_screened(all, j, &ok).transpose();
  }

  for (int r = 0; r < R; ++r) {
    const Matrix C_r = X_interest * out.Omega + C2;
    Matrix beta_r, var_r;
    refit(C_r, &beta_r, &var_r);
    if (beta_r.rows() != G || beta_r.cols() != d) {
      throw InputError("estimate_Omega: refit returned wrong shape");
    }
    for (Eigen::Index j = 0; j < d; ++j) {
      std::vector<double> p(static_cast<std::size_t>(G));
      for (Eigen::Index g = 0; g < G; ++g) {
        const double z2 = beta_r(g, j) * beta_r(g, j) / var_r(g, j);
        p[static_cast<std::size_t>(g)] = normal_two_sided_p(std::sqrt(z2));
      }
      const auto qres = storey_qvalues(p);
      std::vector<char> keep(static_cast<std::size_t>(G));
      for (Eigen::Index g = 0; g < G; ++g) {
        keep[static_cast<std::size_t>(g)] =
            qres.q[static_cast<std::size_t>(g)] > eps_q ? 1 : 0;
      }
      bool ok = false;
      const Vector w = solve_screened(keep, j, &ok);
      if (ok) {
        out.Omega.row(j) = w.transpose();
      } else {
        ++out.empty_screens;  // keep the previous estimate for this coordinate
      }
    }
  }
  return out;
}

inline Matrix recover_C(const Matrix& X_interest, const Matrix& Omega,
                        const Matrix& C2) {
  if (X_interest.cols() != Omega.rows() || Omega.cols() != C2.cols() ||
      X_interest.rows() != C2.rows()) {
    throw InputError("recover_C: shape mismatch");
  }
  return X_interest * Omega + C2;
}

enum class FitMethod { Ols, Ipw };

struct FeatureAssociation {
  int feature = -1;
  bool ok = false;
  std::string error;
  Vector beta;  // interest block
  Vector se;
  Vector p;
  Vector q;
  FitMethod method = FitMethod::Ols;
  bool flagged = false;  // mechanism fit rejected; reported but marked
};

struct AssociationResults {
  std::vector<FeatureAssociation> features;
  int K = 0;
  int n_failed = 0;
};

// Final per-feature inference with Z = (X_interest | X_nuisance | C_hat):
// masked OLS for nearly complete features, stabilized IPW with the corrected
// sandwich for the missing set.  Interest p-values are two-sided normal;
// q-values run across features per interest coordinate.
inline AssociationResults associate(
    const IntensityMatrix& m, const DesignMatrices& design, const Matrix& C_hat,
    const Matrix& w_hat, const Matrix& v_hat, const Matrix& gamma_hat,
    const std::vector<int>& weight_rows, const Partition& part,
    const std::vector<bool>& in_subset, int n_threads = 1) {
  const Eigen::Index n = m.n_samples(), d_i = design.d_interest();
  const Eigen::Index K = C_hat.cols();
  Matrix Z(n, d_i + design.d_nuisance() + K);
  Z << design.X_interest, design.X_nuisance, C_hat;

  std::vector<int> row_of_feature(static_cast<std::size_t>(m.n_features()), -1);
  for (std::size_t k = 0; k < weight_rows.size(); ++k) {
    row_of_feature[static_cast<std::size_t>(weight_rows[k])] = static_cast<int>(k);
  }

  AssociationResults out;
  out.K = static_cast<int>(K);
  std::vector<int> todo;
  todo.reserve(part.observed.size() + part.missing.size());
  for (int g : part.observed) todo.push_back(g);
  for (int g : part.missing) todo.push_back(g);
  std::sort(todo.begin(), todo.end());
  out.features.resize(todo.size());

  parallel_for(todo.size(), n_threads, [&](std::size_t idx) {
    const int g = todo[idx];
    FeatureAssociation fa;
    fa.feature = g;
    const Vector y = m.values.row(g).transpose();
    const Vector r = m.mask.row(g).transpose();
    try {
      if (part.label[static_cast<std::size_t>(g)] == FeatureClass::Observed) {
        fa.method = FitMethod::Ols;
        const OlsFit fit = ols_complete(y, Z, r);
        fa.beta = fit.coef.head(d_i);
        fa.se = fit.cov.diagonal().head(d_i).array().max(0.0).sqrt();
      } else {
        fa.method = FitMethod::Ipw;
        const int row = row_of_feature[static_cast<std::size_t>(g)];
        if (row < 0) throw InputError("missing-set feature lacks weights");
        fa.flagged = !in_subset[static_cast<std::size_t>(row)];
        const Vector w = w_hat.row(row).transpose();
        const Vector v = v_hat.row(row).transpose();
        const Vector gam = gamma_hat.row(row).transpose();
        if (!w.allFinite() || !v.allFinite() || !gam.allFinite()) {
          throw NumericError("mechanism weights unavailable for this feature");
        }
        const Vector eta = ipw_point(y, Z, w, gam);
        const Matrix cov = ipw_variance(y, Z, w, v, gam, eta);
        fa.beta = eta.head(d_i);
        fa.se = cov.diagonal().head(d_i).array().max(0.0).sqrt();
      }
      fa.p = Vector(d_i);
      for (Eigen::Index j = 0; j < d_i; ++j) {
        fa.p(j) = fa.se(j) > 0.0
                      ? normal_two_sided_p(fa.beta(j) / fa.se(j))
                      : 0.0;
      }
      fa.q = Vector::Ones(d_i);
      fa.ok = true;
    } catch (const Error& e) {
      fa.ok = false;
      fa.error = e.what();
    }
    out.features[idx] = fa;
  });

  for (Eigen::Index j = 0; j < d_i; ++j) {
    std::vector<double> p;
    std::vector<std::size_t> which;
    for (std::size_t k = 0; k < out.features.size(); ++k) {
      if (out.features[k].ok) {
        p.push_back(out.features[k].p(j));
        which.push_back(k);
      }
    }
    if (!p.empty()) {
      const auto qres = storey_qvalues(p);
      for (std::size_t k = 0; k < which.size(); ++k) {
        out.features[which[k]].q(j) = qres.q[k];
      }
    }
  }
  for (const auto& fa : out.features) {
    if (!fa.ok) ++out.n_failed;
  }
  return out;
}

}  // namespace missfactor
