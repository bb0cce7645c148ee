#pragma once

#include <Eigen/Dense>
#include <Eigen/SVD>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "missfactor/data.hpp"
#include "missfactor/errors.hpp"
#include "missfactor/parallel.hpp"
#include "missfactor/rng.hpp"

namespace missfactor {

struct FactorEstimate {
  Matrix C;              // n x K, C'C = n I, C'1 = 0 when Z spans the intercept
  Matrix loadings;       // p_s x K, low-rank fit = loadings * C'
  Vector column_scales;  // top-K singular values, nonincreasing
  bool centered = false;
  int iterations = 0;
  bool converged = true;
};

namespace detail {

// Thin orthonormal basis of the column space of Z.
inline Matrix orthobasis(const Matrix& Z) {
  Eigen::ColPivHouseholderQR<Matrix> qr(Z);
  if (qr.rank() < Z.cols()) {
    throw SingularDesignError("covariate matrix is rank deficient");
  }
  Matrix Q = qr.householderQ() * Matrix::Identity(Z.rows(), Z.cols());
  // ColPiv permutes columns; the span is what matters here.
  return Q;
}

// Flip columns so the entry of largest magnitude is positive; resolves the
// SVD sign ambiguity deterministically.
inline void fix_column_signs(Matrix& C, Matrix* loadings) {
  for (Eigen::Index k = 0; k < C.cols(); ++k) {
    Eigen::Index at = 0;
    C.col(k).cwiseAbs().maxCoeff(&at);
    if (C(at, k) < 0.0) {
      C.col(k) = -C.col(k);
      if (loadings) loadings->col(k) = -loadings->col(k);
    }
  }
}

}  // namespace detail

// Factors from the nearly complete feature block: sqrt(n) times the top-K
// right singular vectors of Y P_perp(Z).  Trace missingness (MCAR at the
// eps_miss level) is handled by an EM loop: initialize missing cells with
// feature means, alternate rank-K reconstruction and refill until successive
// fills differ by < tol relative Frobenius or max_iter sweeps.
inline FactorEstimate estimate_complete_factors(const Matrix& Y,
                                                const Matrix& mask,
                                                const Matrix& Z, int K,
                                                double tol = 1e-6,
                                                int max_iter = 200) {
  const Eigen::Index p = Y.rows(), n = Y.cols(), t = Z.cols();
  if (p == 0) throw NoCompleteFeaturesError("no complete features to factor");
  if (Z.rows() != n || mask.rows() != p || mask.cols() != n) {
    throw InputError("estimate_complete_factors: shape mismatch");
  }
  if (K < 1 || K >= std::min(p, n - t)) {
    throw RankError("K must satisfy 1 <= K < min(p_s, n - t)");
  }
  const Matrix Q = detail::orthobasis(Z);

  Matrix W = Y;
  const double n_missing = (1.0 - mask.array()).sum();
  for (Eigen::Index g = 0; g < p; ++g) {
    const double cnt = mask.row(g).sum();
    if (cnt <= 0.0) {
      throw InsufficientDataError("feature with no observed cells in the complete block");
    }
    const double mean_g = (Y.row(g).array() * mask.row(g).array()).sum() / cnt;
    for (Eigen::Index i = 0; i < n; ++i) {
      if (mask(g, i) == 0.0) W(g, i) = mean_g;
    }
  }

  FactorEstimate out;
  Matrix Wres;
  Eigen::BDCSVD<Matrix> svd;
  int it = 0;
  for (; it < max_iter; ++it) {
    const Matrix B = W * Q;  // p x t projection coefficients
    Wres = W - B * Q.transpose();
    svd.compute(Wres, Eigen::ComputeThinU | Eigen::ComputeThinV);
    if (n_missing == 0.0) {
      ++it;
      break;
    }
    const Matrix M = svd.matrixU().leftCols(K) *
                     svd.singularValues().head(K).asDiagonal() *
                     svd.matrixV().leftCols(K).transpose();
    const Matrix fill = M + B * Q.transpose();
    double delta2 = 0.0, base2 = 0.0;
    for (Eigen::Index g = 0; g < p; ++g) {
      for (Eigen::Index i = 0; i < n; ++i) {
        if (mask(g, i) == 0.0) {
          const double d = fill(g, i) - W(g, i);
          delta2 += d * d;
          base2 += W(g, i) * W(g, i);
          W(g, i) = fill(g, i);
        }
      }
    }
    if (std::sqrt(delta2) <= tol * std::max(1.0, std::sqrt(base2))) {
      ++it;
      break;
    }
  }
  out.iterations = it;
  out.converged = it < max_iter || n_missing == 0.0;
  if (n_missing > 0.0) {
    // One more pass so the factorization matches the converged fill.
    const Matrix B = W * Q;
    Wres = W - B * Q.transpose();
    svd.compute(Wres, Eigen::ComputeThinU | Eigen::ComputeThinV);
  }

  const double sqrt_n = std::sqrt(static_cast<double>(n));
  out.C = sqrt_n * svd.matrixV().leftCols(K);
  out.loadings = svd.matrixU().leftCols(K) *
                 svd.singularValues().head(K).asDiagonal() / sqrt_n;
  out.column_scales = svd.singularValues().head(K);
  detail::fix_column_signs(out.C, &out.loadings);
  const Vector ones = Vector::Ones(n);
  out.centered = (ones - Q * (Q.transpose() * ones)).norm() < 1e-8 * sqrt_n;
  return out;
}

struct ParallelAnalysisResult {
  int K = 0;
  Vector sigma;       // singular values of the residualized matrix
  Vector thresholds;  // permutation 95th percentiles, per component
};

// Buja-Eyuboglu style estimate of the factor count: K is the length of the
// leading run of singular values exceeding the 95th percentile (nearest rank)
// of their counterparts under independent within-row permutation.
inline ParallelAnalysisResult parallel_analysis(const Matrix& Y,
                                                const Matrix& mask,
                                                const Matrix& Z, int n_perm,
                                                std::uint64_t seed,
                                                int n_threads = 1) {
  if (n_perm < 19) throw ConfigError("parallel_analysis needs n_perm >= 19");
  const Eigen::Index p = Y.rows(), n = Y.cols();
  if (p == 0 || n == 0) throw EmptyInputError("parallel_analysis: empty matrix");
  const Matrix Q = detail::orthobasis(Z);

  Matrix W = Y;
  for (Eigen::Index g = 0; g < p; ++g) {
    const double cnt = mask.row(g).sum();
    if (cnt <= 0.0) {
      throw InsufficientDataError("feature with no observed cells");
    }
    const double mean_g = (Y.row(g).array() * mask.row(g).array()).sum() / cnt;
    for (Eigen::Index i = 0; i < n; ++i) {
      if (mask(g, i) == 0.0) W(g, i) = mean_g;
    }
  }
  const Matrix Wres = W - (W * Q) * Q.transpose();

  Eigen::BDCSVD<Matrix> svd0(Wres);
  const Vector sigma = svd0.singularValues();
  const Eigen::Index m = sigma.size();

  Matrix perm_sigma(n_perm, m);
  parallel_for(static_cast<std::size_t>(n_perm), n_threads, [&](std::size_t b) {
    RngStream rng(seed, {0x7061ULL, static_cast<std::uint64_t>(b)});
    Matrix P = Wres;
    std::vector<Eigen::Index> idx(static_cast<std::size_t>(n));
    for (Eigen::Index g = 0; g < p; ++g) {
      for (Eigen::Index i = 0; i < n; ++i) idx[static_cast<std::size_t>(i)] = i;
      for (Eigen::Index i = n - 1; i > 0; --i) {
        const auto j = static_cast<Eigen::Index>(
            rng.uniform_index(static_cast<std::uint64_t>(i) + 1));
        std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(j)]);
      }
      for (Eigen::Index i = 0; i < n; ++i) {
        P(g, i) = Wres(g, idx[static_cast<std::size_t>(i)]);
      }
    }
    Eigen::BDCSVD<Matrix> svd_b(P);
    perm_sigma.row(static_cast<Eigen::Index>(b)) =
        svd_b.singularValues().transpose();
  });

  ParallelAnalysisResult out;
  out.sigma = sigma;
  out.thresholds = Vector(m);
  const auto rank95 = static_cast<Eigen::Index>(
      std::ceil(0.95 * static_cast<double>(n_perm))) - 1;
  for (Eigen::Index k = 0; k < m; ++k) {
    std::vector<double> col(static_cast<std::size_t>(n_perm));
    for (int b = 0; b < n_perm; ++b) col[static_cast<std::size_t>(b)] = perm_sigma(b, k);
    std::sort(col.begin(), col.end());
    out.thresholds(k) = col[static_cast<std::size_t>(rank95)];
  }
  int K = 0;
  for (Eigen::Index k = 0; k < m; ++k) {
    if (sigma(k) > out.thresholds(k)) {
      ++K;
    } else {
      break;
    }
  }
  out.K = K;
  return out;
}

}  // namespace missfactor
