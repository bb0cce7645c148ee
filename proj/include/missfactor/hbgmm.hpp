#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "missfactor/errors.hpp"
#include "missfactor/gmm.hpp"
#include "missfactor/rng.hpp"

namespace missfactor {

struct MechanismPrior {
  Eigen::Vector2d mu = Eigen::Vector2d::Zero();  // mean of (log alpha, delta)
  Eigen::Matrix2d U = Eigen::Matrix2d::Identity();
};

namespace detail {

inline Eigen::Matrix2d floor_eigenvalues(const Eigen::Matrix2d& M,
                                         double floor_val = 1e-6) {
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix2d> es(
      0.5 * (M + M.transpose()));
  Eigen::Vector2d ev = es.eigenvalues().cwiseMax(floor_val);
  return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

// Sampling covariance of (log alpha_hat, delta_hat): the delta-method
// transform of V_hat, divided by n since V_hat is the sqrt(n)-scaled limit.
inline Eigen::Matrix2d estimate_scale_cov(const GmmFit& fit) {
  Eigen::Matrix2d D = Eigen::Matrix2d::Identity();
  D(0, 0) = 1.0 / fit.alpha;
  return D * fit.V * D / static_cast<double>(fit.n_total);
}

}  // namespace detail

// Empirical-Bayes prior over (log alpha, delta): mu_hat is the sample mean of
// the GMM estimates; U_hat maximizes the product of marginal likelihoods
// N(theta_hat_g | mu_hat, R_g + U), fit by EM for a random-effects
// meta-analysis with an eigenvalue floor of 1e-6.
inline MechanismPrior estimate_prior(const std::vector<GmmFit>& fits,
                                     int max_iter = 50, double tol = 1e-8) {
  std::vector<Eigen::Vector2d> theta;
  std::vector<Eigen::Matrix2d> R;
  for (const auto& f : fits) {
    if (!f.converged || !(f.alpha > 0.0)) continue;
    theta.emplace_back(std::log(f.alpha), f.delta);
    R.push_back(detail::floor_eigenvalues(detail::estimate_scale_cov(f), 1e-10));
  }
  const std::size_t G = theta.size();
  if (G < 2) {
    throw PriorDegenerateError("need at least 2 converged fits for the prior");
  }
  MechanismPrior prior;
  prior.mu.setZero();
  for (const auto& t : theta) prior.mu += t;
  prior.mu /= static_cast<double>(G);

  Eigen::Matrix2d U = Eigen::Matrix2d::Zero();
  for (const auto& t : theta) {
    U += (t - prior.mu) * (t - prior.mu).transpose();
  }
  U /= static_cast<double>(G);
  U = detail::floor_eigenvalues(U);

  auto loglik = [&](const Eigen::Matrix2d& Uc) {
    double ll = 0.0;
    for (std::size_t g = 0; g < G; ++g) {
      const Eigen::Matrix2d S = Uc + R[g];
      const double det = S.determinant();
      const Eigen::Vector2d d = theta[g] - prior.mu;
      ll += -0.5 * (std::log(det) + d.dot(S.inverse() * d));
    }
    return ll;
  };

  double prev = loglik(U);
  for (int it = 0; it < max_iter; ++it) {
    Eigen::Matrix2d next = Eigen::Matrix2d::Zero();
    for (std::size_t g = 0; g < G; ++g) {
      const Eigen::Matrix2d S = (U.inverse() + R[g].inverse()).inverse();
      const Eigen::Vector2d m =
          S * (U.inverse() * prior.mu + R[g].inverse() * theta[g]);
      next += S + (m - prior.mu) * (m - prior.mu).transpose();
    }
    next /= static_cast<double>(G);
    U = detail::floor_eigenvalues(next);
    const double cur = loglik(U);
    if (std::abs(cur - prev) < tol) break;
    prev = cur;
  }
  prior.U = U;
  return prior;
}

// log N3(h_bar; 0, Sigma/n) + log N2((log alpha, delta); mu, U).  Sigma gets
// the same ridge as the GMM weight build when ill conditioned.
inline double pseudo_posterior_logdensity(const Vector& y, const Vector& r,
                                          const Matrix& U_instr,
                                          const MissingnessLink& link,
                                          double log_alpha, double delta,
                                          const MechanismPrior& prior) {
  const double alpha = std::exp(log_alpha);
  const auto n = static_cast<double>(y.size());
  Eigen::Vector3d h_bar;
  Eigen::Matrix3d sigma;
  moment_mean_cov(y, r, U_instr, link, alpha, delta, h_bar, sigma);
  {
    Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> es(sigma);
    const double lo = es.eigenvalues().minCoeff();
    const double hi = es.eigenvalues().maxCoeff();
    if (!(lo > 0.0) || hi / lo > 1e12) {
      sigma += (1e-8 * sigma.trace() / 3.0) * Eigen::Matrix3d::Identity();
    }
  }
  Eigen::LLT<Eigen::Matrix3d> llt(sigma);
  if (llt.info() != Eigen::Success) {
    return -std::numeric_limits<double>::infinity();
  }
  const Eigen::Vector3d z = llt.matrixL().solve(h_bar);
  const double logdet_sigma =
      2.0 * std::log(llt.matrixL()(0, 0) * llt.matrixL()(1, 1) *
                     llt.matrixL()(2, 2));
  // covariance is sigma / n: logdet shifts by -3 log n, quadform scales by n
  const double log_lik =
      -0.5 * (3.0 * std::log(2.0 * 3.141592653589793238462643383280) +
              logdet_sigma - 3.0 * std::log(n) + n * z.squaredNorm());
  if (!std::isfinite(log_lik)) return -std::numeric_limits<double>::infinity();

  const Eigen::Vector2d d =
      Eigen::Vector2d(log_alpha, delta) - prior.mu;
  Eigen::LLT<Eigen::Matrix2d> pllt(prior.U);
  const Eigen::Vector2d pz = pllt.matrixL().solve(d);
  const double logdet_U =
      2.0 * std::log(pllt.matrixL()(0, 0) * pllt.matrixL()(1, 1));
  const double log_prior =
      -0.5 * (2.0 * std::log(2.0 * 3.141592653589793238462643383280) +
              logdet_U + pz.squaredNorm());
  return log_lik + log_prior;
}

struct McmcOptions {
  int iters = 5000;
  int burn = 1000;
  int thin = 2;
};

struct PosteriorSummary {
  double alpha_hat = 0.0;
  double delta_hat = 0.0;
  double log_alpha_hat = 0.0;
  Vector w_hat;  // r_i * E[1/psi]
  Vector v_hat;  // r_i * E[1/psi^2]
  double ess = 0.0;
  double acceptance_rate = 0.0;
  bool stuck = false;  // acceptance below 0.05 after adaptation
  int kept = 0;
};

namespace detail {

inline double ess_geyer(const std::vector<double>& x) {
  const std::size_t T = x.size();
  if (T < 4) return static_cast<double>(T);
  double mean = 0.0;
  for (double v : x) mean += v;
  mean /= static_cast<double>(T);
  double var = 0.0;
  for (double v : x) var += (v - mean) * (v - mean);
  var /= static_cast<double>(T);
  if (var <= 0.0) return static_cast<double>(T);
  const std::size_t max_lag = std::min<std::size_t>(T - 2, 400);
  auto rho = [&](std::size_t k) {
    double s = 0.0;
    for (std::size_t t = 0; t + k < T; ++t) {
      s += (x[t] - mean) * (x[t + k] - mean);
    }
    return s / (static_cast<double>(T) * var);
  };
  // Initial positive sequence on paired autocorrelations.
  double sum = 0.0;
  for (std::size_t k = 1; k + 1 <= max_lag; k += 2) {
    const double pair = rho(k) + rho(k + 1);
    if (pair <= 0.0) break;
    sum += pair;
  }
  const double denom = 1.0 + 2.0 * sum;
  return denom > 0.0 ? static_cast<double>(T) / denom : static_cast<double>(T);
}

}  // namespace detail

// Random-walk Metropolis on (log alpha, delta) under the pseudo-posterior,
// initialized at the GMM estimate.  The proposal is 2.38^2/2 times the
// estimate's sampling covariance, with Robbins-Monro scale adaptation toward
// 0.3 acceptance during burn-in, frozen afterwards.
inline PosteriorSummary sample_posterior(const Vector& y, const Vector& r,
                                         const Matrix& U_instr,
                                         const MissingnessLink& link,
                                         const MechanismPrior& prior,
                                         const GmmFit& fit,
                                         const McmcOptions& opts,
                                         std::uint64_t seed) {
  if (opts.iters <= opts.burn || opts.burn < 1 || opts.thin < 1) {
    throw ConfigError("mcmc options need iters > burn >= 1 and thin >= 1");
  }
  const Eigen::Index n = y.size();
  Eigen::Matrix2d P = (2.38 * 2.38 / 2.0) * detail::estimate_scale_cov(fit);
  Eigen::LLT<Eigen::Matrix2d> pllt(detail::floor_eigenvalues(P, 1e-12));
  Eigen::Matrix2d L = pllt.matrixL();

  RngStream rng(seed, {0x6d63ULL});
  Eigen::Vector2d theta(std::log(fit.alpha), fit.delta);
  double cur = pseudo_posterior_logdensity(y, r, U_instr, link, theta(0),
                                           theta(1), prior);
  double log_scale = 0.0;
  std::vector<double> la_kept, d_kept;
  la_kept.reserve(static_cast<std::size_t>((opts.iters - opts.burn) / opts.thin + 1));
  d_kept.reserve(la_kept.capacity());

  Vector w_acc = Vector::Zero(n), v_acc = Vector::Zero(n);
  double alpha_acc = 0.0, delta_acc = 0.0, la_acc = 0.0;
  int kept = 0, accepted_post = 0, post_iters = 0;

  for (int t = 0; t < opts.iters; ++t) {
    const Eigen::Vector2d z(rng.normal(), rng.normal());
    const Eigen::Vector2d prop = theta + std::exp(log_scale) * (L * z);
    const double cand = pseudo_posterior_logdensity(y, r, U_instr, link,
                                                    prop(0), prop(1), prior);
    bool accept = false;
    if (std::isfinite(cand)) {
      const double lr = cand - cur;
      accept = lr >= 0.0 || std::log(rng.uniform_pos()) < lr;
    }
    if (accept) {
      theta = prop;
      cur = cand;
    }
    if (t < opts.burn) {
      // Robbins-Monro on the log proposal scale, target acceptance 0.3.
      const double gamma = 1.0 / std::pow(static_cast<double>(t) + 1.0, 0.6);
      log_scale += gamma * ((accept ? 1.0 : 0.0) - 0.3);
      log_scale = std::min(std::max(log_scale, -10.0), 10.0);
    } else {
      ++post_iters;
      if (accept) ++accepted_post;
      if ((t - opts.burn) % opts.thin == 0) {
        ++kept;
        const double alpha = std::exp(theta(0));
        la_kept.push_back(theta(0));
        d_kept.push_back(theta(1));
        alpha_acc += alpha;
        la_acc += theta(0);
        delta_acc += theta(1);
        for (Eigen::Index i = 0; i < n; ++i) {
          if (r(i) == 0.0) continue;
          // floor keeps 1/psi^2 finite at extreme tail evaluations
          const double psi = std::max(
              psi_eval(link, alpha * (y(i) - theta(1))).psi, 1e-150);
          const double inv = 1.0 / psi;
          w_acc(i) += inv;
          v_acc(i) += inv * inv;
        }
      }
    }
  }

  PosteriorSummary out;
  out.kept = kept;
  const double nk = static_cast<double>(kept);
  out.alpha_hat = alpha_acc / nk;
  out.delta_hat = delta_acc / nk;
  out.log_alpha_hat = la_acc / nk;
  out.w_hat = Vector::Zero(n);
  out.v_hat = Vector::Zero(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    if (r(i) != 0.0) {
      out.w_hat(i) = w_acc(i) / nk;
      out.v_hat(i) = v_acc(i) / nk;
    }
  }
  out.acceptance_rate =
      post_iters > 0 ? static_cast<double>(accepted_post) /
                           static_cast<double>(post_iters)
                     : 0.0;
  out.stuck = out.acceptance_rate < 0.05;
  out.ess = std::min(detail::ess_geyer(la_kept), detail::ess_geyer(d_kept));
  return out;
}

}  // namespace missfactor
