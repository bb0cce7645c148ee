#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <limits>
#include <vector>

#include "missfactor/data.hpp"
#include "missfactor/errors.hpp"
#include "missfactor/link.hpp"
#include "missfactor/stats.hpp"

namespace missfactor {

struct MissingnessMechanism {
  MissingnessLink link;
  double alpha = 1.0;  // scale, > 0
  double delta = 0.0;  // location, log-intensity units

  void validate() const {
    if (!(alpha > 0.0)) throw ConfigError("mechanism scale alpha must be positive");
  }

  double observe_prob(double y) const {
    return psi_eval(link, alpha * (y - delta)).psi;
  }
};

// h{(y, r, A), (alpha, delta)} = (1, A')' (1 - r / psi{alpha (y - delta)}).
inline Eigen::Vector3d moment_h(double y, double r, double a1, double a2,
                                const MissingnessLink& link, double alpha,
                                double delta) {
  double f = 1.0;
  if (r != 0.0) {
    f = 1.0 - 1.0 / psi_eval(link, alpha * (y - delta)).psi;
  }
  return {f, f * a1, f * a2};
}

struct Moments {
  Eigen::Vector3d h_bar;
  Eigen::Matrix3d sigma;               // centered second moments
  Eigen::Matrix<double, 3, 2> gamma;   // d h_bar / d (alpha, delta)
};

// Sample mean, centered covariance, and analytic gradient of the moment
// function over the n cells.
inline Moments sample_moments(const Vector& y, const Vector& r,
                              const Matrix& U, const MissingnessLink& link,
                              double alpha, double delta) {
  const Eigen::Index n = y.size();
  if (n < 4) throw InsufficientDataError("sample_moments needs n >= 4");
  if (r.size() != n || U.rows() != n || U.cols() != 2) {
    throw InputError("sample_moments: shape mismatch");
  }
  Moments out;
  out.h_bar.setZero();
  out.sigma.setZero();
  out.gamma.setZero();
  Matrix H(n, 3);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double a1 = U(i, 0), a2 = U(i, 1);
    double f = 1.0;
    if (r(i) != 0.0) {
      const PsiValue pv = psi_eval(link, alpha * (y(i) - delta));
      f = 1.0 - 1.0 / pv.psi;
      // d/d alpha of -r/psi: r psidot (y - delta) / psi^2, similarly for delta
      const double s = pv.dpsi / (pv.psi * pv.psi);
      const double ga = s * (y(i) - delta);
      const double gd = s * (-alpha);
      out.gamma(0, 0) += ga;
      out.gamma(1, 0) += ga * a1;
      out.gamma(2, 0) += ga * a2;
      out.gamma(0, 1) += gd;
      out.gamma(1, 1) += gd * a1;
      out.gamma(2, 1) += gd * a2;
    }
    H(i, 0) = f;
    H(i, 1) = f * a1;
    H(i, 2) = f * a2;
    out.h_bar += H.row(i).transpose();
  }
  out.h_bar /= static_cast<double>(n);
  out.gamma /= static_cast<double>(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const Eigen::Vector3d d = H.row(i).transpose() - out.h_bar;
    out.sigma += d * d.transpose();
  }
  out.sigma /= static_cast<double>(n);
  return out;
}

// Mean and centered covariance of the moment function, allocation-free; the
// MCMC density evaluation calls this once per iteration.
inline void moment_mean_cov(const Vector& y, const Vector& r, const Matrix& U,
                            const MissingnessLink& link, double alpha,
                            double delta, Eigen::Vector3d& h_bar,
                            Eigen::Matrix3d& sigma) {
  const Eigen::Index n = y.size();
  double s0 = 0.0, s1 = 0.0, s2 = 0.0;
  double m00 = 0.0, m01 = 0.0, m02 = 0.0, m11 = 0.0, m12 = 0.0, m22 = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const double a1 = U(i, 0), a2 = U(i, 1);
    double f = 1.0;
    if (r(i) != 0.0) {
      f = 1.0 - 1.0 / psi_eval(link, alpha * (y(i) - delta)).psi;
    }
    const double f2 = f * f;
    s0 += f;
    s1 += f * a1;
    s2 += f * a2;
    m00 += f2;
    m01 += f2 * a1;
    m02 += f2 * a2;
    m11 += f2 * a1 * a1;
    m12 += f2 * a1 * a2;
    m22 += f2 * a2 * a2;
  }
  const double inv_n = 1.0 / static_cast<double>(n);
  h_bar << s0 * inv_n, s1 * inv_n, s2 * inv_n;
  sigma << m00, m01, m02, m01, m11, m12, m02, m12, m22;
  sigma *= inv_n;
  sigma -= h_bar * h_bar.transpose();
}

struct GmmFit {
  double alpha = 0.0, delta = 0.0;
  double alpha_first = 0.0, delta_first = 0.0;
  Eigen::Matrix3d W = Eigen::Matrix3d::Identity();
  Eigen::Matrix2d V = Eigen::Matrix2d::Zero();  // [Gamma' W Gamma]^{-1}
  double J = 0.0;
  int n_obs = 0;
  int n_total = 0;
  bool converged = false;
  bool ridged = false;      // W inverse needed a ridge
  double gamma_cond = 0.0;  // condition number of Gamma' W Gamma
};

namespace detail {

// Mean moment vector at (log_alpha, delta); the hot loop of the estimator.
struct MomentObjective {
  const Vector* y;
  const Vector* r;
  const Matrix* U;
  MissingnessLink link;
  Eigen::Matrix3d W;

  Eigen::Vector3d h_bar(double log_alpha, double delta) const {
    const double alpha = std::exp(log_alpha);
    const Eigen::Index n = y->size();
    double s0 = 0.0, s1 = 0.0, s2 = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      double f = 1.0;
      if ((*r)(i) != 0.0) {
        f = 1.0 - 1.0 / psi_eval(link, alpha * ((*y)(i) - delta)).psi;
      }
      s0 += f;
      s1 += f * (*U)(i, 0);
      s2 += f * (*U)(i, 1);
    }
    const double inv_n = 1.0 / static_cast<double>(n);
    return {s0 * inv_n, s1 * inv_n, s2 * inv_n};
  }

  double operator()(const Eigen::Vector2d& theta) const {
    const Eigen::Vector3d h = h_bar(theta(0), theta(1));
    return h.dot(W * h);
  }
};

struct NelderMeadResult {
  Eigen::Vector2d x;
  double f = std::numeric_limits<double>::infinity();
  bool converged = false;
};

inline NelderMeadResult nelder_mead_2d(
    const std::function<double(const Eigen::Vector2d&)>& f,
    const Eigen::Vector2d& start, const Eigen::Vector2d& step,
    double ftol = 1e-10, int max_iter = 500) {
  std::array<Eigen::Vector2d, 3> x{start, start, start};
  x[1](0) += step(0);
  x[2](1) += step(1);
  std::array<double, 3> fx{f(x[0]), f(x[1]), f(x[2])};
  auto order = [&]() {
    if (fx[0] > fx[1]) { std::swap(fx[0], fx[1]); std::swap(x[0], x[1]); }
    if (fx[1] > fx[2]) { std::swap(fx[1], fx[2]); std::swap(x[1], x[2]); }
    if (fx[0] > fx[1]) { std::swap(fx[0], fx[1]); std::swap(x[0], x[1]); }
  };
  order();
  NelderMeadResult out;
  for (int it = 0; it < max_iter; ++it) {
    if (std::abs(fx[2] - fx[0]) <= ftol * (std::abs(fx[0]) + ftol)) {
      out.converged = true;
      break;
    }
    const Eigen::Vector2d centroid = 0.5 * (x[0] + x[1]);
    const Eigen::Vector2d xr = centroid + (centroid - x[2]);
    const double fr = f(xr);
    if (fr < fx[0]) {
      const Eigen::Vector2d xe = centroid + 2.0 * (centroid - x[2]);
      const double fe = f(xe);
      if (fe < fr) { x[2] = xe; fx[2] = fe; } else { x[2] = xr; fx[2] = fr; }
    } else if (fr < fx[1]) {
      x[2] = xr;
      fx[2] = fr;
    } else {
      const Eigen::Vector2d xc = centroid + 0.5 * (x[2] - centroid);
      const double fc = f(xc);
      if (fc < fx[2]) {
        x[2] = xc;
        fx[2] = fc;
      } else {
        x[1] = x[0] + 0.5 * (x[1] - x[0]);
        x[2] = x[0] + 0.5 * (x[2] - x[0]);
        fx[1] = f(x[1]);
        fx[2] = f(x[2]);
      }
    }
    order();
  }
  out.x = x[0];
  out.f = fx[0];
  return out;
}

struct GmmStage {
  Eigen::Vector2d theta;  // (log alpha, delta)
  double q = std::numeric_limits<double>::infinity();
  bool converged = false;
};

inline GmmStage gmm_stage(const MomentObjective& obj,
                          const std::vector<double>& la_grid,
                          const std::vector<double>& d_grid,
                          const Eigen::Vector2d& step,
                          const std::vector<Eigen::Vector2d>& extra_starts) {
  struct Cand {
    Eigen::Vector2d x;
    double f;
  };
  std::vector<Cand> cands;
  cands.reserve(la_grid.size() * d_grid.size());
  for (double la : la_grid) {
    for (double d : d_grid) {
      const Eigen::Vector2d th{la, d};
      cands.push_back({th, obj(th)});
    }
  }
  std::sort(cands.begin(), cands.end(),
            [](const Cand& a, const Cand& b) { return a.f < b.f; });
  std::vector<Eigen::Vector2d> starts;
  for (std::size_t k = 0; k < cands.size() && starts.size() < 3; ++k) {
    starts.push_back(cands[k].x);
  }
  for (const auto& s : extra_starts) starts.push_back(s);

  GmmStage best;
  for (const auto& s : starts) {
    const auto r = nelder_mead_2d([&obj](const Eigen::Vector2d& t) { return obj(t); },
                                  s, step);
    if (r.f < best.q) {
      best.q = r.f;
      best.theta = r.x;
      best.converged = r.converged;
    }
  }
  return best;
}

}  // namespace detail

// Two-step GMM for one feature's mechanism.  Step one minimizes h_bar' h_bar
// over (log alpha, delta) via a coarse grid plus Nelder-Mead refinement from
// the best three grid points; step two rebuilds the weight matrix from the
// first-step estimate and re-optimizes.
inline GmmFit two_step_gmm(const Vector& y, const Vector& r, const Matrix& U,
                           const MissingnessLink& link) {
  const Eigen::Index n = y.size();
  if (r.size() != n || U.rows() != n || U.cols() != 2) {
    throw InputError("two_step_gmm: shape mismatch");
  }
  std::vector<double> y_obs;
  y_obs.reserve(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) {
    if (r(i) != 0.0) y_obs.push_back(y(i));
  }
  const auto n_obs = static_cast<Eigen::Index>(y_obs.size());
  if (n_obs == n) {
    throw InsufficientMissingnessError(
        "fully observed feature has no identifiable mechanism");
  }
  if (n_obs < 10) {
    throw InsufficientDataError("two_step_gmm needs at least 10 observed cells");
  }
  std::sort(y_obs.begin(), y_obs.end());

  std::vector<double> la_grid(21), d_grid(21);
  for (int k = 0; k < 21; ++k) {
    la_grid[static_cast<std::size_t>(k)] = -3.0 + 6.0 * k / 20.0;
    const double prob = 0.01 + (0.50 - 0.01) * k / 20.0;
    d_grid[static_cast<std::size_t>(k)] = quantile_sorted(y_obs, prob);
  }
  double mean = 0.0;
  for (double v : y_obs) mean += v;
  mean /= static_cast<double>(n_obs);
  double var = 0.0;
  for (double v : y_obs) var += (v - mean) * (v - mean);
  var /= std::max<double>(1.0, static_cast<double>(n_obs) - 1.0);
  const Eigen::Vector2d step{0.25, 0.25 * std::max(std::sqrt(var), 1e-3)};

  detail::MomentObjective obj{&y, &r, &U, link, Eigen::Matrix3d::Identity()};
  const auto stage1 = detail::gmm_stage(obj, la_grid, d_grid, step, {});

  GmmFit fit;
  fit.alpha_first = std::exp(stage1.theta(0));
  fit.delta_first = stage1.theta(1);
  fit.n_obs = static_cast<int>(n_obs);
  fit.n_total = static_cast<int>(n);

  // Second-step weight: inverse of the uncentered moment outer product.
  Eigen::Matrix3d S = Eigen::Matrix3d::Zero();
  {
    const double alpha1 = fit.alpha_first, delta1 = fit.delta_first;
    for (Eigen::Index i = 0; i < n; ++i) {
      const Eigen::Vector3d h =
          moment_h(y(i), r(i), U(i, 0), U(i, 1), link, alpha1, delta1);
      S += h * h.transpose();
    }
    S /= static_cast<double>(n);
  }
  {
    Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> es(S);
    const double lo = es.eigenvalues().minCoeff();
    const double hi = es.eigenvalues().maxCoeff();
    if (!(lo > 0.0) || hi / lo > 1e12) {
      S += (1e-8 * S.trace() / 3.0) * Eigen::Matrix3d::Identity();
      fit.ridged = true;
    }
  }
  obj.W = S.inverse();
  const auto stage2 =
      detail::gmm_stage(obj, la_grid, d_grid, step, {stage1.theta});

  fit.alpha = std::exp(stage2.theta(0));
  fit.delta = stage2.theta(1);
  fit.converged = stage1.converged && stage2.converged;
  fit.W = obj.W;

  const Moments mom = sample_moments(y, r, U, link, fit.alpha, fit.delta);
  fit.J = static_cast<double>(n) * mom.h_bar.dot(fit.W * mom.h_bar);
  const Eigen::Matrix2d A = mom.gamma.transpose() * fit.W * mom.gamma;
  {
    Eigen::SelfAdjointEigenSolver<Eigen::Matrix2d> es(A);
    const double lo = std::abs(es.eigenvalues().minCoeff());
    const double hi = std::abs(es.eigenvalues().maxCoeff());
    fit.gamma_cond = lo > 0.0 ? hi / lo : std::numeric_limits<double>::infinity();
  }
  fit.V = A.inverse();
  return fit;
}

}  // namespace missfactor
