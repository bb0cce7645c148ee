#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <vector>

#include <boost/math/distributions/students_t.hpp>

#include "missfactor/data.hpp"
#include "missfactor/errors.hpp"

namespace missfactor {

inline double normal_cdf(double x) {
  return 0.5 * std::erfc(-x * 0.7071067811865475244);
}

inline double normal_two_sided_p(double z) {
  if (!std::isfinite(z)) return std::isnan(z) ? 1.0 : 0.0;
  return std::erfc(std::abs(z) * 0.7071067811865475244);
}

inline double student_t_two_sided_p(double t, double df) {
  if (!std::isfinite(t)) return std::isnan(t) ? 1.0 : 0.0;
  const boost::math::students_t_distribution<double> dist(df);
  return 2.0 * boost::math::cdf(dist, -std::abs(t));
}

// Type-7 quantile (linear interpolation) of an already sorted vector.
inline double quantile_sorted(const std::vector<double>& x, double q) {
  if (x.empty()) throw EmptyInputError("quantile of empty vector");
  if (q <= 0.0) return x.front();
  if (q >= 1.0) return x.back();
  const double h = q * static_cast<double>(x.size() - 1);
  const std::size_t lo = static_cast<std::size_t>(std::floor(h));
  const double w = h - static_cast<double>(lo);
  if (lo + 1 >= x.size()) return x.back();
  return (1.0 - w) * x[lo] + w * x[lo + 1];
}

struct OlsFit {
  Vector coef;
  Vector se;
  Vector t;
  Vector p;
  Matrix cov;     // sigma2 * (X'RX)^{-1}
  double sigma2 = 0.0;
  double df = 0.0;
  double n_obs = 0.0;
};

// OLS of y on X restricted to cells with r = 1.  df = #observed - q.
inline OlsFit ols_masked(const Vector& y, const Matrix& X, const Vector& r) {
  const Eigen::Index n = y.size(), q = X.cols();
  if (X.rows() != n || r.size() != n) {
    throw InputError("ols_masked: shape mismatch");
  }
  const double n_obs = r.sum();
  if (n_obs < static_cast<double>(q) + 1.0) {
    throw InsufficientDataError("ols_masked: fewer than q + 1 observed cells");
  }
  const Matrix Xr = r.asDiagonal() * X;          // rows zeroed where missing
  const Matrix xtx = Xr.transpose() * X;         // X'RX (R idempotent)
  const Vector xty = Xr.transpose() * y;
  Eigen::LDLT<Matrix> ldlt(xtx);
  {
    Eigen::ColPivHouseholderQR<Matrix> qr(Xr);
    if (qr.rank() < q) {
      throw SingularDesignError("ols_masked: design is rank deficient on observed cells");
    }
  }
  OlsFit fit;
  fit.coef = ldlt.solve(xty);
  const Vector resid = r.asDiagonal() * (y - X * fit.coef);
  fit.n_obs = n_obs;
  fit.df = n_obs - static_cast<double>(q);
  fit.sigma2 = resid.squaredNorm() / fit.df;
  const Matrix xtx_inv = ldlt.solve(Matrix::Identity(q, q));
  fit.cov = fit.sigma2 * xtx_inv;
  fit.se = fit.cov.diagonal().array().max(0.0).sqrt();
  fit.t = Vector(q);
  fit.p = Vector(q);
  for (Eigen::Index j = 0; j < q; ++j) {
    fit.t(j) = fit.se(j) > 0.0 ? fit.coef(j) / fit.se(j)
                               : std::numeric_limits<double>::infinity();
    fit.p(j) = student_t_two_sided_p(fit.t(j), fit.df);
  }
  return fit;
}

struct LogisticFit {
  Vector coef;
  bool converged = false;
  bool clipped = false;  // hit the +-15 separation guard
  int iterations = 0;
};

// IRLS logistic regression of a 0/1 response on X.  Coefficients are clipped
// to [-15, 15]; outside that range the fitted probabilities are numerically
// 0/1 anyway and the clip keeps separation from blowing up the weights.
inline LogisticFit logistic_fit(const Vector& y, const Matrix& X,
                                int max_iter = 100, double tol = 1e-10) {
  const Eigen::Index n = y.size(), q = X.cols();
  if (X.rows() != n) throw InputError("logistic_fit: shape mismatch");
  double y_sum = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    if (y(i) != 0.0 && y(i) != 1.0) {
      throw InputError("logistic_fit: response must be 0/1");
    }
    y_sum += y(i);
  }
  if (y_sum == 0.0 || y_sum == static_cast<double>(n)) {
    throw DegenerateLabelsError("logistic_fit: response is constant");
  }
  {
    Eigen::ColPivHouseholderQR<Matrix> qr(X);
    if (qr.rank() < q) {
      throw SingularDesignError("logistic_fit: design is rank deficient");
    }
  }
  LogisticFit fit;
  fit.coef = Vector::Zero(q);
  const double clip = 15.0;
  for (int it = 0; it < max_iter; ++it) {
    fit.iterations = it + 1;
    const Vector eta = X * fit.coef;
    Vector mu(n), w(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      const double e = eta(i);
      const double m = e >= 0.0 ? 1.0 / (1.0 + std::exp(-e))
                                : std::exp(e) / (1.0 + std::exp(e));
      mu(i) = m;
      w(i) = std::max(m * (1.0 - m), 1e-10);
    }
    const Vector score = X.transpose() * (y - mu);
    const Matrix H = X.transpose() * w.asDiagonal() * X;
    const Vector step = H.ldlt().solve(score);
    Vector next = fit.coef + step;
    bool hit = false;
    for (Eigen::Index j = 0; j < q; ++j) {
      if (next(j) > clip) { next(j) = clip; hit = true; }
      if (next(j) < -clip) { next(j) = -clip; hit = true; }
    }
    const double delta = (next - fit.coef).norm();
    fit.coef = next;
    fit.clipped = fit.clipped || hit;
    if (delta < tol * (1.0 + fit.coef.norm())) {
      fit.converged = true;
      break;
    }
  }
  return fit;
}

struct QvalueResult {
  std::vector<double> q;
  double pi0 = 1.0;
};

// Storey q-values.  pi0 comes from a quadratic fit of pi0(lambda) over
// lambda = 0.05, ..., 0.95 evaluated at 0.95, unless the caller pins it.
inline QvalueResult storey_qvalues(const std::vector<double>& p,
                                   double forced_pi0 = -1.0) {
  const std::size_t m = p.size();
  if (m == 0) throw EmptyInputError("storey_qvalues: no p-values");
  for (double v : p) {
    if (!(v >= 0.0 && v <= 1.0)) {
      throw InputError("storey_qvalues: p-values must lie in [0, 1]");
    }
  }
  QvalueResult out;
  if (forced_pi0 >= 0.0) {
    out.pi0 = forced_pi0;
  } else {
    // pi0(lambda) = #{p > lambda} / (m (1 - lambda))
    std::vector<double> lam, pi0l;
    for (int k = 1; k <= 19; ++k) {
      const double l = 0.05 * k;
      std::size_t cnt = 0;
      for (double v : p) {
        if (v > l) ++cnt;
      }
      lam.push_back(l);
      pi0l.push_back(static_cast<double>(cnt) /
                     (static_cast<double>(m) * (1.0 - l)));
    }
    Matrix A(19, 3);
    Vector b(19);
    for (int k = 0; k < 19; ++k) {
      A(k, 0) = 1.0;
      A(k, 1) = lam[static_cast<std::size_t>(k)];
      A(k, 2) = lam[static_cast<std::size_t>(k)] * lam[static_cast<std::size_t>(k)];
      b(k) = pi0l[static_cast<std::size_t>(k)];
    }
    const Vector c = (A.transpose() * A).ldlt().solve(A.transpose() * b);
    const double at = 0.95;
    double pi0 = c(0) + c(1) * at + c(2) * at * at;
    pi0 = std::min(1.0, std::max(pi0, 1.0 / static_cast<double>(m)));
    out.pi0 = pi0;
  }
  std::vector<std::size_t> ord(m);
  std::iota(ord.begin(), ord.end(), std::size_t{0});
  std::sort(ord.begin(), ord.end(),
            [&](std::size_t a, std::size_t b) { return p[a] < p[b]; });
  std::vector<double> q(m);
  double running = 1.0;
  for (std::size_t k = m; k-- > 0;) {
    const double raw = out.pi0 * static_cast<double>(m) * p[ord[k]] /
                       static_cast<double>(k + 1);
    running = std::min(running, std::min(raw, 1.0));
    q[ord[k]] = running;
  }
  out.q = std::move(q);
  return out;
}

// Grenander estimate of a nonincreasing density on [0, 1]: the left slope of
// the least concave majorant of the ECDF, evaluated at each point.
inline std::vector<double> grenander_decreasing_density(
    const std::vector<double>& p) {
  const std::size_t m = p.size();
  if (m == 0) throw EmptyInputError("grenander: no p-values");
  std::vector<std::size_t> ord(m);
  std::iota(ord.begin(), ord.end(), std::size_t{0});
  std::sort(ord.begin(), ord.end(),
            [&](std::size_t a, std::size_t b) { return p[a] < p[b]; });
  // Pool adjacent violators on the segments between consecutive order stats.
  struct Seg {
    double width, mass;
  };
  std::vector<Seg> stack;
  std::vector<std::size_t> count;  // points covered per segment
  double prev = 0.0;
  for (std::size_t k = 0; k < m; ++k) {
    const double x = std::min(std::max(p[ord[k]], 0.0), 1.0);
    Seg s{x - prev, 1.0 / static_cast<double>(m)};
    std::size_t c = 1;
    prev = x;
    auto slope = [](const Seg& t) {
      return t.width > 0.0 ? t.mass / t.width
                           : std::numeric_limits<double>::infinity();
    };
    while (!stack.empty() && slope(stack.back()) <= slope(s)) {
      s.width += stack.back().width;
      s.mass += stack.back().mass;
      c += count.back();
      stack.pop_back();
      count.pop_back();
    }
    stack.push_back(s);
    count.push_back(c);
  }
  std::vector<double> f(m);
  std::size_t k = 0;
  for (std::size_t seg = 0; seg < stack.size(); ++seg) {
    const double slope = stack[seg].width > 0.0
                             ? stack[seg].mass / stack[seg].width
                             : std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < count[seg]; ++c) f[ord[k++]] = slope;
  }
  return f;
}

struct LocalFdrResult {
  std::vector<double> lfdr;
  double pi0 = 1.0;
  bool fallback = false;  // too few p-values for the density estimate
};

// lfdr(p) = min(1, pi0 / f(p)) with f the Grenander density.  Below 50
// p-values the density estimate is unusable, so everything falls back to the
// constant pi0.
inline LocalFdrResult local_fdr(const std::vector<double>& p,
                                double forced_pi0 = -1.0) {
  const std::size_t m = p.size();
  if (m == 0) throw EmptyInputError("local_fdr: no p-values");
  LocalFdrResult out;
  out.pi0 = forced_pi0 >= 0.0 ? forced_pi0 : storey_qvalues(p).pi0;
  if (m < 50) {
    out.fallback = true;
    out.lfdr.assign(m, std::min(out.pi0, 1.0));
    return out;
  }
  const auto f = grenander_decreasing_density(p);
  out.lfdr.resize(m);
  for (std::size_t k = 0; k < m; ++k) {
    out.lfdr[k] = f[k] > 0.0 ? std::min(1.0, out.pi0 / f[k]) : 1.0;
  }
  return out;
}

}  // namespace missfactor
