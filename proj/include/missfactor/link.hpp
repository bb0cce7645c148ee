#pragma once

#include <algorithm>
#include <cmath>
#include <string>

#include <boost/math/distributions/students_t.hpp>

#include "missfactor/errors.hpp"

namespace missfactor {

// Observation model: P(feature g observed in sample i | y) = psi(alpha_g * (y - delta_g)).
enum class LinkFamily { Logistic, Probit, TCdf };

struct MissingnessLink {
  LinkFamily family = LinkFamily::TCdf;
  double nu = 4.0;  // degrees of freedom, TCdf only
};

inline MissingnessLink logistic_link() { return {LinkFamily::Logistic, 0.0}; }
inline MissingnessLink probit_link() { return {LinkFamily::Probit, 0.0}; }

inline MissingnessLink student_t_link(double nu) {
  if (!(nu > 0.0)) throw ConfigError("TCdf link requires nu > 0");
  return {LinkFamily::TCdf, nu};
}

inline std::string link_name(const MissingnessLink& link) {
  switch (link.family) {
    case LinkFamily::Logistic:
      return "logistic";
    case LinkFamily::Probit:
      return "probit";
    case LinkFamily::TCdf:
      return "tcdf(" + std::to_string(link.nu) + ")";
  }
  return "?";
}

struct PsiValue {
  double psi;   // CDF value, clamped away from {0, 1}
  double dpsi;  // density
};

inline constexpr double kPsiFloor = 1e-300;
inline constexpr double kPsiCeil = 1.0 - 1e-16;

// CDF and density of the link at x.  The CDF is clamped to
// [1e-300, 1 - 1e-16] so 1/psi stays finite in the moment function.
inline PsiValue psi_eval(const MissingnessLink& link, double x) {
  double p, d;
  switch (link.family) {
    case LinkFamily::Logistic: {
      if (x >= 0.0) {
        const double e = std::exp(-x);
        p = 1.0 / (1.0 + e);
        d = e * p * p;
      } else {
        const double e = std::exp(x);
        p = e / (1.0 + e);
        d = p * (1.0 - p);
      }
      break;
    }
    case LinkFamily::Probit: {
      p = 0.5 * std::erfc(-x * 0.7071067811865475244);
      d = 0.39894228040143267794 * std::exp(-0.5 * x * x);
      break;
    }
    case LinkFamily::TCdf: {
      if (link.nu == 4.0) {
        // F4(x) = 1/2 + (3/4) s - (1/4) s^3 with s = x / sqrt(x^2 + 4).
        const double s = x / std::sqrt(x * x + 4.0);
        p = 0.5 + s * (0.75 - 0.25 * s * s);
        const double b = 1.0 + 0.25 * x * x;
        d = 0.375 / (b * b * std::sqrt(b));
      } else {
        const boost::math::students_t_distribution<double> dist(link.nu);
        p = boost::math::cdf(dist, x);
        d = boost::math::pdf(dist, x);
      }
      break;
    }
    default:
      throw NumericError("unknown link family");
  }
  p = std::min(std::max(p, kPsiFloor), kPsiCeil);
  return {p, d};
}

// Solves V(Z) = 1 for Z with CDF psi(exp(mu) * x), i.e. the latent scale that
// standardizes the simulated selection variable.
inline double mu_alpha_for_unit_variance(const MissingnessLink& link) {
  switch (link.family) {
    case LinkFamily::Logistic:
      // V = (pi^2 / 3) exp(-2 mu)
      return std::log(3.141592653589793238462643383280 / std::sqrt(3.0));
    case LinkFamily::Probit:
      return 0.0;
    case LinkFamily::TCdf:
      if (link.nu <= 2.0) {
        throw InfiniteVarianceError(
            "TCdf link with nu <= 2 has no finite variance to standardize");
      }
      // V = (nu / (nu - 2)) exp(-2 mu)
      return 0.5 * std::log(link.nu / (link.nu - 2.0));
  }
  throw NumericError("unknown link family");
}

}  // namespace missfactor
