#include <catch2/catch_amalgamated.hpp>

#include "missfactor/gmm.hpp"
#include "missfactor/rng.hpp"

#include <cmath>

using namespace missfactor;

namespace {

struct Draws {
  Vector y, r;
  Matrix U;
};

// Selection on the level: instruments predict y, observation follows
// psi(alpha (y - delta)).
Draws draw(int n, const MissingnessLink& link, double alpha, double delta,
           std::uint64_t seed, double b1 = 1.2, double b2 = 0.8,
           double noise = 1.0) {
  RngStream rng(seed);
  Draws d;
  d.y = Vector(n);
  d.r = Vector(n);
  d.U = Matrix(n, 2);
  for (int i = 0; i < n; ++i) {
    d.U(i, 0) = rng.normal();
    d.U(i, 1) = rng.normal();
    double y = delta + b1 * d.U(i, 0) + b2 * d.U(i, 1) + noise * rng.normal();
    const bool obs = rng.bernoulli(psi_eval(link, alpha * (y - delta)).psi);
    d.r(i) = obs ? 1.0 : 0.0;
    d.y(i) = obs ? y : 0.0;
  }
  return d;
}

}  // namespace

TEST_CASE("moment function vanishes in mean at the truth", "[gmm]") {
  const auto link = logistic_link();
  const double alpha = 1.0, delta = 16.0;
  const int n = 150000;
  const auto d = draw(n, link, alpha, delta, 31);
  Eigen::Vector3d sum = Eigen::Vector3d::Zero(), sq = Eigen::Vector3d::Zero();
  for (int i = 0; i < n; ++i) {
    const Eigen::Vector3d h =
        moment_h(d.y(i), d.r(i), d.U(i, 0), d.U(i, 1), link, alpha, delta);
    sum += h;
    sq += h.cwiseProduct(h);
  }
  const Eigen::Vector3d mean = sum / n;
  for (int j = 0; j < 3; ++j) {
    const double sd = std::sqrt(sq(j) / n - mean(j) * mean(j));
    REQUIRE(std::abs(mean(j)) < 4.0 * sd / std::sqrt(double(n)));
  }
}

TEST_CASE("sample moments match a direct loop", "[gmm]") {
  const auto link = student_t_link(4.0);
  const auto d = draw(200, link, 1.3, 16.0, 37);
  const auto mom = sample_moments(d.y, d.r, d.U, link, 1.1, 15.5);
  Eigen::Vector3d h_bar = Eigen::Vector3d::Zero();
  for (int i = 0; i < 200; ++i) {
    h_bar += moment_h(d.y(i), d.r(i), d.U(i, 0), d.U(i, 1), link, 1.1, 15.5);
  }
  h_bar /= 200.0;
  REQUIRE((mom.h_bar - h_bar).cwiseAbs().maxCoeff() < 1e-12);
  // sigma is the centered second moment
  Eigen::Matrix3d S = Eigen::Matrix3d::Zero();
  for (int i = 0; i < 200; ++i) {
    const Eigen::Vector3d dlt =
        moment_h(d.y(i), d.r(i), d.U(i, 0), d.U(i, 1), link, 1.1, 15.5) - h_bar;
    S += dlt * dlt.transpose();
  }
  S /= 200.0;
  REQUIRE((mom.sigma - S).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("allocation-free moments agree with the struct version", "[gmm]") {
  const auto link = logistic_link();
  const auto d = draw(150, link, 0.9, 16.0, 41);
  const auto mom = sample_moments(d.y, d.r, d.U, link, 0.8, 15.8);
  Eigen::Vector3d h_bar;
  Eigen::Matrix3d sigma;
  moment_mean_cov(d.y, d.r, d.U, link, 0.8, 15.8, h_bar, sigma);
  REQUIRE((mom.h_bar - h_bar).cwiseAbs().maxCoeff() < 1e-12);
  REQUIRE((mom.sigma - sigma).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("analytic moment jacobian matches finite differences", "[gmm]") {
  RngStream rng(43);
  for (const auto& link :
       {logistic_link(), probit_link(), student_t_link(4.0)}) {
    const auto d = draw(300, link, 1.0, 16.0, 47);
    for (int t = 0; t < 12; ++t) {
      const double alpha = std::exp(rng.normal(0.0, 0.5));
      const double delta = 16.0 + rng.normal(0.0, 0.8);
      const auto mom = sample_moments(d.y, d.r, d.U, link, alpha, delta);
      const double ha = 1e-6 * std::max(1.0, alpha), hd = 1e-6;
      const Eigen::Vector3d dda =
          (sample_moments(d.y, d.r, d.U, link, alpha + ha, delta).h_bar -
           sample_moments(d.y, d.r, d.U, link, alpha - ha, delta).h_bar) /
          (2.0 * ha);
      const Eigen::Vector3d ddd =
          (sample_moments(d.y, d.r, d.U, link, alpha, delta + hd).h_bar -
           sample_moments(d.y, d.r, d.U, link, alpha, delta - hd).h_bar) /
          (2.0 * hd);
      REQUIRE((mom.gamma.col(0) - dda).norm() < 1e-5 * (1.0 + dda.norm()));
      REQUIRE((mom.gamma.col(1) - ddd).norm() < 1e-5 * (1.0 + ddd.norm()));
    }
  }
}

TEST_CASE("two-step estimate recovers the planted mechanism", "[gmm]") {
  const auto link = logistic_link();
  const auto d = draw(20000, link, 1.0, 16.0, 53);
  const auto fit = two_step_gmm(d.y, d.r, d.U, link);
  REQUIRE(fit.converged);
  REQUIRE(std::abs(fit.alpha - 1.0) < 0.1);
  REQUIRE(std::abs(fit.delta - 16.0) < 0.15);
  REQUIRE(fit.J >= 0.0);
  REQUIRE(fit.n_total == 20000);
  REQUIRE(fit.n_obs < 20000);
  // V is a symmetric PSD 2x2
  REQUIRE(fit.V(0, 1) == Catch::Approx(fit.V(1, 0)).margin(1e-12));
  REQUIRE(fit.V(0, 0) > 0.0);
  REQUIRE(fit.V.determinant() >= -1e-12);
}

TEST_CASE("heavy-tail analysis link also recovers its truth", "[gmm]") {
  const auto link = student_t_link(4.0);
  const auto d = draw(20000, link, std::exp(0.3466), 16.0, 59);
  const auto fit = two_step_gmm(d.y, d.r, d.U, link);
  REQUIRE(fit.converged);
  REQUIRE(std::abs(std::log(fit.alpha) - 0.3466) < 0.12);
  REQUIRE(std::abs(fit.delta - 16.0) < 0.15);
}

TEST_CASE("the fit is a deterministic function of the data", "[gmm]") {
  const auto d = draw(800, logistic_link(), 1.1, 16.0, 61);
  const auto a = two_step_gmm(d.y, d.r, d.U, logistic_link());
  const auto b = two_step_gmm(d.y, d.r, d.U, logistic_link());
  REQUIRE(a.alpha == b.alpha);
  REQUIRE(a.delta == b.delta);
  REQUIRE(a.J == b.J);
}

TEST_CASE("degenerate missingness patterns are rejected", "[gmm]") {
  auto d = draw(200, logistic_link(), 1.0, 16.0, 67);
  d.r.setOnes();
  REQUIRE_THROWS_AS(two_step_gmm(d.y, d.r, d.U, logistic_link()),
                    InsufficientMissingnessError);

  auto thin = draw(200, logistic_link(), 1.0, 16.0, 71);
  for (int i = 9; i < 200; ++i) {
    thin.r(i) = 0.0;
    thin.y(i) = 0.0;
  }
  REQUIRE_THROWS_AS(two_step_gmm(thin.y, thin.r, thin.U, logistic_link()),
                    InsufficientDataError);
}

TEST_CASE("simplex search solves a quadratic", "[gmm]") {
  const auto res = detail::nelder_mead_2d(
      [](const Eigen::Vector2d& v) {
        return (v(0) - 1.0) * (v(0) - 1.0) + (v(1) + 2.0) * (v(1) + 2.0);
      },
      Eigen::Vector2d(0.0, 0.0), Eigen::Vector2d(0.5, 0.5), 1e-12, 500);
  REQUIRE(res.converged);
  REQUIRE(res.x(0) == Catch::Approx(1.0).margin(1e-5));
  REQUIRE(res.x(1) == Catch::Approx(-2.0).margin(1e-5));
}

TEST_CASE("observation probability uses the stored mechanism", "[gmm]") {
  MissingnessMechanism mech;
  mech.link = student_t_link(4.0);
  mech.alpha = 2.0;
  mech.delta = 16.0;
  REQUIRE(mech.observe_prob(16.0) == Catch::Approx(0.5).epsilon(1e-14));
  REQUIRE(mech.observe_prob(18.0) > 0.95);
  REQUIRE(mech.observe_prob(14.0) < 0.05);
}
