#include <catch2/catch_amalgamated.hpp>

#include "missfactor/latent.hpp"
#include "missfactor/rng.hpp"

#include <cmath>
#include <numeric>
#include <vector>

using namespace missfactor;

namespace {

double subspace_gap(const Matrix& A, const Matrix& B) {
  Eigen::HouseholderQR<Matrix> qa(A), qb(B);
  const Matrix Qa = qa.householderQ() * Matrix::Identity(A.rows(), A.cols());
  const Matrix Qb = qb.householderQ() * Matrix::Identity(B.rows(), B.cols());
  return (Qa * Qa.transpose() - Qb * Qb.transpose()).norm() /
         std::sqrt(2.0 * static_cast<double>(A.cols()));
}

// Orthogonal to X, scaled so C'C = n I.
Matrix constrained_factors(const Matrix& X, int K, RngStream& rng) {
  const Eigen::Index n = X.rows();
  Matrix C(n, K);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (int k = 0; k < K; ++k) C(i, k) = rng.normal();
  }
  Eigen::HouseholderQR<Matrix> xqr(X);
  const Matrix Qx = xqr.householderQ() * Matrix::Identity(n, X.cols());
  C -= Qx * (Qx.transpose() * C);
  Eigen::HouseholderQR<Matrix> cqr(C);
  return std::sqrt(static_cast<double>(n)) *
         (cqr.householderQ() * Matrix::Identity(n, K));
}

struct Planted {
  Matrix Y, omega, X, C2;
  Matrix beta, ell;  // p x d, p x K
  std::vector<int> features;
};

Planted plant(int p, int n, int K, double hole_rate, std::uint64_t seed) {
  RngStream rng(seed);
  Planted out;
  out.X = Matrix(n, 2);
  out.X.col(0).setOnes();
  for (int i = 0; i < n; ++i) out.X(i, 1) = rng.normal();
  out.C2 = constrained_factors(out.X, K, rng);
  out.beta = Matrix(p, 2);
  out.ell = Matrix(p, K);
  out.Y = Matrix(p, n);
  out.omega = Matrix::Ones(p, n);
  for (int g = 0; g < p; ++g) {
    for (int j = 0; j < 2; ++j) out.beta(g, j) = rng.normal();
    for (int k = 0; k < K; ++k) out.ell(g, k) = rng.normal();
    for (int i = 0; i < n; ++i) {
      out.Y(g, i) = out.X.row(i).dot(out.beta.row(g)) +
                    out.C2.row(i).dot(out.ell.row(g)) + 0.1 * rng.normal();
      if (hole_rate > 0.0 && rng.bernoulli(hole_rate)) {
        out.omega(g, i) = 0.0;
        out.Y(g, i) = 0.0;
      }
    }
  }
  out.features.resize(static_cast<std::size_t>(p));
  std::iota(out.features.begin(), out.features.end(), 0);
  return out;
}

}  // namespace

TEST_CASE("estimate_C2 satisfies its constraints and recovers the subspace",
          "[latent]") {
  const auto d = plant(40, 60, 2, 0.0, 501);
  RngStream rng(502);
  const Matrix init = constrained_factors(d.X, 2, rng);
  const auto est = estimate_C2(d.Y, d.omega, d.features, d.X, init, 2);
  REQUIRE(est.converged);
  const Eigen::Index n = d.X.rows();
  REQUIRE((est.C2.transpose() * d.X).cwiseAbs().maxCoeff() < 1e-6);
  const Matrix gram = est.C2.transpose() * est.C2 / static_cast<double>(n);
  REQUIRE((gram - Matrix::Identity(2, 2)).cwiseAbs().maxCoeff() < 1e-8);
  REQUIRE(subspace_gap(est.C2, d.C2) < 0.1);
  REQUIRE(est.beta_tilde.rows() == 40);
  REQUIRE(est.ell.rows() == 40);
}

TEST_CASE("estimate_C2 tolerates scattered zero weights", "[latent]") {
  const auto d = plant(50, 80, 2, 0.1, 503);
  RngStream rng(504);
  const Matrix init = constrained_factors(d.X, 2, rng);
  const auto est = estimate_C2(d.Y, d.omega, d.features, d.X, init, 2);
  REQUIRE(est.converged);
  REQUIRE(subspace_gap(est.C2, d.C2) < 0.2);
}

TEST_CASE("estimate_C2 rejects bad shapes and ranks", "[latent]") {
  const auto d = plant(10, 30, 2, 0.0, 505);
  RngStream rng(506);
  const Matrix init = constrained_factors(d.X, 2, rng);
  REQUIRE_THROWS_AS(estimate_C2(d.Y, d.omega, d.features, d.X, init, 0),
                    RankError);
  REQUIRE_THROWS_AS(estimate_C2(d.Y, d.omega, d.features, d.X,
                                Matrix::Zero(30, 28), 28),
                    RankError);
  REQUIRE_THROWS_AS(estimate_C2(d.Y, d.omega, d.features, d.X,
                                Matrix::Zero(30, 3), 2),
                    InputError);
  REQUIRE_THROWS_AS(
      estimate_C2(d.Y, d.omega, std::vector<int>{}, d.X, init, 2),
      EmptyInputError);
  Matrix Xbad(30, 2);
  Xbad.col(0).setOnes();
  Xbad.col(1).setOnes();
  REQUIRE_THROWS_AS(estimate_C2(d.Y, d.omega, d.features, Xbad, init, 2),
                    SingularDesignError);
}

TEST_CASE("estimate_Omega recovers the interest-factor alignment", "[latent]") {
  const int n = 150, G = 250, K = 2;
  RngStream rng(507);
  Vector x(n);
  for (int i = 0; i < n; ++i) x(i) = i < n / 2 ? 1.0 : 0.0;
  Matrix X0(n, 2);
  X0.col(0) = x;
  X0.col(1).setOnes();
  const Matrix C2 = constrained_factors(X0, K, rng);
  Matrix Omega(1, K);
  Omega << 0.9, -0.6;
  const Matrix C = x * Omega + C2;

  Matrix Y(G, n), ell_true(G, K);
  Vector b(G);
  for (int g = 0; g < G; ++g) {
    b(g) = rng.uniform() < 0.85 ? 0.0 : rng.normal(0.0, 0.4);
    for (int k = 0; k < K; ++k) ell_true(g, k) = rng.normal();
    for (int i = 0; i < n; ++i) {
      Y(g, i) = b(g) * x(i) + C.row(i).dot(ell_true.row(g)) +
                0.25 * rng.normal();
    }
  }

  // Contaminated per-feature fits against (x | 1 | C2).
  Matrix Z0(n, 2 + K);
  Z0 << x, Vector::Ones(n), C2;
  const Vector ones = Vector::Ones(n);
  Matrix beta_tilde(G, 1), ell_hat(G, K), tau(G, 1);
  for (int g = 0; g < G; ++g) {
    const auto fit = ols_masked(Y.row(g).transpose(), Z0, ones);
    beta_tilde(g, 0) = fit.coef(0);
    ell_hat.row(g) = fit.coef.tail(K).transpose();
    tau(g, 0) = fit.cov(0, 0);
  }

  OmegaRefit refit = [&](const Matrix& C_r, Matrix* beta_r, Matrix* var_r) {
    Matrix Zr(n, 2 + K);
    Zr << x, Vector::Ones(n), C_r;
    beta_r->resize(G, 1);
    var_r->resize(G, 1);
    for (int g = 0; g < G; ++g) {
      const auto fit = ols_masked(Y.row(g).transpose(), Zr, ones);
      (*beta_r)(g, 0) = fit.coef(0);
      (*var_r)(g, 0) = fit.cov(0, 0);
    }
  };

  const auto est = estimate_Omega(beta_tilde, ell_hat, tau,
                                  Matrix(x), C2, refit);
  REQUIRE(est.Omega.rows() == 1);
  REQUIRE(est.Omega.cols() == K);
  REQUIRE((est.Omega - Omega).cwiseAbs().maxCoeff() < 0.15);
  REQUIRE(est.empty_screens == 0);

  const Matrix C_hat = recover_C(Matrix(x), est.Omega, C2);
  REQUIRE(subspace_gap(C_hat, C) < 0.1);
}

TEST_CASE("estimate_Omega validates tau and shapes", "[latent]") {
  const int G = 20, K = 2;
  Matrix beta_tilde = Matrix::Zero(G, 1), ell = Matrix::Ones(G, K);
  Matrix tau = Matrix::Constant(G, 1, 0.5);
  OmegaRefit refit = [&](const Matrix&, Matrix* b, Matrix* v) {
    *b = Matrix::Zero(G, 1);
    *v = Matrix::Constant(G, 1, 0.5);
  };
  tau(3, 0) = 0.0;
  REQUIRE_THROWS_AS(estimate_Omega(beta_tilde, ell, tau, Matrix::Ones(10, 1),
                                   Matrix::Zero(10, K), refit),
                    InputError);
  tau(3, 0) = 0.5;
  Matrix tau_bad = Matrix::Constant(G + 1, 1, 0.5);
  REQUIRE_THROWS_AS(estimate_Omega(beta_tilde, ell, tau_bad,
                                   Matrix::Ones(10, 1), Matrix::Zero(10, K),
                                   refit),
                    InputError);
}

TEST_CASE("recover_C checks shapes and adds the pieces", "[latent]") {
  Matrix X = Matrix::Ones(6, 1), Omega(1, 2), C2 = Matrix::Zero(6, 2);
  Omega << 2.0, -1.0;
  C2(0, 0) = 3.0;
  const Matrix C = recover_C(X, Omega, C2);
  REQUIRE(C(0, 0) == Catch::Approx(5.0));
  REQUIRE(C(1, 1) == Catch::Approx(-1.0));
  REQUIRE_THROWS_AS(recover_C(X, Matrix::Zero(2, 2), C2), InputError);
  REQUIRE_THROWS_AS(recover_C(X, Omega, Matrix::Zero(5, 2)), InputError);
}

namespace {

struct AssocBench {
  IntensityMatrix m;
  DesignMatrices design;
  Matrix C_hat;
  Matrix w_hat, v_hat, gamma_hat;
  std::vector<int> weight_rows;
  Partition part;
  std::vector<bool> in_subset;
};

AssocBench assoc_bench(std::uint64_t seed) {
  const int p = 12, n = 40, K = 1;
  RngStream rng(seed);
  AssocBench b;
  b.m.values = Matrix(p, n);
  b.m.mask = Matrix::Ones(p, n);
  for (int g = 0; g < p; ++g) {
    b.m.feature_ids.push_back("f" + std::to_string(g));
  }
  for (int i = 0; i < n; ++i) {
    b.m.sample_ids.push_back("s" + std::to_string(i));
  }
  Vector x(n);
  for (int i = 0; i < n; ++i) x(i) = i < n / 2 ? 1.0 : 0.0;
  b.design = make_design(Matrix(x));
  b.C_hat = Matrix(n, K);
  for (int i = 0; i < n; ++i) b.C_hat(i, 0) = rng.normal();

  for (int g = 0; g < p; ++g) {
    for (int i = 0; i < n; ++i) {
      b.m.values(g, i) = 0.5 * x(i) + 0.4 * b.C_hat(i, 0) + rng.normal();
    }
  }
  // Last four features carry 20% missing cells and become the missing set.
  for (int g = 8; g < p; ++g) {
    int holes = 0;
    for (int i = 0; i < n && holes < 8; i += 5) {
      b.m.mask(g, i) = 0.0;
      b.m.values(g, i) = 0.0;
      ++holes;
    }
  }
  b.m.validate();
  b.part = partition_features(b.m, 0.05, 0.5);
  b.weight_rows = {8, 9, 10, 11};
  const int W = 4;
  b.w_hat = Matrix::Zero(W, n);
  b.v_hat = Matrix::Zero(W, n);
  b.gamma_hat = Matrix::Constant(W, n, 0.8);
  for (int k = 0; k < W; ++k) {
    for (int i = 0; i < n; ++i) {
      if (b.m.mask(b.weight_rows[static_cast<std::size_t>(k)], i) > 0.0) {
        b.w_hat(k, i) = 1.2;
        b.v_hat(k, i) = 1.5;
      }
    }
  }
  b.in_subset = {true, false, true, true};
  return b;
}

}  // namespace

TEST_CASE("associate matches masked OLS on the nearly complete set",
          "[latent]") {
  const auto b = assoc_bench(508);
  const auto res = associate(b.m, b.design, b.C_hat, b.w_hat, b.v_hat,
                             b.gamma_hat, b.weight_rows, b.part, b.in_subset);
  REQUIRE(res.features.size() == 12);
  REQUIRE(res.n_failed == 0);

  const int n = static_cast<int>(b.m.n_samples());
  Matrix Z(n, 3);
  Z << b.design.X_interest, b.design.X_nuisance, b.C_hat;
  for (int g = 0; g < 8; ++g) {
    const auto& fa = res.features[static_cast<std::size_t>(g)];
    REQUIRE(fa.feature == g);
    REQUIRE(fa.ok);
    REQUIRE(fa.method == FitMethod::Ols);
    REQUIRE_FALSE(fa.flagged);
    const auto fit = ols_masked(b.m.values.row(g).transpose(), Z,
                                b.m.mask.row(g).transpose());
    REQUIRE(fa.beta(0) == Catch::Approx(fit.coef(0)).margin(1e-10));
    const double se = std::sqrt(fit.cov(0, 0));
    REQUIRE(fa.se(0) == Catch::Approx(se).margin(1e-10));
    REQUIRE(fa.q(0) >= 0.0);
    REQUIRE(fa.q(0) <= 1.0);
  }
  for (int g = 8; g < 12; ++g) {
    const auto& fa = res.features[static_cast<std::size_t>(g)];
    REQUIRE(fa.ok);
    REQUIRE(fa.method == FitMethod::Ipw);
    REQUIRE(fa.se(0) > 0.0);
  }
  REQUIRE_FALSE(res.features[8].flagged);
  REQUIRE(res.features[9].flagged);
  REQUIRE_FALSE(res.features[10].flagged);
}

TEST_CASE("associate marks features with unusable weights as failed",
          "[latent]") {
  auto b = assoc_bench(509);
  b.w_hat(2, 0) = std::numeric_limits<double>::quiet_NaN();
  const auto res = associate(b.m, b.design, b.C_hat, b.w_hat, b.v_hat,
                             b.gamma_hat, b.weight_rows, b.part, b.in_subset);
  REQUIRE(res.n_failed == 1);
  const auto& bad = res.features[10];
  REQUIRE(bad.feature == 10);
  REQUIRE_FALSE(bad.ok);
  REQUIRE_FALSE(bad.error.empty());
}

TEST_CASE("associate is invariant to the thread count", "[latent]") {
  const auto b = assoc_bench(510);
  const auto one = associate(b.m, b.design, b.C_hat, b.w_hat, b.v_hat,
                             b.gamma_hat, b.weight_rows, b.part, b.in_subset, 1);
  const auto two = associate(b.m, b.design, b.C_hat, b.w_hat, b.v_hat,
                             b.gamma_hat, b.weight_rows, b.part, b.in_subset, 2);
  REQUIRE(one.features.size() == two.features.size());
  for (std::size_t k = 0; k < one.features.size(); ++k) {
    REQUIRE(one.features[k].ok == two.features[k].ok);
    if (!one.features[k].ok) continue;
    REQUIRE(one.features[k].beta(0) == two.features[k].beta(0));
    REQUIRE(one.features[k].se(0) == two.features[k].se(0));
    REQUIRE(one.features[k].q(0) == two.features[k].q(0));
  }
}
