#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "missfactor/data.hpp"
#include "missfactor/errors.hpp"
#include "missfactor/link.hpp"
#include "missfactor/rng.hpp"

namespace missfactor {

// Generative model for benchmarking: latent factors with a confounded first
// component, spike-and-slab loadings, feature-specific Gaussian intensities,
// and cellwise MNAR dropout r ~ Bernoulli[Psi{alpha (y - delta)}].
struct SimulationConfig {
    int n = 600;
    int p = 1200;
    int K = 10;
    MissingnessLink mech_link = student_t_link(4.0);

    // NaN means "calibrate so the standardized mechanism variable has unit
    // variance", the convention used for every built-in link.
    double mu_alpha = std::numeric_limits<double>::quiet_NaN();
    double sd_log_alpha = 0.4;
    double mu_delta = 16.0;
    double sd_delta = 1.2;
    double mu_mean = 18.0;
    double sd_mean = 5.0;
    double sigma_shape_rate = 25.0;  // Gamma(shape, rate) with shape = rate
    double beta_sparsity = 0.8;
    double beta_sd = 0.4;
    double confounding_r2 = 0.075;
    double pi_spike = 0.3;
    std::vector<double> target_eigenvalues = {};  // empty: built-in defaults
    std::uint64_t seed = 0;

    void validate() const {
        if (n <= 0 || n % 2 != 0)
            throw ConfigError("simulation requires a positive even n, got " + std::to_string(n));
        if (p <= 0) throw ConfigError("simulation requires p > 0");
        if (K < 1 || K >= n) throw ConfigError("simulation requires 1 <= K < n");
        if (!(sd_log_alpha > 0.0) || !(sd_delta > 0.0) || !(sd_mean > 0.0) ||
            !(beta_sd > 0.0) || !(sigma_shape_rate > 0.0))
            throw ConfigError("simulation scale parameters must be positive");
        if (!(beta_sparsity >= 0.0 && beta_sparsity <= 1.0))
            throw ConfigError("beta_sparsity must lie in [0, 1]");
        if (!(confounding_r2 >= 0.0 && confounding_r2 < 1.0))
            throw ConfigError("confounding_r2 must lie in [0, 1)");
        if (!(pi_spike >= 0.0 && pi_spike < 1.0))
            throw ConfigError("pi_spike must lie in [0, 1)");
        if (!target_eigenvalues.empty() &&
            static_cast<int>(target_eigenvalues.size()) != K)
            throw ConfigError("target_eigenvalues must have exactly K entries");
        for (double lam : target_eigenvalues)
            if (!(lam > 0.0)) throw ConfigError("target eigenvalues must be positive");
    }
};

struct SimulatedDataset {
    IntensityMatrix matrix;   // observed cells only; mask marks dropout
    Matrix y_complete;        // p x n, pre-dropout intensities
    Vector x_interest;        // n, (1...1, 0...0)
    Matrix C;                 // n x K
    Matrix L;                 // p x K loadings
    Vector beta, alpha, delta, mu, sigma2;  // p each
    double a = 0.0;           // confounding mean scale on C's first column
    double mu_alpha = 0.0;
    Vector tau2;              // slab variances after calibration
    Vector expected_spectrum; // closed-form E[eigenvalues of the factor information]
    double realized_r2 = 0.0; // share of Var(x_interest) explained by (1, C)
};

namespace detail {

constexpr std::uint64_t kSimStreamTag = 0x73696d756c617465ull;

// E[1/sigma^2] for sigma^2 ~ Gamma(shape = rate = s): s / (s - 1).
inline double inverse_variance_mean(double shape_rate) {
    if (shape_rate <= 1.0)
        throw CalibrationError("sigma_shape_rate must exceed 1 for a finite E[1/sigma^2]");
    return shape_rate / (shape_rate - 1.0);
}

// Expected k-th eigenvalue of
//   I = (n-1)^{-1} Pperp_1 C (p^{-1} sum sigma_g^{-2} l_g l_g^T) C^T Pperp_1
// under the generative law: cross terms vanish and the Gram of centered C is
// diagonal in expectation, E[C~^T C~]/(n-1) = diag(1 + c1, 1, ..., 1) with
// c1 = a^2 n / (4(n-1)) from the case/control mean shift.
inline double expected_eigenvalue(double tau2_k, double pi_k, double inv_var_mean,
                                  double c1, bool first) {
    return inv_var_mean * (1.0 - pi_k) * tau2_k * (first ? 1.0 + c1 : 1.0);
}

inline std::vector<double> default_spectrum_targets() {
    return {0.61, 0.33, 0.19, 0.14, 0.12, 0.08, 0.07, 0.05, 0.05, 0.05};
}

}  // namespace detail

// Slab variances tau_k^2 such that the closed-form expected spectrum matches
// the targets: per component, bisection on a multiplier of the analytic
// inverse. Throws CalibrationError listing the achieved spectrum when any
// component lands more than 10% off target.
inline Vector calibrate_slab_variances(const std::vector<double>& targets,
                                       double pi_spike, double inv_var_mean,
                                       double c1, Vector* achieved_out = nullptr) {
    const int K = static_cast<int>(targets.size());
    Vector tau2(K), achieved(K);
    for (int k = 0; k < K; ++k) {
        const bool first = (k == 0);
        const double base =
            targets[static_cast<std::size_t>(k)] /
            (inv_var_mean * (1.0 - pi_spike) * (first ? 1.0 + c1 : 1.0));
        double lo = 1e-6, hi = 1e6;
        auto gap = [&](double s) {
            return detail::expected_eigenvalue(s * base, pi_spike, inv_var_mean, c1, first) -
                   targets[static_cast<std::size_t>(k)];
        };
        if (gap(lo) > 0.0 || gap(hi) < 0.0) {
            tau2[k] = base;
        } else {
            for (int it = 0; it < 200; ++it) {
                const double mid = 0.5 * (lo + hi);
                (gap(mid) <= 0.0 ? lo : hi) = mid;
            }
            tau2[k] = 0.5 * (lo + hi) * base;
        }
        achieved[k] =
            detail::expected_eigenvalue(tau2[k], pi_spike, inv_var_mean, c1, first);
    }
    for (int k = 0; k < K; ++k) {
        const double rel =
            std::abs(achieved[k] - targets[static_cast<std::size_t>(k)]) /
            targets[static_cast<std::size_t>(k)];
        if (rel > 0.10) {
            std::ostringstream oss;
            oss << "spectrum calibration missed its targets; achieved:";
            for (int j = 0; j < K; ++j) oss << " " << achieved[j];
            throw CalibrationError(oss.str());
        }
    }
    if (achieved_out) *achieved_out = achieved;
    return tau2;
}

// Scale a of the confounding mean on C's first column so that (1, C) explains
// confounding_r2 of Var(x_interest) in expectation. The signal column alone
// contributes rho2 = c1/(1+c1); the K-1 pure-noise columns add roughly
// (K-1)/(n-1) of the residual, so rho2 solves
//   r2 = rho2 + (1 - rho2)(K-1)/(n-1).
inline double calibrate_confounding_scale(double confounding_r2, int n, int K) {
    const double kappa = static_cast<double>(K - 1) / static_cast<double>(n - 1);
    double rho2 = 0.0;
    if (kappa < 1.0) rho2 = (confounding_r2 - kappa) / (1.0 - kappa);
    if (rho2 <= 0.0) return 0.0;
    if (rho2 >= 1.0)
        throw CalibrationError("confounding_r2 unreachable at this n and K");
    const double c1 = rho2 / (1.0 - rho2);
    return std::sqrt(4.0 * (n - 1.0) * c1 / n);
}

inline SimulatedDataset simulate_dataset(const SimulationConfig& cfg) {
    cfg.validate();
    const int n = cfg.n, p = cfg.p, K = cfg.K;

    std::vector<double> targets = cfg.target_eigenvalues;
    if (targets.empty()) {
        targets = detail::default_spectrum_targets();
        targets.resize(static_cast<std::size_t>(K),
                       targets.empty() ? 0.05 : targets.back());
        if (K < 10) targets.resize(static_cast<std::size_t>(K));
    }

    SimulatedDataset out;
    out.mu_alpha = std::isnan(cfg.mu_alpha) ? mu_alpha_for_unit_variance(cfg.mech_link)
                                            : cfg.mu_alpha;
    out.a = calibrate_confounding_scale(cfg.confounding_r2, n, K);
    const double c1 = out.a * out.a * n / (4.0 * (n - 1.0));
    const double inv_var_mean = detail::inverse_variance_mean(cfg.sigma_shape_rate);
    out.tau2 = calibrate_slab_variances(targets, cfg.pi_spike, inv_var_mean, c1,
                                        &out.expected_spectrum);

    out.x_interest = Vector::Zero(n);
    out.x_interest.head(n / 2).setOnes();

    // One substream per law, in the order the laws are listed, so the stream
    // consumed by any one law is independent of every other law's sample count.
    auto law_stream = [&](std::uint64_t law) {
        return RngStream(cfg.seed, {detail::kSimStreamTag, law});
    };

    out.alpha = Vector(p);
    {
        RngStream rng = law_stream(1);
        for (int g = 0; g < p; ++g)
            out.alpha[g] = std::exp(out.mu_alpha + cfg.sd_log_alpha * rng.normal());
    }
    out.delta = Vector(p);
    {
        RngStream rng = law_stream(2);
        for (int g = 0; g < p; ++g) out.delta[g] = cfg.mu_delta + cfg.sd_delta * rng.normal();
    }
    out.C = Matrix(n, K);
    {
        RngStream rng = law_stream(3);
        for (int i = 0; i < n; ++i)
            for (int k = 0; k < K; ++k) out.C(i, k) = rng.normal();
        out.C.col(0) += out.a * out.x_interest;
    }
    out.L = Matrix(p, K);
    {
        RngStream rng = law_stream(4);
        for (int g = 0; g < p; ++g)
            for (int k = 0; k < K; ++k) {
                if (rng.uniform() < cfg.pi_spike)
                    out.L(g, k) = 0.0;
                else
                    out.L(g, k) = std::sqrt(out.tau2[k]) * rng.normal();
            }
    }
    out.mu = Vector(p);
    {
        RngStream rng = law_stream(5);
        for (int g = 0; g < p; ++g) out.mu[g] = cfg.mu_mean + cfg.sd_mean * rng.normal();
    }
    out.sigma2 = Vector(p);
    {
        RngStream rng = law_stream(6);
        for (int g = 0; g < p; ++g)
            out.sigma2[g] = rng.gamma(cfg.sigma_shape_rate, cfg.sigma_shape_rate);
    }
    out.beta = Vector(p);
    {
        RngStream rng = law_stream(7);
        for (int g = 0; g < p; ++g) {
            if (rng.uniform() < cfg.beta_sparsity)
                out.beta[g] = 0.0;
            else
                out.beta[g] = cfg.beta_sd * rng.normal();
        }
    }
    out.y_complete = Matrix(p, n);
    {
        RngStream rng = law_stream(8);
        for (int g = 0; g < p; ++g) {
            const double sd = std::sqrt(out.sigma2[g]);
            for (int i = 0; i < n; ++i) {
                const double mean = out.mu[g] + out.x_interest[i] * out.beta[g] +
                                    out.C.row(i).dot(out.L.row(g));
                out.y_complete(g, i) = mean + sd * rng.normal();
            }
        }
    }

    out.matrix.values = Matrix::Zero(p, n);
    out.matrix.mask = Matrix::Zero(p, n);
    {
        RngStream rng = law_stream(9);
        for (int g = 0; g < p; ++g)
            for (int i = 0; i < n; ++i) {
                const double prob = psi_eval(cfg.mech_link,
                                             out.alpha[g] * (out.y_complete(g, i) -
                                                             out.delta[g])).psi;
                if (rng.bernoulli(prob)) {
                    out.matrix.mask(g, i) = 1.0;
                    out.matrix.values(g, i) = out.y_complete(g, i);
                }
            }
    }

    out.matrix.feature_ids.reserve(static_cast<std::size_t>(p));
    out.matrix.sample_ids.reserve(static_cast<std::size_t>(n));
    for (int g = 0; g < p; ++g)
        out.matrix.feature_ids.push_back("feature_" + std::to_string(g + 1));
    for (int i = 0; i < n; ++i)
        out.matrix.sample_ids.push_back("sample_" + std::to_string(i + 1));
    out.matrix.validate();

    {
        // Realized R2 of x_interest on (1, C), reported for diagnostics.
        Matrix Z(n, K + 1);
        Z.col(0).setOnes();
        Z.rightCols(K) = out.C;
        Vector coef = (Z.transpose() * Z).ldlt().solve(Z.transpose() * out.x_interest);
        const Vector resid = out.x_interest - Z * coef;
        const double mean_x = out.x_interest.mean();
        const double sst = (out.x_interest.array() - mean_x).square().sum();
        out.realized_r2 = sst > 0.0 ? 1.0 - resid.squaredNorm() / sst : 0.0;
    }
    return out;
}

}  // namespace missfactor
