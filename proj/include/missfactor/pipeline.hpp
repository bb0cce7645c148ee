#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "missfactor/data.hpp"
#include "missfactor/errors.hpp"
#include "missfactor/factor.hpp"
#include "missfactor/gmm.hpp"
#include "missfactor/hbgmm.hpp"
#include "missfactor/instruments.hpp"
#include "missfactor/io.hpp"
#include "missfactor/ipw.hpp"
#include "missfactor/jtest.hpp"
#include "missfactor/latent.hpp"
#include "missfactor/link.hpp"
#include "missfactor/parallel.hpp"
#include "missfactor/rng.hpp"
#include "missfactor/stats.hpp"

namespace missfactor {

struct PipelineConfig {
    double eps_miss = 0.05;
    double max_miss = 0.5;
    MissingnessLink link = student_t_link(4.0);
    int K_miss = 0;  // 0: smallest factor count giving instrument coverage
    int K = 0;       // 0: parallel analysis on the nearly complete block
    double lfdr_threshold = 0.8;
    double eps_qvalue = 0.1;
    int rounds = 3;  // refinement rounds when splitting C into XΩ + C2
    int bootstrap_B = 200;
    McmcOptions mcmc;
    int n_permutations = 19;
    std::uint64_t seed = 0;
    int n_threads = 0;  // 0: MISSFACTOR_THREADS or hardware concurrency

    int threads() const { return n_threads > 0 ? n_threads : default_thread_count(); }

    void validate() const {
        if (!(eps_miss >= 0.0) || !(max_miss >= eps_miss) || !(max_miss < 1.0))
            throw ConfigError("need 0 <= eps_miss <= max_miss < 1");
        if (K_miss < 0 || K < 0) throw ConfigError("factor counts cannot be negative");
        if (K_miss == 1) throw ConfigError("instrument selection needs K_miss >= 2");
        if (!(lfdr_threshold > 0.0 && lfdr_threshold <= 1.0))
            throw ConfigError("lfdr_threshold must lie in (0, 1]");
        if (!(eps_qvalue > 0.0 && eps_qvalue < 1.0))
            throw ConfigError("eps_qvalue must lie in (0, 1)");
        if (rounds < 0) throw ConfigError("rounds cannot be negative");
        if (bootstrap_B < 99) throw ConfigError("bootstrap_B must be at least 99");
        if (n_permutations < 19) throw ConfigError("n_permutations must be at least 19");
        if (mcmc.iters <= mcmc.burn || mcmc.burn < 1 || mcmc.thin < 1)
            throw ConfigError("mcmc needs iters > burn >= 1 and thin >= 1");
    }
};

// Per-feature record for the missing set, in part.missing order.
struct MechanismFeature {
    int feature = -1;
    int g1 = -1, g2 = -1;  // instrument factor columns
    double q1 = 1.0, q2 = 1.0;
    bool gmm_ok = false;
    GmmFit fit;
    double j_pvalue = std::numeric_limits<double>::quiet_NaN();
    double lfdr = 1.0;
    bool in_subset = false;
    bool post_ok = false;
    PosteriorSummary post;
    std::string error;
};

struct MechanismEstimate {
    std::uint64_t matrix_hash = 0;
    double eps_miss = 0.05, max_miss = 0.5;
    MissingnessLink link = student_t_link(4.0);
    Partition part;
    int K_miss = 0;
    KMissSelection kmiss;
    Matrix factors;  // n x K_miss, instrument source
    std::vector<MechanismFeature> features;  // aligned with part.missing
    MechanismPrior prior;
    bool prior_ok = false;
    double lfdr_pi0 = 1.0;
    bool lfdr_fallback = false;
    Matrix w_hat, v_hat, gamma_hat;  // |missing| x n, NaN rows on failure
    std::vector<int> weight_rows;    // = part.missing
    std::vector<bool> subset_flags;  // aligned with weight_rows
};

namespace detail {

constexpr std::uint64_t kBootSeedTag = 0x626f6f7473747261ull;
constexpr std::uint64_t kMcmcSeedTag = 0x6d636d6373656564ull;
constexpr std::uint64_t kPaSeedTag = 0x70617261616e616cull;

inline std::uint64_t feature_seed(std::uint64_t seed, std::uint64_t tag, int g) {
    return RngStream(seed, {tag, static_cast<std::uint64_t>(g)}).raw();
}

inline void gather_rows(const IntensityMatrix& m, const std::vector<int>& rows,
                        Matrix* Y, Matrix* mask) {
    const Eigen::Index n = m.n_samples();
    Y->resize(static_cast<Eigen::Index>(rows.size()), n);
    mask->resize(static_cast<Eigen::Index>(rows.size()), n);
    for (std::size_t s = 0; s < rows.size(); ++s) {
        Y->row(static_cast<Eigen::Index>(s)) = m.values.row(rows[s]);
        mask->row(static_cast<Eigen::Index>(s)) = m.mask.row(rows[s]);
    }
}

}  // namespace detail

// Steps: partition, factor count for instruments, complete-block factors,
// instrument scan and selection, per-feature two-step GMM, bootstrap J
// p-values with lfdr flagging, shared prior, per-feature posterior weights,
// stabilization probabilities. Never looks at any design matrix.
inline MechanismEstimate estimate_mechanism(const IntensityMatrix& m,
                                            const PipelineConfig& cfg) {
    cfg.validate();
    m.validate();
    const Eigen::Index n = m.n_samples();
    const int n_threads = cfg.threads();

    MechanismEstimate out;
    out.eps_miss = cfg.eps_miss;
    out.max_miss = cfg.max_miss;
    out.link = cfg.link;
    out.part = partition_features(m, cfg.eps_miss, cfg.max_miss);
    if (out.part.observed.empty())
        throw NoCompleteFeaturesError("no features pass the eps_miss threshold");

    Matrix Y_obs, M_obs;
    detail::gather_rows(m, out.part.observed, &Y_obs, &M_obs);
    const Matrix ones = Matrix::Ones(n, 1);

    if (cfg.K_miss > 0) {
        out.K_miss = cfg.K_miss;
    } else {
        const auto pa =
            parallel_analysis(Y_obs, M_obs, ones, cfg.n_permutations,
                              RngStream(cfg.seed, {detail::kPaSeedTag, 1}).raw(),
                              n_threads);
        const int K_PA = std::max(pa.K, 2);  // instruments need two columns
        out.kmiss = select_K_miss(m, out.part, K_PA);
        out.K_miss = out.kmiss.k;
    }

    out.factors =
        estimate_complete_factors(Y_obs, M_obs, ones, out.K_miss).C;

    const auto n_miss = out.part.missing.size();
    out.features.resize(n_miss);
    out.weight_rows = out.part.missing;
    out.w_hat = Matrix::Constant(static_cast<Eigen::Index>(n_miss), n,
                                 std::numeric_limits<double>::quiet_NaN());
    out.v_hat = out.w_hat;
    out.gamma_hat = out.w_hat;
    out.subset_flags.assign(n_miss, false);
    if (n_miss == 0) return out;

    const InstrumentScan scan = instrument_scan(m, out.part.missing, out.factors);
    std::vector<int> scan_row(n_miss, -1);
    for (std::size_t s = 0; s < scan.features.size(); ++s) {
        const auto at = std::lower_bound(out.part.missing.begin(),
                                         out.part.missing.end(), scan.features[s]);
        scan_row[static_cast<std::size_t>(at - out.part.missing.begin())] =
            static_cast<int>(s);
    }

    parallel_for(n_miss, n_threads, [&](std::size_t idx) {
        MechanismFeature& mf = out.features[idx];
        mf.feature = out.part.missing[idx];
        if (scan_row[idx] < 0) {
            mf.error = "too few observed cells for the instrument scan";
            return;
        }
        const auto assign = select_instruments(scan, scan_row[idx]);
        mf.g1 = assign.g1;
        mf.g2 = assign.g2;
        mf.q1 = assign.q1;
        mf.q2 = assign.q2;
        Matrix U(n, 2);
        U.col(0) = out.factors.col(mf.g1);
        U.col(1) = out.factors.col(mf.g2);
        const Vector y = m.values.row(mf.feature).transpose();
        const Vector r = m.mask.row(mf.feature).transpose();
        try {
            mf.fit = two_step_gmm(y, r, U, cfg.link);
            mf.gmm_ok = true;
        } catch (const Error& e) {
            mf.error = e.what();
            return;
        }
        try {
            const auto boot = bootstrap_j_null(
                y, r, U, cfg.link, mf.fit, cfg.bootstrap_B,
                detail::feature_seed(cfg.seed, detail::kBootSeedTag, mf.feature));
            mf.j_pvalue = boot.p_value;
        } catch (const Error& e) {
            mf.error = std::string("bootstrap: ") + e.what();
        }
    });

    // lfdr over the features with a bootstrap p-value.
    {
        std::vector<double> pvals;
        std::vector<std::size_t> which;
        for (std::size_t idx = 0; idx < n_miss; ++idx) {
            if (out.features[idx].gmm_ok && std::isfinite(out.features[idx].j_pvalue)) {
                pvals.push_back(out.features[idx].j_pvalue);
                which.push_back(idx);
            }
        }
        if (!pvals.empty()) {
            const auto flags = flag_mechanism_fit(pvals, cfg.lfdr_threshold);
            out.lfdr_pi0 = flags.pi0;
            out.lfdr_fallback = flags.fallback;
            for (std::size_t s = 0; s < which.size(); ++s) {
                out.features[which[s]].lfdr = flags.lfdr[s];
                out.features[which[s]].in_subset = flags.in_subset[s];
            }
        }
    }

    {
        std::vector<GmmFit> fits;
        for (const auto& mf : out.features)
            if (mf.gmm_ok) fits.push_back(mf.fit);
        out.prior = estimate_prior(fits);
        out.prior_ok = true;
    }

    parallel_for(n_miss, n_threads, [&](std::size_t idx) {
        MechanismFeature& mf = out.features[idx];
        if (!mf.gmm_ok) return;
        Matrix U(n, 2);
        U.col(0) = out.factors.col(mf.g1);
        U.col(1) = out.factors.col(mf.g2);
        const Vector y = m.values.row(mf.feature).transpose();
        const Vector r = m.mask.row(mf.feature).transpose();
        try {
            mf.post = sample_posterior(
                y, r, U, cfg.link, out.prior, mf.fit, cfg.mcmc,
                detail::feature_seed(cfg.seed, detail::kMcmcSeedTag, mf.feature));
            mf.post_ok = true;
            out.w_hat.row(static_cast<Eigen::Index>(idx)) = mf.post.w_hat.transpose();
            out.v_hat.row(static_cast<Eigen::Index>(idx)) = mf.post.v_hat.transpose();
            out.gamma_hat.row(static_cast<Eigen::Index>(idx)) =
                stabilization_probabilities(r, U).transpose();
        } catch (const Error& e) {
            mf.error = std::string("posterior: ") + e.what();
        }
    });
    // vector<bool> packs bits, so flags are assigned outside the worker pool.
    for (std::size_t idx = 0; idx < n_miss; ++idx)
        out.subset_flags[idx] =
            out.features[idx].in_subset && out.features[idx].post_ok;

    return out;
}

struct AssociationOutput {
    int K = 0;
    Matrix C_hat;   // n x K
    Matrix C2;      // n x K
    Matrix Omega;   // d_interest x K
    int empty_screens = 0;
    bool c2_converged = true;
    AssociationResults results;
};

// Factor recovery and final inference given mechanism weights. Features used
// for the latent fit: the nearly complete block plus the unflagged missing
// set with valid weights; every non-dropped feature gets a result row.
inline AssociationOutput run_association(const IntensityMatrix& m,
                                         const DesignMatrices& design,
                                         const MechanismEstimate& mech,
                                         const PipelineConfig& cfg) {
    cfg.validate();
    m.validate();
    design.validate();
    if (design.n_samples() != m.n_samples())
        throw InputError("design and matrix disagree on sample count");
    const Eigen::Index n = m.n_samples(), d_i = design.d_interest();
    const Matrix X = design.combined();
    const int n_threads = cfg.threads();

    AssociationOutput out;

    Matrix Y_obs, M_obs;
    detail::gather_rows(m, mech.part.observed, &Y_obs, &M_obs);
    if (cfg.K > 0) {
        out.K = cfg.K;
    } else {
        const auto pa =
            parallel_analysis(Y_obs, M_obs, X, cfg.n_permutations,
                              RngStream(cfg.seed, {detail::kPaSeedTag, 2}).raw(),
                              n_threads);
        out.K = pa.K;
    }

    std::vector<int> row_of_feature(static_cast<std::size_t>(m.n_features()), -1);
    for (std::size_t s = 0; s < mech.weight_rows.size(); ++s)
        row_of_feature[static_cast<std::size_t>(mech.weight_rows[s])] =
            static_cast<int>(s);

    if (out.K > 0) {
        // Weight rows for the latent objective: the observation mask for the
        // nearly complete block, w_hat * gamma_hat for the usable missing set.
        std::vector<int> c2_features = mech.part.observed;
        Matrix omega = Matrix::Zero(m.n_features(), n);
        for (int g : mech.part.observed) omega.row(g) = m.mask.row(g);
        for (std::size_t s = 0; s < mech.weight_rows.size(); ++s) {
            if (!mech.subset_flags[s]) continue;
            const int g = mech.weight_rows[s];
            omega.row(g) = mech.w_hat.row(static_cast<Eigen::Index>(s))
                               .cwiseProduct(mech.gamma_hat.row(static_cast<Eigen::Index>(s)));
            c2_features.push_back(g);
        }
        std::sort(c2_features.begin(), c2_features.end());

        const FactorEstimate init =
            estimate_complete_factors(Y_obs, M_obs, X, out.K);
        const C2Estimate c2 =
            estimate_C2(m.values, omega, c2_features, X, init.C, out.K);
        out.C2 = c2.C2;
        out.c2_converged = c2.converged;

        // Interest coefficients and variances at a given C, both for the
        // initial precision weights and for each refinement round.
        const auto G = static_cast<Eigen::Index>(c2_features.size());
        auto refit = [&](const Matrix& C, Matrix* beta, Matrix* var) {
            beta->resize(G, d_i);
            var->resize(G, d_i);
            Matrix Z(n, X.cols() + C.cols());
            Z << X, C;
            parallel_for(static_cast<std::size_t>(G), n_threads, [&](std::size_t s) {
                const int g = c2_features[s];
                const Vector y = m.values.row(g).transpose();
                const auto gi = static_cast<Eigen::Index>(s);
                try {
                    if (mech.part.label[static_cast<std::size_t>(g)] ==
                        FeatureClass::Observed) {
                        const Vector r = m.mask.row(g).transpose();
                        const OlsFit fit = ols_complete(y, Z, r);
                        beta->row(gi) = fit.coef.head(d_i).transpose();
                        var->row(gi) = fit.cov.diagonal().head(d_i).transpose();
                    } else {
                        const int wrow = row_of_feature[static_cast<std::size_t>(g)];
                        const Vector w = mech.w_hat.row(wrow).transpose();
                        const Vector v = mech.v_hat.row(wrow).transpose();
                        const Vector gam = mech.gamma_hat.row(wrow).transpose();
                        const Vector eta = ipw_point(y, Z, w, gam);
                        const Matrix cov = ipw_variance(y, Z, w, v, gam, eta);
                        beta->row(gi) = eta.head(d_i).transpose();
                        var->row(gi) = cov.diagonal().head(d_i).transpose();
                    }
                } catch (const Error&) {
                    // Feature drops out of the screen: a null coefficient with
                    // a wide variance keeps it in the regression set.
                    beta->row(gi).setZero();
                    var->row(gi).setConstant(1e6);
                }
                for (Eigen::Index j = 0; j < d_i; ++j)
                    if (!((*var)(gi, j) > 0.0) || !std::isfinite((*var)(gi, j))) {
                        (*beta)(gi, j) = 0.0;
                        (*var)(gi, j) = 1e6;
                    }
            });
        };

        Matrix beta0, tau0;
        refit(out.C2, &beta0, &tau0);
        const auto om = estimate_Omega(beta0, c2.ell, tau0, design.X_interest,
                                       out.C2, refit, cfg.eps_qvalue, cfg.rounds);
        out.Omega = om.Omega;
        out.empty_screens = om.empty_screens;
        out.C_hat = recover_C(design.X_interest, out.Omega, out.C2);
    } else {
        out.C_hat = Matrix(n, 0);
        out.C2 = Matrix(n, 0);
        out.Omega = Matrix(d_i, 0);
    }

    out.results = associate(m, design, out.C_hat, mech.w_hat, mech.v_hat,
                            mech.gamma_hat, mech.weight_rows, mech.part,
                            mech.subset_flags, n_threads);
    return out;
}

// ---- artifact persistence ----

namespace detail {

inline nlohmann::json link_to_json(const MissingnessLink& link) {
    nlohmann::json j;
    j["family"] = link_name(link);
    if (link.family == LinkFamily::TCdf) j["nu"] = link.nu;
    return j;
}

inline MissingnessLink link_from_json(const nlohmann::json& j) {
    const std::string fam = j.at("family").get<std::string>();
    if (fam == "logistic") return logistic_link();
    if (fam == "probit") return probit_link();
    if (fam.rfind("tcdf", 0) == 0) return student_t_link(j.at("nu").get<double>());
    throw ParseError("unknown link family in artifact: " + fam);
}

inline void save_weight_table(const std::string& path, const Matrix& W,
                              const IntensityMatrix& m,
                              const std::vector<int>& rows) {
    NumericTable t;
    t.col_names = m.sample_ids;
    for (int g : rows) t.row_ids.push_back(m.feature_ids[static_cast<std::size_t>(g)]);
    t.values = W;
    save_numeric_table(path, t, "feature");
}

}  // namespace detail

inline void save_mechanism(const MechanismEstimate& mech, const IntensityMatrix& m,
                           const std::string& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    const auto at = [&](const char* name) { return (fs::path(dir) / name).string(); };

    nlohmann::json meta;
    meta["matrix_hash"] = hash_hex(mech.matrix_hash);
    meta["eps_miss"] = mech.eps_miss;
    meta["max_miss"] = mech.max_miss;
    meta["link"] = detail::link_to_json(mech.link);
    meta["K_miss"] = mech.K_miss;
    meta["kmiss_coverage"] = mech.kmiss.coverage;
    meta["kmiss_fell_back"] = mech.kmiss.fell_back;
    meta["lfdr_pi0"] = mech.lfdr_pi0;
    meta["lfdr_fallback"] = mech.lfdr_fallback;
    meta["prior_ok"] = mech.prior_ok;
    if (mech.prior_ok) {
        meta["prior_mu"] = {mech.prior.mu(0), mech.prior.mu(1)};
        meta["prior_U"] = {mech.prior.U(0, 0), mech.prior.U(0, 1),
                           mech.prior.U(1, 0), mech.prior.U(1, 1)};
    }
    meta["n_missing_features"] = mech.part.missing.size();
    meta["n_observed_features"] = mech.part.observed.size();
    meta["n_dropped_features"] = mech.part.dropped.size();
    std::ofstream mf(at("meta.json"));
    mf << meta.dump(2) << "\n";

    {
        NumericTable t;
        for (int k = 0; k < mech.K_miss; ++k) t.col_names.push_back("F" + std::to_string(k + 1));
        t.row_ids = m.sample_ids;
        t.values = mech.factors;
        save_numeric_table(at("factors.tsv"), t, "sample");
    }
    {
        NumericTable t;
        t.col_names = {"class", "n_missing"};
        t.values.resize(m.n_features(), 2);
        for (Eigen::Index g = 0; g < m.n_features(); ++g) {
            t.row_ids.push_back(m.feature_ids[static_cast<std::size_t>(g)]);
            t.values(g, 0) = static_cast<double>(mech.part.label[static_cast<std::size_t>(g)]);
            t.values(g, 1) =
                static_cast<double>(m.mask.cols()) - m.mask.row(g).sum();
        }
        save_numeric_table(at("partition.tsv"), t, "feature");
    }
    {
        NumericTable t;
        t.col_names = {"factor1", "factor2", "q1", "q2", "gmm_ok",
                       "alpha_gmm", "delta_gmm", "J", "j_pvalue", "lfdr",
                       "in_subset", "post_ok", "alpha_hb", "delta_hb",
                       "log_alpha_hb", "ess", "acceptance", "stuck"};
        const auto rows = static_cast<Eigen::Index>(mech.features.size());
        t.values.resize(rows, static_cast<Eigen::Index>(t.col_names.size()));
        const double nan = std::numeric_limits<double>::quiet_NaN();
        for (Eigen::Index s = 0; s < rows; ++s) {
            const auto& f = mech.features[static_cast<std::size_t>(s)];
            t.row_ids.push_back(m.feature_ids[static_cast<std::size_t>(f.feature)]);
            t.values(s, 0) = f.g1 + 1;
            t.values(s, 1) = f.g2 + 1;
            t.values(s, 2) = f.q1;
            t.values(s, 3) = f.q2;
            t.values(s, 4) = f.gmm_ok ? 1.0 : 0.0;
            t.values(s, 5) = f.gmm_ok ? f.fit.alpha : nan;
            t.values(s, 6) = f.gmm_ok ? f.fit.delta : nan;
            t.values(s, 7) = f.gmm_ok ? f.fit.J : nan;
            t.values(s, 8) = f.j_pvalue;
            t.values(s, 9) = f.lfdr;
            t.values(s, 10) = f.in_subset ? 1.0 : 0.0;
            t.values(s, 11) = f.post_ok ? 1.0 : 0.0;
            t.values(s, 12) = f.post_ok ? f.post.alpha_hat : nan;
            t.values(s, 13) = f.post_ok ? f.post.delta_hat : nan;
            t.values(s, 14) = f.post_ok ? f.post.log_alpha_hat : nan;
            t.values(s, 15) = f.post_ok ? f.post.ess : nan;
            t.values(s, 16) = f.post_ok ? f.post.acceptance_rate : nan;
            t.values(s, 17) = f.post_ok && f.post.stuck ? 1.0 : 0.0;
        }
        save_numeric_table(at("mechanisms.tsv"), t, "feature");
    }
    detail::save_weight_table(at("weights_w.tsv"), mech.w_hat, m, mech.weight_rows);
    detail::save_weight_table(at("weights_v.tsv"), mech.v_hat, m, mech.weight_rows);
    detail::save_weight_table(at("weights_gamma.tsv"), mech.gamma_hat, m,
                              mech.weight_rows);
    {
        std::ofstream ef(at("diagnostics.txt"));
        for (const auto& f : mech.features)
            if (!f.error.empty())
                ef << m.feature_ids[static_cast<std::size_t>(f.feature)] << "\t"
                   << f.error << "\n";
    }
}

// Reload of the artifact subset run_association needs. The partition is
// recomputed from the matrix with the stored thresholds, then checked against
// the stored weight rows.
inline MechanismEstimate load_mechanism(const std::string& dir,
                                        const IntensityMatrix& m,
                                        std::uint64_t matrix_hash) {
    namespace fs = std::filesystem;
    const auto at = [&](const char* name) { return (fs::path(dir) / name).string(); };
    std::ifstream mf(at("meta.json"));
    if (!mf) throw InputError("cannot open " + at("meta.json"));
    nlohmann::json meta;
    try {
        mf >> meta;
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("meta.json: ") + e.what());
    }

    MechanismEstimate mech;
    try {
        mech.matrix_hash = std::stoull(meta.at("matrix_hash").get<std::string>(), nullptr, 16);
        mech.eps_miss = meta.at("eps_miss").get<double>();
        mech.max_miss = meta.at("max_miss").get<double>();
        mech.link = detail::link_from_json(meta.at("link"));
        mech.K_miss = meta.at("K_miss").get<int>();
        mech.lfdr_pi0 = meta.at("lfdr_pi0").get<double>();
        mech.lfdr_fallback = meta.at("lfdr_fallback").get<bool>();
        mech.prior_ok = meta.at("prior_ok").get<bool>();
        if (mech.prior_ok) {
            const auto mu = meta.at("prior_mu");
            mech.prior.mu << mu.at(0).get<double>(), mu.at(1).get<double>();
            const auto U = meta.at("prior_U");
            mech.prior.U << U.at(0).get<double>(), U.at(1).get<double>(),
                U.at(2).get<double>(), U.at(3).get<double>();
        }
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("meta.json: ") + e.what());
    }
    if (mech.matrix_hash != matrix_hash)
        throw StaleArtifactError("mechanism artifacts were built from a different matrix");

    mech.part = partition_features(m, mech.eps_miss, mech.max_miss);

    const NumericTable ft = load_numeric_table(at("factors.tsv"));
    mech.factors = ft.values;
    if (mech.factors.rows() != m.n_samples())
        throw StaleArtifactError("factor table does not match the matrix sample count");

    const NumericTable mt = load_numeric_table(at("mechanisms.tsv"));
    const auto col = [&](const char* name) {
        const auto it = std::find(mt.col_names.begin(), mt.col_names.end(), name);
        if (it == mt.col_names.end())
            throw ParseError(std::string("mechanisms.tsv lacks column ") + name);
        return static_cast<Eigen::Index>(it - mt.col_names.begin());
    };
    const Eigen::Index c_in = col("in_subset"), c_post = col("post_ok"),
                       c_lfdr = col("lfdr"), c_p = col("j_pvalue"),
                       c_g1 = col("factor1"), c_g2 = col("factor2");
    if (static_cast<std::size_t>(mt.values.rows()) != mech.part.missing.size())
        throw StaleArtifactError("mechanism table does not match the partition");

    mech.weight_rows = mech.part.missing;
    mech.features.resize(mech.part.missing.size());
    mech.subset_flags.assign(mech.part.missing.size(), false);
    for (std::size_t s = 0; s < mech.part.missing.size(); ++s) {
        const auto gi = static_cast<Eigen::Index>(s);
        if (mt.row_ids[s] !=
            m.feature_ids[static_cast<std::size_t>(mech.part.missing[s])])
            throw StaleArtifactError("mechanism table rows disagree with the partition");
        MechanismFeature& f = mech.features[s];
        f.feature = mech.part.missing[s];
        f.g1 = static_cast<int>(mt.values(gi, c_g1)) - 1;
        f.g2 = static_cast<int>(mt.values(gi, c_g2)) - 1;
        f.j_pvalue = mt.values(gi, c_p);
        f.lfdr = mt.values(gi, c_lfdr);
        f.in_subset = mt.values(gi, c_in) != 0.0;
        f.post_ok = mt.values(gi, c_post) != 0.0;
        f.gmm_ok = f.post_ok;
        mech.subset_flags[s] = f.in_subset && f.post_ok;
    }

    const auto load_weights = [&](const char* name) {
        const NumericTable t = load_numeric_table(at(name));
        if (static_cast<std::size_t>(t.values.rows()) != mech.weight_rows.size() ||
            t.values.cols() != m.n_samples())
            throw StaleArtifactError(std::string(name) + " does not match the matrix");
        return t.values;
    };
    mech.w_hat = load_weights("weights_w.tsv");
    mech.v_hat = load_weights("weights_v.tsv");
    mech.gamma_hat = load_weights("weights_gamma.tsv");
    return mech;
}

inline void save_association(const AssociationOutput& out, const IntensityMatrix& m,
                             const DesignMatrices& design, const std::string& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    const auto at = [&](const char* name) { return (fs::path(dir) / name).string(); };
    const Eigen::Index d_i = design.d_interest();

    {
        std::ofstream f(at("associations.tsv"));
        f << "feature\tbeta\tse\tp\tq\tmethod\tflagged\n";
        for (const auto& fa : out.results.features) {
            for (Eigen::Index j = 0; j < d_i; ++j) {
                std::string id = m.feature_ids[static_cast<std::size_t>(fa.feature)];
                if (d_i > 1) id += ":x" + std::to_string(j + 1);
                if (fa.ok) {
                    f << id << "\t" << detail::format_double(fa.beta(j)) << "\t"
                      << detail::format_double(fa.se(j)) << "\t"
                      << detail::format_double(fa.p(j)) << "\t"
                      << detail::format_double(fa.q(j)) << "\t"
                      << (fa.method == FitMethod::Ipw ? "ipw" : "ols") << "\t"
                      << (fa.flagged ? 1 : 0) << "\n";
                } else {
                    f << id << "\tNA\tNA\tNA\tNA\t"
                      << (fa.method == FitMethod::Ipw ? "ipw" : "ols") << "\t"
                      << (fa.flagged ? 1 : 0) << "\n";
                }
            }
        }
    }
    {
        // Observed vs expected -log10 p per interest coordinate, for Q-Q plots.
        std::ofstream f(at("qq.tsv"));
        f << "coefficient\trank\tfeature\tp\tneglog10_observed\tneglog10_expected\n";
        for (Eigen::Index j = 0; j < d_i; ++j) {
            std::vector<std::pair<double, int>> ps;
            for (const auto& fa : out.results.features)
                if (fa.ok) ps.emplace_back(fa.p(j), fa.feature);
            std::sort(ps.begin(), ps.end());
            const double mcount = static_cast<double>(ps.size());
            for (std::size_t i = 0; i < ps.size(); ++i) {
                const double expected = (static_cast<double>(i) + 0.5) / mcount;
                f << (j + 1) << "\t" << (i + 1) << "\t"
                  << m.feature_ids[static_cast<std::size_t>(ps[i].second)] << "\t"
                  << detail::format_double(ps[i].first) << "\t"
                  << detail::format_double(-std::log10(std::max(ps[i].first, 1e-300)))
                  << "\t" << detail::format_double(-std::log10(expected)) << "\n";
            }
        }
    }
    {
        nlohmann::json meta;
        meta["K"] = out.K;
        meta["empty_screens"] = out.empty_screens;
        meta["c2_converged"] = out.c2_converged;
        meta["n_failed"] = out.results.n_failed;
        std::vector<double> omega_flat(out.Omega.data(),
                                       out.Omega.data() + out.Omega.size());
        meta["Omega_column_major"] = omega_flat;
        meta["Omega_rows"] = out.Omega.rows();
        std::ofstream f(at("assoc_meta.json"));
        f << meta.dump(2) << "\n";
    }
    {
        std::ofstream f(at("assoc_diagnostics.txt"));
        for (const auto& fa : out.results.features)
            if (!fa.ok)
                f << m.feature_ids[static_cast<std::size_t>(fa.feature)] << "\t"
                  << fa.error << "\n";
    }
}

}  // namespace missfactor
