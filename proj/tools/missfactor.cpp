// Command line front end: simulate / estimate-mechanism / associate.
// Exit codes: 0 ok, 2 input error, 3 numerical failure.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "missfactor/data.hpp"
#include "missfactor/errors.hpp"
#include "missfactor/io.hpp"
#include "missfactor/link.hpp"
#include "missfactor/pipeline.hpp"
#include "missfactor/sim.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace missfactor;

namespace {

json load_json_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw InputError("cannot open config file " + path);
    json j;
    try {
        f >> j;
    } catch (const json::exception& e) {
        throw ParseError(path + ": " + e.what());
    }
    return j;
}

MissingnessLink link_from_name(const std::string& name, double nu) {
    if (name == "logistic") return logistic_link();
    if (name == "probit") return probit_link();
    if (name == "tcdf" || name == "t" || name.rfind("t-cdf", 0) == 0)
        return student_t_link(nu);
    throw ConfigError("unknown link '" + name + "' (logistic, probit, tcdf)");
}

template <typename T>
void maybe(const json& j, const char* key, T* out) {
    if (j.contains(key)) *out = j.at(key).get<T>();
}

PipelineConfig pipeline_config_from_json(const json& j) {
    PipelineConfig cfg;
    maybe(j, "eps_miss", &cfg.eps_miss);
    maybe(j, "max_miss", &cfg.max_miss);
    if (j.contains("link")) {
        const auto& l = j.at("link");
        cfg.link = link_from_name(l.at("family").get<std::string>(),
                                  l.value("nu", 4.0));
    }
    maybe(j, "K_miss", &cfg.K_miss);
    maybe(j, "K", &cfg.K);
    maybe(j, "lfdr_threshold", &cfg.lfdr_threshold);
    maybe(j, "eps_qvalue", &cfg.eps_qvalue);
    maybe(j, "rounds", &cfg.rounds);
    maybe(j, "bootstrap_B", &cfg.bootstrap_B);
    if (j.contains("mcmc")) {
        const auto& mc = j.at("mcmc");
        maybe(mc, "iters", &cfg.mcmc.iters);
        maybe(mc, "burn", &cfg.mcmc.burn);
        maybe(mc, "thin", &cfg.mcmc.thin);
    }
    maybe(j, "n_permutations", &cfg.n_permutations);
    maybe(j, "seed", &cfg.seed);
    maybe(j, "n_threads", &cfg.n_threads);
    return cfg;
}

SimulationConfig sim_config_from_json(const json& j) {
    SimulationConfig cfg;
    maybe(j, "n", &cfg.n);
    maybe(j, "p", &cfg.p);
    maybe(j, "K", &cfg.K);
    if (j.contains("link")) {
        const auto& l = j.at("link");
        cfg.mech_link = link_from_name(l.at("family").get<std::string>(),
                                       l.value("nu", 4.0));
    }
    maybe(j, "mu_alpha", &cfg.mu_alpha);
    maybe(j, "sd_log_alpha", &cfg.sd_log_alpha);
    maybe(j, "mu_delta", &cfg.mu_delta);
    maybe(j, "sd_delta", &cfg.sd_delta);
    maybe(j, "mu_mean", &cfg.mu_mean);
    maybe(j, "sd_mean", &cfg.sd_mean);
    maybe(j, "sigma_shape_rate", &cfg.sigma_shape_rate);
    maybe(j, "beta_sparsity", &cfg.beta_sparsity);
    maybe(j, "beta_sd", &cfg.beta_sd);
    maybe(j, "confounding_r2", &cfg.confounding_r2);
    maybe(j, "pi_spike", &cfg.pi_spike);
    maybe(j, "target_eigenvalues", &cfg.target_eigenvalues);
    return cfg;
}

json vector_to_json(const Vector& v) {
    return json(std::vector<double>(v.data(), v.data() + v.size()));
}

json matrix_to_json(const Matrix& M) {
    json rows = json::array();
    for (Eigen::Index i = 0; i < M.rows(); ++i) {
        json row = json::array();
        for (Eigen::Index j = 0; j < M.cols(); ++j) row.push_back(M(i, j));
        rows.push_back(std::move(row));
    }
    return rows;
}

void save_mask(const std::string& path, const IntensityMatrix& m) {
    NumericTable t;
    t.col_names = m.sample_ids;
    t.row_ids = m.feature_ids;
    t.values = m.mask;
    save_numeric_table(path, t, "feature");
}

int run_simulate(const std::string& config_path, std::uint64_t seed,
                 const std::string& out_dir) {
    SimulationConfig cfg;
    if (!config_path.empty()) cfg = sim_config_from_json(load_json_file(config_path));
    cfg.seed = seed;
    const SimulatedDataset d = simulate_dataset(cfg);

    fs::create_directories(out_dir);
    const auto at = [&](const char* name) { return (fs::path(out_dir) / name).string(); };
    save_intensity_matrix(at("matrix.tsv"), d.matrix);
    save_mask(at("mask.tsv"), d.matrix);
    {
        // Design with the case/control contrast, directly usable by associate.
        NumericTable t;
        t.col_names = {"group"};
        t.row_ids = d.matrix.sample_ids;
        t.values = d.x_interest;
        save_numeric_table(at("design.tsv"), t, "sample");
    }

    json truth;
    truth["seed"] = cfg.seed;
    truth["n"] = cfg.n;
    truth["p"] = cfg.p;
    truth["K"] = cfg.K;
    truth["link"]["family"] = link_name(cfg.mech_link);
    if (cfg.mech_link.family == LinkFamily::TCdf) truth["link"]["nu"] = cfg.mech_link.nu;
    truth["mu_alpha"] = d.mu_alpha;
    truth["sd_log_alpha"] = cfg.sd_log_alpha;
    truth["mu_delta"] = cfg.mu_delta;
    truth["sd_delta"] = cfg.sd_delta;
    truth["mu_mean"] = cfg.mu_mean;
    truth["sd_mean"] = cfg.sd_mean;
    truth["sigma_shape_rate"] = cfg.sigma_shape_rate;
    truth["beta_sparsity"] = cfg.beta_sparsity;
    truth["beta_sd"] = cfg.beta_sd;
    truth["confounding_r2"] = cfg.confounding_r2;
    truth["pi_spike"] = cfg.pi_spike;
    truth["a"] = d.a;
    truth["tau2"] = vector_to_json(d.tau2);
    truth["expected_spectrum"] = vector_to_json(d.expected_spectrum);
    truth["realized_r2"] = d.realized_r2;
    truth["x_interest"] = vector_to_json(d.x_interest);
    truth["alpha"] = vector_to_json(d.alpha);
    truth["delta"] = vector_to_json(d.delta);
    truth["beta"] = vector_to_json(d.beta);
    truth["mu"] = vector_to_json(d.mu);
    truth["sigma2"] = vector_to_json(d.sigma2);
    truth["C"] = matrix_to_json(d.C);
    truth["L"] = matrix_to_json(d.L);
    std::ofstream tf(at("truth.json"));
    tf << truth.dump() << "\n";

    std::cout << "wrote " << out_dir << ": matrix.tsv mask.tsv design.tsv truth.json ("
              << cfg.p << " features x " << cfg.n << " samples, missing fraction "
              << 1.0 - d.matrix.mask.mean() << ")\n";
    return 0;
}

int run_estimate_mechanism(const std::string& matrix_path, const PipelineConfig& cfg,
                           const std::string& out_dir) {
    const IntensityMatrix m = load_intensity_matrix(matrix_path);
    MechanismEstimate mech = estimate_mechanism(m, cfg);
    mech.matrix_hash = hash_file(matrix_path);
    save_mechanism(mech, m, out_dir);
    int n_subset = 0;
    for (bool b : mech.subset_flags) n_subset += b ? 1 : 0;
    std::cout << "wrote " << out_dir << ": " << mech.part.missing.size()
              << " missing-set features (" << n_subset << " in the usable subset), "
              << mech.part.observed.size() << " nearly complete, "
              << mech.part.dropped.size() << " dropped, K_miss=" << mech.K_miss
              << "\n";
    return 0;
}

DesignMatrices load_design(const std::string& path,
                           const std::vector<std::string>& interest_cols,
                           const IntensityMatrix& m) {
    const NumericTable t = load_numeric_table(path);
    if (t.row_ids != m.sample_ids) {
        // Accept a permutation of the matrix samples, nothing looser.
        std::vector<std::string> a = t.row_ids, b = m.sample_ids;
        std::sort(a.begin(), a.end());
        std::sort(b.begin(), b.end());
        if (a != b)
            throw InputError("design rows do not match the matrix sample ids");
    }
    std::vector<Eigen::Index> order(m.sample_ids.size());
    {
        std::unordered_map<std::string, Eigen::Index> pos;
        for (std::size_t i = 0; i < t.row_ids.size(); ++i)
            pos[t.row_ids[i]] = static_cast<Eigen::Index>(i);
        for (std::size_t i = 0; i < m.sample_ids.size(); ++i)
            order[i] = pos.at(m.sample_ids[i]);
    }

    std::vector<std::string> interest = interest_cols;
    if (interest.empty()) interest = {t.col_names.front()};
    std::vector<Eigen::Index> icols, ncols;
    for (const auto& name : interest) {
        const auto it = std::find(t.col_names.begin(), t.col_names.end(), name);
        if (it == t.col_names.end())
            throw InputError("design has no column named '" + name + "'");
        icols.push_back(static_cast<Eigen::Index>(it - t.col_names.begin()));
    }
    for (Eigen::Index j = 0; j < static_cast<Eigen::Index>(t.col_names.size()); ++j)
        if (std::find(icols.begin(), icols.end(), j) == icols.end())
            ncols.push_back(j);

    const auto n = static_cast<Eigen::Index>(m.sample_ids.size());
    DesignMatrices d;
    d.X_interest.resize(n, static_cast<Eigen::Index>(icols.size()));
    for (std::size_t j = 0; j < icols.size(); ++j)
        for (Eigen::Index i = 0; i < n; ++i)
            d.X_interest(i, static_cast<Eigen::Index>(j)) =
                t.values(order[static_cast<std::size_t>(i)], icols[j]);
    bool has_intercept = false;
    d.X_nuisance.resize(n, static_cast<Eigen::Index>(ncols.size()));
    for (std::size_t j = 0; j < ncols.size(); ++j) {
        for (Eigen::Index i = 0; i < n; ++i)
            d.X_nuisance(i, static_cast<Eigen::Index>(j)) =
                t.values(order[static_cast<std::size_t>(i)], ncols[j]);
        if ((d.X_nuisance.col(static_cast<Eigen::Index>(j)).array() == 1.0).all())
            has_intercept = true;
    }
    if (!has_intercept) {
        Matrix Xn(n, d.X_nuisance.cols() + 1);
        Xn.col(0).setOnes();
        Xn.rightCols(d.X_nuisance.cols()) = d.X_nuisance;
        d.X_nuisance = Xn;
    }
    d.validate();
    return d;
}

int run_associate(const std::string& matrix_path, const std::string& design_path,
                  const std::vector<std::string>& interest_cols,
                  const std::string& mech_dir, const PipelineConfig& cfg,
                  const std::string& out_dir) {
    const IntensityMatrix m = load_intensity_matrix(matrix_path);
    const DesignMatrices design = load_design(design_path, interest_cols, m);
    const MechanismEstimate mech =
        load_mechanism(mech_dir, m, hash_file(matrix_path));
    const AssociationOutput out = run_association(m, design, mech, cfg);
    save_association(out, m, design, out_dir);
    std::cout << "wrote " << out_dir << ": " << out.results.features.size()
              << " feature results (" << out.results.n_failed << " failed), K="
              << out.K << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"MNAR-aware factor adjustment for intensity matrices"};
    app.require_subcommand(1);

    std::string config_path, matrix_path, design_path, mech_dir, out_dir;
    std::string link_name_flag;
    double link_nu = 4.0;
    std::vector<std::string> interest_cols;
    std::optional<std::uint64_t> seed_flag;
    std::optional<int> threads_flag, kmiss_flag, k_flag, boot_flag;
    std::optional<double> eps_miss_flag, max_miss_flag, lfdr_flag, eps_q_flag;

    auto* sim = app.add_subcommand("simulate", "generate a benchmark dataset");
    sim->add_option("--config", config_path, "simulation config JSON");
    sim->add_option("--seed", seed_flag, "RNG seed (required)");
    sim->add_option("--out", out_dir, "output directory")->required();

    auto* mech = app.add_subcommand("estimate-mechanism",
                                    "per-feature dropout mechanism from the matrix alone");
    mech->add_option("--matrix", matrix_path, "intensity TSV/CSV")->required();
    mech->add_option("--config", config_path, "pipeline config JSON");
    mech->add_option("--out", out_dir, "artifact directory")->required();
    mech->add_option("--seed", seed_flag, "RNG seed");
    mech->add_option("--threads", threads_flag, "worker count");
    mech->add_option("--eps-miss", eps_miss_flag, "nearly complete threshold");
    mech->add_option("--max-miss", max_miss_flag, "drop threshold");
    mech->add_option("--k-miss", kmiss_flag, "instrument factor count (0 = auto)");
    mech->add_option("--link", link_name_flag, "logistic | probit | tcdf");
    mech->add_option("--nu", link_nu, "degrees of freedom for tcdf");
    mech->add_option("--lfdr-threshold", lfdr_flag, "mechanism flag threshold");
    mech->add_option("--bootstrap-B", boot_flag, "bootstrap replicates");

    auto* assoc = app.add_subcommand("associate",
                                     "factor recovery and per-feature inference");
    assoc->add_option("--matrix", matrix_path, "intensity TSV/CSV")->required();
    assoc->add_option("--design", design_path, "sample covariate TSV")->required();
    assoc->add_option("--interest", interest_cols,
                      "design columns of interest (default: first)");
    assoc->add_option("--mechanism", mech_dir, "artifact directory")->required();
    assoc->add_option("--config", config_path, "pipeline config JSON");
    assoc->add_option("--out", out_dir, "output directory")->required();
    assoc->add_option("--seed", seed_flag, "RNG seed");
    assoc->add_option("--threads", threads_flag, "worker count");
    assoc->add_option("--K", k_flag, "factor count (0 = parallel analysis)");
    assoc->add_option("--eps-qvalue", eps_q_flag, "screening q threshold");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (sim->parsed()) {
            if (!seed_flag)
                throw ConfigError("simulate requires an explicit --seed");
            return run_simulate(config_path, *seed_flag, out_dir);
        }

        PipelineConfig cfg;
        if (!config_path.empty())
            cfg = pipeline_config_from_json(load_json_file(config_path));
        if (seed_flag) cfg.seed = *seed_flag;
        if (threads_flag) cfg.n_threads = *threads_flag;
        if (eps_miss_flag) cfg.eps_miss = *eps_miss_flag;
        if (max_miss_flag) cfg.max_miss = *max_miss_flag;
        if (kmiss_flag) cfg.K_miss = *kmiss_flag;
        if (k_flag) cfg.K = *k_flag;
        if (lfdr_flag) cfg.lfdr_threshold = *lfdr_flag;
        if (eps_q_flag) cfg.eps_qvalue = *eps_q_flag;
        if (boot_flag) cfg.bootstrap_B = *boot_flag;
        if (!link_name_flag.empty()) cfg.link = link_from_name(link_name_flag, link_nu);

        if (mech->parsed())
            return run_estimate_mechanism(matrix_path, cfg, out_dir);
        return run_associate(matrix_path, design_path, interest_cols, mech_dir,
                             cfg, out_dir);
    } catch (const InputError& e) {
        std::cerr << "input error: " << e.what() << "\n";
        return 2;
    } catch (const NumericError& e) {
        std::cerr << "numerical failure: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    }
}
