#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstddef>
#include <string>
#include <unordered_set>
#include <vector>

#include "missfactor/errors.hpp"

namespace missfactor {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

// Feature-by-sample intensity matrix.  Missing cells hold 0 in `values` and 0
// in `mask`, so downstream code can multiply by the mask instead of branching.
struct IntensityMatrix {
  std::vector<std::string> feature_ids;  // length p
  std::vector<std::string> sample_ids;   // length n
  Matrix values;                         // p x n, 0 at missing cells
  Matrix mask;                           // p x n, 1 = observed

  Eigen::Index n_features() const { return values.rows(); }
  Eigen::Index n_samples() const { return values.cols(); }

  void validate() const {
    const Eigen::Index p = values.rows(), n = values.cols();
    if (p < 1) throw EmptyInputError("intensity matrix has no features");
    if (n < 3) throw InputError("intensity matrix needs at least 3 samples");
    if (mask.rows() != p || mask.cols() != n) {
      throw InputError("mask shape does not match values");
    }
    if (static_cast<Eigen::Index>(feature_ids.size()) != p ||
        static_cast<Eigen::Index>(sample_ids.size()) != n) {
      throw InputError("id lists do not match matrix shape");
    }
    check_unique(feature_ids, "feature");
    check_unique(sample_ids, "sample");
    for (Eigen::Index g = 0; g < p; ++g) {
      for (Eigen::Index i = 0; i < n; ++i) {
        const double r = mask(g, i);
        if (r != 0.0 && r != 1.0) throw InputError("mask entries must be 0 or 1");
        if (r == 0.0 && values(g, i) != 0.0) {
          throw InputError("missing cells must store 0 in values");
        }
        if (r == 1.0 && !std::isfinite(values(g, i))) {
          throw InputError("observed cells must be finite");
        }
      }
    }
  }

 private:
  static void check_unique(const std::vector<std::string>& ids,
                           const char* what) {
    std::unordered_set<std::string> seen;
    for (const auto& id : ids) {
      if (!seen.insert(id).second) {
        throw DuplicateIdError(std::string("duplicate ") + what + " id: " + id);
      }
    }
  }
};

// Covariates of interest plus nuisance covariates (the intercept lives in the
// nuisance block, exactly once).
struct DesignMatrices {
  Matrix X_interest;  // n x d_interest
  Matrix X_nuisance;  // n x d_nuisance

  Eigen::Index n_samples() const { return X_interest.rows(); }
  Eigen::Index d_interest() const { return X_interest.cols(); }
  Eigen::Index d_nuisance() const { return X_nuisance.cols(); }

  Matrix combined() const {
    Matrix X(X_interest.rows(), X_interest.cols() + X_nuisance.cols());
    X << X_interest, X_nuisance;
    return X;
  }

  void validate() const {
    if (X_interest.rows() != X_nuisance.rows()) {
      throw InputError("interest and nuisance blocks disagree on sample count");
    }
    if (X_interest.cols() < 1) throw InputError("no covariates of interest");
    int ones = 0;
    for (Eigen::Index j = 0; j < X_nuisance.cols(); ++j) {
      if ((X_nuisance.col(j).array() == 1.0).all()) ++ones;
    }
    if (ones != 1) {
      throw InputError("nuisance block must contain exactly one intercept column");
    }
    const Matrix X = combined();
    Eigen::ColPivHouseholderQR<Matrix> qr(X);
    if (qr.rank() < X.cols()) {
      throw SingularDesignError("design matrix is rank deficient");
    }
  }
};

// Default design: a single intercept nuisance column.
inline DesignMatrices make_design(const Matrix& x_interest) {
  DesignMatrices d;
  d.X_interest = x_interest;
  d.X_nuisance = Matrix::Ones(x_interest.rows(), 1);
  return d;
}

enum class FeatureClass { Observed, Missing, Dropped };

// Split of features by missingness burden.  `observed` features carry at most
// floor(eps_miss * n) missing cells and anchor the factor estimates; `missing`
// features get the selection model; the rest are dropped.
struct Partition {
  std::vector<int> observed;
  std::vector<int> missing;
  std::vector<int> dropped;
  std::vector<FeatureClass> label;  // length p

  int miss_threshold = 0;  // floor(eps_miss * n)
  int drop_threshold = 0;  // floor(max_miss * n)
};

inline Partition partition_features(const IntensityMatrix& m,
                                    double eps_miss = 0.05,
                                    double max_miss = 0.5) {
  if (!(eps_miss >= 0.0) || !(max_miss >= eps_miss) || !(max_miss < 1.0)) {
    throw ConfigError("need 0 <= eps_miss <= max_miss < 1");
  }
  const Eigen::Index p = m.n_features(), n = m.n_samples();
  Partition out;
  out.label.resize(static_cast<std::size_t>(p));
  // The +1e-9 keeps e.g. 0.05 * 600 from landing just below 30.
  out.miss_threshold = static_cast<int>(std::floor(eps_miss * static_cast<double>(n) + 1e-9));
  out.drop_threshold = static_cast<int>(std::floor(max_miss * static_cast<double>(n) + 1e-9));
  for (Eigen::Index g = 0; g < p; ++g) {
    const int miss = static_cast<int>(std::lround(
        static_cast<double>(n) - m.mask.row(g).sum()));
    FeatureClass c;
    if (miss <= out.miss_threshold) {
      c = FeatureClass::Observed;
      out.observed.push_back(static_cast<int>(g));
    } else if (miss <= out.drop_threshold) {
      c = FeatureClass::Missing;
      out.missing.push_back(static_cast<int>(g));
    } else {
      c = FeatureClass::Dropped;
      out.dropped.push_back(static_cast<int>(g));
    }
    out.label[static_cast<std::size_t>(g)] = c;
  }
  if (out.observed.empty()) {
    throw NoCompleteFeaturesError(
        "no feature has few enough missing cells to anchor the factors");
  }
  return out;
}

}  // namespace missfactor
