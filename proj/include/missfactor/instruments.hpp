#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cstdint>
#include <vector>

#include "missfactor/data.hpp"
#include "missfactor/errors.hpp"
#include "missfactor/factor.hpp"
#include "missfactor/stats.hpp"

namespace missfactor {

// Per-feature scan of factor columns: p_{g,k} tests the C_k coefficient in a
// regression of y_g on (1, C_k) over the observed cells; q-values are
// computed columnwise across features.
struct InstrumentScan {
  std::vector<int> features;  // missing-set features with enough observations
  std::vector<int> excluded;  // too few observed cells for the scan
  Matrix p;                   // |features| x K
  Matrix q;                   // |features| x K
};

inline InstrumentScan instrument_scan(const IntensityMatrix& m,
                                      const std::vector<int>& missing_set,
                                      const Matrix& C) {
  const Eigen::Index n = m.n_samples(), K = C.cols();
  if (K < 2) throw ConfigError("instrument scan needs at least 2 factor columns");
  if (C.rows() != n) throw InputError("factor matrix row count mismatch");

  InstrumentScan out;
  const double min_obs = static_cast<double>(K) + 5.0;
  for (int g : missing_set) {
    const double n_obs = m.mask.row(g).sum();
    if (n_obs < min_obs) {
      out.excluded.push_back(g);
    } else {
      out.features.push_back(g);
    }
  }
  const auto rows = static_cast<Eigen::Index>(out.features.size());
  out.p = Matrix::Ones(rows, K);
  out.q = Matrix::Ones(rows, K);

  Matrix X(n, 2);
  X.col(0).setOnes();
  for (Eigen::Index row = 0; row < rows; ++row) {
    const int g = out.features[static_cast<std::size_t>(row)];
    const Vector y = m.values.row(g).transpose();
    const Vector r = m.mask.row(g).transpose();
    for (Eigen::Index k = 0; k < K; ++k) {
      X.col(1) = C.col(k);
      try {
        out.p(row, k) = ols_masked(y, X, r).p(1);
      } catch (const NumericError&) {
        out.p(row, k) = 1.0;  // no usable evidence for this column
      }
    }
  }
  for (Eigen::Index k = 0; k < K; ++k) {
    std::vector<double> col(static_cast<std::size_t>(rows));
    for (Eigen::Index row = 0; row < rows; ++row) {
      col[static_cast<std::size_t>(row)] = out.p(row, k);
    }
    if (rows > 0) {
      const auto qr = storey_qvalues(col);
      for (Eigen::Index row = 0; row < rows; ++row) {
        out.q(row, k) = qr.q[static_cast<std::size_t>(row)];
      }
    }
  }
  return out;
}

struct InstrumentAssignment {
  int feature = -1;
  int g1 = -1, g2 = -1;  // factor column indices, q_{g,g1} <= q_{g,g2}
  double q1 = 1.0, q2 = 1.0;
  Vector p_row;
};

// Picks the two factor columns with the smallest q-values; ties broken by
// smaller p, then smaller column index.
inline InstrumentAssignment select_instruments(const InstrumentScan& scan,
                                               Eigen::Index row) {
  if (row < 0 || row >= scan.p.rows()) {
    throw InputError("select_instruments: row out of range");
  }
  const Eigen::Index K = scan.p.cols();
  std::vector<int> ord(static_cast<std::size_t>(K));
  for (Eigen::Index k = 0; k < K; ++k) ord[static_cast<std::size_t>(k)] = static_cast<int>(k);
  std::sort(ord.begin(), ord.end(), [&](int a, int b) {
    if (scan.q(row, a) != scan.q(row, b)) return scan.q(row, a) < scan.q(row, b);
    if (scan.p(row, a) != scan.p(row, b)) return scan.p(row, a) < scan.p(row, b);
    return a < b;
  });
  InstrumentAssignment out;
  out.feature = scan.features[static_cast<std::size_t>(row)];
  out.g1 = ord[0];
  out.g2 = ord[1];
  out.q1 = scan.q(row, out.g1);
  out.q2 = scan.q(row, out.g2);
  out.p_row = scan.p.row(row).transpose();
  return out;
}

struct KMissSelection {
  int k = 0;
  std::vector<double> coverage;  // f(k) for k = 2..K_PA, in order
  bool fell_back = false;        // no candidate reached the coverage target
};

// Smallest k in {2, ..., K_PA} for which the fraction of missing-set features
// with a second instrument at q <= q_threshold reaches `coverage`; K_PA with
// a warning otherwise.
inline KMissSelection select_K_miss(const IntensityMatrix& m,
                                    const Partition& part, int K_PA,
                                    double q_threshold = 0.05,
                                    double coverage = 0.9) {
  if (K_PA < 2) throw ConfigError("select_K_miss needs K_PA >= 2");
  KMissSelection out;
  if (part.missing.empty()) {
    out.k = K_PA;
    return out;
  }
  const Eigen::Index n = m.n_samples();
  Matrix Y_obs(static_cast<Eigen::Index>(part.observed.size()), n);
  Matrix M_obs(static_cast<Eigen::Index>(part.observed.size()), n);
  for (std::size_t s = 0; s < part.observed.size(); ++s) {
    Y_obs.row(static_cast<Eigen::Index>(s)) = m.values.row(part.observed[s]);
    M_obs.row(static_cast<Eigen::Index>(s)) = m.mask.row(part.observed[s]);
  }
  const Matrix Z = Matrix::Ones(n, 1);
  const double denom = static_cast<double>(part.missing.size());
  for (int k = 2; k <= K_PA; ++k) {
    const auto F = estimate_complete_factors(Y_obs, M_obs, Z, k);
    const auto scan = instrument_scan(m, part.missing, F.C);
    double hits = 0.0;
    for (Eigen::Index row = 0; row < scan.p.rows(); ++row) {
      const auto a = select_instruments(scan, row);
      if (a.q2 <= q_threshold) hits += 1.0;
    }
    const double f_k = hits / denom;
    out.coverage.push_back(f_k);
    if (f_k >= coverage) {
      out.k = k;
      return out;
    }
  }
  out.k = K_PA;
  out.fell_back = true;
  return out;
}

}  // namespace missfactor
