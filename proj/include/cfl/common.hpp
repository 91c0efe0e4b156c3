#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <stdexcept>
#include <string>

namespace cfl {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

/// Bad configuration or malformed input. Mapped to exit code 1 by the CLI.
class config_error : public std::runtime_error {
 public:
  explicit config_error(const std::string& what) : std::runtime_error(what) {}
};

/// Numerical failure (divergence, singular system, non-finite values).
/// Mapped to exit code 2 by the CLI.
class numeric_error : public std::runtime_error {
 public:
  explicit numeric_error(const std::string& what) : std::runtime_error(what) {}
};

inline bool all_finite(const Matrix& m) { return m.allFinite(); }
inline bool all_finite(const Vector& v) { return v.allFinite(); }

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw config_error(msg);
}

/// Population (1/n) column standardization: subtract mean, divide by std.
/// Throws numeric_error if a column is constant; `which` names the column.
struct ColumnMoments {
  Vector mean;
  Vector stddev;
};

inline ColumnMoments column_moments(const Matrix& x) {
  ColumnMoments m;
  m.mean = x.colwise().mean();
  Matrix centered = x.rowwise() - m.mean.transpose();
  m.stddev = (centered.array().square().colwise().mean()).sqrt();
  return m;
}

inline Matrix standardize_columns(const Matrix& x, ColumnMoments* out = nullptr) {
  ColumnMoments m = column_moments(x);
  for (Eigen::Index k = 0; k < m.stddev.size(); ++k) {
    if (!(m.stddev(k) > 0.0))
      throw numeric_error("standardize: column " + std::to_string(k) + " is constant");
  }
  Matrix s = (x.rowwise() - m.mean.transpose()).array().rowwise() / m.stddev.transpose().array();
  if (out) *out = m;
  return s;
}

inline Vector standardize_vector(const Vector& v, double* mean_out = nullptr,
                                 double* std_out = nullptr) {
  const double mu = v.mean();
  const double sd = std::sqrt((v.array() - mu).square().mean());
  if (!(sd > 0.0)) throw numeric_error("standardize: constant vector");
  if (mean_out) *mean_out = mu;
  if (std_out) *std_out = sd;
  return (v.array() - mu) / sd;
}

}  // namespace cfl
