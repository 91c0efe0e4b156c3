#pragma once

#include "cfl/common.hpp"

#include <limits>
#include <vector>

namespace cfl {

struct GeometricMedianResult {
  Vector point;
  int iterations = 0;
  bool converged = false;
  double gradient_norm = 0.0;  // first-order condition residual at the result
};

/// Norm of the first-order condition at y, excluding coincident points:
/// || sum_i (x_i - y)/||x_i - y|| ||. Zero at an interior geometric median.
inline double geometric_median_gradient_norm(const std::vector<Vector>& points, const Vector& y) {
  Vector pull = Vector::Zero(y.size());
  for (const auto& p : points) {
    const double d = (p - y).norm();
    if (d > 0.0) pull += (p - y) / d;
  }
  return pull.norm();
}

/// Geometric median (minimizer of the mean Euclidean distance).
///
/// Weiszfeld iteration with the Vardi-Zhang treatment of iterates landing
/// on data points, plus two refinements that the near-colinear coefficient
/// trajectories of this codebase need:
///   - every data point is tested against the exact optimality certificate
///     (pull of the others <= multiplicity) before iterating, so optima at
///     data points are returned exactly instead of being crawled toward;
///   - in the smooth region a guarded Newton step is taken when it beats
///     the Weiszfeld step, which rescues the nearly flat valleys where
///     plain Weiszfeld contracts at a rate close to one.
inline GeometricMedianResult geometric_median(const std::vector<Vector>& points,
                                              double tol = 1e-9, int max_iter = 10000) {
  require(!points.empty(), "geometric_median: no points");
  const auto dim = points.front().size();
  const auto count = static_cast<double>(points.size());
  for (const auto& p : points)
    if (p.size() != dim) throw config_error("geometric_median: dimension mismatch");

  GeometricMedianResult res;

  double scale = 1.0;
  for (const auto& p : points) scale = std::max(scale, p.norm());
  const double coincide_tol = 1e-13 * scale;
  const double pull_tol = std::max(tol, 1e-9) * count;

  const auto pull_at = [&](const Vector& y, int* multiplicity) {
    Vector pull = Vector::Zero(dim);
    int m = 0;
    for (const auto& p : points) {
      const double d = (p - y).norm();
      if (d <= coincide_tol)
        ++m;
      else
        pull += (p - y) / d;
    }
    if (multiplicity) *multiplicity = m;
    return pull;
  };
  const auto objective = [&](const Vector& y) {
    double acc = 0.0;
    for (const auto& p : points) acc += (p - y).norm();
    return acc;
  };

  // exact certificate: a data point is optimal iff the pull of the others
  // does not exceed its multiplicity
  for (const auto& cand : points) {
    int m = 0;
    const Vector pull = pull_at(cand, &m);
    if (pull.norm() <= static_cast<double>(m) * (1.0 + 1e-9)) {
      res.converged = true;
      res.point = cand;
      res.gradient_norm = pull.norm();
      return res;
    }
  }

  Vector y = Vector::Zero(dim);
  for (const auto& p : points) y += p;
  y /= count;

  for (int it = 0; it < max_iter; ++it) {
    res.iterations = it;
    int m = 0;
    const Vector pull = pull_at(y, &m);
    if (m == 0 && pull.norm() <= pull_tol) {
      res.converged = true;
      break;
    }

    // Weiszfeld / Vardi-Zhang candidate
    Vector tsum = Vector::Zero(dim);
    double wsum = 0.0;
    for (const auto& p : points) {
      const double d = (p - y).norm();
      if (d <= coincide_tol) continue;
      tsum += p / d;
      wsum += 1.0 / d;
    }
    if (wsum == 0.0) {  // every point coincides with y
      res.converged = true;
      break;
    }
    Vector next = tsum / wsum;
    if (m > 0) {
      const double r = pull.norm();
      if (r <= static_cast<double>(m)) {
        res.converged = true;
        break;
      }
      const double eta = static_cast<double>(m) / r;
      next = (1.0 - eta) * next + eta * y;
    } else {
      // guarded Newton step on sum_i ||x_i - y||
      Matrix hess = Matrix::Zero(dim, dim);
      for (const auto& p : points) {
        const double d = (p - y).norm();
        const Vector u = (p - y) / d;
        hess += (Matrix::Identity(dim, dim) - u * u.transpose()) / d;
      }
      const Vector delta = hess.ldlt().solve(pull);
      if (delta.allFinite() && delta.norm() <= 4.0 * scale) {
        const Vector newton = y + delta;
        if (objective(newton) < objective(next)) next = newton;
      }
    }

    y = next;
  }

  if (!res.converged) {
    const double gap = geometric_median_gradient_norm(points, y);
    throw numeric_error("geometric_median: no convergence after " + std::to_string(max_iter) +
                        " iterations, first-order gap " + std::to_string(gap));
  }
  res.point = y;
  res.gradient_norm = geometric_median_gradient_norm(points, y);
  return res;
}

}  // namespace cfl
