#pragma once

#include "cfl/common.hpp"
#include "cfl/rng.hpp"
#include "cfl/threads.hpp"

#include <algorithm>
#include <limits>
#include <vector>

namespace cfl::ot {

/// Equal-size weighted point cloud in the (signal, label) plane.
struct PointCloud2 {
  Matrix pts;  // m x 2

  Eigen::Index size() const { return pts.rows(); }
};

/// Optimal coupling between two m-point uniform clouds. For equal uniform
/// weights an optimal coupling is a permutation with mass 1/m per pair, so
/// only the matching is stored.
struct TransportPlan {
  std::vector<int> match;  // row i of a pairs with column match[i] of b
  double cost = 0.0;

  Matrix coupling() const {
    const auto m = static_cast<Eigen::Index>(match.size());
    Matrix c = Matrix::Zero(m, m);
    for (Eigen::Index i = 0; i < m; ++i) c(i, match[static_cast<std::size_t>(i)]) = 1.0 / static_cast<double>(m);
    return c;
  }
};

namespace detail {

/// Minimum-cost perfect matching on a square cost matrix by shortest
/// augmenting paths with dual potentials (Jonker-Volgenant style, O(n^3)).
/// Exact up to floating-point addition order.
inline std::vector<int> solve_assignment(const Matrix& cost) {
  const int n = static_cast<int>(cost.rows());
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(static_cast<std::size_t>(n) + 1, 0.0);
  std::vector<double> v(static_cast<std::size_t>(n) + 1, 0.0);
  std::vector<int> p(static_cast<std::size_t>(n) + 1, 0);    // p[j]: row matched to column j
  std::vector<int> way(static_cast<std::size_t>(n) + 1, 0);  // predecessor column on the path
  std::vector<double> minv(static_cast<std::size_t>(n) + 1);
  std::vector<char> used(static_cast<std::size_t>(n) + 1);

  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::fill(minv.begin(), minv.end(), inf);
    std::fill(used.begin(), used.end(), 0);
    do {
      used[static_cast<std::size_t>(j0)] = 1;
      const int i0 = p[static_cast<std::size_t>(j0)];
      int j1 = -1;
      double delta = inf;
      for (int j = 1; j <= n; ++j) {
        if (used[static_cast<std::size_t>(j)]) continue;
        const double cur = cost(i0 - 1, j - 1) - u[static_cast<std::size_t>(i0)] - v[static_cast<std::size_t>(j)];
        if (cur < minv[static_cast<std::size_t>(j)]) {
          minv[static_cast<std::size_t>(j)] = cur;
          way[static_cast<std::size_t>(j)] = j0;
        }
        if (minv[static_cast<std::size_t>(j)] < delta) {
          delta = minv[static_cast<std::size_t>(j)];
          j1 = j;
        }
      }
      for (int j = 0; j <= n; ++j) {
        if (used[static_cast<std::size_t>(j)]) {
          u[static_cast<std::size_t>(p[static_cast<std::size_t>(j)])] += delta;
          v[static_cast<std::size_t>(j)] -= delta;
        } else {
          minv[static_cast<std::size_t>(j)] -= delta;
        }
      }
      j0 = j1;
    } while (p[static_cast<std::size_t>(j0)] != 0);
    do {
      const int j1 = way[static_cast<std::size_t>(j0)];
      p[static_cast<std::size_t>(j0)] = p[static_cast<std::size_t>(j1)];
      j0 = j1;
    } while (j0 != 0);
  }

  std::vector<int> row_to_col(static_cast<std::size_t>(n), -1);
  for (int j = 1; j <= n; ++j)
    if (p[static_cast<std::size_t>(j)] > 0) row_to_col[static_cast<std::size_t>(p[static_cast<std::size_t>(j)]) - 1] = j - 1;
  return row_to_col;
}

inline Matrix l1_cost_matrix(const Matrix& a, const Matrix& b) {
  const Eigen::Index m = a.rows();
  Matrix c(m, m);
  for (Eigen::Index i = 0; i < m; ++i)
    for (Eigen::Index j = 0; j < m; ++j)
      c(i, j) = (a.row(i) - b.row(j)).cwiseAbs().sum();
  return c;
}

}  // namespace detail

/// Exact W1 with l1 ground cost between two equal-size uniform point sets
/// (any column count). Returns the per-sample-normalized cost and the plan.
inline std::pair<double, TransportPlan> w1_exact_points(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows())
    throw config_error("w1_exact: clouds must have equal sizes (" + std::to_string(a.rows()) +
                       " vs " + std::to_string(b.rows()) + ")");
  if (a.cols() != b.cols()) throw config_error("w1_exact: dimension mismatch");
  if (a.rows() == 0) throw config_error("w1_exact: empty cloud");
  if (!all_finite(a) || !all_finite(b)) throw numeric_error("w1_exact: non-finite coordinates");

  TransportPlan plan;
  plan.match = detail::solve_assignment(detail::l1_cost_matrix(a, b));
  double total = 0.0;
  for (Eigen::Index i = 0; i < a.rows(); ++i)
    total += (a.row(i) - b.row(plan.match[static_cast<std::size_t>(i)])).cwiseAbs().sum();
  plan.cost = total / static_cast<double>(a.rows());
  return {plan.cost, plan};
}

inline std::pair<double, TransportPlan> w1_exact(const PointCloud2& a, const PointCloud2& b) {
  return w1_exact_points(a.pts, b.pts);
}

/// 1-D W1 for equal-size uniform empiricals: mean |x_(i) - y_(i)| over the
/// sorted order. Closed form, used as an independent check on w1_exact.
inline double w1_1d(std::vector<double> x, std::vector<double> y) {
  if (x.size() != y.size()) throw config_error("w1_1d: length mismatch");
  if (x.empty()) throw config_error("w1_1d: empty input");
  std::sort(x.begin(), x.end());
  std::sort(y.begin(), y.end());
  double total = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) total += std::abs(x[i] - y[i]);
  return total / static_cast<double>(x.size());
}

/// (signal, label) samples of one domain, as produced by a trained model.
struct DomainCloud {
  int domain_id = 0;
  Vector signals;
  Vector labels;
};

struct PairDistance {
  int source_id;
  int val_id;
  int batch;
  double w1;
};

struct WassersteinTermResult {
  double term = 0.0;                       // mean over sources of W_hat(source)
  std::vector<double> per_source;          // W_hat per source, source order
  std::vector<PairDistance> pairs;         // every batch-wise distance
  bool with_replacement_fallback = false;  // a domain was smaller than batches*batch_size
};

namespace detail {

// Deterministic batch split for one domain: a shuffled disjoint partition,
// or with-replacement draws when the domain is too small.
inline std::vector<std::vector<int>> split_batches(Eigen::Index n, int batches, int batch_size,
                                                   Rng rng, bool* fallback) {
  std::vector<std::vector<int>> out(static_cast<std::size_t>(batches));
  const Eigen::Index need = static_cast<Eigen::Index>(batches) * batch_size;
  if (n >= need) {
    std::vector<int> idx(static_cast<std::size_t>(n));
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int>(i);
    rng.shuffle(idx);
    for (int b = 0; b < batches; ++b)
      out[static_cast<std::size_t>(b)] =
          std::vector<int>(idx.begin() + static_cast<std::ptrdiff_t>(b) * batch_size,
                           idx.begin() + static_cast<std::ptrdiff_t>(b + 1) * batch_size);
  } else {
    if (fallback) *fallback = true;
    for (int b = 0; b < batches; ++b) {
      auto& dst = out[static_cast<std::size_t>(b)];
      dst.resize(static_cast<std::size_t>(batch_size));
      for (int i = 0; i < batch_size; ++i) dst[static_cast<std::size_t>(i)] = static_cast<int>(rng.uniform_int(n));
    }
  }
  return out;
}

inline Matrix gather_cloud(const DomainCloud& d, const std::vector<int>& idx) {
  Matrix m(static_cast<Eigen::Index>(idx.size()), 2);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    m(static_cast<Eigen::Index>(i), 0) = d.signals(idx[i]);
    m(static_cast<Eigen::Index>(i), 1) = d.labels(idx[i]);
  }
  return m;
}

}  // namespace detail

/// Batch-averaged empirical W1 between every source domain and the
/// surrogate OOS set: for each (source, val) pair both domains are split
/// into `batches` batches of `batch_size`, batch-wise exact distances are
/// averaged, then averaged over val domains and finally over sources.
inline WassersteinTermResult wasserstein_term(const std::vector<DomainCloud>& sources,
                                              const std::vector<DomainCloud>& surrogate_oos,
                                              int batches, int batch_size, std::uint64_t seed) {
  if (sources.empty() || surrogate_oos.empty())
    throw config_error("wasserstein_term: empty domain set");
  require(batches > 0 && batch_size > 0, "wasserstein_term: batches and batch_size must be > 0");

  WassersteinTermResult res;
  Rng master(seed);
  bool fallback = false;

  auto batches_for = [&](const DomainCloud& d) {
    return detail::split_batches(d.signals.size(), batches, batch_size,
                                 master.split(0x5EEDull ^ static_cast<std::uint64_t>(
                                                              static_cast<std::int64_t>(d.domain_id) + (1 << 20))),
                                 &fallback);
  };

  std::vector<std::vector<std::vector<int>>> src_batches(sources.size());
  std::vector<std::vector<std::vector<int>>> val_batches(surrogate_oos.size());
  for (std::size_t s = 0; s < sources.size(); ++s) src_batches[s] = batches_for(sources[s]);
  for (std::size_t v = 0; v < surrogate_oos.size(); ++v) val_batches[v] = batches_for(surrogate_oos[v]);

  const std::size_t n_pairs = sources.size() * surrogate_oos.size();
  std::vector<std::vector<PairDistance>> pair_rows(n_pairs);
  std::vector<double> pair_mean(n_pairs, 0.0);

  parallel_for(n_pairs, [&](std::size_t cell) {
    const std::size_t s = cell / surrogate_oos.size();
    const std::size_t v = cell % surrogate_oos.size();
    double acc = 0.0;
    for (int b = 0; b < batches; ++b) {
      const Matrix ca = detail::gather_cloud(sources[s], src_batches[s][static_cast<std::size_t>(b)]);
      const Matrix cb = detail::gather_cloud(surrogate_oos[v], val_batches[v][static_cast<std::size_t>(b)]);
      const double w = w1_exact_points(ca, cb).first;
      acc += w;
      pair_rows[cell].push_back({sources[s].domain_id, surrogate_oos[v].domain_id, b, w});
    }
    pair_mean[cell] = acc / batches;
  });

  res.with_replacement_fallback = fallback;
  res.per_source.resize(sources.size(), 0.0);
  for (std::size_t s = 0; s < sources.size(); ++s) {
    double acc = 0.0;
    for (std::size_t v = 0; v < surrogate_oos.size(); ++v) {
      const std::size_t cell = s * surrogate_oos.size() + v;
      acc += pair_mean[cell];
      for (const auto& p : pair_rows[cell]) res.pairs.push_back(p);
    }
    res.per_source[s] = acc / static_cast<double>(surrogate_oos.size());
    res.term += res.per_source[s];
  }
  res.term /= static_cast<double>(sources.size());
  return res;
}

}  // namespace cfl::ot
