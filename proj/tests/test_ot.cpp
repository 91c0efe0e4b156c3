#include "cfl/ot.hpp"

#include "cfl/rng.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <numeric>
#include <vector>

using namespace cfl;
using namespace cfl::ot;

namespace {

// Factorial enumeration oracle: exact minimum over all pairings.
double w1_brute_force(const Matrix& a, const Matrix& b) {
  const int m = static_cast<int>(a.rows());
  std::vector<int> perm(static_cast<std::size_t>(m));
  std::iota(perm.begin(), perm.end(), 0);
  double best = std::numeric_limits<double>::infinity();
  do {
    double c = 0.0;
    for (int i = 0; i < m; ++i) c += (a.row(i) - b.row(perm[static_cast<std::size_t>(i)])).cwiseAbs().sum();
    best = std::min(best, c);
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best / m;
}

Matrix random_cloud(Rng& rng, int m, int d = 2, double scale = 1.0) {
  Matrix c(m, d);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < d; ++j) c(i, j) = scale * rng.normal();
  return c;
}

}  // namespace

TEST_CASE("identical clouds cost zero with an identity-cost matching") {
  Rng rng(1);
  const Matrix a = random_cloud(rng, 12);
  auto [cost, plan] = w1_exact_points(a, a);
  REQUIRE(cost == 0.0);
  for (std::size_t i = 0; i < plan.match.size(); ++i)
    REQUIRE((a.row(static_cast<Eigen::Index>(i)) - a.row(plan.match[i])).cwiseAbs().sum() == 0.0);
}

TEST_CASE("singleton pair is the l1 distance") {
  Matrix a(1, 2), b(1, 2);
  a << 0.0, 0.0;
  b << 1.0, 2.0;
  REQUIRE(w1_exact_points(a, b).first == Catch::Approx(3.0).margin(1e-15));
}

TEST_CASE("assignment solver equals factorial enumeration for small clouds") {
  Rng rng(2024);
  for (int trial = 0; trial < 60; ++trial) {
    const int m = 2 + static_cast<int>(rng.uniform_int(5));  // 2..6
    const Matrix a = random_cloud(rng, m);
    const Matrix b = random_cloud(rng, m);
    const double exact = w1_exact_points(a, b).first;
    const double brute = w1_brute_force(a, b);
    REQUIRE(std::abs(exact - brute) < 1e-12);
  }
}

TEST_CASE("1-D sorted closed form agrees with the assignment solver") {
  REQUIRE(w1_1d({0.0, 1.0}, {1.0, 2.0}) == Catch::Approx(1.0).margin(1e-15));
  REQUIRE(w1_1d({3.0, 1.0, 2.0}, {3.0, 1.0, 2.0}) == 0.0);

  Rng rng(77);
  for (int trial = 0; trial < 25; ++trial) {
    const int m = 32;
    std::vector<double> x, y;
    Matrix a = Matrix::Zero(m, 2), b = Matrix::Zero(m, 2);
    for (int i = 0; i < m; ++i) {
      x.push_back(rng.normal());
      y.push_back(rng.normal() + 0.3);
      a(i, 0) = x.back();
      b(i, 0) = y.back();
    }
    REQUIRE(std::abs(w1_exact_points(a, b).first - w1_1d(x, y)) < 1e-9);
  }
}

TEST_CASE("metric properties on random triples") {
  Rng rng(5);
  for (int trial = 0; trial < 30; ++trial) {
    const int m = 10;
    const Matrix a = random_cloud(rng, m);
    const Matrix b = random_cloud(rng, m);
    const Matrix c = random_cloud(rng, m);
    const double ab = w1_exact_points(a, b).first;
    const double ba = w1_exact_points(b, a).first;
    const double ac = w1_exact_points(a, c).first;
    const double cb = w1_exact_points(c, b).first;
    REQUIRE(w1_exact_points(a, a).first == 0.0);
    REQUIRE(std::abs(ab - ba) < 1e-9);
    REQUIRE(ab <= ac + cb + 1e-9);
  }
}

TEST_CASE("translation properties") {
  Rng rng(6);
  const int m = 16;
  const Matrix a = random_cloud(rng, m);
  const Matrix b = random_cloud(rng, m);
  Eigen::RowVector2d v(0.7, -1.3);
  const double base = w1_exact_points(a, b).first;

  const Matrix a2 = a.rowwise() + v;
  const Matrix b2 = b.rowwise() + v;
  REQUIRE(std::abs(w1_exact_points(a2, b2).first - base) < 1e-9);

  // shifting one cloud moves the cost by at most |v|_1, exactly |v|_1 from cost 0
  const double shifted = w1_exact_points(a, Matrix(a.rowwise() + v)).first;
  REQUIRE(std::abs(shifted - v.cwiseAbs().sum()) < 1e-9);
  REQUIRE(w1_exact_points(a2, b).first <= base + v.cwiseAbs().sum() + 1e-9);
}

TEST_CASE("transport plan invariants") {
  Rng rng(7);
  const int m = 8;
  const Matrix a = random_cloud(rng, m);
  const Matrix b = random_cloud(rng, m);
  auto [cost, plan] = w1_exact_points(a, b);
  const Matrix coupling = plan.coupling();
  for (int i = 0; i < m; ++i) {
    REQUIRE(std::abs(coupling.row(i).sum() - 1.0 / m) < 1e-9);
    REQUIRE(std::abs(coupling.col(i).sum() - 1.0 / m) < 1e-9);
  }
  double recomputed = 0.0;
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < m; ++j) recomputed += coupling(i, j) * (a.row(i) - b.row(j)).cwiseAbs().sum();
  REQUIRE(std::abs(recomputed - cost) < 1e-9);
}

TEST_CASE("size mismatch is rejected") {
  Matrix a(2, 2), b(3, 2);
  a.setZero();
  b.setZero();
  REQUIRE_THROWS_AS(w1_exact_points(a, b), config_error);
  REQUIRE_THROWS_AS(w1_1d({1.0}, {1.0, 2.0}), config_error);
}

TEST_CASE("batch-averaged estimate upper-bounds the pooled distance in most trials") {
  Rng rng(8);
  int ok = 0;
  const int trials = 40;
  for (int t = 0; t < trials; ++t) {
    const int m = 60, batch = 20;
    const Matrix a = random_cloud(rng, m);
    Matrix b = random_cloud(rng, m);
    b.col(0).array() += 0.2;
    const double pooled = w1_exact_points(a, b).first;
    double mean_batches = 0.0;
    for (int k = 0; k < m / batch; ++k) {
      mean_batches +=
          w1_exact_points(a.middleRows(k * batch, batch), b.middleRows(k * batch, batch)).first;
    }
    mean_batches /= (m / batch);
    if (mean_batches >= pooled - 1e-12) ++ok;
  }
  REQUIRE(ok >= static_cast<int>(0.95 * trials));
}

TEST_CASE("wasserstein_term on identical joints is near zero") {
  Rng rng(9);
  std::vector<DomainCloud> src(2), val(1);
  const int n = 400;
  for (int s = 0; s < 2; ++s) {
    src[static_cast<std::size_t>(s)].domain_id = -(s + 1);
    src[static_cast<std::size_t>(s)].signals.resize(n);
    src[static_cast<std::size_t>(s)].labels.resize(n);
  }
  val[0].domain_id = 0;
  val[0].signals.resize(n);
  val[0].labels.resize(n);
  for (int i = 0; i < n; ++i) {
    for (auto* d : {&src[0], &src[1], &val[0]}) {
      const double r = rng.normal();
      d->labels(i) = r;
      d->signals(i) = r;  // perfect model, identical joint up to sampling
    }
  }
  const auto res = wasserstein_term(src, val, 2, 200, 11);
  REQUIRE(res.term < 0.4);  // pure sampling bias at batch size 200
  REQUIRE(res.pairs.size() == 2 * 1 * 2);
  REQUIRE_FALSE(res.with_replacement_fallback);
}

TEST_CASE("wasserstein_term responds to a joint shift by about its l1 size") {
  Rng rng(10);
  const int n = 1200;
  DomainCloud a, b;
  a.domain_id = -1;
  b.domain_id = 0;
  a.signals.resize(n);
  a.labels.resize(n);
  b.signals.resize(n);
  b.labels.resize(n);
  const double dg = 0.8, dr = 0.5;
  for (int i = 0; i < n; ++i) {
    const double g = rng.normal(), r = rng.normal();
    a.signals(i) = g;
    a.labels(i) = r;
    const double g2 = rng.normal(), r2 = rng.normal();
    b.signals(i) = g2 + dg;
    b.labels(i) = r2 + dr;
  }
  const auto res = wasserstein_term({a}, {b}, 6, 200, 3);
  REQUIRE(res.term == Catch::Approx(dg + dr).margin(0.2));
}

TEST_CASE("wasserstein_term flags with-replacement fallback for small domains") {
  DomainCloud a, b;
  a.domain_id = -1;
  b.domain_id = 0;
  a.signals = Vector::LinSpaced(30, 0.0, 1.0);
  a.labels = a.signals;
  b.signals = Vector::LinSpaced(30, 0.0, 1.0);
  b.labels = b.signals;
  const auto res = wasserstein_term({a}, {b}, 4, 20, 1);
  REQUIRE(res.with_replacement_fallback);
  REQUIRE_THROWS_AS(wasserstein_term({}, {b}, 4, 20, 1), config_error);
}
