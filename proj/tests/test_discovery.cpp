#include "cfl/discovery.hpp"

#include "cfl/model.hpp"
#include "cfl/rng.hpp"
#include "cfl/scm.hpp"

#include <catch2/catch_amalgamated.hpp>

using namespace cfl;
using namespace cfl::discovery;

namespace {

Matrix random_matrix(Rng& rng, int n, int d) {
  Matrix m(n, d);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) m(i, j) = rng.normal();
  return m;
}

// Exact sample whitening: standardized columns mapped through the inverse
// Cholesky factor of their correlation matrix, so the sample Gram is the
// identity to machine precision.
Matrix whiten(const Matrix& x) {
  const Matrix s = standardize_features(x);
  const double n = static_cast<double>(s.rows());
  const Matrix gram = s.transpose() * s / n;
  const Eigen::LLT<Matrix> llt(gram);
  return llt.matrixL().solve(s.transpose()).transpose();
}

}  // namespace

TEST_CASE("standardize_features hand case, idempotence and self-check") {
  Matrix x(2, 1);
  x << 1.0, 3.0;
  const Matrix s = standardize_features(x);
  REQUIRE(s(0, 0) == Catch::Approx(-1.0).margin(1e-15));
  REQUIRE(s(1, 0) == Catch::Approx(1.0).margin(1e-15));

  Rng rng(1);
  const Matrix y = random_matrix(rng, 100, 3);
  const Matrix sy = standardize_features(y);
  REQUIRE((standardize_features(sy) - sy).cwiseAbs().maxCoeff() < 1e-12);
  REQUIRE(sy.colwise().mean().cwiseAbs().maxCoeff() < 1e-12);
  for (int k = 0; k < 3; ++k)
    REQUIRE(std::abs(sy.col(k).squaredNorm() / 100.0 - 1.0) < 1e-12);

  Matrix constant(10, 2);
  constant.setOnes();
  constant.col(0).setLinSpaced(10, 0, 1);
  REQUIRE_THROWS_WITH(standardize_features(constant), Catch::Matchers::ContainsSubstring("1"));
}

TEST_CASE("domain_coefficients identity-gram, null and hand cases") {
  Rng rng(2);
  // identity Gram via whitening; coefficients equal the cross moments
  const Matrix s = whiten(random_matrix(rng, 400, 2));
  Vector target(2);
  target << 0.3, -0.1;
  const Vector r = s * target;
  const Vector nu = domain_coefficients(s, r, 1e-6);
  REQUIRE((nu - target).cwiseAbs().maxCoeff() < 1e-5);  // ridge perturbation only

  // labels uncorrelated with features
  Vector noise(400);
  for (int i = 0; i < 400; ++i) noise(i) = rng.normal();
  REQUIRE(domain_coefficients(s, noise, 1e-6).cwiseAbs().maxCoeff() < 0.2);

  // n=4 hand instance
  Matrix phi(4, 1);
  phi << 1, -1, 1, -1;
  Vector labels(4);
  labels << 2, 0, 2, 0;
  const Vector hand = domain_coefficients(phi, labels, 1e-6);
  REQUIRE(hand(0) == Catch::Approx(1.0).margin(1e-5));

  // brute-force grid confirms the analytic solve
  double best_nu = 0, best_val = 1e30;
  for (double v = -2; v <= 2; v += 1e-3) {
    const double val = (labels - phi * Vector::Constant(1, v)).squaredNorm();
    if (val < best_val) {
      best_val = val;
      best_nu = v;
    }
  }
  REQUIRE(std::abs(hand(0) - best_nu) < 1e-3);
}

TEST_CASE("loss_res_prime trivial cases") {
  Vector z = Vector::Zero(2);
  REQUIRE(loss_res_prime({z, z}) == 0.0);
  Vector a(1), b(1);
  a << std::sqrt(0.5);
  b << std::sqrt(0.7);
  REQUIRE(loss_res_prime({a, b}) == Catch::Approx(-0.6).margin(1e-12));
}

TEST_CASE("loss_res_prime approaches -1 for perfectly explained labels") {
  // noiseless all-stable system: the analytic fit explains everything
  scm::ScmConfig cfg;
  cfg.factors = 2;
  cfg.stable_factors = 2;
  cfg.source_domains = 4;
  cfg.samples_per_domain = 5000;
  cfg.noise_scale = 0.0;
  cfg.factor_drift = 0.05;
  cfg.seed = 12;
  const auto s = scm::sample_factor_scm(cfg);
  std::vector<Vector> coeffs;
  for (int d = 0; d < 4; ++d) {
    const Matrix feats = standardize_features(s.panels[static_cast<std::size_t>(d)].inputs.leftCols(2));
    coeffs.push_back(domain_coefficients(feats, s.panels[static_cast<std::size_t>(d)].labels, 1e-8));
  }
  REQUIRE(loss_res_prime(coeffs) == Catch::Approx(-1.0).margin(0.05));
}

TEST_CASE("loss_inv hand cases") {
  Vector nu_l(1);
  nu_l << 0.6;
  Vector a(1), b(1);
  a << 0.4;
  b << 0.8;
  REQUIRE(loss_inv({a, b}, nu_l) == Catch::Approx(0.04).margin(1e-15));
  REQUIRE(loss_inv({nu_l, nu_l}, nu_l) == 0.0);
}

TEST_CASE("loss_alig analytic values and lower bound") {
  Rng rng(3);
  const Matrix s = whiten(random_matrix(rng, 500, 2));
  REQUIRE(loss_alig({s}, 0.0) == Catch::Approx(2.0).margin(1e-10));

  // equicorrelated 2x2: trace of inverse is 2/(1-rho^2)
  Matrix base = random_matrix(rng, 4000, 2);
  const Matrix w = whiten(base);
  Matrix mixed(4000, 2);
  const double rho = 0.5;
  mixed.col(0) = w.col(0);
  mixed.col(1) = rho * w.col(0) + std::sqrt(1 - rho * rho) * w.col(1);
  // exact sample correlation rho by construction from whitened columns
  REQUIRE(loss_alig({Matrix(standardize_features(mixed))}, 0.0) ==
          Catch::Approx(2.0 / (1.0 - rho * rho)).margin(1e-6));

  // random correlated features exceed the dimension lower bound
  for (int trial = 0; trial < 100; ++trial) {
    Matrix f = random_matrix(rng, 60, 3);
    f.col(2) = 0.8 * f.col(0) + 0.6 * f.col(2);
    const double v = loss_alig({Matrix(standardize_features(f))}, 0.0);
    REQUIRE(v > 3.0);
  }
}

TEST_CASE("update_xi_prime plug-in, fixed point and geometric approach") {
  REQUIRE(update_xi_prime(1.0, 0.5, 0.9) == Catch::Approx(0.95).margin(1e-15));
  REQUIRE(update_xi_prime(0.42, 0.42, 0.7) == Catch::Approx(0.42).margin(1e-15));

  // constant batch estimates: xi' - c shrinks by alpha each step
  double xi = 1.0;
  const double c = 0.3, alpha = 0.8;
  for (int j = 1; j <= 25; ++j) {
    xi = update_xi_prime(xi, c, alpha);
    REQUIRE(xi - c == Catch::Approx((1.0 - c) * std::pow(alpha, j)).epsilon(1e-10));
  }
}

TEST_CASE("analytic-fit MSE equals 1 - |nu|^2 on the constraint surface") {
  Rng rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    const int n = 50 + static_cast<int>(rng.uniform_int(100));
    const int k = 1 + static_cast<int>(rng.uniform_int(4));
    const Matrix s = whiten(random_matrix(rng, n, k));
    Vector raw(n);
    for (int i = 0; i < n; ++i) raw(i) = rng.normal();
    Vector coeff(k);
    for (int j = 0; j < k; ++j) coeff(j) = rng.normal();
    const Vector labels = standardize_vector(Vector(s * coeff + 0.8 * raw));

    const Vector nu = domain_coefficients(s, labels, 0.0);
    const double mse = (labels - s * nu).squaredNorm() / static_cast<double>(n);
    REQUIRE(std::abs(mse - (1.0 - nu.squaredNorm())) < 1e-10);
  }
}

TEST_CASE("combined loss gradient matches finite differences through the extractor") {
  Rng rng(7);
  const int n = 64, d = 10;
  for (int k : {1, 2, 4}) {
    std::vector<Matrix> inputs{random_matrix(rng, n, d), random_matrix(rng, n, d)};
    std::vector<Vector> labels;
    for (int t = 0; t < 2; ++t) {
      Vector r(n);
      for (int i = 0; i < n; ++i) r(i) = rng.normal();
      labels.push_back(standardize_vector(r));
    }
    model::CoefficientHead head(k);
    for (int i = 0; i < k; ++i) head.logits(i) = 0.3 * rng.normal();
    head.xi_prime = 0.8;
    const Vector nu_l = head.coefficients();
    const double l1 = 5.0, l2 = 1.0, ridge = 1e-6;

    auto f = model::mlp_extractor(d, 6, k, 101 + static_cast<std::uint64_t>(k));

    const auto loss_of_theta = [&](const Vector& theta) {
      auto g = f->clone();
      g->set_params(theta);
      std::vector<Matrix> feats;
      for (const auto& x : inputs) feats.push_back(g->forward(x));
      return batch_loss(feats, labels, nu_l, l1, l2, ridge).total;
    };

    std::vector<Matrix> feats;
    for (const auto& x : inputs) feats.push_back(f->forward(x));
    std::vector<Matrix> grad_feats;
    Vector grad_nu;
    batch_loss(feats, labels, nu_l, l1, l2, ridge, &grad_feats, &grad_nu);
    Vector analytic = Vector::Zero(f->param_count());
    for (std::size_t t = 0; t < inputs.size(); ++t)
      analytic += f->backward(inputs[t], grad_feats[t]);

    REQUIRE(model::grad_check_flat(loss_of_theta, f->params(), analytic, 1e-5) < 1e-4);

    // and through the logits at fixed xi'
    const auto loss_of_logits = [&](const Vector& l) {
      const Vector nu = model::coefficients_from_logits(l, head.xi_prime);
      return batch_loss(feats, labels, nu, l1, l2, ridge).total;
    };
    const Vector analytic_logits = head.logits_gradient(grad_nu);
    REQUIRE(model::grad_check_flat(loss_of_logits, head.logits, analytic_logits, 1e-5) < 1e-4);
  }
}

TEST_CASE("training recovers a noiseless system and early-stops deterministically") {
  scm::ScmConfig scfg;
  scfg.factors = 2;
  scfg.stable_factors = 2;
  scfg.source_domains = 10;
  scfg.samples_per_domain = 500;
  scfg.factor_drift = 0.02;
  scfg.spurious_strength = 1.0;
  scfg.noise_scale = 0.0;
  scfg.seed = 77;
  const auto sample = scm::sample_factor_scm(scfg);
  std::vector<DomainPanel> sources(sample.panels.begin(), sample.panels.end() - 1);
  const PanelSplit split = tail_validation_split(sources.size(), 2);

  DiscoveryConfig cfg;
  cfg.k_tilde = 2;
  cfg.learning_rate = 0.05;
  cfg.domains_per_batch = 3;
  cfg.samples_per_domain = 250;
  cfg.max_epochs = 200;
  cfg.patience = 20;
  cfg.seed = 5;
  auto init = model::linear_extractor(static_cast<int>(sources[0].dim()), 2, 11);

  const auto state = train(sources, split, cfg, *init);
  REQUIRE_FALSE(state.diverged);
  REQUIRE(state.best_val_mse < 0.05);
  REQUIRE(state.domain_coefficient_cache.size() == split.train.size());

  // bit-identical rerun
  const auto state2 = train(sources, split, cfg, *init);
  REQUIRE(state.extractor->params() == state2.extractor->params());
  REQUIRE(state.head.logits == state2.head.logits);
  REQUIRE(state.head.xi_prime == state2.head.xi_prime);
}

TEST_CASE("unpenalized config degenerates to per-domain fitting") {
  scm::ScmConfig scfg;
  scfg.factors = 2;
  scfg.stable_factors = 1;
  scfg.source_domains = 5;
  scfg.samples_per_domain = 300;
  scfg.seed = 3;
  const auto sample = scm::sample_factor_scm(scfg);
  std::vector<DomainPanel> sources(sample.panels.begin(), sample.panels.end() - 1);
  const PanelSplit split = tail_validation_split(sources.size(), 1);

  DiscoveryConfig cfg;
  cfg.k_tilde = 1;
  cfg.lambda1 = 0.0;
  cfg.lambda2 = 0.0;
  cfg.learning_rate = 0.01;
  cfg.domains_per_batch = 2;
  cfg.samples_per_domain = 150;
  cfg.max_epochs = 10;
  cfg.patience = 5;
  cfg.seed = 2;
  auto init = model::linear_extractor(static_cast<int>(sources[0].dim()), 1, 13);
  const auto state = train(sources, split, cfg, *init);
  REQUIRE_FALSE(state.diverged);
  REQUIRE(state.history.size() == static_cast<std::size_t>(state.epochs_run));
}

TEST_CASE("predict is pure and linear in the coefficients") {
  auto f = model::linear_extractor(3, 2, 9);
  model::CoefficientHead head(2);
  head.xi_prime = 0.5;
  Rng rng(10);
  Matrix x(40, 3);
  for (int i = 0; i < 40; ++i)
    for (int j = 0; j < 3; ++j) x(i, j) = rng.normal();

  const Vector g1 = predict(*f, head, x);
  const Vector g2 = predict(*f, head, x);
  REQUIRE(g1 == g2);

  // K=1 with identity feature map: signals are the standardized inputs
  auto id = model::linear_extractor(1, 1, 1);
  dynamic_cast<model::LinearExtractor*>(id.get())->weights()(0, 0) = 1.0;
  model::CoefficientHead one(1);
  one.xi_prime = 1.0;  // nu = 1
  Matrix xin(3, 1);
  xin << 1.0, 2.0, 3.0;
  const Vector out = predict(*id, one, xin);
  const Vector expect = standardize_vector(Vector(xin.col(0)));
  REQUIRE((out - expect).cwiseAbs().maxCoeff() < 1e-12);
}
