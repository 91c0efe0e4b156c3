#include "cfl/eval.hpp"

#include "cfl/model.hpp"
#include "cfl/rng.hpp"
#include "cfl/scm.hpp"

#include <catch2/catch_amalgamated.hpp>

using namespace cfl;
using namespace cfl::eval;

TEST_CASE("domain_error trivial cases") {
  Vector r(3);
  r << 0.4, -0.2, 1.0;
  REQUIRE(domain_error(r, r, LossKind::squared) == 0.0);

  Vector g(3), zeros(3);
  g << 0, 1, 2;
  zeros.setZero();
  REQUIRE(domain_error(g, zeros, LossKind::absolute) == Catch::Approx(1.0).margin(1e-15));

  Rng rng(1);
  Vector labels(200000);
  for (int i = 0; i < labels.size(); ++i) labels(i) = rng.normal();
  labels = standardize_vector(labels);
  REQUIRE(domain_error(Vector::Zero(labels.size()), labels, LossKind::squared) ==
          Catch::Approx(1.0).margin(1e-10));
}

TEST_CASE("theorem1 report arithmetic identity") {
  const auto r = theorem1_report(0.3, 0.2, 0.05, 0.55, LossKind::absolute);
  REQUIRE(std::abs(r.rhs_total - (r.source_error_mean + r.wasserstein_term +
                                  2.0 * r.lambda_star_estimate)) < 1e-12);
  REQUIRE(r.holds);
  const auto r2 = theorem1_report(0.1, 0.1, 0.0, 0.9, LossKind::squared);
  REQUIRE_FALSE(r2.holds);

  const auto trivially_zero = theorem1_report(0.0, 0.0, 0.0, 0.0, LossKind::absolute);
  REQUIRE(trivially_zero.holds);
}

TEST_CASE("prop1 rhs plug-ins and check") {
  REQUIRE(prop1_rhs(0.0, 0.0, 3) == 0.0);
  REQUIRE(prop1_rhs(0.1, 0.05, 4) == Catch::Approx(0.4).margin(1e-15));
  const auto c = check_prop1(0.41, 0.1, 0.05, 4, 0.05);
  REQUIRE(c.passes);
  const auto c2 = check_prop1(0.45, 0.1, 0.05, 4, 0.05);
  REQUIRE_FALSE(c2.passes);
}

TEST_CASE("prop2 bound: nu = 0 drops the feature term") {
  scm::ScmConfig cfg;
  cfg.factors = 2;
  cfg.stable_factors = 2;
  cfg.source_domains = 6;
  cfg.samples_per_domain = 2000;
  cfg.factor_drift = 0.0;
  cfg.noise_scale = 0.0;
  cfg.seed = 4;
  const auto s = scm::sample_factor_scm(cfg);

  const auto phi_zero = [&](const Matrix& x) { return Matrix(Matrix::Zero(x.rows(), 2)); };
  const double b0 = prop2_bound(s.panels, s.truth, phi_zero, Vector::Zero(2));
  double expect = 0.0;
  {
    const std::size_t t = s.panels.size() - 1;
    for (std::size_t d = 0; d < s.panels.size(); ++d) {
      const double w = d < t ? 1.0 / static_cast<double>(t) : 1.0;
      expect += w * s.truth.residuals[d].cwiseAbs().mean();
      expect += std::sqrt(2.0) * w * s.truth.f_tilde[d].norm();
    }
  }
  REQUIRE(b0 == Catch::Approx(expect).margin(1e-12));
}

TEST_CASE("prop2 bound near zero when phi matches the truth exactly") {
  scm::ScmConfig cfg;
  cfg.factors = 2;
  cfg.stable_factors = 2;
  cfg.source_domains = 6;
  cfg.samples_per_domain = 4000;
  cfg.factor_drift = 0.0;
  cfg.noise_scale = 0.0;
  cfg.seed = 4;
  const auto s = scm::sample_factor_scm(cfg);

  // with the identity gamma block and no mixing, the true transformed
  // exposures are the scaled leading input columns
  const Vector nu = s.truth.f_tilde.back();
  std::size_t at = 0;
  double dz = 0.0, de = 0.0, df = 0.0;
  const std::size_t t = s.panels.size() - 1;
  for (at = 0; at < s.panels.size(); ++at) {
    const Matrix feats = s.truth.z_tilde[at];  // exact candidate
    const double w = at < t ? 1.0 / static_cast<double>(t) : 1.0;
    dz += w * (feats - s.truth.z_tilde[at]).rowwise().norm().mean();
    de += w * s.truth.residuals[at].cwiseAbs().mean();
    df += w * (s.truth.f_tilde[at] - nu).norm();
  }
  const double bound = nu.norm() * dz + de + std::sqrt(2.0) * df;
  REQUIRE(bound < 0.1);  // pure standardization sampling residue
}

TEST_CASE("lambda star: same-regime estimate is small, shifted regime larger") {
  int larger = 0;
  const int pairs = 10;
  for (int p = 0; p < pairs; ++p) {
    scm::ScmConfig cfg;
    cfg.factors = 2;
    cfg.stable_factors = 2;
    cfg.source_domains = 8;
    cfg.samples_per_domain = 400;
    cfg.factor_drift = 0.05;
    cfg.noise_scale = 0.3;
    cfg.seed = 100 + static_cast<std::uint64_t>(p);
    const auto s = scm::sample_factor_scm(cfg);
    std::vector<DomainPanel> sources(s.panels.begin(), s.panels.end() - 1);

    LambdaStarConfig lcfg;
    lcfg.seed = 7 + static_cast<std::uint64_t>(p);
    lcfg.max_epochs = 60;
    const auto same = estimate_lambda_star(sources, s.panels.back(), lcfg);

    DomainPanel shifted = s.panels.back();
    shifted.labels = standardize_vector(Vector(-2.0 * shifted.labels +
                                               0.5 * shifted.inputs.col(0)));
    const auto shift = estimate_lambda_star(sources, shifted, lcfg);
    if (shift.value_squared > same.value_squared) ++larger;
  }
  REQUIRE(larger >= static_cast<int>(0.9 * pairs));
}

TEST_CASE("lambda star: noiseless constant-coefficient system is explained") {
  scm::ScmConfig cfg;
  cfg.factors = 2;
  cfg.stable_factors = 2;
  cfg.source_domains = 6;
  cfg.samples_per_domain = 500;
  cfg.factor_drift = 0.0;
  cfg.noise_scale = 0.0;
  cfg.seed = 11;
  const auto s = scm::sample_factor_scm(cfg);
  std::vector<DomainPanel> sources(s.panels.begin(), s.panels.end() - 1);
  LambdaStarConfig lcfg;
  lcfg.seed = 3;
  lcfg.max_epochs = 200;
  lcfg.learning_rate = 0.05;
  const auto est = estimate_lambda_star(sources, s.panels.back(), lcfg);
  REQUIRE(est.value_squared < 0.05);
}

TEST_CASE("lambda star: duplicated-domain structure doubles the single-domain error") {
  scm::ScmConfig cfg;
  cfg.factors = 2;
  cfg.stable_factors = 2;
  cfg.source_domains = 1;
  cfg.samples_per_domain = 3000;
  cfg.factor_drift = 0.0;
  cfg.noise_scale = 0.6;
  cfg.seed = 13;
  const auto s = scm::sample_factor_scm(cfg);

  // source domain IS the OOS panel
  std::vector<DomainPanel> sources{s.panels.back()};
  LambdaStarConfig lcfg;
  lcfg.seed = 5;
  lcfg.max_epochs = 120;
  lcfg.learning_rate = 0.05;
  const auto est = estimate_lambda_star(sources, s.panels.back(), lcfg);
  REQUIRE(est.value_squared == Catch::Approx(2.0 * est.oos_error_squared).epsilon(0.15));
}

TEST_CASE("tail probabilities: counting, monotonicity and suffix minima") {
  std::vector<std::pair<int, std::vector<double>>> samples{
      {20, {1.0, 2.0, 3.0}}, {40, {2.0, 2.5, 3.5}}};
  const auto table = tail_probabilities(samples, 5);
  REQUIRE(table.horizons == std::vector<int>{20, 40});

  // direct count at a hand threshold
  int over = 0;
  for (double v : samples[0].second)
    if (v > 1.5) ++over;
  REQUIRE(static_cast<double>(over) / 3.0 == Catch::Approx(2.0 / 3.0));

  for (Eigen::Index j = 0; j < table.prob.cols(); ++j)
    for (int i = 1; i < 5; ++i) REQUIRE(table.prob(i, j) <= table.prob(i - 1, j) + 1e-15);

  // suffix minima are non-decreasing in T by construction
  for (int i = 0; i < 5; ++i)
    for (Eigen::Index j = 1; j < table.suffix_min.cols(); ++j)
      REQUIRE(table.suffix_min(i, j) >= table.suffix_min(i, j - 1) - 1e-15);

  // every horizon whose probability equals the suffix minimum is recorded
  for (int i = 0; i < 5; ++i) REQUIRE_FALSE(table.minima_horizons[static_cast<std::size_t>(i)].empty());

  REQUIRE_THROWS_AS(tail_probabilities({}, 5), config_error);
  REQUIRE_THROWS_AS(tail_probabilities({{10, {1.0}}}, 5), config_error);
}

TEST_CASE("relative deviation: single domain exactly zero, constant coefficients near zero") {
  scm::ScmConfig cfg;
  cfg.factors = 3;
  cfg.stable_factors = 2;
  cfg.source_domains = 6;
  cfg.samples_per_domain = 3000;
  cfg.factor_drift = 0.0;
  cfg.noise_scale = 0.4;
  cfg.seed = 19;
  const auto s = scm::sample_factor_scm(cfg);

  // frozen feature map: select the two stable exposure columns
  auto phi = model::linear_extractor(static_cast<int>(s.panels[0].dim()), 2, 1);
  auto* lin = dynamic_cast<model::LinearExtractor*>(phi.get());
  lin->weights().setZero();
  lin->weights()(0, 0) = 1.0;
  lin->weights()(1, 1) = 1.0;

  const double rd_single = relative_deviation(*phi, {s.panels[0]});
  REQUIRE(rd_single == 0.0);

  std::vector<DomainPanel> val(s.panels.begin(), s.panels.end() - 1);
  REQUIRE(std::abs(relative_deviation(*phi, val)) < 0.01);
}

TEST_CASE("relative deviation increases with coefficient drift") {
  // median over 9 seeds at three drift levels, identity-selector feature map
  std::vector<double> medians;
  for (double drift : {0.05, 0.2, 0.5}) {
    std::vector<double> values;
    for (std::uint64_t seed = 0; seed < 9; ++seed) {
      scm::ScmConfig cfg;
      cfg.factors = 2;
      cfg.stable_factors = 2;
      cfg.source_domains = 8;
      cfg.samples_per_domain = 800;
      cfg.factor_drift = drift;
      cfg.noise_scale = 0.3;
      cfg.seed = 400 + seed;
      const auto s = scm::sample_factor_scm(cfg);
      auto phi = model::linear_extractor(static_cast<int>(s.panels[0].dim()), 2, 1);
      auto* lin = dynamic_cast<model::LinearExtractor*>(phi.get());
      lin->weights().setZero();
      lin->weights()(0, 0) = 1.0;
      lin->weights()(1, 1) = 1.0;
      std::vector<DomainPanel> val(s.panels.begin(), s.panels.end() - 1);
      values.push_back(relative_deviation(*phi, val));
    }
    std::sort(values.begin(), values.end());
    medians.push_back(values[4]);
    REQUIRE(values[4] > 0.0);
  }
  REQUIRE(medians[0] < medians[1]);
  REQUIRE(medians[1] < medians[2]);
}

TEST_CASE("drift ladder joint error grows with horizon") {
  NonstatProbeConfig cfg;
  cfg.candidate_horizons = {10, 40};
  cfg.oos_draws = 6;
  cfg.oos_domains = 2;
  cfg.ladder.total_domains = 60;
  cfg.ladder.samples_per_domain = 250;
  cfg.ladder.walk_step = 0.3;
  cfg.ladder.noise_scale = 0.3;
  cfg.lambda.max_epochs = 40;
  cfg.lambda.patience = 6;
  cfg.seed = 23;
  const auto res = nonstat_probe(cfg);
  REQUIRE(res.samples.size() == 2);
  double mean_short = 0, mean_long = 0;
  for (double v : res.samples[0].second) mean_short += v;
  for (double v : res.samples[1].second) mean_long += v;
  mean_short /= static_cast<double>(res.samples[0].second.size());
  mean_long /= static_cast<double>(res.samples[1].second.size());
  REQUIRE(mean_short < mean_long);

  // table shape sanity
  REQUIRE(res.table.taus.size() == 20);
  REQUIRE(res.table.argmin_horizon.size() == 20);
}
