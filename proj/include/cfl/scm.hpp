#pragma once

#include "cfl/common.hpp"
#include "cfl/geomedian.hpp"
#include "cfl/panel.hpp"
#include "cfl/rng.hpp"

#include <cmath>
#include <string>
#include <vector>

namespace cfl::scm {

/// Time-invariant selection matrix mapping the K latent factors to the
/// K-tilde stable ones. Rows must have disjoint supports (no factor feeds
/// two stable components) and unit l2 norm.
class GammaMatrix {
 public:
  static GammaMatrix from_matrix(Matrix entries) {
    const Eigen::Index kt = entries.rows(), k = entries.cols();
    require(kt >= 1 && k >= kt, "gamma: need 1 <= K_tilde <= K");
    for (Eigen::Index c = 0; c < k; ++c)
      for (Eigen::Index i = 0; i < kt; ++i)
        for (Eigen::Index j = i + 1; j < kt; ++j)
          if (entries(i, c) * entries(j, c) != 0.0)
            throw config_error("gamma: rows " + std::to_string(i) + " and " + std::to_string(j) +
                               " share support in column " + std::to_string(c));
    for (Eigen::Index i = 0; i < kt; ++i)
      if (std::abs(entries.row(i).squaredNorm() - 1.0) > 1e-12)
        throw config_error("gamma: row " + std::to_string(i) + " is not unit norm");
    return GammaMatrix(std::move(entries));
  }

  /// Rows are the first K_tilde standard basis vectors: the stable
  /// subportion is the leading factor block.
  static GammaMatrix leading_block(int k_tilde, int k) {
    Matrix m = Matrix::Zero(k_tilde, k);
    for (int i = 0; i < k_tilde; ++i) m(i, i) = 1.0;
    return GammaMatrix(std::move(m));
  }

  const Matrix& entries() const { return m_; }
  Eigen::Index k_tilde() const { return m_.rows(); }
  Eigen::Index k() const { return m_.cols(); }

 private:
  explicit GammaMatrix(Matrix m) : m_(std::move(m)) {}
  Matrix m_;
};

struct ScmConfig {
  int factors = 4;             // K
  int stable_factors = 2;      // K_tilde
  int source_domains = 10;     // T
  int samples_per_domain = 2000;
  double factor_drift = 0.1;
  double spurious_strength = 1.0;
  double noise_scale = 0.5;
  int mixing_depth = 0;  // 0: X = [Z, X^a]; 1: fixed random orthogonal mixing
  std::uint64_t seed = 0;

  int spurious_channels() const { return stable_factors; }
  int input_dim() const { return factors + spurious_channels(); }

  void validate() const {
    require(factors > 0 && stable_factors > 0 && source_domains > 0 && samples_per_domain > 0,
            "scm config: counts must be positive");
    require(stable_factors <= factors, "scm config: K_tilde must not exceed K");
    require(factor_drift >= 0 && spurious_strength >= 0 && noise_scale >= 0,
            "scm config: scales must be nonnegative");
    require(mixing_depth == 0 || mixing_depth == 1, "scm config: mixing_depth must be 0 or 1");
  }
};

/// Per-domain truth of the transformed SCM, in the units of the
/// standardized labels the panels carry. `f_tilde`/`resid_level` are the
/// population quantities of the generating process; `residuals` are the
/// realized per-sample values against that truth.
struct ScmGroundTruth {
  Matrix gamma;                      // K_tilde x K
  Matrix mixing;                     // D x D observation map
  std::vector<Vector> sigma;         // per domain: population factor scales
  std::vector<Vector> f_raw;         // per domain: premiums on the raw factors
  std::vector<Matrix> z_tilde;       // per domain: n x K_tilde
  std::vector<Vector> f_tilde;       // per domain: K_tilde
  std::vector<Vector> residuals;     // per domain: n
  std::vector<double> resid_level;   // per domain: population E|eps_tilde|
  std::vector<double> label_scale;   // per domain: population std of raw returns
};

struct Generalizability {
  Vector nu_star;            // geometric median of the source coefficients
  double delta_f = 0.0;      // mean distance of source coefficients to nu_star
  double delta_eps = 0.0;    // mean source residual level
  double oos_coeff_distance = 0.0;
  double oos_resid_level = 0.0;
  bool holds = false;
  int weiszfeld_iterations = 0;
};

struct ScmSample {
  std::vector<DomainPanel> panels;  // T sources (ids -T..-1) then OOS (id 0)
  ScmGroundTruth truth;
  Generalizability generalizability;
  std::vector<int> regenerated_domains;
};

/// Two-variable toy system: Y = Z + eps, X^a = Y + delta, X = (Z, X^a),
/// all noise i.i.d. Normal(0, sigma_t^2) per domain. Labels are the raw Y
/// (flagged unstandardized).
inline std::vector<DomainPanel> sample_toy_scm(const std::vector<double>& sigma_schedule, int n,
                                               std::uint64_t seed) {
  require(!sigma_schedule.empty(), "toy scm: sigma schedule is empty");
  for (double s : sigma_schedule) require(s > 0.0, "toy scm: sigma values must be positive");
  require(n > 0, "toy scm: n must be positive");

  Rng master(seed);
  std::vector<DomainPanel> panels;
  panels.reserve(sigma_schedule.size());
  for (std::size_t t = 0; t < sigma_schedule.size(); ++t) {
    Rng rng = master.split(t);
    const double s = sigma_schedule[t];
    DomainPanel p;
    p.domain_id = static_cast<int>(t);
    p.inputs.resize(n, 2);
    p.labels.resize(n);
    p.labels_standardized = false;
    for (int i = 0; i < n; ++i) {
      const double z = rng.normal(0.0, s);
      const double eps = rng.normal(0.0, s);
      const double delta = rng.normal(0.0, s);
      const double y = z + eps;
      p.inputs(i, 0) = z;
      p.inputs(i, 1) = y + delta;
      p.labels(i) = y;
    }
    panels.push_back(std::move(p));
  }
  return panels;
}

/// Transformed-SCM quantities for one domain under a candidate gamma:
/// Z_tilde = (gamma Sigma^-1) Z, F_tilde the projected coefficients,
/// residuals against the given labels.
struct GammaTransformed {
  Matrix z_tilde;  // n x K_tilde
  Vector f_tilde;  // K_tilde
  Vector residuals;
};

inline GammaTransformed gamma_standardize(const GammaMatrix& gamma, const Matrix& z,
                                          const Vector& f, const Vector& sigma,
                                          const Vector& labels) {
  require(z.cols() == gamma.k(), "gamma_standardize: factor count mismatch");
  require(f.size() == gamma.k() && sigma.size() == gamma.k(),
          "gamma_standardize: coefficient/scale dimension mismatch");
  require(z.rows() == labels.size(), "gamma_standardize: sample count mismatch");
  for (Eigen::Index k = 0; k < sigma.size(); ++k)
    if (!(sigma(k) > 0.0)) throw numeric_error("gamma_standardize: Sigma_t is singular");

  const Matrix big_gamma = gamma.entries() * sigma.cwiseInverse().asDiagonal();  // K_tilde x K
  const Matrix gram = big_gamma * big_gamma.transpose();
  const Eigen::SelfAdjointEigenSolver<Matrix> eig(gram);
  const double emin = eig.eigenvalues().minCoeff();
  const double emax = eig.eigenvalues().maxCoeff();
  if (!(emin > 0.0))
    throw numeric_error("gamma_standardize: Gamma Gamma^T singular, condition number " +
                        std::to_string(emax / std::max(emin, 1e-300)));

  GammaTransformed out;
  out.z_tilde = z * big_gamma.transpose();
  out.f_tilde = gram.ldlt().solve(big_gamma * f);
  out.residuals = labels - out.z_tilde * out.f_tilde;
  return out;
}

/// Definition-style generalizability measurement: nu* is the geometric
/// median of the source coefficient trajectory, delta_f the mean distance
/// to it, delta_eps the mean residual level; holds iff the OOS domain stays
/// within both radii.
inline Generalizability measure_generalizability(const std::vector<Vector>& f_sources,
                                                 const Vector& f_oos,
                                                 const std::vector<double>& resid_sources,
                                                 double resid_oos) {
  require(!f_sources.empty(), "measure_generalizability: need at least one source domain");
  require(f_sources.size() == resid_sources.size(),
          "measure_generalizability: coefficient/residual count mismatch");

  Generalizability g;
  const GeometricMedianResult med = geometric_median(f_sources);
  g.nu_star = med.point;
  g.weiszfeld_iterations = med.iterations;
  for (const auto& f : f_sources) g.delta_f += (f - g.nu_star).norm();
  g.delta_f /= static_cast<double>(f_sources.size());
  for (double r : resid_sources) g.delta_eps += r;
  g.delta_eps /= static_cast<double>(resid_sources.size());
  g.oos_coeff_distance = (f_oos - g.nu_star).norm();
  g.oos_resid_level = resid_oos;
  // one-ulp slack so exactly-degenerate trajectories compare as inside
  const double tol_f = 1e-12 * (1.0 + g.delta_f);
  const double tol_e = 1e-12 * (1.0 + g.delta_eps);
  g.holds = g.oos_coeff_distance <= g.delta_f + tol_f && g.oos_resid_level <= g.delta_eps + tol_e;
  return g;
}

inline Generalizability measure_generalizability(const std::vector<Vector>& f_sources,
                                                 const Vector& f_oos,
                                                 const std::vector<Vector>& resid_sources,
                                                 const Vector& resid_oos) {
  std::vector<double> levels;
  levels.reserve(resid_sources.size());
  for (const auto& r : resid_sources) levels.push_back(r.cwiseAbs().mean());
  return measure_generalizability(f_sources, f_oos, levels, resid_oos.cwiseAbs().mean());
}

/// min over nu of the mean squared distance of the trajectory to nu.
/// The minimizer of the squared criterion is the arithmetic mean.
inline double coefficient_deviation(const std::vector<Vector>& coeffs) {
  require(!coeffs.empty(), "coefficient_deviation: empty trajectory");
  const auto dim = coeffs.front().size();
  Vector mean = Vector::Zero(dim);
  for (const auto& c : coeffs) {
    require(c.size() == dim, "coefficient_deviation: dimension mismatch");
    mean += c;
  }
  mean /= static_cast<double>(coeffs.size());
  double acc = 0.0;
  for (const auto& c : coeffs) acc += (c - mean).squaredNorm();
  return acc / static_cast<double>(coeffs.size());
}

namespace detail {

struct DomainDraw {
  Matrix z;       // n x K, raw factor exposures
  Vector f;       // K, premiums
  Vector sigma;   // K, population factor scales
  Vector eps;     // n
  Vector a;       // spurious couplings
  Matrix x_spur;  // n x spurious
  Vector r_raw;   // n
};

inline DomainDraw draw_domain(const ScmConfig& cfg, const Vector& f_base, Rng rng) {
  DomainDraw d;
  const int n = cfg.samples_per_domain;
  const int k = cfg.factors;
  const int kt = cfg.stable_factors;
  const int ns = cfg.spurious_channels();

  d.sigma.resize(k);
  d.f.resize(k);
  for (int j = 0; j < k; ++j) {
    // stable factors wander at factor_drift, the rest 10x as much;
    // the same dial moves the per-domain factor scales
    const double wander = (j < kt) ? cfg.factor_drift : 10.0 * cfg.factor_drift;
    d.sigma(j) = std::exp(wander * rng.normal());
    d.f(j) = f_base(j) + wander * rng.normal();
  }
  d.a.resize(ns);
  for (int j = 0; j < ns; ++j) d.a(j) = cfg.spurious_strength * rng.normal();

  d.z.resize(n, k);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < k; ++j) d.z(i, j) = d.sigma(j) * rng.normal();
  d.eps.resize(n);
  for (int i = 0; i < n; ++i) d.eps(i) = cfg.noise_scale * rng.normal();
  d.r_raw = d.z * d.f + d.eps;

  d.x_spur.resize(n, ns);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < ns; ++j) d.x_spur(i, j) = d.a(j) * d.r_raw(i) + rng.normal();
  return d;
}

inline bool degenerate_sample(const DomainDraw& d) {
  const ColumnMoments m = column_moments(d.z);
  return (m.stddev.array() <= 0.0).any();
}

inline Matrix random_orthogonal(int dim, Rng rng) {
  Matrix g(dim, dim);
  for (int i = 0; i < dim; ++i)
    for (int j = 0; j < dim; ++j) g(i, j) = rng.normal();
  const Eigen::HouseholderQR<Matrix> qr(g);
  Matrix q = qr.householderQ();
  // fix signs so the map is a deterministic function of the draw
  const Matrix r = qr.matrixQR().triangularView<Eigen::Upper>();
  for (int j = 0; j < dim; ++j)
    if (r(j, j) < 0) q.col(j) = -q.col(j);
  return q;
}

}  // namespace detail

/// Multi-domain factor SCM with known transformed ground truth. Emits T
/// source panels followed by one OOS panel; labels are per-domain
/// standardized returns.
inline ScmSample sample_factor_scm(const ScmConfig& cfg) {
  cfg.validate();
  const int k = cfg.factors;
  const int kt = cfg.stable_factors;
  const int n_domains = cfg.source_domains + 1;  // + OOS

  Rng master(cfg.seed);
  const GammaMatrix gamma = GammaMatrix::leading_block(kt, k);

  Vector f_base(k);
  {
    Rng rng = master.split(0xBA5Eull);
    for (int j = 0; j < k; ++j) {
      const double magnitude = rng.uniform(0.5, 1.5);
      f_base(j) = (rng.uniform() < 0.5 ? -magnitude : magnitude);
    }
  }
  Matrix mixing = Matrix::Identity(cfg.input_dim(), cfg.input_dim());
  if (cfg.mixing_depth == 1) mixing = detail::random_orthogonal(cfg.input_dim(), master.split(0x313Dull));

  ScmSample out;
  out.truth.gamma = gamma.entries();
  out.truth.mixing = mixing;

  for (int d = 0; d < n_domains; ++d) {
    detail::DomainDraw draw = detail::draw_domain(cfg, f_base, master.split(0xD000ull + static_cast<std::uint64_t>(d)));
    for (std::uint64_t attempt = 1; detail::degenerate_sample(draw); ++attempt) {
      out.regenerated_domains.push_back(d - cfg.source_domains);
      if (attempt > 8) throw numeric_error("scm: domain regeneration failed repeatedly");
      draw = detail::draw_domain(cfg, f_base,
                                 master.split(0xD000ull + static_cast<std::uint64_t>(d) + (attempt << 32)));
    }

    DomainPanel panel;
    panel.domain_id = d - cfg.source_domains;
    panel.labels = standardize_vector(draw.r_raw);
    panel.inputs.resize(cfg.samples_per_domain, cfg.input_dim());
    panel.inputs << draw.z, draw.x_spur;
    if (cfg.mixing_depth == 1) panel.inputs = panel.inputs * mixing.transpose();

    // population scale of the raw returns in this domain
    double var_r = cfg.noise_scale * cfg.noise_scale;
    for (int j = 0; j < k; ++j) var_r += draw.sigma(j) * draw.sigma(j) * draw.f(j) * draw.f(j);
    const double s_pop = std::sqrt(var_r);

    GammaTransformed tr =
        gamma_standardize(gamma, draw.z, Vector(draw.f / s_pop), draw.sigma, panel.labels);

    // residual variance left after projecting out the stable subportion
    double var_resid = cfg.noise_scale * cfg.noise_scale;
    for (int j = kt; j < k; ++j) var_resid += draw.sigma(j) * draw.sigma(j) * draw.f(j) * draw.f(j);
    const double level = std::sqrt(2.0 / 3.141592653589793) * std::sqrt(var_resid) / s_pop;

    out.truth.sigma.push_back(draw.sigma);
    out.truth.f_raw.push_back(draw.f);
    out.truth.z_tilde.push_back(std::move(tr.z_tilde));
    out.truth.f_tilde.push_back(std::move(tr.f_tilde));
    out.truth.residuals.push_back(std::move(tr.residuals));
    out.truth.resid_level.push_back(level);
    out.truth.label_scale.push_back(s_pop);
    out.panels.push_back(std::move(panel));
  }

  std::vector<Vector> f_sources(out.truth.f_tilde.begin(), out.truth.f_tilde.end() - 1);
  std::vector<double> lvl_sources(out.truth.resid_level.begin(), out.truth.resid_level.end() - 1);
  out.generalizability = measure_generalizability(f_sources, out.truth.f_tilde.back(), lvl_sources,
                                                  out.truth.resid_level.back());
  return out;
}

}  // namespace cfl::scm
