#pragma once

#include "cfl/common.hpp"
#include "cfl/discovery.hpp"
#include "cfl/model.hpp"
#include "cfl/panel.hpp"
#include "cfl/rng.hpp"
#include "cfl/scm.hpp"
#include "cfl/threads.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <string>
#include <vector>

namespace cfl::eval {

enum class LossKind { squared, absolute };

inline std::string to_string(LossKind k) { return k == LossKind::squared ? "squared" : "absolute"; }

inline LossKind loss_kind_from_string(const std::string& s) {
  if (s == "squared") return LossKind::squared;
  if (s == "absolute") return LossKind::absolute;
  throw config_error("unknown loss kind: " + s);
}

/// Empirical mean of l(g(x), r) over one panel.
inline double domain_error(const Vector& signals, const Vector& labels, LossKind kind) {
  require(signals.size() == labels.size() && signals.size() > 0, "domain_error: size mismatch");
  const auto diff = (signals - labels).array();
  return kind == LossKind::squared ? diff.square().mean() : diff.abs().mean();
}

/// Evaluated right-hand side of the prediction error bound:
/// mean source error + averaged W1 term + 2 * lambda*.
struct BoundReport {
  double source_error_mean = 0.0;
  double wasserstein_term = 0.0;
  double lambda_star_estimate = 0.0;
  double rhs_total = 0.0;
  double oos_error = 0.0;
  bool holds = false;
  LossKind loss_kind = LossKind::absolute;
};

inline BoundReport theorem1_report(double source_error_mean, double wasserstein_term,
                                   double lambda_star_estimate, double oos_error, LossKind kind) {
  BoundReport r;
  r.source_error_mean = source_error_mean;
  r.wasserstein_term = wasserstein_term;
  r.lambda_star_estimate = lambda_star_estimate;
  r.rhs_total = source_error_mean + wasserstein_term + 2.0 * lambda_star_estimate;
  r.oos_error = oos_error;
  r.loss_kind = kind;
  r.holds = oos_error <= r.rhs_total;
  return r;
}

/// 2*delta_eps + 2*sqrt(K)*delta_f: the bound on the W1 term under
/// generalizable causal features with aligned feature marginals.
inline double prop1_rhs(double delta_eps, double delta_f, int k_tilde) {
  require(delta_eps >= 0.0 && delta_f >= 0.0 && k_tilde >= 1, "prop1_rhs: invalid inputs");
  return 2.0 * delta_eps + 2.0 * std::sqrt(static_cast<double>(k_tilde)) * delta_f;
}

struct Prop1Check {
  double measured = 0.0;
  double rhs = 0.0;
  double allowance = 0.0;
  bool passes = false;
  double slack = 0.0;  // rhs*(1+allowance) - measured
};

inline Prop1Check check_prop1(double measured_w_term, double delta_eps, double delta_f,
                              int k_tilde, double allowance = 0.05) {
  Prop1Check c;
  c.measured = measured_w_term;
  c.rhs = prop1_rhs(delta_eps, delta_f, k_tilde);
  c.allowance = allowance;
  c.slack = c.rhs * (1.0 + allowance) - measured_w_term;
  c.passes = c.slack >= 0.0;
  return c;
}

/// Candidate-based upper bound on lambda*: |nu| delta_z + delta_eps +
/// sqrt(K) delta_f, with the three deltas accumulated over sources plus the
/// OOS domain. Any evaluable candidate yields a valid bound. Synthetic-only
/// (needs the ground truth).
inline double prop2_bound(const std::vector<DomainPanel>& panels, const scm::ScmGroundTruth& truth,
                          const std::function<Matrix(const Matrix&)>& phi, const Vector& nu) {
  require(panels.size() >= 2, "prop2_bound: need sources plus the OOS domain");
  require(panels.size() == truth.z_tilde.size(), "prop2_bound: ground truth missing");
  const std::size_t t = panels.size() - 1;

  double delta_z = 0.0, delta_eps = 0.0, delta_f = 0.0;
  Vector f_oos = truth.f_tilde.back();
  for (std::size_t d = 0; d < panels.size(); ++d) {
    const Matrix feats = phi(panels[d].inputs);
    require(feats.cols() == truth.z_tilde[d].cols(), "prop2_bound: feature dimension mismatch");
    const double ez = (feats - truth.z_tilde[d]).rowwise().norm().mean();
    const double ee = truth.residuals[d].cwiseAbs().mean();
    const double ef = (truth.f_tilde[d] - nu).norm();
    const double w = (d < t) ? 1.0 / static_cast<double>(t) : 1.0;
    delta_z += w * ez;
    delta_eps += w * ee;
    delta_f += w * ef;
  }
  const double k = static_cast<double>(f_oos.size());
  return nu.norm() * delta_z + delta_eps + std::sqrt(k) * delta_f;
}

struct LambdaStarConfig {
  std::string extractor = "linear";  // "linear" | "mlp"
  int hidden = 16;
  double learning_rate = 0.02;
  int batch_size = 256;
  int max_epochs = 150;
  int patience = 10;
  double oos_weight = 0.0;  // 0 = auto: T_source_domains / n_oos_domains
  double val_fraction_oos = 0.25;
  std::uint64_t seed = 0;

  void validate() const {
    require(extractor == "linear" || extractor == "mlp", "lambda config: unknown extractor");
    require(learning_rate > 0 && batch_size >= 8 && max_epochs >= 1 && patience >= 1,
            "lambda config: invalid optimization settings");
    require(val_fraction_oos > 0 && val_fraction_oos < 1, "lambda config: bad validation fraction");
  }
};

struct LambdaStarEstimate {
  double value_squared = 0.0;
  double value_absolute = 0.0;
  double oos_error_squared = 0.0;
  double source_error_squared = 0.0;
  int epochs = 0;

  double value(LossKind k) const {
    return k == LossKind::squared ? value_squared : value_absolute;
  }
};

/// Estimates the ideal joint error min_g err_oos(g) + mean_t err_t(g) by
/// training a plain pooled model on the joint objective (OOS samples
/// upweighted so the pooled gradient matches it) and evaluating on held-out
/// slices: a fraction of the OOS samples plus a quarter of the source
/// domains. A surrogate for the infimum, always an upper estimate.
inline LambdaStarEstimate estimate_lambda_star(const std::vector<DomainPanel>& sources,
                                               const DomainPanel& oos,
                                               const LambdaStarConfig& cfg) {
  cfg.validate();
  require(!sources.empty(), "estimate_lambda_star: no source domains");
  const auto dim = oos.dim();
  for (const auto& s : sources)
    require(s.dim() == dim, "estimate_lambda_star: inconsistent input dimensions");

  Rng master(cfg.seed);

  // validation split: whole source domains (a quarter of them, at least one
  // but never all when T >= 2) plus a slice of the OOS samples
  std::vector<int> src_idx(sources.size());
  for (std::size_t i = 0; i < src_idx.size(); ++i) src_idx[i] = static_cast<int>(i);
  std::vector<int> held_domains;
  std::vector<int> train_domains;
  if (sources.size() == 1) {
    train_domains = {0};
    held_domains = {0};  // single domain: validate on its held-out samples below
  } else {
    Rng r = master.split(0x51ull);
    r.shuffle(src_idx);
    const std::size_t n_held =
        std::clamp<std::size_t>(sources.size() / 4, 1, sources.size() - 1);
    held_domains.assign(src_idx.begin(), src_idx.begin() + static_cast<std::ptrdiff_t>(n_held));
    train_domains.assign(src_idx.begin() + static_cast<std::ptrdiff_t>(n_held), src_idx.end());
    std::sort(held_domains.begin(), held_domains.end());
    std::sort(train_domains.begin(), train_domains.end());
  }

  // OOS sample split
  std::vector<int> oos_order(static_cast<std::size_t>(oos.n()));
  for (std::size_t i = 0; i < oos_order.size(); ++i) oos_order[i] = static_cast<int>(i);
  {
    Rng r = master.split(0x52ull);
    r.shuffle(oos_order);
  }
  const auto n_oos_val = std::max<std::size_t>(
      1, static_cast<std::size_t>(cfg.val_fraction_oos * static_cast<double>(oos.n())));
  std::vector<int> oos_val(oos_order.begin(), oos_order.begin() + static_cast<std::ptrdiff_t>(n_oos_val));
  std::vector<int> oos_train(oos_order.begin() + static_cast<std::ptrdiff_t>(n_oos_val), oos_order.end());

  // single source domain: hold out a slice of its samples the same way
  std::vector<int> single_src_val, single_src_train;
  if (sources.size() == 1) {
    std::vector<int> order(static_cast<std::size_t>(sources[0].n()));
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    Rng r = master.split(0x53ull);
    r.shuffle(order);
    const auto nv = std::max<std::size_t>(
        1, static_cast<std::size_t>(cfg.val_fraction_oos * static_cast<double>(order.size())));
    single_src_val.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(nv));
    single_src_train.assign(order.begin() + static_cast<std::ptrdiff_t>(nv), order.end());
  }

  // pooled training set with per-sample weights implementing
  // err_oos + (1/T) sum_t err_t
  struct Sample {
    const DomainPanel* panel;
    int row;
    double weight;
  };
  std::vector<Sample> pool;
  const double t_train = static_cast<double>(train_domains.size());
  for (int d : train_domains) {
    const DomainPanel& p = sources[static_cast<std::size_t>(d)];
    if (sources.size() == 1) {
      for (int i : single_src_train)
        pool.push_back({&p, i, 1.0 / (t_train * static_cast<double>(single_src_train.size()))});
    } else {
      for (Eigen::Index i = 0; i < p.n(); ++i)
        pool.push_back({&p, static_cast<int>(i), 1.0 / (t_train * static_cast<double>(p.n()))});
    }
  }
  // the joint objective gives the whole OOS term the same weight as the
  // whole source mean, which is the per-sample upweighting rule
  const double oos_term_weight = cfg.oos_weight > 0.0 ? cfg.oos_weight : 1.0;
  for (int i : oos_train)
    pool.push_back({&oos, i, oos_term_weight / static_cast<double>(oos_train.size())});

  // normalize so the average weight is one; keeps the learning rate scale
  // independent of T and the domain sizes
  double wsum = 0.0;
  for (const auto& s : pool) wsum += s.weight;
  for (auto& s : pool) s.weight *= static_cast<double>(pool.size()) / wsum;

  auto g = cfg.extractor == "linear"
               ? model::linear_extractor(static_cast<int>(dim), 1, master.split(0x54ull).next_u64())
               : model::mlp_extractor(static_cast<int>(dim), cfg.hidden, 1,
                                      master.split(0x54ull).next_u64());

  const auto joint_value = [&](LossKind kind, double* oos_part, double* src_part) {
    const Vector go = g->forward(oos.inputs).col(0);
    Vector sig(static_cast<Eigen::Index>(oos_val.size())), lab(static_cast<Eigen::Index>(oos_val.size()));
    for (std::size_t i = 0; i < oos_val.size(); ++i) {
      sig(static_cast<Eigen::Index>(i)) = go(oos_val[i]);
      lab(static_cast<Eigen::Index>(i)) = oos.labels(oos_val[i]);
    }
    const double e_oos = domain_error(sig, lab, kind);
    double e_src = 0.0;
    if (sources.size() == 1) {
      const DomainPanel& p = sources[0];
      const Vector gs = g->forward(p.inputs).col(0);
      Vector ssig(static_cast<Eigen::Index>(single_src_val.size())), slab(static_cast<Eigen::Index>(single_src_val.size()));
      for (std::size_t i = 0; i < single_src_val.size(); ++i) {
        ssig(static_cast<Eigen::Index>(i)) = gs(single_src_val[i]);
        slab(static_cast<Eigen::Index>(i)) = p.labels(single_src_val[i]);
      }
      e_src = domain_error(ssig, slab, kind);
    } else {
      for (int d : held_domains) {
        const DomainPanel& p = sources[static_cast<std::size_t>(d)];
        e_src += domain_error(g->forward(p.inputs).col(0), p.labels, kind);
      }
      e_src /= static_cast<double>(held_domains.size());
    }
    if (oos_part) *oos_part = e_oos;
    if (src_part) *src_part = e_src;
    return e_oos + e_src;
  };

  Vector best_theta = g->params();
  double best_val = joint_value(LossKind::squared, nullptr, nullptr);
  int epochs_since_best = 0;
  int epochs = 0;

  std::vector<int> order(pool.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);

  for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    Rng erng = master.split(0xE000ull + static_cast<std::uint64_t>(epoch));
    erng.shuffle(order);
    for (std::size_t pos = 0; pos < order.size(); pos += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t last = std::min(order.size(), pos + static_cast<std::size_t>(cfg.batch_size));
      const auto bs = static_cast<Eigen::Index>(last - pos);
      Matrix x(bs, dim);
      Vector r(bs), w(bs);
      for (Eigen::Index i = 0; i < bs; ++i) {
        const Sample& s = pool[static_cast<std::size_t>(order[pos + static_cast<std::size_t>(i)])];
        x.row(i) = s.panel->inputs.row(s.row);
        r(i) = s.panel->labels(s.row);
        w(i) = s.weight;
      }
      const Matrix out = g->forward(x);
      const Vector resid = out.col(0) - r;
      // weighted MSE gradient
      Matrix gout(bs, 1);
      gout.col(0) = 2.0 * resid.cwiseProduct(w) / static_cast<double>(bs);
      const Vector grad = g->backward(x, gout);
      if (!grad.allFinite()) throw numeric_error("estimate_lambda_star: training diverged");
      g->set_params(g->params() - cfg.learning_rate * grad);
    }
    epochs = epoch + 1;
    const double val = joint_value(LossKind::squared, nullptr, nullptr);
    if (!std::isfinite(val)) throw numeric_error("estimate_lambda_star: training diverged");
    if (val < best_val) {
      best_val = val;
      best_theta = g->params();
      epochs_since_best = 0;
    } else if (++epochs_since_best >= cfg.patience) {
      break;
    }
  }

  g->set_params(best_theta);
  LambdaStarEstimate est;
  est.epochs = epochs;
  est.value_squared = joint_value(LossKind::squared, &est.oos_error_squared, &est.source_error_squared);
  est.value_absolute = joint_value(LossKind::absolute, nullptr, nullptr);
  return est;
}

/// Tail-probability table over the candidate horizons: P(J_T > tau) on a
/// 20-point tau grid spanning the 10%-90% quantiles of the pooled
/// estimates, with per-tau argmin horizons and the suffix-minima sequence.
struct TailTable {
  std::vector<double> taus;
  std::vector<int> horizons;
  Matrix prob;        // taus x horizons
  Matrix suffix_min;  // taus x horizons: min over horizons >= column's
  std::vector<int> argmin_horizon;
  std::vector<std::vector<int>> minima_horizons;  // per tau: T with prob == suffix_min
};

inline double quantile_linear(std::vector<double> sorted, double q) {
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(sorted.size() - 1, lo + 1);
  const double frac = pos - static_cast<double>(lo);
  return sorted[lo] * (1.0 - frac) + sorted[hi] * frac;
}

inline TailTable tail_probabilities(const std::vector<std::pair<int, std::vector<double>>>& samples,
                                    int tau_count = 20) {
  require(!samples.empty(), "tail_probabilities: no samples");
  std::vector<double> pooled;
  for (const auto& [t, vals] : samples) {
    require(vals.size() >= 2, "tail_probabilities: need >= 2 samples per horizon");
    pooled.insert(pooled.end(), vals.begin(), vals.end());
  }
  std::sort(pooled.begin(), pooled.end());

  TailTable table;
  const double lo = quantile_linear(pooled, 0.10);
  const double hi = quantile_linear(pooled, 0.90);
  table.taus.resize(static_cast<std::size_t>(tau_count));
  for (int i = 0; i < tau_count; ++i)
    table.taus[static_cast<std::size_t>(i)] =
        lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(std::max(1, tau_count - 1));

  std::vector<std::pair<int, std::vector<double>>> ordered = samples;
  std::sort(ordered.begin(), ordered.end(),
            [](const auto& a, const auto& b) { return a.first < b.first; });
  for (const auto& [t, vals] : ordered) table.horizons.push_back(t);

  const auto n_t = static_cast<Eigen::Index>(ordered.size());
  table.prob.resize(tau_count, n_t);
  for (int i = 0; i < tau_count; ++i)
    for (Eigen::Index j = 0; j < n_t; ++j) {
      const auto& vals = ordered[static_cast<std::size_t>(j)].second;
      const auto over = std::count_if(vals.begin(), vals.end(), [&](double v) {
        return v > table.taus[static_cast<std::size_t>(i)];
      });
      table.prob(i, j) = static_cast<double>(over) / static_cast<double>(vals.size());
    }

  table.suffix_min.resize(tau_count, n_t);
  table.argmin_horizon.resize(static_cast<std::size_t>(tau_count));
  table.minima_horizons.resize(static_cast<std::size_t>(tau_count));
  for (int i = 0; i < tau_count; ++i) {
    double running = std::numeric_limits<double>::infinity();
    for (Eigen::Index j = n_t - 1; j >= 0; --j) {
      running = std::min(running, table.prob(i, j));
      table.suffix_min(i, j) = running;
    }
    Eigen::Index best = 0;
    for (Eigen::Index j = 0; j < n_t; ++j) {
      if (table.prob(i, j) < table.prob(i, best)) best = j;  // ties keep the smallest horizon
      if (table.prob(i, j) == table.suffix_min(i, j))
        table.minima_horizons[static_cast<std::size_t>(i)].push_back(
            table.horizons[static_cast<std::size_t>(j)]);
    }
    table.argmin_horizon[static_cast<std::size_t>(i)] = table.horizons[static_cast<std::size_t>(best)];
  }
  return table;
}

/// (L_pred - L_res)/L_res on held-out domains with the feature map frozen:
/// a single coefficient vector is refit across the validation domains and
/// compared with the per-domain analytic fits.
inline double relative_deviation(const model::FeatureExtractor& phi,
                                 const std::vector<DomainPanel>& val_domains,
                                 double ridge_eps = 1e-6) {
  require(!val_domains.empty(), "relative_deviation: no validation domains");
  const double t = static_cast<double>(val_domains.size());
  const Eigen::Index k = phi.output_dim();

  Matrix gram_mean = Matrix::Zero(k, k);
  Vector rhs_mean = Vector::Zero(k);
  double l_res = 0.0;
  std::vector<Matrix> feats;
  for (const auto& p : val_domains) {
    const Matrix s = discovery::standardize_features(phi.forward(p.inputs));
    const double n = static_cast<double>(s.rows());
    const Matrix gram = s.transpose() * s / n + ridge_eps * Matrix::Identity(k, k);
    const Vector rhs = s.transpose() * p.labels / n;
    const Vector nu_t = gram.ldlt().solve(rhs);
    l_res += (p.labels - s * nu_t).squaredNorm() / n;
    gram_mean += gram / t;
    rhs_mean += rhs / t;
    feats.push_back(s);
  }
  l_res /= t;

  const Vector nu_bar = gram_mean.ldlt().solve(rhs_mean);
  double l_pred = 0.0;
  for (std::size_t d = 0; d < val_domains.size(); ++d) {
    const auto& p = val_domains[d];
    l_pred += (p.labels - feats[d] * nu_bar).squaredNorm() / static_cast<double>(p.n());
  }
  l_pred /= t;

  if (!(l_res > 0.0)) throw numeric_error("relative_deviation: zero residual level");
  return (l_pred - l_res) / l_res;
}

/// Domain sequence whose causal coefficients follow a random walk, so the
/// regime drifts with horizon. Used by the nonstationarity probe.
struct DriftLadderConfig {
  int total_domains = 200;
  int samples_per_domain = 200;
  int factors = 3;
  int spurious_channels = 2;
  double walk_step = 0.08;
  double noise_scale = 0.5;
  double spurious_strength = 1.0;
  std::uint64_t seed = 0;
};

inline std::vector<DomainPanel> drift_ladder_panels(const DriftLadderConfig& cfg) {
  require(cfg.total_domains >= 2 && cfg.samples_per_domain >= 4 && cfg.factors >= 1,
          "drift ladder: invalid counts");
  Rng master(cfg.seed);
  Vector f(cfg.factors);
  {
    Rng r = master.split(0xF00ull);
    for (int j = 0; j < cfg.factors; ++j) {
      const double m = r.uniform(0.5, 1.5);
      f(j) = r.uniform() < 0.5 ? -m : m;
    }
  }
  const double f_norm = f.norm();
  std::vector<DomainPanel> panels;
  panels.reserve(static_cast<std::size_t>(cfg.total_domains));
  for (int d = 0; d < cfg.total_domains; ++d) {
    Rng rng = master.split(0xA000ull + static_cast<std::uint64_t>(d));
    // random walk on the constant-norm sphere: labels are standardized per
    // domain, so only the coefficient direction matters and the drift rate
    // stays uniform along the ladder
    for (int j = 0; j < cfg.factors; ++j) f(j) += cfg.walk_step * rng.normal();
    f *= f_norm / f.norm();

    const int n = cfg.samples_per_domain;
    Matrix z(n, cfg.factors);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < cfg.factors; ++j) z(i, j) = rng.normal();
    Vector raw = z * f;
    for (int i = 0; i < n; ++i) raw(i) += cfg.noise_scale * rng.normal();

    Matrix spur(n, cfg.spurious_channels);
    for (int j = 0; j < cfg.spurious_channels; ++j) {
      const double a = cfg.spurious_strength * rng.normal();
      for (int i = 0; i < n; ++i) spur(i, j) = a * raw(i) + rng.normal();
    }

    DomainPanel p;
    p.domain_id = d - cfg.total_domains;  // relabelled per probe cell
    p.labels = standardize_vector(raw);
    p.inputs.resize(n, cfg.factors + cfg.spurious_channels);
    p.inputs << z, spur;
    panels.push_back(std::move(p));
  }
  return panels;
}

struct NonstatProbeConfig {
  std::vector<int> candidate_horizons = {20, 40, 60, 80, 100, 120, 140, 160};
  int oos_draws = 16;     // sampled t_0 positions
  int oos_domains = 4;    // domains pooled into one OOS panel
  int tau_count = 20;
  DriftLadderConfig ladder;
  LambdaStarConfig lambda;
  std::uint64_t seed = 0;
};

struct NonstatResult {
  std::vector<std::pair<int, std::vector<double>>> samples;  // per horizon
  TailTable table;
};

/// Monte-Carlo estimate of P(J_T > tau) across training horizons on the
/// drift ladder: for each sampled t_0 and each candidate T, the ideal joint
/// error is estimated with the T domains immediately preceding t_0.
inline NonstatResult nonstat_probe(const NonstatProbeConfig& cfg) {
  require(!cfg.candidate_horizons.empty(), "nonstat probe: no candidate horizons");
  for (std::size_t i = 1; i < cfg.candidate_horizons.size(); ++i)
    require(cfg.candidate_horizons[i] > cfg.candidate_horizons[i - 1],
            "nonstat probe: horizons must increase");
  require(cfg.oos_draws >= 2 && cfg.oos_domains >= 1, "nonstat probe: counts must be positive");

  const int max_t = cfg.candidate_horizons.back();
  DriftLadderConfig ladder = cfg.ladder;
  ladder.total_domains = std::max(ladder.total_domains, max_t + cfg.oos_domains + cfg.oos_draws);
  ladder.seed = cfg.seed;
  const auto panels = drift_ladder_panels(ladder);

  Rng master(cfg.seed);
  std::vector<int> positions;
  {
    Rng r = master.split(0xCAFEull);
    const int lo = max_t;
    const int hi = ladder.total_domains - cfg.oos_domains;
    for (int i = 0; i < cfg.oos_draws; ++i)
      positions.push_back(lo + static_cast<int>(r.uniform_int(hi - lo)));
  }

  NonstatResult out;
  for (int t : cfg.candidate_horizons) out.samples.push_back({t, {}});

  const std::size_t n_cells = positions.size() * cfg.candidate_horizons.size();
  std::vector<double> cell_value(n_cells, 0.0);
  parallel_for(n_cells, [&](std::size_t cell) {
    const std::size_t pi = cell / cfg.candidate_horizons.size();
    const std::size_t ti = cell % cfg.candidate_horizons.size();
    const int pos = positions[pi];
    const int t = cfg.candidate_horizons[ti];

    DomainPanel oos;
    {
      Eigen::Index rows = 0;
      for (int d = 0; d < cfg.oos_domains; ++d) rows += panels[static_cast<std::size_t>(pos + d)].n();
      oos.domain_id = 0;
      oos.inputs.resize(rows, panels[0].dim());
      oos.labels.resize(rows);
      Eigen::Index at = 0;
      for (int d = 0; d < cfg.oos_domains; ++d) {
        const auto& p = panels[static_cast<std::size_t>(pos + d)];
        oos.inputs.middleRows(at, p.n()) = p.inputs;
        oos.labels.segment(at, p.n()) = p.labels;
        at += p.n();
      }
    }
    std::vector<DomainPanel> sources(panels.begin() + (pos - t), panels.begin() + pos);
    LambdaStarConfig lam = cfg.lambda;
    lam.seed = master.split(0xBEEFull + cell).next_u64();
    cell_value[cell] = estimate_lambda_star(sources, oos, lam).value_squared;
  });

  for (std::size_t cell = 0; cell < n_cells; ++cell) {
    const std::size_t ti = cell % cfg.candidate_horizons.size();
    out.samples[ti].second.push_back(cell_value[cell]);
  }
  out.table = tail_probabilities(out.samples, cfg.tau_count);
  return out;
}

}  // namespace cfl::eval
