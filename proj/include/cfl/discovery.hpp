#pragma once

#include "cfl/common.hpp"
#include "cfl/model.hpp"
#include "cfl/panel.hpp"
#include "cfl/rng.hpp"

#include <algorithm>
#include <functional>
#include <limits>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace cfl::discovery {

struct DiscoveryConfig {
  double lambda1 = 5.0;
  double lambda2 = 1.0;
  double learning_rate = 2e-4;
  int domains_per_batch = 3;     // T_b
  int samples_per_domain = 1000; // N_b
  double alpha = 0.9;            // momentum of the residual-level tracker
  int max_epochs = 200;
  int patience = 5;
  double ridge_eps = 1e-6;
  int k_tilde = 2;
  std::uint64_t seed = 0;
  std::string optimizer = "sgd";  // "sgd" | "adam"
  bool full_domain_moments = false;  // standardize over full domains instead of the batch
  double grad_clip = 10.0;    // global-norm cap per step; 0 disables
  double logits_bound = 2.0;  // projection bound on the coefficient logits; 0 disables

  void validate(int n_source_domains) const {
    require(lambda1 >= 0.0 && lambda2 >= 0.0, "discovery config: penalty weights must be >= 0");
    require(domains_per_batch >= 1 && domains_per_batch <= n_source_domains,
            "discovery config: need 1 <= T_b <= T");
    require(alpha > 0.0 && alpha < 1.0, "discovery config: alpha must lie in (0,1)");
    require(samples_per_domain >= 2, "discovery config: N_b must be >= 2");
    require(learning_rate > 0.0 && max_epochs >= 1 && patience >= 1 && ridge_eps >= 0.0 &&
                k_tilde >= 1,
            "discovery config: invalid optimization settings");
    require(optimizer == "sgd" || optimizer == "adam", "discovery config: unknown optimizer");
  }
};

/// Affine record of a per-domain standardization; lets gradients flow back
/// through the moment computation.
struct StandardizeRecord {
  Vector mean;
  Vector stddev;
};

/// Column-wise population standardization for one domain (or batch slice).
inline Matrix standardize_features(const Matrix& features, StandardizeRecord* record = nullptr) {
  require(features.rows() >= 2, "standardize_features: need at least two samples");
  ColumnMoments m;
  Matrix out = standardize_columns(features, &m);
  if (record) {
    record->mean = m.mean;
    record->stddev = m.stddev;
  }
  return out;
}

/// Backward pass of standardize_features: dL/dF from dL/dS.
inline Matrix standardize_backward(const Matrix& standardized, const StandardizeRecord& record,
                                   const Matrix& grad_s) {
  const double n = static_cast<double>(standardized.rows());
  Matrix grad(standardized.rows(), standardized.cols());
  for (Eigen::Index k = 0; k < standardized.cols(); ++k) {
    const auto s = standardized.col(k).array();
    const auto g = grad_s.col(k).array();
    const double gm = g.mean();
    const double gs = (g * s).mean();
    grad.col(k) = ((g - gm - s * gs) / record.stddev(k)).matrix();
    (void)n;
  }
  return grad;
}

/// Analytic per-domain fit on standardized features:
/// solves (E[phi phi^T] + ridge I) nu = E[phi R].
inline Vector domain_coefficients(const Matrix& standardized, const Vector& labels,
                                  double ridge_eps = 1e-6) {
  require(standardized.rows() == labels.size(), "domain_coefficients: size mismatch");
  const double n = static_cast<double>(standardized.rows());
  const Matrix gram = standardized.transpose() * standardized / n +
                      ridge_eps * Matrix::Identity(standardized.cols(), standardized.cols());
  if (!all_finite(gram)) throw numeric_error("domain_coefficients: non-finite Gram matrix");
  const Vector rhs = standardized.transpose() * labels / n;
  return gram.ldlt().solve(rhs);
}

inline double loss_res_prime(const std::vector<Vector>& domain_coeffs) {
  require(!domain_coeffs.empty(), "loss_res_prime: no domains");
  double acc = 0.0;
  for (const auto& nu : domain_coeffs) acc += nu.squaredNorm();
  return -acc / static_cast<double>(domain_coeffs.size());
}

inline double loss_inv(const std::vector<Vector>& domain_coeffs, const Vector& nu_shared) {
  require(!domain_coeffs.empty(), "loss_inv: no domains");
  double acc = 0.0;
  for (const auto& nu : domain_coeffs) {
    require(nu.size() == nu_shared.size(), "loss_inv: dimension mismatch");
    acc += (nu - nu_shared).squaredNorm();
  }
  return acc / static_cast<double>(domain_coeffs.size());
}

/// Mean trace of the inverse (ridge-stabilized) correlation matrices;
/// >= K with equality only at identity.
inline double loss_alig(const std::vector<Matrix>& standardized_features, double ridge_eps = 1e-6,
                        std::vector<std::string>* warnings = nullptr) {
  require(!standardized_features.empty(), "loss_alig: no domains");
  double acc = 0.0;
  for (const auto& s : standardized_features) {
    const double n = static_cast<double>(s.rows());
    const Matrix gram =
        s.transpose() * s / n + ridge_eps * Matrix::Identity(s.cols(), s.cols());
    const Eigen::SelfAdjointEigenSolver<Matrix> eig(gram);
    const double emin = eig.eigenvalues().minCoeff();
    const double emax = eig.eigenvalues().maxCoeff();
    if (warnings && emin > 0.0 && emax / emin > 1e8)
      warnings->push_back("loss_alig: correlation matrix condition number " +
                          std::to_string(emax / emin));
    acc += eig.eigenvalues().cwiseInverse().sum();
  }
  return acc / static_cast<double>(standardized_features.size());
}

/// Momentum tracker of the residual level: xi'_{j+1} = a xi'_j + (1-a) xi_hat_b.
inline double update_xi_prime(double xi_prime, double batch_estimate, double alpha) {
  require(alpha > 0.0 && alpha < 1.0, "update_xi_prime: alpha must lie in (0,1)");
  require(batch_estimate >= 0.0, "update_xi_prime: estimate must be >= 0");
  return alpha * xi_prime + (1.0 - alpha) * batch_estimate;
}

/// Value and analytic gradients of the combined objective
///   L'_res + lambda1 L_inv + lambda2 L_alig
/// over a batch of domains, as a function of the raw (pre-standardization)
/// features. nu_shared is treated as a constant here; its gradient is
/// returned separately.
struct BatchLoss {
  double total = 0.0;
  double res = 0.0;
  double inv = 0.0;
  double alig = 0.0;
  double xi_hat = 0.0;  // batch mean of ||nu_t||^2
  std::vector<Vector> domain_coeffs;
};

inline BatchLoss batch_loss(const std::vector<Matrix>& raw_features,
                            const std::vector<Vector>& labels, const Vector& nu_shared,
                            double lambda1, double lambda2, double ridge_eps,
                            std::vector<Matrix>* grad_features = nullptr,
                            Vector* grad_nu_shared = nullptr,
                            std::vector<std::string>* warnings = nullptr) {
  require(raw_features.size() == labels.size() && !raw_features.empty(),
          "batch_loss: malformed batch");
  const double t_b = static_cast<double>(raw_features.size());
  const Eigen::Index k = raw_features.front().cols();

  BatchLoss out;
  if (grad_features) grad_features->assign(raw_features.size(), Matrix());
  Vector dnu_shared = Vector::Zero(nu_shared.size());

  for (std::size_t d = 0; d < raw_features.size(); ++d) {
    StandardizeRecord rec;
    const Matrix s = standardize_features(raw_features[d], &rec);
    const double n = static_cast<double>(s.rows());
    const Matrix gram = s.transpose() * s / n + ridge_eps * Matrix::Identity(k, k);
    if (!all_finite(gram)) throw numeric_error("batch_loss: non-finite Gram matrix");

    const Eigen::SelfAdjointEigenSolver<Matrix> eig(gram);
    const double emin = eig.eigenvalues().minCoeff();
    const double emax = eig.eigenvalues().maxCoeff();
    if (warnings && emin > 0.0 && emax / emin > 1e8)
      warnings->push_back("batch_loss: correlation matrix condition number " +
                          std::to_string(emax / emin));

    const Matrix gram_inv = gram.inverse();
    const Vector b = s.transpose() * labels[d] / n;
    const Vector nu = gram_inv * b;

    out.res += -nu.squaredNorm();
    out.inv += (nu - nu_shared).squaredNorm();
    out.alig += gram_inv.trace();
    out.xi_hat += nu.squaredNorm();
    out.domain_coeffs.push_back(nu);
    dnu_shared += -2.0 * lambda1 * (nu - nu_shared) / t_b;

    if (grad_features) {
      // dL/dnu for this domain's terms, with the 1/T_b factor applied
      const Vector u = (-2.0 * nu + 2.0 * lambda1 * (nu - nu_shared)) / t_b;
      const Vector a = gram_inv * u;                 // dL/db
      Matrix g = -a * nu.transpose();                // dL/dM from the solve
      g += -(lambda2 / t_b) * gram_inv * gram_inv;   // dL/dM from the trace
      const Matrix ds = (s * (g + g.transpose()) + labels[d] * a.transpose()) / n;
      (*grad_features)[d] = standardize_backward(s, rec, ds);
    }
  }

  out.res /= t_b;
  out.inv /= t_b;
  out.alig /= t_b;
  out.xi_hat /= t_b;
  out.total = out.res + lambda1 * out.inv + lambda2 * out.alig;
  if (grad_nu_shared) *grad_nu_shared = dnu_shared;
  return out;
}

struct EpochStats {
  int epoch = 0;
  double loss = 0.0;
  double res = 0.0;
  double inv = 0.0;
  double alig = 0.0;
  double val_mse = 0.0;
  double xi_prime = 0.0;
};

struct DiscoveryState {
  std::unique_ptr<model::FeatureExtractor> extractor;
  model::CoefficientHead head;
  int epochs_run = 0;
  int best_epoch = -1;
  double best_val_mse = std::numeric_limits<double>::infinity();
  std::vector<Vector> domain_coefficient_cache;  // per source domain, full-domain fit
  std::vector<EpochStats> history;
  std::vector<double> xi_prime_trajectory;
  double xi_prime_init = 1.0;
  bool diverged = false;
  std::vector<std::string> warnings;
};

/// Signals g(x) = phi(x)^T nu(l) for one cross-section; features are
/// standardized over the given rows.
inline Vector predict(const model::FeatureExtractor& extractor, const model::CoefficientHead& head,
                      const Matrix& inputs) {
  require(inputs.cols() == extractor.input_dim(), "predict: input dimension mismatch");
  const Matrix s = standardize_features(extractor.forward(inputs));
  return s * head.coefficients();
}

inline Vector predict(const DiscoveryState& state, const Matrix& inputs) {
  return predict(*state.extractor, state.head, inputs);
}

/// Validation MSE of the deployable model (shared nu(l)), full-domain
/// feature standardization.
inline double validation_mse(const model::FeatureExtractor& extractor,
                             const model::CoefficientHead& head,
                             const std::vector<DomainPanel>& panels,
                             const std::vector<int>& val_idx) {
  require(!val_idx.empty(), "validation_mse: no validation domains");
  double acc = 0.0;
  for (int idx : val_idx) {
    const DomainPanel& p = panels[static_cast<std::size_t>(idx)];
    const Vector g = predict(extractor, head, p.inputs);
    acc += (p.labels - g).squaredNorm() / static_cast<double>(p.n());
  }
  return acc / static_cast<double>(val_idx.size());
}

namespace detail {

struct AdamState {
  Vector m, v;
  int step = 0;
  void init(Eigen::Index n) {
    m = Vector::Zero(n);
    v = Vector::Zero(n);
    step = 0;
  }
  Vector update(const Vector& grad, double lr) {
    constexpr double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    ++step;
    m = beta1 * m + (1.0 - beta1) * grad;
    v = beta2 * v + (1.0 - beta2) * grad.cwiseProduct(grad);
    const double bc1 = 1.0 - std::pow(beta1, step);
    const double bc2 = 1.0 - std::pow(beta2, step);
    return (lr / bc1) * m.cwiseQuotient(((v / bc2).cwiseSqrt().array() + eps).matrix());
  }
};

}  // namespace detail

/// Stochastic minimization of L'_res + l1 L_inv + l2 L_alig over batches of
/// T_b domains x N_b samples. xi' is a constant inside each step
/// (stop-gradient) and tracked by the momentum update between steps; early
/// stopping on validation MSE returns the best state seen.
inline DiscoveryState train(const std::vector<DomainPanel>& panels, const PanelSplit& split,
                            const DiscoveryConfig& cfg,
                            const model::FeatureExtractor& init_extractor) {
  require(!split.train.empty() && !split.val.empty(),
          "train: need source and validation domains");
  cfg.validate(static_cast<int>(split.train.size()));
  require(init_extractor.output_dim() == cfg.k_tilde,
          "train: extractor output dimensionality must equal K_tilde");

  DiscoveryState state;
  state.extractor = init_extractor.clone();
  state.head = model::CoefficientHead(cfg.k_tilde);

  Rng master(cfg.seed);
  bool xi_initialized = false;

  Vector best_theta = state.extractor->params();
  Vector best_logits = state.head.logits;
  double best_xi = state.head.xi_prime;

  detail::AdamState adam_theta, adam_logits;
  const bool use_adam = cfg.optimizer == "adam";
  if (use_adam) {
    adam_theta.init(state.extractor->param_count());
    adam_logits.init(cfg.k_tilde);
  }

  int epochs_since_best = 0;
  for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    Rng erng = master.split(0xE90C'0000ull + static_cast<std::uint64_t>(epoch));
    std::vector<int> order = split.train;
    erng.shuffle(order);

    double ep_loss = 0.0, ep_res = 0.0, ep_inv = 0.0, ep_alig = 0.0;
    int n_batches = 0;
    bool aborted = false;

    for (std::size_t pos = 0; pos < order.size(); pos += static_cast<std::size_t>(cfg.domains_per_batch)) {
      const std::size_t last = std::min(order.size(), pos + static_cast<std::size_t>(cfg.domains_per_batch));
      std::vector<Matrix> feats;
      std::vector<Matrix> batch_inputs;
      std::vector<Vector> batch_labels;
      for (std::size_t q = pos; q < last; ++q) {
        const DomainPanel& p = panels[static_cast<std::size_t>(order[q])];
        Matrix x;
        Vector r;
        if (cfg.full_domain_moments || p.n() <= cfg.samples_per_domain) {
          if (p.n() < cfg.samples_per_domain && !cfg.full_domain_moments) {
            // domain smaller than N_b: sample with replacement
            x.resize(cfg.samples_per_domain, p.dim());
            r.resize(cfg.samples_per_domain);
            for (int i = 0; i < cfg.samples_per_domain; ++i) {
              const auto j = erng.uniform_int(p.n());
              x.row(i) = p.inputs.row(j);
              r(i) = p.labels(j);
            }
          } else {
            x = p.inputs;
            r = p.labels;
          }
        } else {
          std::vector<int> idx(static_cast<std::size_t>(p.n()));
          for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int>(i);
          erng.shuffle(idx);
          x.resize(cfg.samples_per_domain, p.dim());
          r.resize(cfg.samples_per_domain);
          for (int i = 0; i < cfg.samples_per_domain; ++i) {
            x.row(i) = p.inputs.row(idx[static_cast<std::size_t>(i)]);
            r(i) = p.labels(idx[static_cast<std::size_t>(i)]);
          }
        }
        batch_inputs.push_back(std::move(x));
        batch_labels.push_back(std::move(r));
      }

      try {
        feats.reserve(batch_inputs.size());
        for (const auto& x : batch_inputs) feats.push_back(state.extractor->forward(x));

        // the tracker is seeded from the first batch it sees
        if (!xi_initialized) {
          std::vector<Vector> first_coeffs;
          for (std::size_t d = 0; d < feats.size(); ++d)
            first_coeffs.push_back(domain_coefficients(standardize_features(feats[d]),
                                                       batch_labels[d], cfg.ridge_eps));
          double est = 0.0;
          for (const auto& nu : first_coeffs) est += nu.squaredNorm();
          est /= static_cast<double>(first_coeffs.size());
          state.head.xi_prime = std::clamp(est, 1e-8, 1.0);
          state.xi_prime_init = state.head.xi_prime;
          xi_initialized = true;
        }

        const Vector nu_shared = state.head.coefficients();
        std::vector<Matrix> grad_feats;
        Vector grad_nu;
        const BatchLoss bl =
            batch_loss(feats, batch_labels, nu_shared, cfg.lambda1, cfg.lambda2, cfg.ridge_eps,
                       &grad_feats, &grad_nu, &state.warnings);

        if (!std::isfinite(bl.total)) throw numeric_error("train: non-finite loss");

        Vector grad_theta = Vector::Zero(state.extractor->param_count());
        for (std::size_t d = 0; d < feats.size(); ++d)
          grad_theta += state.extractor->backward(batch_inputs[d], grad_feats[d]);
        Vector grad_logits = state.head.logits_gradient(grad_nu);

        // near-singular Grams can emit enormous M^-2 gradients on single
        // batches; a global-norm cap keeps plain SGD stable there
        if (cfg.grad_clip > 0.0) {
          const double norm =
              std::sqrt(grad_theta.squaredNorm() + grad_logits.squaredNorm());
          if (norm > cfg.grad_clip) {
            grad_theta *= cfg.grad_clip / norm;
            grad_logits *= cfg.grad_clip / norm;
          }
        }

        if (use_adam) {
          state.extractor->set_params(state.extractor->params() -
                                      adam_theta.update(grad_theta, cfg.learning_rate));
          state.head.logits -= adam_logits.update(grad_logits, cfg.learning_rate);
        } else {
          state.extractor->set_params(state.extractor->params() - cfg.learning_rate * grad_theta);
          state.head.logits -= cfg.learning_rate * grad_logits;
        }
        // recenter (exactly coefficient-preserving) and bound the logits:
        // a saturated softmax freezes its own gradient and kills features
        state.head.logits.array() -= state.head.logits.mean();
        if (cfg.logits_bound > 0.0)
          state.head.logits =
              state.head.logits.cwiseMax(-cfg.logits_bound).cwiseMin(cfg.logits_bound);

        state.head.xi_prime =
            std::clamp(update_xi_prime(state.head.xi_prime, bl.xi_hat, cfg.alpha), 1e-8, 1.0);
        state.xi_prime_trajectory.push_back(state.head.xi_prime);

        ep_loss += bl.total;
        ep_res += bl.res;
        ep_inv += bl.inv;
        ep_alig += bl.alig;
        ++n_batches;
      } catch (const numeric_error& err) {
        state.diverged = true;
        state.warnings.push_back(std::string("aborted: ") + err.what());
        aborted = true;
        break;
      }
    }

    if (aborted) break;

    EpochStats es;
    es.epoch = epoch;
    es.loss = ep_loss / std::max(1, n_batches);
    es.res = ep_res / std::max(1, n_batches);
    es.inv = ep_inv / std::max(1, n_batches);
    es.alig = ep_alig / std::max(1, n_batches);
    es.xi_prime = state.head.xi_prime;
    es.val_mse = validation_mse(*state.extractor, state.head, panels, split.val);
    state.history.push_back(es);
    state.epochs_run = epoch + 1;

    if (es.val_mse < state.best_val_mse) {
      state.best_val_mse = es.val_mse;
      state.best_epoch = epoch;
      best_theta = state.extractor->params();
      best_logits = state.head.logits;
      best_xi = state.head.xi_prime;
      epochs_since_best = 0;
    } else if (++epochs_since_best >= cfg.patience) {
      break;
    }
  }

  if (state.best_epoch >= 0) {
    state.extractor->set_params(best_theta);
    state.head.logits = best_logits;
    state.head.xi_prime = best_xi;
  }

  // full-domain analytic coefficients of the returned model, per source domain
  state.domain_coefficient_cache.clear();
  for (int idx : split.train) {
    const DomainPanel& p = panels[static_cast<std::size_t>(idx)];
    try {
      const Matrix s = standardize_features(state.extractor->forward(p.inputs));
      state.domain_coefficient_cache.push_back(domain_coefficients(s, p.labels, cfg.ridge_eps));
    } catch (const numeric_error&) {
      state.domain_coefficient_cache.push_back(Vector::Zero(cfg.k_tilde));
    }
  }
  return state;
}

}  // namespace cfl::discovery
