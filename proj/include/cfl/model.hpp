#pragma once

#include "cfl/common.hpp"
#include "cfl/rng.hpp"

#include <json.hpp>

#include <functional>
#include <memory>
#include <string>

namespace cfl::model {

/// Differentiable feature map phi: R^D -> R^K with explicit forward and
/// backward passes. Reverse accumulation is written per layer; there is no
/// general tape.
class FeatureExtractor {
 public:
  virtual ~FeatureExtractor() = default;

  virtual int input_dim() const = 0;
  virtual int output_dim() const = 0;
  virtual std::string architecture() const = 0;

  virtual Eigen::Index param_count() const = 0;
  virtual Vector params() const = 0;
  virtual void set_params(const Vector& theta) = 0;

  /// batch (n x D) -> features (n x K). Deterministic given the parameters.
  virtual Matrix forward(const Matrix& x) const = 0;

  /// Parameter gradient from the upstream feature gradient; optionally also
  /// the gradient with respect to the inputs.
  virtual Vector backward(const Matrix& x, const Matrix& grad_output,
                          Matrix* grad_input = nullptr) const = 0;

  virtual std::unique_ptr<FeatureExtractor> clone() const = 0;

  virtual nlohmann::json describe() const = 0;  // architecture block for checkpoints
};

namespace detail {
inline double glorot_bound(int fan_in, int fan_out) {
  return std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
}
}  // namespace detail

class LinearExtractor final : public FeatureExtractor {
 public:
  LinearExtractor(int d, int k, std::uint64_t seed) : w_(k, d), b_(Vector::Zero(k)) {
    require(d >= 1 && k >= 1, "linear extractor: dimensions must be >= 1");
    Rng rng(seed);
    const double bound = detail::glorot_bound(d, k);
    for (int i = 0; i < k; ++i)
      for (int j = 0; j < d; ++j) w_(i, j) = rng.uniform(-bound, bound);
  }

  int input_dim() const override { return static_cast<int>(w_.cols()); }
  int output_dim() const override { return static_cast<int>(w_.rows()); }
  std::string architecture() const override { return "linear"; }

  Eigen::Index param_count() const override { return w_.size() + b_.size(); }

  Vector params() const override {
    Vector theta(param_count());
    theta << Eigen::Map<const Vector>(w_.data(), w_.size()), b_;
    return theta;
  }

  void set_params(const Vector& theta) override {
    require(theta.size() == param_count(), "linear extractor: parameter size mismatch");
    Eigen::Map<Vector>(w_.data(), w_.size()) = theta.head(w_.size());
    b_ = theta.tail(b_.size());
  }

  Matrix forward(const Matrix& x) const override {
    require(x.cols() == w_.cols(), "linear extractor: input dimension mismatch");
    return (x * w_.transpose()).rowwise() + b_.transpose();
  }

  Vector backward(const Matrix& x, const Matrix& g, Matrix* grad_input) const override {
    const Matrix dw = g.transpose() * x;
    const Vector db = g.colwise().sum();
    if (grad_input) *grad_input = g * w_;
    Vector grad(param_count());
    grad << Eigen::Map<const Vector>(dw.data(), dw.size()), db;
    return grad;
  }

  std::unique_ptr<FeatureExtractor> clone() const override {
    return std::make_unique<LinearExtractor>(*this);
  }

  nlohmann::json describe() const override {
    return {{"architecture", "linear"}, {"input_dim", input_dim()}, {"output_dim", output_dim()}};
  }

  Matrix& weights() { return w_; }

 private:
  Matrix w_;  // K x D
  Vector b_;
};

/// One tanh hidden layer, linear output without bias.
class MlpExtractor final : public FeatureExtractor {
 public:
  MlpExtractor(int d, int hidden, int k, std::uint64_t seed)
      : w1_(hidden, d), b1_(Vector::Zero(hidden)), w2_(k, hidden) {
    require(d >= 1 && hidden >= 1 && k >= 1, "mlp extractor: dimensions must be >= 1");
    Rng rng(seed);
    const double bound1 = detail::glorot_bound(d, hidden);
    for (int i = 0; i < hidden; ++i)
      for (int j = 0; j < d; ++j) w1_(i, j) = rng.uniform(-bound1, bound1);
    const double bound2 = detail::glorot_bound(hidden, k);
    for (int i = 0; i < k; ++i)
      for (int j = 0; j < hidden; ++j) w2_(i, j) = rng.uniform(-bound2, bound2);
  }

  int input_dim() const override { return static_cast<int>(w1_.cols()); }
  int output_dim() const override { return static_cast<int>(w2_.rows()); }
  int hidden_dim() const { return static_cast<int>(w1_.rows()); }
  std::string architecture() const override { return "mlp"; }

  Eigen::Index param_count() const override { return w1_.size() + b1_.size() + w2_.size(); }

  Vector params() const override {
    Vector theta(param_count());
    theta << Eigen::Map<const Vector>(w1_.data(), w1_.size()), b1_,
        Eigen::Map<const Vector>(w2_.data(), w2_.size());
    return theta;
  }

  void set_params(const Vector& theta) override {
    require(theta.size() == param_count(), "mlp extractor: parameter size mismatch");
    Eigen::Index off = 0;
    Eigen::Map<Vector>(w1_.data(), w1_.size()) = theta.segment(off, w1_.size());
    off += w1_.size();
    b1_ = theta.segment(off, b1_.size());
    off += b1_.size();
    Eigen::Map<Vector>(w2_.data(), w2_.size()) = theta.segment(off, w2_.size());
  }

  Matrix forward(const Matrix& x) const override {
    require(x.cols() == w1_.cols(), "mlp extractor: input dimension mismatch");
    const Matrix h = ((x * w1_.transpose()).rowwise() + b1_.transpose()).array().tanh();
    return h * w2_.transpose();
  }

  Vector backward(const Matrix& x, const Matrix& g, Matrix* grad_input) const override {
    const Matrix h = ((x * w1_.transpose()).rowwise() + b1_.transpose()).array().tanh();
    const Matrix dw2 = g.transpose() * h;
    const Matrix dh = g * w2_;
    const Matrix da = dh.array() * (1.0 - h.array().square());
    const Matrix dw1 = da.transpose() * x;
    const Vector db1 = da.colwise().sum();
    if (grad_input) *grad_input = da * w1_;
    Vector grad(param_count());
    grad << Eigen::Map<const Vector>(dw1.data(), dw1.size()), db1,
        Eigen::Map<const Vector>(dw2.data(), dw2.size());
    return grad;
  }

  std::unique_ptr<FeatureExtractor> clone() const override {
    return std::make_unique<MlpExtractor>(*this);
  }

  nlohmann::json describe() const override {
    return {{"architecture", "mlp"},
            {"input_dim", input_dim()},
            {"hidden_dim", hidden_dim()},
            {"output_dim", output_dim()}};
  }

 private:
  Matrix w1_;
  Vector b1_;
  Matrix w2_;
};

inline std::unique_ptr<FeatureExtractor> linear_extractor(int d, int k, std::uint64_t seed) {
  return std::make_unique<LinearExtractor>(d, k, seed);
}

inline std::unique_ptr<FeatureExtractor> mlp_extractor(int d, int hidden, int k,
                                                       std::uint64_t seed) {
  return std::make_unique<MlpExtractor>(d, hidden, k, seed);
}

inline std::unique_ptr<FeatureExtractor> extractor_from_json(const nlohmann::json& arch,
                                                             std::uint64_t seed) {
  const std::string tag = arch.at("architecture").get<std::string>();
  if (tag == "linear")
    return linear_extractor(arch.at("input_dim").get<int>(), arch.at("output_dim").get<int>(), seed);
  if (tag == "mlp")
    return mlp_extractor(arch.at("input_dim").get<int>(), arch.at("hidden_dim").get<int>(),
                         arch.at("output_dim").get<int>(), seed);
  throw config_error("unknown extractor architecture: " + tag);
}

inline Vector softmax(const Vector& logits) {
  const Vector shifted = logits.array() - logits.maxCoeff();
  const Vector e = shifted.array().exp();
  return e / e.sum();
}

/// nu(l) = (xi' * softmax(l))^(1/2); nonnegative with ||nu||^2 = xi' exactly.
inline Vector coefficients_from_logits(const Vector& logits, double xi_prime) {
  require(xi_prime > 0.0, "coefficients_from_logits: xi' must be positive");
  return (xi_prime * softmax(logits).array()).sqrt();
}

/// Shared coefficient vector: learnable logits plus the tracked residual
/// level xi' in (0, 1].
struct CoefficientHead {
  Vector logits;
  double xi_prime = 1.0;

  explicit CoefficientHead(int k_tilde = 1) : logits(Vector::Zero(k_tilde)) {}

  Vector coefficients() const { return coefficients_from_logits(logits, xi_prime); }

  /// dL/dlogits from dL/dnu, holding xi' constant:
  /// dnu_k/dl_j = (nu_k/2)(delta_kj - p_j).
  Vector logits_gradient(const Vector& dnu) const {
    const Vector p = softmax(logits);
    const Vector nu = coefficients();
    const double mix = dnu.dot(nu);
    return 0.5 * (dnu.array() * nu.array() - p.array() * mix);
  }
};

/// Max relative error between the analytic parameter gradient and central
/// finite differences of the loss through the extractor.
inline double grad_check(FeatureExtractor& f,
                         const std::function<double(const Matrix&)>& loss_value,
                         const std::function<Matrix(const Matrix&)>& loss_grad, const Matrix& batch,
                         double h = 1e-5) {
  require(h > 0.0, "grad_check: step must be positive");
  if (f.param_count() == 0) return 0.0;

  const Matrix feats = f.forward(batch);
  const double base = loss_value(feats);
  if (!std::isfinite(base)) throw numeric_error("grad_check: non-finite loss");
  const Vector analytic = f.backward(batch, loss_grad(feats));

  const Vector theta0 = f.params();
  double worst = 0.0;
  for (Eigen::Index i = 0; i < theta0.size(); ++i) {
    Vector theta = theta0;
    theta(i) = theta0(i) + h;
    f.set_params(theta);
    const double up = loss_value(f.forward(batch));
    theta(i) = theta0(i) - h;
    f.set_params(theta);
    const double down = loss_value(f.forward(batch));
    if (!std::isfinite(up) || !std::isfinite(down)) {
      f.set_params(theta0);
      throw numeric_error("grad_check: non-finite loss during probing");
    }
    const double fd = (up - down) / (2.0 * h);
    const double err = std::abs(analytic(i) - fd) /
                       std::max({1.0, std::abs(analytic(i)), std::abs(fd)});
    worst = std::max(worst, err);
  }
  f.set_params(theta0);
  return worst;
}

/// Same relative-error measure for any flat parameter vector.
inline double grad_check_flat(const std::function<double(const Vector&)>& loss_of_theta,
                              const Vector& theta0, const Vector& analytic, double h = 1e-5) {
  double worst = 0.0;
  for (Eigen::Index i = 0; i < theta0.size(); ++i) {
    Vector t = theta0;
    t(i) = theta0(i) + h;
    const double up = loss_of_theta(t);
    t(i) = theta0(i) - h;
    const double down = loss_of_theta(t);
    const double fd = (up - down) / (2.0 * h);
    const double err = std::abs(analytic(i) - fd) /
                       std::max({1.0, std::abs(analytic(i)), std::abs(fd)});
    worst = std::max(worst, err);
  }
  return worst;
}

/// Checkpoint format: architecture block, flat theta, logits, xi', K, and
/// the scaler reference the caller wants recorded.
inline nlohmann::json checkpoint_to_json(const FeatureExtractor& f, const CoefficientHead& head,
                                         const std::string& scaler_ref) {
  const Vector theta = f.params();
  nlohmann::json j;
  j["schema_version"] = 1;
  j["model"] = f.describe();
  j["theta"] = std::vector<double>(theta.data(), theta.data() + theta.size());
  j["logits"] = std::vector<double>(head.logits.data(), head.logits.data() + head.logits.size());
  j["xi_prime"] = head.xi_prime;
  j["k_tilde"] = f.output_dim();
  j["scaler"] = scaler_ref;
  return j;
}

struct Checkpoint {
  std::unique_ptr<FeatureExtractor> extractor;
  CoefficientHead head;
  std::string scaler_ref;
};

inline Checkpoint checkpoint_from_json(const nlohmann::json& j) {
  Checkpoint ck;
  ck.extractor = extractor_from_json(j.at("model"), 0);
  const auto theta = j.at("theta").get<std::vector<double>>();
  ck.extractor->set_params(Eigen::Map<const Vector>(theta.data(), static_cast<Eigen::Index>(theta.size())));
  const auto logits = j.at("logits").get<std::vector<double>>();
  ck.head.logits = Eigen::Map<const Vector>(logits.data(), static_cast<Eigen::Index>(logits.size()));
  ck.head.xi_prime = j.at("xi_prime").get<double>();
  ck.scaler_ref = j.value("scaler", std::string{});
  return ck;
}

}  // namespace cfl::model
