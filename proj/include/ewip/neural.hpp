#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace ewip::neural {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

// Distributions are constructed per draw so the engine is the only random
// state (std::normal_distribution would otherwise cache a spare variate,
// complicating checkpointing).
inline double draw_uniform(std::mt19937_64& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

inline double draw_normal(std::mt19937_64& rng) {
  return std::normal_distribution<double>(0.0, 1.0)(rng);
}

enum class OutputActivation {
  linear,
  bounded_tanh,  ///< out_i = limit_i * tanh(z_i)
};

struct Gradients {
  std::vector<Matrix> weights;
  std::vector<Vector> biases;

  void set_zero() {
    for (auto& w : weights) w.setZero();
    for (auto& b : biases) b.setZero();
  }

  double squared_norm() const {
    double s = 0.0;
    for (const auto& w : weights) s += w.squaredNorm();
    for (const auto& b : biases) s += b.squaredNorm();
    return s;
  }

  void scale(double a) {
    for (auto& w : weights) w *= a;
    for (auto& b : biases) b *= a;
  }

  void add_scaled(const Gradients& other, double a) {
    for (std::size_t k = 0; k < weights.size(); ++k) {
      weights[k] += a * other.weights[k];
      biases[k] += a * other.biases[k];
    }
  }

  bool finite() const {
    for (const auto& w : weights)
      if (!w.allFinite()) return false;
    for (const auto& b : biases)
      if (!b.allFinite()) return false;
    return true;
  }
};

/// Dense feed-forward network: rectified-linear hidden layers, the output
/// layer either linear or squashed per-component to configured limits.
class Mlp {
 public:
  Mlp() = default;

  Mlp(std::vector<int> layer_sizes, OutputActivation out_act, Vector output_limits = {})
      : sizes_(std::move(layer_sizes)), out_act_(out_act), limits_(std::move(output_limits)) {
    if (sizes_.size() < 2) throw std::invalid_argument("Mlp: need at least input and output layers");
    for (int n : sizes_)
      if (n < 1) throw std::invalid_argument("Mlp: layer widths must be positive");
    if (out_act_ == OutputActivation::bounded_tanh && limits_.size() != sizes_.back())
      throw std::invalid_argument("Mlp: output limits must match the output width");
    for (std::size_t k = 0; k + 1 < sizes_.size(); ++k) {
      weights_.emplace_back(Matrix::Zero(sizes_[k + 1], sizes_[k]));
      biases_.emplace_back(Vector::Zero(sizes_[k + 1]));
    }
  }

  /// Fan-in-scaled uniform initialization, deterministic under seed.
  static Mlp init(std::vector<int> layer_sizes, std::uint64_t seed, OutputActivation out_act,
                  Vector output_limits = {}) {
    Mlp net(std::move(layer_sizes), out_act, std::move(output_limits));
    std::mt19937_64 rng(seed);
    for (auto& w : net.weights_) {
      const double bound = std::sqrt(6.0 / static_cast<double>(w.cols()));
      for (Eigen::Index j = 0; j < w.cols(); ++j)
        for (Eigen::Index i = 0; i < w.rows(); ++i) w(i, j) = draw_uniform(rng, -bound, bound);
    }
    return net;
  }

  int input_size() const { return sizes_.front(); }
  int output_size() const { return sizes_.back(); }
  const std::vector<int>& layer_sizes() const { return sizes_; }
  OutputActivation output_activation() const { return out_act_; }
  const Vector& output_limits() const { return limits_; }
  std::vector<Matrix>& weights() { return weights_; }
  const std::vector<Matrix>& weights() const { return weights_; }
  std::vector<Vector>& biases() { return biases_; }
  const std::vector<Vector>& biases() const { return biases_; }

  bool same_architecture(const Mlp& other) const {
    return sizes_ == other.sizes_ && out_act_ == other.out_act_ &&
           limits_.size() == other.limits_.size() &&
           (limits_.size() == 0 || limits_ == other.limits_);
  }

  /// Forward activations recorded for a later backward pass.
  struct Tape {
    std::vector<Matrix> activations;  ///< activations[0] is the input; one entry per layer after
    std::vector<Matrix> pre;          ///< pre-activation of each layer
    bool recorded() const { return !activations.empty(); }
  };

  /// Batched evaluation; columns are samples.
  Matrix forward(const Matrix& input, Tape& tape) const {
    if (input.rows() != sizes_.front())
      throw std::invalid_argument("Mlp::forward: input width " + std::to_string(input.rows()) +
                                  " does not match layer width " + std::to_string(sizes_.front()));
    tape.activations.clear();
    tape.pre.clear();
    tape.activations.push_back(input);
    Matrix a = input;
    for (std::size_t k = 0; k < weights_.size(); ++k) {
      Matrix z = (weights_[k] * a).colwise() + biases_[k];
      tape.pre.push_back(z);
      if (k + 1 < weights_.size()) {
        a = z.cwiseMax(0.0);
      } else if (out_act_ == OutputActivation::bounded_tanh) {
        a = z.array().tanh().matrix();
        for (Eigen::Index i = 0; i < a.rows(); ++i) a.row(i) *= limits_(i);
      } else {
        a = std::move(z);
      }
      tape.activations.push_back(a);
    }
    return a;
  }

  Matrix forward(const Matrix& input) const {
    Tape tape;
    return forward(input, tape);
  }

  /// Single-sample evaluation.
  Vector evaluate(const Vector& input) const {
    Tape tape;
    return forward(Matrix(input), tape).col(0);
  }

  Gradients zero_gradients() const {
    Gradients g;
    for (std::size_t k = 0; k < weights_.size(); ++k) {
      g.weights.push_back(Matrix::Zero(weights_[k].rows(), weights_[k].cols()));
      g.biases.push_back(Vector::Zero(biases_[k].size()));
    }
    return g;
  }

  /// Reverse-mode pass seeded with dLoss/dOutput (columns are samples).
  /// Accumulates parameter gradients into grads and returns dLoss/dInput.
  Matrix backward(const Tape& tape, const Matrix& output_seed, Gradients& grads) const {
    if (!tape.recorded()) throw std::logic_error("Mlp::backward: no recorded forward pass");
    if (tape.activations.size() != weights_.size() + 1)
      throw std::invalid_argument("Mlp::backward: tape does not match this network");
    if (output_seed.rows() != sizes_.back() || output_seed.cols() != tape.activations[0].cols())
      throw std::invalid_argument("Mlp::backward: seed shape mismatch");

    Matrix dz;
    const std::size_t last = weights_.size() - 1;
    if (out_act_ == OutputActivation::bounded_tanh) {
      // dy/dz = limit * (1 - tanh(z)^2)
      Matrix t = tape.pre[last].array().tanh().matrix();
      dz = output_seed.cwiseProduct(Matrix::Ones(t.rows(), t.cols()) - t.cwiseProduct(t));
      for (Eigen::Index i = 0; i < dz.rows(); ++i) dz.row(i) *= limits_(i);
    } else {
      dz = output_seed;
    }

    for (std::size_t k = weights_.size(); k-- > 0;) {
      grads.weights[k] += dz * tape.activations[k].transpose();
      grads.biases[k] += dz.rowwise().sum();
      Matrix da = weights_[k].transpose() * dz;
      if (k == 0) return da;
      dz = da.cwiseProduct((tape.pre[k - 1].array() > 0.0).cast<double>().matrix());
    }
    return {};  // unreachable
  }

 private:
  std::vector<int> sizes_;
  OutputActivation out_act_ = OutputActivation::linear;
  Vector limits_;
  std::vector<Matrix> weights_;
  std::vector<Vector> biases_;
};

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;     ///< denominator offset
  double l2 = 1e-4;      ///< L2 regularization coefficient
  double clip = 0.0;     ///< global-norm gradient clip threshold; 0 disables
};

struct AdamState {
  AdamConfig config;
  long long step_count = 0;
  std::vector<Matrix> m_w, v_w;
  std::vector<Vector> m_b, v_b;

  static AdamState make(const Mlp& net, AdamConfig cfg) {
    AdamState st;
    st.config = cfg;
    for (std::size_t k = 0; k < net.weights().size(); ++k) {
      st.m_w.push_back(Matrix::Zero(net.weights()[k].rows(), net.weights()[k].cols()));
      st.v_w.push_back(Matrix::Zero(net.weights()[k].rows(), net.weights()[k].cols()));
      st.m_b.push_back(Vector::Zero(net.biases()[k].size()));
      st.v_b.push_back(Vector::Zero(net.biases()[k].size()));
    }
    return st;
  }
};

namespace detail {

template <typename T>
void adam_tensor_step(T& param, const T& grad, T& m, T& v, const AdamConfig& cfg, double bc1,
                      double bc2) {
  m = cfg.beta1 * m + (1.0 - cfg.beta1) * grad;
  v = (cfg.beta2 * v.array() + (1.0 - cfg.beta2) * grad.array().square()).matrix();
  param.array() -= cfg.lr * (m.array() / bc1) / ((v.array() / bc2).sqrt() + cfg.eps);
}

}  // namespace detail

/// Global-norm clip, L2 term, then a bias-corrected Adam step.
/// Rejects non-finite gradients before touching any parameter.
inline void adam_update(Mlp& net, const Gradients& gradients, AdamState& st) {
  if (st.m_w.size() != net.weights().size())
    throw std::invalid_argument("adam_update: optimizer state does not match network");
  if (!gradients.finite())
    throw std::runtime_error("adam_update: non-finite gradient, update rejected");

  Gradients g = gradients;
  if (st.config.clip > 0.0) {
    const double norm = std::sqrt(g.squared_norm());
    if (norm > st.config.clip) g.scale(st.config.clip / norm);
  }
  if (st.config.l2 != 0.0) {
    for (std::size_t k = 0; k < g.weights.size(); ++k) {
      g.weights[k] += st.config.l2 * net.weights()[k];
      g.biases[k] += st.config.l2 * net.biases()[k];
    }
  }

  ++st.step_count;
  const double bc1 = 1.0 - std::pow(st.config.beta1, static_cast<double>(st.step_count));
  const double bc2 = 1.0 - std::pow(st.config.beta2, static_cast<double>(st.step_count));
  for (std::size_t k = 0; k < g.weights.size(); ++k) {
    detail::adam_tensor_step(net.weights()[k], g.weights[k], st.m_w[k], st.v_w[k], st.config, bc1,
                             bc2);
    detail::adam_tensor_step(net.biases()[k], g.biases[k], st.m_b[k], st.v_b[k], st.config, bc1,
                             bc2);
  }
}

/// Adam on a bare parameter vector (used for the policy log-std).
struct AdamVector {
  AdamConfig config;
  long long step_count = 0;
  Vector m, v;

  static AdamVector make(const Vector& param, AdamConfig cfg) {
    AdamVector st;
    st.config = cfg;
    st.m = Vector::Zero(param.size());
    st.v = Vector::Zero(param.size());
    return st;
  }
};

inline void adam_update(Vector& param, const Vector& gradient, AdamVector& st) {
  if (!gradient.allFinite())
    throw std::runtime_error("adam_update: non-finite gradient, update rejected");
  Vector g = gradient;
  if (st.config.clip > 0.0) {
    const double norm = g.norm();
    if (norm > st.config.clip) g *= st.config.clip / norm;
  }
  if (st.config.l2 != 0.0) g += st.config.l2 * param;
  ++st.step_count;
  const double bc1 = 1.0 - std::pow(st.config.beta1, static_cast<double>(st.step_count));
  const double bc2 = 1.0 - std::pow(st.config.beta2, static_cast<double>(st.step_count));
  detail::adam_tensor_step(param, g, st.m, st.v, st.config, bc1, bc2);
}

/// target <- mix * online + (1 - mix) * target, element-wise.
inline void soft_update(Mlp& target, const Mlp& online, double mix) {
  if (!target.same_architecture(online))
    throw std::invalid_argument("soft_update: architecture mismatch");
  for (std::size_t k = 0; k < target.weights().size(); ++k) {
    target.weights()[k] = mix * online.weights()[k] + (1.0 - mix) * target.weights()[k];
    target.biases()[k] = mix * online.biases()[k] + (1.0 - mix) * target.biases()[k];
  }
}

/// Running mean/variance normalizer (Welford). Frozen at evaluation so the
/// policy sees a fixed input map. Normalized values are clipped to +-10 to
/// bound the transient before the statistics settle.
class RunningNorm {
 public:
  RunningNorm() = default;
  explicit RunningNorm(int dim) : mean_(Vector::Zero(dim)), m2_(Vector::Zero(dim)) {}

  int dim() const { return static_cast<int>(mean_.size()); }
  long long count() const { return count_; }
  bool frozen() const { return frozen_; }
  void freeze(bool f) { frozen_ = f; }

  void observe(const Vector& x) {
    if (frozen_) return;
    if (x.size() != mean_.size()) throw std::invalid_argument("RunningNorm: dimension mismatch");
    ++count_;
    const Vector delta = x - mean_;
    mean_ += delta / static_cast<double>(count_);
    m2_ += delta.cwiseProduct(x - mean_);
  }

  Vector variance() const {
    if (count_ < 2) return Vector::Ones(mean_.size());
    return (m2_ / static_cast<double>(count_)).cwiseMax(0.0);
  }

  const Vector& mean() const { return mean_; }
  const Vector& m2() const { return m2_; }

  Vector normalize(const Vector& x) const {
    if (count_ < 2) return x;
    const Vector sd = (variance().array() + 1e-8).sqrt().matrix();
    return ((x - mean_).cwiseQuotient(sd)).cwiseMax(-10.0).cwiseMin(10.0);
  }

  Matrix normalize_batch(const Matrix& x) const {
    Matrix out(x.rows(), x.cols());
    for (Eigen::Index c = 0; c < x.cols(); ++c) out.col(c) = normalize(Vector(x.col(c)));
    return out;
  }

  void restore(long long count, Vector mean, Vector m2, bool frozen) {
    count_ = count;
    mean_ = std::move(mean);
    m2_ = std::move(m2);
    frozen_ = frozen;
  }

 private:
  long long count_ = 0;
  Vector mean_;
  Vector m2_;
  bool frozen_ = false;
};

}  // namespace ewip::neural
