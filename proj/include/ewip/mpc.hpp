#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <unsupported/Eigen/MatrixFunctions>

#include "ewip/dynamics.hpp"
#include "ewip/qp.hpp"

namespace ewip::mpc {

struct MpcConfig {
  double sample_time = 0.01;
  int prediction_horizon = 100;
  int control_horizon = 15;
  // weights enter the cost squared, MATLAB-toolbox style
  double w_tau = 0.0210;
  double w_f_in = 0.2101;
  double w_dtau = 0.4759;
  double w_df_in = 0.4759;
  double w_x = 1.0;
  double w_zp = 1.0;
  double theta_bound = std::numbers::pi / 6.0;
  double slack_penalty = 1e4;

  void validate() const {
    auto fail = [](const std::string& what) { throw std::invalid_argument("MpcConfig: " + what); };
    if (!(sample_time > 0.0)) fail("sample_time must be positive");
    if (prediction_horizon < 1) fail("prediction horizon must be positive");
    if (control_horizon < 1 || control_horizon > prediction_horizon)
      fail("control horizon must lie in [1, prediction horizon]");
    for (double w : {w_tau, w_f_in, w_dtau, w_df_in, w_x, w_zp})
      if (w < 0.0) fail("weights must be nonnegative");
    if (!(theta_bound > 0.0)) fail("theta bound must be positive");
    if (slack_penalty < 0.0) fail("slack penalty must be nonnegative");
  }
};

/// Continuous-time linearization around an operating point, with the output
/// selector for the tracked quantities (wheel x, bob height z_p).
struct LinearModel {
  Matrix A;  ///< 10x10
  Matrix B;  ///< 10x2
  Matrix C;  ///< 2x10
  State operating_state;
  ControlInput operating_input;
};

struct DiscreteModel {
  Matrix A_d;
  Matrix B_d;
  double dt = 0.0;
};

/// Full state derivative under the flat-ground closure.
inline Eigen::Matrix<double, 10, 1> state_derivative(const State& s, const ControlInput& u,
                                                     const SystemParams& p) {
  const Accelerations a = accelerations(s, u, p);
  Eigen::Matrix<double, 10, 1> f;
  f << s.xd, s.zd, s.thetad, s.phid, s.ld, a.xdd, a.zdd, a.thetadd, a.phidd, a.ldd;
  return f;
}

/// Upright rest state at the nominal link length.
inline State equilibrium_state(const SystemParams& p, double link_length = -1.0) {
  State s;
  s.z = p.R_w;
  s.l = link_length > 0.0 ? link_length : p.l_ref();
  return s;
}

/// Input holding the upright rest state: tau = 0 (the spin equation forces
/// it), and the link force found by Newton iteration on the residual norm.
inline ControlInput equilibrium_input(const SystemParams& p, double link_length = -1.0) {
  const State s = equilibrium_state(p, link_length);
  ControlInput u{0.0, 0.0};
  for (int iter = 0; iter < 20; ++iter) {
    const double r = accelerations(s, u, p).ldd;
    if (std::abs(r) <= 1e-12) break;
    const double h = 1e-6;
    const double dr = (accelerations(s, {0.0, u.f_in + h}, p).ldd -
                       accelerations(s, {0.0, u.f_in - h}, p).ldd) /
                      (2.0 * h);
    if (dr == 0.0) throw std::runtime_error("equilibrium_input: flat residual");
    u.f_in -= r / dr;
  }
  if (std::abs(u.f_in) > p.f_max || std::abs(u.tau) > p.tau_max)
    throw std::invalid_argument("equilibrium_input: no root inside the actuator box");
  const auto q = state_derivative(s, u, p);
  if (q.tail(5).norm() > 1e-9)
    throw std::runtime_error("equilibrium_input: residual did not converge");
  return u;
}

/// Central-difference Jacobians of the state derivative, with the step scaled
/// by each coordinate's magnitude.
inline LinearModel linearize(const State& op_state, const ControlInput& op_input,
                             const SystemParams& p) {
  LinearModel model;
  model.operating_state = op_state;
  model.operating_input = op_input;
  model.A.resize(10, 10);
  model.B.resize(10, 2);

  const auto check = [](double v, const char* what, int i, int j) {
    if (!std::isfinite(v))
      throw std::runtime_error(std::string("linearize: non-finite ") + what + " entry (" +
                               std::to_string(i) + ", " + std::to_string(j) + ")");
    return v;
  };

  auto x0 = op_state.to_array();
  for (int j = 0; j < 10; ++j) {
    const double h = 1e-6 * std::max(1.0, std::abs(x0[j]));
    auto xp = x0, xm = x0;
    xp[j] += h;
    xm[j] -= h;
    const auto fp = state_derivative(State::from_array(xp), op_input, p);
    const auto fm = state_derivative(State::from_array(xm), op_input, p);
    for (int i = 0; i < 10; ++i) model.A(i, j) = check((fp(i) - fm(i)) / (2.0 * h), "A", i, j);
  }

  const double u0[2] = {op_input.tau, op_input.f_in};
  for (int j = 0; j < 2; ++j) {
    const double h = 1e-6 * std::max(1.0, std::abs(u0[j]));
    ControlInput up = op_input, um = op_input;
    (j == 0 ? up.tau : up.f_in) += h;
    (j == 0 ? um.tau : um.f_in) -= h;
    const auto fp = state_derivative(op_state, up, p);
    const auto fm = state_derivative(op_state, um, p);
    for (int i = 0; i < 10; ++i) model.B(i, j) = check((fp(i) - fm(i)) / (2.0 * h), "B", i, j);
  }

  // outputs: y = (x, z_p); z_p = z + l cos(theta)
  model.C = Matrix::Zero(2, 10);
  model.C(0, 0) = 1.0;
  model.C(1, 1) = 1.0;
  model.C(1, 2) = -op_state.l * std::sin(op_state.theta);
  model.C(1, 4) = std::cos(op_state.theta);
  return model;
}

/// Zero-order-hold discretization through the augmented matrix exponential.
inline DiscreteModel discretize(const LinearModel& model, double dt) {
  if (!(dt > 0.0)) throw std::invalid_argument("discretize: dt must be positive");
  Matrix aug = Matrix::Zero(12, 12);
  aug.topLeftCorner(10, 10) = model.A;
  aug.topRightCorner(10, 2) = model.B;
  const Matrix e = (aug * dt).exp();
  DiscreteModel d;
  d.A_d = e.topLeftCorner(10, 10);
  d.B_d = e.topRightCorner(10, 2);
  d.dt = dt;
  return d;
}

/// Receding-horizon tracking controller on the linearized plant: a condensed
/// QP over the control moves (held constant past the control horizon) plus a
/// shared soft-constraint slack for the lean-angle rows.
class MpcController {
 public:
  struct Diagnostics {
    bool fallback = false;
    int qp_iterations = 0;
    double slack = 0.0;
    int solves = 0;
  };

  MpcController(const SystemParams& plant, MpcConfig config)
      : plant_(plant), config_(std::move(config)) {
    plant_.validate();
    config_.validate();
    const ControlInput u_eq = equilibrium_input(plant_);
    model_ = linearize(equilibrium_state(plant_), u_eq, plant_);
    discrete_ = discretize(model_, config_.sample_time);
    build_prediction();
    reset();
  }

  const LinearModel& model() const { return model_; }
  const DiscreteModel& discrete() const { return discrete_; }
  const Diagnostics& last() const { return diagnostics_; }
  const MpcConfig& config() const { return config_; }

  void reset() {
    prev_input_ = model_.operating_input;
    warm_ = Vector::Zero(num_vars_);
    have_warm_ = false;
    diagnostics_ = Diagnostics{};
  }

  /// Builds the tracking QP for the current deviation state and reference
  /// window (prediction-horizon pairs of (x_ref, z_ref)).
  QpProblem build_qp(const State& state,
                     std::span<const std::pair<double, double>> reference) const {
    if (static_cast<int>(reference.size()) != config_.prediction_horizon)
      throw std::invalid_argument("MpcController: reference window must match the horizon");

    const Vector dx = deviation(state);
    const auto [xp_op, zp_op] = bob_position(model_.operating_state);
    (void)xp_op;

    Vector r_dev(2 * config_.prediction_horizon);
    for (int k = 0; k < config_.prediction_horizon; ++k) {
      r_dev(2 * k) = reference[k].first - model_.operating_state.x;
      r_dev(2 * k + 1) = reference[k].second - zp_op;
    }

    QpProblem qp;
    qp.hessian = hessian_;
    qp.gradient = Vector::Zero(num_vars_);
    const Vector y_free = sy_x_ * dx - r_dev;  // output deviation with U = 0
    qp.gradient.head(2 * config_.control_horizon) =
        2.0 * sy_u_.transpose() * output_weights_.asDiagonal() * y_free;
    Vector d0 = Vector::Zero(2 * config_.control_horizon);
    d0(0) = prev_input_.tau - model_.operating_input.tau;
    d0(1) = prev_input_.f_in - model_.operating_input.f_in;
    qp.gradient.head(2 * config_.control_horizon) -=
        2.0 * rate_diff_.transpose() * rate_weights_.asDiagonal() * d0;

    // theta cone rows, input box rows, slack positivity
    const int np = config_.prediction_horizon;
    const int nu = 2 * config_.control_horizon;
    qp.constraints = Matrix::Zero(2 * np + 2 * nu + 1, num_vars_);
    qp.bounds.resize(2 * np + 2 * nu + 1);
    const Vector theta_free = st_x_ * dx;  // predicted theta with U = 0
    for (int k = 0; k < np; ++k) {
      const double theta_op = model_.operating_state.theta;
      qp.constraints.block(2 * k, 0, 1, nu) = st_u_.row(k);
      qp.constraints(2 * k, num_vars_ - 1) = -1.0;
      qp.bounds(2 * k) = config_.theta_bound - theta_op - theta_free(k);
      qp.constraints.block(2 * k + 1, 0, 1, nu) = -st_u_.row(k);
      qp.constraints(2 * k + 1, num_vars_ - 1) = -1.0;
      qp.bounds(2 * k + 1) = config_.theta_bound + theta_op + theta_free(k);
    }
    const double limits[2] = {plant_.tau_max, plant_.f_max};
    const double op[2] = {model_.operating_input.tau, model_.operating_input.f_in};
    for (int j = 0; j < nu; ++j) {
      const int d = j % 2;
      const int row = 2 * np + 2 * j;
      qp.constraints(row, j) = 1.0;
      qp.bounds(row) = limits[d] - op[d];
      qp.constraints(row + 1, j) = -1.0;
      qp.bounds(row + 1) = limits[d] + op[d];
    }
    qp.constraints(2 * np + 2 * nu, num_vars_ - 1) = -1.0;
    qp.bounds(2 * np + 2 * nu) = 0.0;
    return qp;
  }

  /// One receding-horizon step: solve the QP from the deviation state and
  /// return the first move plus the equilibrium input, clamped. On QP failure
  /// the previous input is repeated and the fallback flag raised.
  ControlInput control(const State& state,
                       std::span<const std::pair<double, double>> reference) {
    const QpProblem qp = build_qp(state, reference);
    Vector start = have_warm_ ? shift_warm() : Vector::Zero(num_vars_);
    lift_slack(qp, start);
    try {
      const QpSolution sol = solve_qp_active_set(qp, start);
      diagnostics_.fallback = false;
      diagnostics_.qp_iterations = sol.iterations;
      diagnostics_.slack = sol.u(num_vars_ - 1);
      ++diagnostics_.solves;
      warm_ = sol.u;
      have_warm_ = true;
      ControlInput u{model_.operating_input.tau + sol.u(0),
                     model_.operating_input.f_in + sol.u(1)};
      u = u.clamped(plant_);
      prev_input_ = u;
      return u;
    } catch (const std::runtime_error&) {
      diagnostics_.fallback = true;
      ++diagnostics_.solves;
      return prev_input_;
    }
  }

 private:
  Vector deviation(const State& state) const {
    const auto a = state.to_array();
    const auto o = model_.operating_state.to_array();
    Vector dx(10);
    for (int i = 0; i < 10; ++i) dx(i) = a[i] - o[i];
    return dx;
  }

  // moves shifted one step with the tail repeated; slack re-lifted by caller
  Vector shift_warm() const {
    Vector s = warm_;
    const int nu = 2 * config_.control_horizon;
    s.head(nu - 2) = warm_.segment(2, nu - 2);
    s.segment(nu - 2, 2) = warm_.segment(nu - 2, 2);
    s(num_vars_ - 1) = warm_(num_vars_ - 1);
    return s;
  }

  // raise the slack variable until the theta rows hold, keeping the start
  // feasible by construction
  void lift_slack(const QpProblem& qp, Vector& start) const {
    const int nu = 2 * config_.control_horizon;
    for (int j = 0; j < nu; ++j) {
      const int d = j % 2;
      const double limits[2] = {plant_.tau_max, plant_.f_max};
      const double op[2] = {model_.operating_input.tau, model_.operating_input.f_in};
      start(j) = std::clamp(start(j), -(limits[d] + op[d]), limits[d] - op[d]);
    }
    start(num_vars_ - 1) = std::max(0.0, start(num_vars_ - 1));
    double worst = 0.0;
    for (int r = 0; r < 2 * config_.prediction_horizon; ++r) {
      const double lhs = qp.constraints.row(r).head(nu).dot(start.head(nu));
      worst = std::max(worst, lhs - qp.bounds(r) - start(num_vars_ - 1));
    }
    if (worst > 0.0) start(num_vars_ - 1) += worst + 1e-12;
  }

  void build_prediction() {
    const int np = config_.prediction_horizon;
    const int nc = config_.control_horizon;
    const int nu = 2 * nc;
    num_vars_ = nu + 1;

    // stacked state predictions: x_k = A^k dx0 + sum_j A^(k-1-j) B du_j,
    // with the last move held for j >= nc
    std::vector<Matrix> a_pow(np + 1);
    a_pow[0] = Matrix::Identity(10, 10);
    for (int k = 1; k <= np; ++k) a_pow[k] = discrete_.A_d * a_pow[k - 1];

    Matrix sx(10 * np, 10);
    Matrix su = Matrix::Zero(10 * np, nu);
    for (int k = 1; k <= np; ++k) {
      sx.block(10 * (k - 1), 0, 10, 10) = a_pow[k];
      for (int j = 0; j < k; ++j) {
        const int move = std::min(j, nc - 1);
        su.block(10 * (k - 1), 2 * move, 10, 2) += a_pow[k - 1 - j] * discrete_.B_d;
      }
    }

    sy_x_.resize(2 * np, 10);
    sy_u_.resize(2 * np, nu);
    st_x_.resize(np, 10);
    st_u_.resize(np, nu);
    for (int k = 0; k < np; ++k) {
      sy_x_.block(2 * k, 0, 2, 10) = model_.C * sx.block(10 * k, 0, 10, 10);
      sy_u_.block(2 * k, 0, 2, nu) = model_.C * su.block(10 * k, 0, 10, nu);
      st_x_.row(k) = sx.row(10 * k + 2);  // theta is state index 2
      st_u_.row(k) = su.row(10 * k + 2);
    }

    output_weights_.resize(2 * np);
    for (int k = 0; k < np; ++k) {
      output_weights_(2 * k) = config_.w_x * config_.w_x;
      output_weights_(2 * k + 1) = config_.w_zp * config_.w_zp;
    }
    Vector input_weights(nu);
    rate_weights_.resize(nu);
    for (int j = 0; j < nc; ++j) {
      input_weights(2 * j) = config_.w_tau * config_.w_tau;
      input_weights(2 * j + 1) = config_.w_f_in * config_.w_f_in;
      rate_weights_(2 * j) = config_.w_dtau * config_.w_dtau;
      rate_weights_(2 * j + 1) = config_.w_df_in * config_.w_df_in;
    }

    rate_diff_ = Matrix::Identity(nu, nu);
    for (int j = 1; j < nc; ++j)
      rate_diff_.block(2 * j, 2 * (j - 1), 2, 2) = -Matrix::Identity(2, 2);

    hessian_ = Matrix::Zero(num_vars_, num_vars_);
    hessian_.topLeftCorner(nu, nu) =
        2.0 * (sy_u_.transpose() * output_weights_.asDiagonal() * sy_u_ +
               Matrix(input_weights.asDiagonal()) +
               rate_diff_.transpose() * rate_weights_.asDiagonal() * rate_diff_);
    hessian_(num_vars_ - 1, num_vars_ - 1) = 2.0 * config_.slack_penalty;
  }

  SystemParams plant_;
  MpcConfig config_;
  LinearModel model_;
  DiscreteModel discrete_;
  int num_vars_ = 0;
  Matrix sy_x_, sy_u_;   // output predictions
  Matrix st_x_, st_u_;   // theta predictions
  Matrix rate_diff_;
  Vector output_weights_, rate_weights_;
  Matrix hessian_;
  ControlInput prev_input_;
  Vector warm_;
  bool have_warm_ = false;
  Diagnostics diagnostics_;
};

/// Reference window for the controller: pairs (x_ref, z_ref) at the next
/// prediction-horizon sample instants.
template <typename Trajectory>
std::vector<std::pair<double, double>> reference_window(const Trajectory& traj, double t,
                                                        const MpcConfig& config) {
  std::vector<std::pair<double, double>> window;
  window.reserve(config.prediction_horizon);
  for (int k = 1; k <= config.prediction_horizon; ++k)
    window.push_back(traj.at(t + k * config.sample_time));
  return window;
}

}  // namespace ewip::mpc
