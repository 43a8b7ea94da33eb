#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace ewip::mpc {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

/// min 1/2 u' H u + f' u  subject to  G u <= h
struct QpProblem {
  Matrix hessian;
  Vector gradient;
  Matrix constraints;  ///< may have zero rows
  Vector bounds;

  int vars() const { return static_cast<int>(hessian.rows()); }
  int rows() const { return static_cast<int>(constraints.rows()); }

  void validate() const {
    if (hessian.rows() != hessian.cols()) throw std::invalid_argument("QpProblem: H not square");
    if (gradient.size() != hessian.rows()) throw std::invalid_argument("QpProblem: f size mismatch");
    if (constraints.rows() != bounds.size())
      throw std::invalid_argument("QpProblem: constraint rows and bounds mismatch");
    if (constraints.rows() > 0 && constraints.cols() != hessian.rows())
      throw std::invalid_argument("QpProblem: constraint columns mismatch");
    const double asym = (hessian - hessian.transpose()).cwiseAbs().maxCoeff();
    if (asym > 1e-9 * std::max(1.0, hessian.cwiseAbs().maxCoeff()))
      throw std::invalid_argument("QpProblem: H not symmetric");
  }
};

struct QpSolution {
  Vector u;
  Vector multipliers;  ///< one per constraint row, zero when inactive
  std::vector<int> active;
  int iterations = 0;
};

struct QpInfeasible : std::runtime_error {
  int most_violated_row;
  double violation;
  QpInfeasible(int row, double v)
      : std::runtime_error("QP infeasible; most violated constraint row " + std::to_string(row) +
                           " by " + std::to_string(v)),
        most_violated_row(row),
        violation(v) {}
};

struct QpIterationCap : std::runtime_error {
  QpIterationCap() : std::runtime_error("QP active-set iteration cap reached") {}
};

namespace detail {

inline double max_violation(const QpProblem& qp, const Vector& u, int* row = nullptr) {
  if (qp.rows() == 0) return 0.0;
  Eigen::Index idx = 0;
  const double v = (qp.constraints * u - qp.bounds).maxCoeff(&idx);
  if (row) *row = static_cast<int>(idx);
  return v;
}

inline QpSolution active_set_iterate(const Matrix& h_reg, const QpProblem& qp, Vector u) {
  const int n = qp.vars();
  const int m = qp.rows();
  const int cap = 10 * std::max(n, 1);

  std::vector<int> working;  // indices of constraints held at equality
  QpSolution sol;

  for (int iter = 0; iter < cap; ++iter) {
    sol.iterations = iter + 1;
    const int w = static_cast<int>(working.size());
    Matrix kkt = Matrix::Zero(n + w, n + w);
    kkt.topLeftCorner(n, n) = h_reg;
    for (int k = 0; k < w; ++k) {
      kkt.block(0, n + k, n, 1) = qp.constraints.row(working[k]).transpose();
      kkt.block(n + k, 0, 1, n) = qp.constraints.row(working[k]);
    }
    Vector rhs(n + w);
    rhs.head(n) = -(h_reg * u + qp.gradient);
    // pulls the iterate exactly onto the working-set manifold, which also
    // repairs a slightly infeasible start
    for (int k = 0; k < w; ++k)
      rhs(n + k) = qp.bounds(working[k]) - qp.constraints.row(working[k]).dot(u);

    const Vector step = kkt.fullPivLu().solve(rhs);
    const Vector p = step.head(n);
    const Vector lambda = step.tail(w);

    if (p.lpNorm<Eigen::Infinity>() <= 1e-10 * std::max(1.0, u.lpNorm<Eigen::Infinity>())) {
      // stationary on the working set: check multiplier signs
      int drop = -1;
      double most_negative = -1e-9;
      for (int k = 0; k < w; ++k) {
        if (lambda(k) < most_negative) {
          most_negative = lambda(k);
          drop = k;
        }
      }
      if (drop < 0) {
        sol.u = u;
        sol.multipliers = Vector::Zero(m);
        for (int k = 0; k < w; ++k) sol.multipliers(working[k]) = std::max(0.0, lambda(k));
        sol.active = working;
        return sol;
      }
      working.erase(working.begin() + drop);
      continue;
    }

    // step length to the nearest blocking constraint
    double alpha = 1.0;
    int blocker = -1;
    for (int i = 0; i < m; ++i) {
      if (std::find(working.begin(), working.end(), i) != working.end()) continue;
      const double dir = qp.constraints.row(i).dot(p);
      if (dir <= 1e-13) continue;
      const double room = qp.bounds(i) - qp.constraints.row(i).dot(u);
      const double a = std::max(0.0, room) / dir;
      if (a < alpha) {
        alpha = a;
        blocker = i;
      }
    }
    u += alpha * p;
    if (blocker >= 0) working.push_back(blocker);
  }
  throw QpIterationCap();
}

}  // namespace detail

/// Primal active-set solver. Starts from the warm start when feasible, then
/// the origin, then a phase-1 subproblem; reports infeasibility with the most
/// violated row. H is regularized by +1e-9 I when not numerically positive
/// definite.
inline QpSolution solve_qp_active_set(const QpProblem& qp,
                                      std::optional<Vector> warm_start = std::nullopt) {
  qp.validate();
  const int n = qp.vars();

  Matrix h_reg = 0.5 * (qp.hessian + qp.hessian.transpose());
  {
    Eigen::SelfAdjointEigenSolver<Matrix> es(h_reg);
    if (es.eigenvalues().minCoeff() < 1e-12) h_reg += 1e-9 * Matrix::Identity(n, n);
  }

  const double feas_tol = 1e-9;
  Vector start;
  if (warm_start && warm_start->size() == n &&
      detail::max_violation(qp, *warm_start) <= feas_tol) {
    start = *warm_start;
  } else if (detail::max_violation(qp, Vector::Zero(n)) <= feas_tol) {
    start = Vector::Zero(n);
  } else {
    // phase 1: min t (plus a small regularization that keeps the KKT systems
    // well conditioned) with G u - t <= h, t >= 0
    const int m = qp.rows();
    QpProblem aux;
    aux.hessian = 1e-4 * Matrix::Identity(n + 1, n + 1);
    aux.gradient = Vector::Zero(n + 1);
    aux.gradient(n) = 1.0;
    aux.constraints = Matrix::Zero(m + 1, n + 1);
    aux.constraints.topLeftCorner(m, n) = qp.constraints;
    aux.constraints.col(n).head(m).setConstant(-1.0);
    aux.constraints(m, n) = -1.0;
    aux.bounds.resize(m + 1);
    aux.bounds.head(m) = qp.bounds;
    aux.bounds(m) = 0.0;

    Vector aux_start = Vector::Zero(n + 1);
    aux_start(n) = std::max(0.0, (-qp.bounds).maxCoeff());
    const QpSolution aux_sol = detail::active_set_iterate(aux.hessian, aux, aux_start);
    if (aux_sol.u(n) > 1e-8) {
      int row = 0;
      const double v = detail::max_violation(qp, aux_sol.u.head(n), &row);
      throw QpInfeasible(row, v);
    }
    start = aux_sol.u.head(n);
  }

  return detail::active_set_iterate(h_reg, qp, std::move(start));
}

}  // namespace ewip::mpc
