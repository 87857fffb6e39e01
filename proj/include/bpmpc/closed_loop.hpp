#pragma once

#include <Eigen/Dense>

#include <memory>
#include <utility>
#include <vector>

#include "bpmpc/dynamics.hpp"
#include "bpmpc/mpc.hpp"
#include "bpmpc/types.hpp"

namespace bpmpc {

enum class PredictionMode { Fixed, Relinearize };

/// Everything needed to roll the plant out under the MPC policy: the true
/// plant, the MPC problem, the horizon, the initial state, and how the
/// prediction model is produced at each step.
struct ClosedLoopProblem {
  std::shared_ptr<const DynamicsModel> plant;
  MpcDefinition def;
  Index T = 0;
  Vector x0;
  PredictionMode prediction = PredictionMode::Relinearize;
  LinearizationMode linearization = LinearizationMode::Shifted;
  LinearModel fixed_model;  // used when prediction == Fixed
  Vector y_init;            // y_{-1}; empty selects the hold heuristic
  bool tune_y_init = false;  // append y_{-1} to the tunable parameter vector
  MpcSolveOptions solver;

  Index n_y() const { return MpcLayout(def).n_y(); }
  Index n_p_cost() const { return def.n_param(); }
  Index n_p() const { return n_p_cost() + (tune_y_init ? n_y() : 0); }

  void validate() const {
    def.validate();
    require(plant != nullptr, "missing plant model");
    require(plant->n_x() == def.n_x && plant->n_u() == def.n_u, "plant/MPC dimension mismatch");
    require(x0.size() == def.n_x, "initial state size mismatch");
    require(T >= 0, "negative horizon");
    if (prediction == PredictionMode::Fixed) {
      require(fixed_model.horizon() == def.N, "fixed prediction model horizon mismatch");
    }
    if (y_init.size() > 0) require(y_init.size() == n_y(), "y_init size mismatch");
  }

  /// Previous-solution seed for t = 0: hold the initial state, zero inputs.
  Vector initial_primal(const Vector& p_full) const {
    if (tune_y_init) return p_full.tail(n_y());
    if (y_init.size() > 0) return y_init;
    const MpcLayout L(def);
    Vector y = Vector::Zero(L.n_y());
    for (Index k = 0; k <= def.N; ++k) y.segment(L.x_off(k), def.n_x) = x0;
    return y;
  }

  Vector cost_parameters(const Vector& p_full) const {
    require(p_full.size() == n_p(), "parameter vector size mismatch");
    return p_full.head(n_p_cost());
  }
};

struct StepStats {
  Index qp_iterations = 0;
  SolveStatus status = SolveStatus::Solved;
  double kkt_max = 0.0;
  double cond_U = 0.0;
  bool ill_conditioned = false;
};

struct Trajectory {
  Matrix states;  // (T+2) x n_x, rows are xbar_0 .. xbar_{T+1}
  Matrix inputs;  // (T+1) x n_u
  std::vector<Vector> slacks;  // per step, empty vectors in hard mode
  std::vector<StepStats> stats;

  Index horizon() const { return inputs.rows() - 1; }
  double max_slack(Index t) const {
    const Vector& e = slacks[static_cast<size_t>(t)];
    return e.size() == 0 ? 0.0 : e.maxCoeff();
  }
};

/// Accumulated closed-loop conservative Jacobians with respect to the
/// tunable parameter vector: states, full MPC primals, applied inputs,
/// slack blocks, and duals, one entry per time step.
struct JacobianStack {
  std::vector<Matrix> Jx;    // t = 0..T+1, n_x x n_p; Jx[0] = 0
  std::vector<Matrix> Jy;    // t = 0..T, n_y x n_p
  std::vector<Matrix> Ju0;   // t = 0..T, n_u x n_p
  std::vector<Matrix> Jeps;  // t = 0..T, n_eps x n_p
  std::vector<Matrix> Jz;    // t = 0..T, n_z x n_p
};

namespace detail {

struct RolloutWork {
  LinearModel model;
  LinearModelSensitivity sens;
  bool has_sens = false;
};

inline void prediction_model(const ClosedLoopProblem& prob, const Vector& x, const Vector& y_prev,
                             bool with_jacobians, RolloutWork& work) {
  if (prob.prediction == PredictionMode::Fixed) {
    work.model = prob.fixed_model;
    work.has_sens = false;
    return;
  }
  work.model = linearize_along(*prob.plant, y_prev, x, prob.def.N, prob.linearization);
  if (with_jacobians) {
    work.sens = linearization_sensitivity(*prob.plant, y_prev, x, prob.def.N, prob.linearization);
    work.has_sens = true;
  } else {
    work.has_sens = false;
  }
}

}  // namespace detail

/// Simulates T+1 MPC steps, propagating the true plant. Optional per-step
/// additive state noise enters the simulation only; Jacobian rollouts are
/// always noise free.
inline Trajectory rollout(const ClosedLoopProblem& prob, const Vector& p_full,
                          const Matrix* noise = nullptr) {
  prob.validate();
  const Vector p = prob.cost_parameters(p_full);
  if (noise != nullptr) {
    require(noise->rows() == prob.T + 1 && noise->cols() == prob.def.n_x, "noise shape mismatch");
  }
  Trajectory traj;
  traj.states.resize(prob.T + 2, prob.def.n_x);
  traj.inputs.resize(prob.T + 1, prob.def.n_u);
  traj.slacks.resize(static_cast<size_t>(prob.T + 1));
  traj.stats.resize(static_cast<size_t>(prob.T + 1));

  Vector x = prob.x0;
  Vector y_prev = prob.initial_primal(p_full);
  Vector warm;
  detail::RolloutWork work;
  traj.states.row(0) = x;
  for (Index t = 0; t <= prob.T; ++t) {
    detail::prediction_model(prob, x, y_prev, false, work);
    MpcStep step;
    try {
      step = solve_mpc(prob.def, x, work.model, y_prev, p, false, nullptr, prob.solver,
                       warm.size() > 0 ? &warm : nullptr);
    } catch (const InfeasibleError&) {
      throw InfeasibleError("MPC infeasible at step " + std::to_string(t), t);
    }
    traj.inputs.row(t) = step.u0;
    traj.slacks[static_cast<size_t>(t)] = step.eps;
    traj.stats[static_cast<size_t>(t)] = {step.qp_out.iterations, step.qp_out.status,
                                          step.qp_out.kkt.max(), 0.0, false};
    Vector x_next = prob.plant->step(x, step.u0);
    if (noise != nullptr) x_next += noise->row(t).transpose();
    traj.states.row(t + 1) = x_next;
    y_prev = step.y;
    warm = step.z;
    x = x_next;
  }
  return traj;
}

/// Rollout plus forward accumulation of the closed-loop conservative
/// Jacobians. Per step, with pbar = (xbar_t, y_{t-1}, p):
///   Jy_t  = Jy_xbar Jx_t + Jy_yprev Jy_{t-1} + Jy_p
///   Jx_{t+1} = f_x Jx_t + f_u Ju0_t
/// where Ju0_t are the input rows of Jy_t. With a fixed prediction model the
/// y_prev blocks vanish and the recursion reduces to the memoryless form.
/// J_{y_{-1}} is zero unless y_{-1} is itself part of the parameter vector,
/// in which case it is the corresponding selector block.
inline std::pair<Trajectory, JacobianStack> rollout_with_jacobians(const ClosedLoopProblem& prob,
                                                                   const Vector& p_full) {
  prob.validate();
  const Vector p = prob.cost_parameters(p_full);
  const MpcLayout L(prob.def);
  const Index np_full = prob.n_p();
  const Index np_cost = prob.n_p_cost();
  const Index ny = L.n_y();

  Trajectory traj;
  traj.states.resize(prob.T + 2, prob.def.n_x);
  traj.inputs.resize(prob.T + 1, prob.def.n_u);
  traj.slacks.resize(static_cast<size_t>(prob.T + 1));
  traj.stats.resize(static_cast<size_t>(prob.T + 1));
  JacobianStack stack;
  stack.Jx.resize(static_cast<size_t>(prob.T + 2));
  stack.Jy.resize(static_cast<size_t>(prob.T + 1));
  stack.Ju0.resize(static_cast<size_t>(prob.T + 1));
  stack.Jeps.resize(static_cast<size_t>(prob.T + 1));
  stack.Jz.resize(static_cast<size_t>(prob.T + 1));

  Vector x = prob.x0;
  Vector y_prev = prob.initial_primal(p_full);
  Matrix Jy_prev = Matrix::Zero(ny, np_full);
  if (prob.tune_y_init) {
    Jy_prev.rightCols(ny) = Matrix::Identity(ny, ny);
  }
  stack.Jx[0] = Matrix::Zero(prob.def.n_x, np_full);
  traj.states.row(0) = x;

  Vector warm;
  detail::RolloutWork work;
  for (Index t = 0; t <= prob.T; ++t) {
    detail::prediction_model(prob, x, y_prev, true, work);
    MpcStep step;
    try {
      step = solve_mpc(prob.def, x, work.model, y_prev, p, true,
                       work.has_sens ? &work.sens : nullptr, prob.solver,
                       warm.size() > 0 ? &warm : nullptr);
    } catch (const InfeasibleError&) {
      throw InfeasibleError("MPC infeasible at step " + std::to_string(t), t);
    }

    const Matrix& Jx_t = stack.Jx[static_cast<size_t>(t)];
    Matrix Jy_t = step.Jy_xbar * Jx_t + step.Jy_yprev * Jy_prev;
    Jy_t.leftCols(np_cost) += step.Jy_p;
    const Matrix Ju0_t = Jy_t.middleRows(L.u_off(0), L.nu);

    const auto [fx, fu] = prob.plant->jacobians(x, step.u0);
    stack.Jx[static_cast<size_t>(t + 1)] = fx * Jx_t + fu * Ju0_t;
    stack.Jeps[static_cast<size_t>(t)] =
        L.n_eps() > 0 ? Matrix(Jy_t.bottomRows(L.n_eps())) : Matrix::Zero(0, np_full);
    stack.Jz[static_cast<size_t>(t)] = Matrix::Zero(step.z.size(), np_full);  // filled below
    {
      // dual chain, same recursion as the primal
      Matrix Jz_t = step.Jz_xbar * Jx_t + step.Jz_yprev * Jy_prev;
      Jz_t.leftCols(np_cost) += step.Jz_p;
      stack.Jz[static_cast<size_t>(t)] = std::move(Jz_t);
    }
    stack.Ju0[static_cast<size_t>(t)] = Ju0_t;
    stack.Jy[static_cast<size_t>(t)] = Jy_t;

    traj.inputs.row(t) = step.u0;
    traj.slacks[static_cast<size_t>(t)] = step.eps;
    traj.stats[static_cast<size_t>(t)] = {step.qp_out.iterations, step.qp_out.status,
                                          step.qp_out.kkt.max(), step.cond_U,
                                          step.ill_conditioned};

    const Vector x_next = prob.plant->step(x, step.u0);
    traj.states.row(t + 1) = x_next;
    y_prev = step.y;
    Jy_prev = std::move(Jy_t);
    warm = step.z;
    x = x_next;
  }
  return {std::move(traj), std::move(stack)};
}

struct CostValue {
  double value = 0.0;
  Matrix grad_states;  // (T+2) x n_x, row t = dC/dxbar_t
  Matrix grad_inputs;  // (T+1) x n_u
};

/// Quadratic closed-loop objective
///   C = sum_{t=0..T} xbar_t' Qx xbar_t + w_u ||ubar_t||^2
/// with its gradient blocks. The trailing state xbar_{T+1} does not enter.
inline CostValue closed_loop_cost(const Trajectory& traj, const Matrix& Qx, double input_weight) {
  const Index T = traj.horizon();
  require(Qx.rows() == traj.states.cols(), "Qx dimension mismatch");
  CostValue out;
  out.grad_states = Matrix::Zero(traj.states.rows(), traj.states.cols());
  out.grad_inputs = Matrix::Zero(traj.inputs.rows(), traj.inputs.cols());
  for (Index t = 0; t <= T; ++t) {
    const Vector xt = traj.states.row(t);
    const Vector ut = traj.inputs.row(t);
    out.value += xt.dot(Qx * xt) + input_weight * ut.squaredNorm();
    out.grad_states.row(t) = 2.0 * (Qx * xt);
    out.grad_inputs.row(t) = 2.0 * input_weight * ut;
  }
  return out;
}

/// Cost partials supplied to total_gradient. Empty blocks are treated as
/// zero. Input partials contract against the applied-input rows of the
/// primal Jacobians; slack and dual partials against their own stacks.
struct CostJacobians {
  Matrix wrt_states;               // (T+2) x n_x
  Matrix wrt_inputs;               // (T+1) x n_u
  std::vector<Vector> wrt_eps;     // per step
  std::vector<Vector> wrt_z;       // per step
  Vector wrt_p;                    // direct parameter term
};

/// Chain-rule contraction of the cost partials with the accumulated
/// closed-loop Jacobians.
inline Vector total_gradient(const CostJacobians& cj, const JacobianStack& stack) {
  require(!stack.Jx.empty(), "empty jacobian stack");
  const Index np = stack.Jx[0].cols();
  Vector g = Vector::Zero(np);
  if (cj.wrt_states.size() > 0) {
    require(cj.wrt_states.rows() <= static_cast<Index>(stack.Jx.size()),
            "state partials exceed stack");
    for (Index t = 0; t < cj.wrt_states.rows(); ++t) {
      g += stack.Jx[static_cast<size_t>(t)].transpose() * cj.wrt_states.row(t).transpose();
    }
  }
  if (cj.wrt_inputs.size() > 0) {
    require(cj.wrt_inputs.rows() <= static_cast<Index>(stack.Ju0.size()),
            "input partials exceed stack");
    for (Index t = 0; t < cj.wrt_inputs.rows(); ++t) {
      g += stack.Ju0[static_cast<size_t>(t)].transpose() * cj.wrt_inputs.row(t).transpose();
    }
  }
  if (!cj.wrt_eps.empty()) {
    require(cj.wrt_eps.size() <= stack.Jeps.size(), "slack partials exceed stack");
    for (size_t t = 0; t < cj.wrt_eps.size(); ++t) {
      if (cj.wrt_eps[t].size() == 0) continue;
      require(cj.wrt_eps[t].size() == stack.Jeps[t].rows(), "slack partial size mismatch");
      g += stack.Jeps[t].transpose() * cj.wrt_eps[t];
    }
  }
  if (!cj.wrt_z.empty()) {
    require(cj.wrt_z.size() <= stack.Jz.size(), "dual partials exceed stack");
    for (size_t t = 0; t < cj.wrt_z.size(); ++t) {
      if (cj.wrt_z[t].size() == 0) continue;
      require(cj.wrt_z[t].size() == stack.Jz[t].rows(), "dual partial size mismatch");
      g += stack.Jz[t].transpose() * cj.wrt_z[t];
    }
  }
  if (cj.wrt_p.size() > 0) {
    require(cj.wrt_p.size() == np, "direct parameter term size mismatch");
    g += cj.wrt_p;
  }
  return g;
}

/// Max and summed closed-loop violation of the stage state bounds.
struct ViolationReport {
  double max_violation = 0.0;
  double sum_violation = 0.0;
};

inline ViolationReport state_violation(const Trajectory& traj, const Matrix& Hx,
                                       const Vector& hx) {
  ViolationReport rep;
  if (Hx.rows() == 0) return rep;
  for (Index t = 0; t < traj.states.rows(); ++t) {
    const Vector v = (Hx * traj.states.row(t).transpose() - hx).cwiseMax(0.0);
    rep.max_violation = std::max(rep.max_violation, v.maxCoeff());
    rep.sum_violation += v.sum();
  }
  return rep;
}

}  // namespace bpmpc
