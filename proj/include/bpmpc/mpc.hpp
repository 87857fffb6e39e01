#pragma once

#include <Eigen/Cholesky>
#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "bpmpc/dynamics.hpp"
#include "bpmpc/qp.hpp"
#include "bpmpc/sensitivity.hpp"
#include "bpmpc/types.hpp"

namespace bpmpc {

/// Tunable cost terms of the MPC problem: terminal weight P(p) and input
/// weight Ru(p), with one Jacobian slice per parameter. Implementations must
/// keep P SPD and Ru PD on the whole parameter domain.
struct CostTerms {
  Matrix P;
  Matrix Ru;
  std::vector<Matrix> dP;
  std::vector<Matrix> dRu;
};

class CostParameterization {
 public:
  virtual ~CostParameterization() = default;
  virtual Index n_param() const = 0;
  virtual CostTerms eval(const Vector& p) const = 0;
};

/// Fixed (non-tunable) cost terms; the zero-parameter case.
class FixedCostParameterization final : public CostParameterization {
 public:
  FixedCostParameterization(Matrix P, Matrix Ru) : P_(std::move(P)), Ru_(std::move(Ru)) {}
  Index n_param() const override { return 0; }
  CostTerms eval(const Vector& p) const override {
    require(p.size() == 0, "fixed parameterization takes no parameters");
    return {P_, Ru_, {}, {}};
  }

 private:
  Matrix P_;
  Matrix Ru_;
};

/// Cholesky-factor cost parameterization:
///   Ru(p) = (p_0^2 + ru_eps) I,   P(p) = Pt Pt' + p_eps I,
/// with Pt lower triangular filled row by row from p_1 onward. P and Ru stay
/// positive definite for every p. Slices follow the product rule,
/// dP_j = E_j Pt' + Pt E_j', dRu_0 = 2 p_0 I.
class CholeskyCostParameterization final : public CostParameterization {
 public:
  CholeskyCostParameterization(Index n_x, Index n_u, double ru_eps = 1e-6, double p_eps = 1e-8)
      : nx_(n_x), nu_(n_u), ru_eps_(ru_eps), p_eps_(p_eps) {}

  Index n_param() const override { return 1 + nx_ * (nx_ + 1) / 2; }

  CostTerms eval(const Vector& p) const override {
    require(p.size() == n_param(), "parameter vector length mismatch");
    CostTerms t;
    t.Ru = (p[0] * p[0] + ru_eps_) * Matrix::Identity(nu_, nu_);
    Matrix Pt = Matrix::Zero(nx_, nx_);
    Index idx = 1;
    for (Index i = 0; i < nx_; ++i) {
      for (Index j = 0; j <= i; ++j) Pt(i, j) = p[idx++];
    }
    t.P = Pt * Pt.transpose() + p_eps_ * Matrix::Identity(nx_, nx_);

    t.dP.resize(static_cast<size_t>(n_param()));
    t.dRu.resize(static_cast<size_t>(n_param()));
    t.dRu[0] = 2.0 * p[0] * Matrix::Identity(nu_, nu_);
    t.dP[0] = Matrix();
    idx = 1;
    for (Index i = 0; i < nx_; ++i) {
      for (Index j = 0; j <= i; ++j) {
        Matrix E = Matrix::Zero(nx_, nx_);
        E(i, j) = 1.0;
        t.dP[static_cast<size_t>(idx)] = E * Pt.transpose() + Pt * E.transpose();
        t.dRu[static_cast<size_t>(idx)] = Matrix();
        ++idx;
      }
    }
    return t;
  }

  /// Parameter vector with p_0 = 0 and the triangular block set to the
  /// Cholesky factor of the given terminal weight.
  Vector initial_parameters_from_terminal(const Matrix& P) const {
    require(P.rows() == nx_ && P.cols() == nx_, "terminal weight shape mismatch");
    Eigen::LLT<Matrix> llt(P);
    if (llt.info() != Eigen::Success) {
      throw NotPositiveDefiniteError("terminal weight is not positive definite");
    }
    const Matrix L = llt.matrixL();
    Vector p = Vector::Zero(n_param());
    Index idx = 1;
    for (Index i = 0; i < nx_; ++i) {
      for (Index j = 0; j <= i; ++j) p[idx++] = L(i, j);
    }
    return p;
  }

 private:
  Index nx_;
  Index nu_;
  double ru_eps_;
  double p_eps_;
};

/// Fixed point of the Riccati recursion
///   P <- Q + A'PA - A'PB (R + B'PB)^{-1} B'PA
/// iterated from P = Q until the update stalls below tol.
inline Matrix dare_terminal_cost(const Matrix& A, const Matrix& B, const Matrix& Qx,
                                 const Matrix& Ru, double tol = 1e-12,
                                 Index max_iter = 500000) {
  require(A.rows() == A.cols() && B.rows() == A.rows(), "A/B dimension mismatch");
  require(Qx.rows() == A.rows() && Ru.rows() == B.cols(), "cost dimension mismatch");
  Matrix P = Qx;
  for (Index it = 0; it < max_iter; ++it) {
    const Matrix BtPB = Ru + B.transpose() * P * B;
    const Matrix K = BtPB.ldlt().solve(B.transpose() * P * A);
    Matrix Pn = Qx + A.transpose() * P * (A - B * K);
    Pn = 0.5 * (Pn + Pn.transpose()).eval();
    if (inf_norm(Matrix(Pn - P)) <= tol) return Pn;
    P = Pn;
  }
  throw NoConvergenceError("Riccati iteration did not converge");
}

/// MPC problem data. State/input/terminal constraints are polytopes; empty
/// matrices mean unconstrained. In soft mode the state and terminal rows get
/// per-stage slack vectors with penalty c1 ||eps||^2 + c2 ||eps||_1.
struct MpcDefinition {
  Index N = 0;
  Index n_x = 0;
  Index n_u = 0;
  Matrix Qx;
  Matrix Hx;
  Vector hx;
  Matrix Hu;
  Vector hu;
  Matrix HxN;
  Vector hxN;
  std::shared_ptr<const CostParameterization> parameterization;
  bool soft = false;
  double c1 = 0.0;
  double c2 = 0.0;

  Index n_param() const { return parameterization ? parameterization->n_param() : 0; }

  void validate() const {
    require(N >= 1 && n_x >= 1 && n_u >= 1, "horizon and dimensions must be positive");
    require(Qx.rows() == n_x && Qx.cols() == n_x, "Qx shape mismatch");
    require(Hx.rows() == hx.size() && (Hx.size() == 0 || Hx.cols() == n_x), "state bounds shape");
    require(Hu.rows() == hu.size() && (Hu.size() == 0 || Hu.cols() == n_u), "input bounds shape");
    require(HxN.rows() == hxN.size() && (HxN.size() == 0 || HxN.cols() == n_x),
            "terminal bounds shape");
    if (soft && c1 <= 0.0) {
      throw ConfigError("soft mode needs a positive quadratic slack weight c1");
    }
    if (!parameterization) throw ConfigError("missing cost parameterization");
  }
};

/// Index bookkeeping for the decision vector y = (x_0..x_N, u_0..u_{N-1}
/// [, eps_0..eps_{N-1}, eps_N]) and for the stacked parameter
/// pbar = (x_bar, y_prev, p). Row order of the inequality block:
/// stage state rows, terminal rows, input rows, slack nonnegativity rows.
struct MpcLayout {
  Index N, nx, nu, n_hx, n_hu, n_hxN;
  bool soft;
  Index np;  // tunable parameter count

  explicit MpcLayout(const MpcDefinition& def)
      : N(def.N),
        nx(def.n_x),
        nu(def.n_u),
        n_hx(def.Hx.rows()),
        n_hu(def.Hu.rows()),
        n_hxN(def.HxN.rows()),
        soft(def.soft),
        np(def.n_param()) {}

  Index n_eps() const { return soft ? N * n_hx + n_hxN : 0; }
  Index n_y() const { return (N + 1) * nx + N * nu + n_eps(); }
  Index n_eq() const { return (N + 1) * nx; }
  Index n_in() const { return N * (n_hx + n_hu) + n_hxN + n_eps(); }

  Index x_off(Index k) const { return k * nx; }
  Index u_off(Index k) const { return (N + 1) * nx + k * nu; }
  Index eps_off(Index k) const { return (N + 1) * nx + N * nu + k * n_hx; }  // k == N: terminal
  Index eps_len(Index k) const { return k < N ? n_hx : n_hxN; }

  Index eq_row(Index k) const { return (k + 1) * nx; }  // dynamics block k; rows 0..nx-1 pin x_0
  Index row_state(Index k) const { return k * n_hx; }
  Index row_terminal() const { return N * n_hx; }
  Index row_input(Index k) const { return N * n_hx + n_hxN + k * n_hu; }
  Index row_nonneg(Index k) const { return N * (n_hx + n_hu) + n_hxN + k * n_hx; }

  // pbar column blocks
  Index col_xbar() const { return 0; }
  Index col_yprev() const { return nx; }
  Index col_p() const { return nx + n_y(); }
  Index n_pbar() const { return nx + n_y() + np; }
};

/// Assembles the MPC optimal control problem into a standard-form QP plus
/// the Jacobians of all QP data with respect to pbar = (x_bar, y_prev, p).
/// x_bar enters phi through the initial-condition rows; y_prev enters F and
/// phi when the prediction model was linearized along it (lin_sens supplied);
/// p enters Q through the cost parameterization.
inline std::pair<QpInstance, ParamJacobians> build_qp(const MpcDefinition& def,
                                                      const Vector& x_bar,
                                                      const LinearModel& model,
                                                      const Vector& y_prev, const Vector& p,
                                                      const LinearModelSensitivity* lin_sens =
                                                          nullptr) {
  def.validate();
  const MpcLayout L(def);
  require(x_bar.size() == L.nx, "x_bar size mismatch");
  require(model.horizon() == L.N, "prediction model horizon mismatch");
  require(p.size() == L.np, "parameter size mismatch");

  const CostTerms cost = def.parameterization->eval(p);
  {
    Eigen::LLT<Matrix> pchk(cost.P);
    Eigen::LLT<Matrix> rchk(cost.Ru);
    if (pchk.info() != Eigen::Success || rchk.info() != Eigen::Success) {
      throw BadParameterizationError("cost parameterization produced a non-SPD weight");
    }
  }

  const Index ny = L.n_y();
  const Index neq = L.n_eq();
  const Index nin = L.n_in();

  Matrix Q = Matrix::Zero(ny, ny);
  Vector q = Vector::Zero(ny);
  for (Index k = 0; k < L.N; ++k) {
    Q.block(L.x_off(k), L.x_off(k), L.nx, L.nx) = 2.0 * def.Qx;
    Q.block(L.u_off(k), L.u_off(k), L.nu, L.nu) = 2.0 * cost.Ru;
  }
  Q.block(L.x_off(L.N), L.x_off(L.N), L.nx, L.nx) = 2.0 * cost.P;
  if (L.soft) {
    for (Index k = 0; k <= L.N; ++k) {
      const Index len = L.eps_len(k);
      if (len == 0) continue;
      Q.block(L.eps_off(k), L.eps_off(k), len, len) =
          2.0 * def.c1 * Matrix::Identity(len, len);
      q.segment(L.eps_off(k), len).setConstant(def.c2);
    }
  }

  Matrix F = Matrix::Zero(neq, ny);
  Vector phi = Vector::Zero(neq);
  F.block(0, L.x_off(0), L.nx, L.nx) = Matrix::Identity(L.nx, L.nx);
  phi.head(L.nx) = x_bar;
  for (Index k = 0; k < L.N; ++k) {
    const Index r = L.eq_row(k);
    F.block(r, L.x_off(k + 1), L.nx, L.nx) = Matrix::Identity(L.nx, L.nx);
    F.block(r, L.x_off(k), L.nx, L.nx) = -model.A[static_cast<size_t>(k)];
    F.block(r, L.u_off(k), L.nx, L.nu) = -model.B[static_cast<size_t>(k)];
    phi.segment(r, L.nx) = model.c[static_cast<size_t>(k)];
  }

  Matrix G = Matrix::Zero(nin, ny);
  Vector g = Vector::Zero(nin);
  for (Index k = 0; k < L.N; ++k) {
    if (L.n_hx > 0) {
      G.block(L.row_state(k), L.x_off(k), L.n_hx, L.nx) = def.Hx;
      g.segment(L.row_state(k), L.n_hx) = def.hx;
      if (L.soft) {
        G.block(L.row_state(k), L.eps_off(k), L.n_hx, L.n_hx) =
            -Matrix::Identity(L.n_hx, L.n_hx);
      }
    }
    if (L.n_hu > 0) {
      G.block(L.row_input(k), L.u_off(k), L.n_hu, L.nu) = def.Hu;
      g.segment(L.row_input(k), L.n_hu) = def.hu;
    }
  }
  if (L.n_hxN > 0) {
    G.block(L.row_terminal(), L.x_off(L.N), L.n_hxN, L.nx) = def.HxN;
    g.segment(L.row_terminal(), L.n_hxN) = def.hxN;
    if (L.soft) {
      G.block(L.row_terminal(), L.eps_off(L.N), L.n_hxN, L.n_hxN) =
          -Matrix::Identity(L.n_hxN, L.n_hxN);
    }
  }
  if (L.soft) {
    for (Index k = 0; k <= L.N; ++k) {
      const Index len = L.eps_len(k);
      if (len == 0) continue;
      G.block(L.row_nonneg(k), L.eps_off(k), len, len) = -Matrix::Identity(len, len);
    }
  }

  // --- parameter Jacobians, columns ordered (x_bar, y_prev, p) ---
  ParamJacobians pj = ParamJacobians::zeros(ny, neq, nin, L.n_pbar());

  // x_bar: initial-condition rows of phi
  for (Index m = 0; m < L.nx; ++m) pj.dphi(m, L.col_xbar() + m) = 1.0;

  // p: cost curvature slices
  for (Index j = 0; j < L.np; ++j) {
    const Matrix& dP = cost.dP[static_cast<size_t>(j)];
    const Matrix& dRu = cost.dRu[static_cast<size_t>(j)];
    if (dP.size() == 0 && dRu.size() == 0) continue;
    Matrix dQ = Matrix::Zero(ny, ny);
    if (dRu.size() > 0) {
      for (Index k = 0; k < L.N; ++k) {
        dQ.block(L.u_off(k), L.u_off(k), L.nu, L.nu) = 2.0 * dRu;
      }
    }
    if (dP.size() > 0) dQ.block(L.x_off(L.N), L.x_off(L.N), L.nx, L.nx) = 2.0 * dP;
    pj.dQ[static_cast<size_t>(L.col_p() + j)] = std::move(dQ);
  }

  // y_prev (and, in current-state-first mode, x_bar) through the
  // linearization point of each prediction stage
  if (lin_sens != nullptr) {
    require(static_cast<Index>(lin_sens->stage.size()) == L.N,
            "linearization sensitivity horizon mismatch");
    require(y_prev.size() == ny, "y_prev size mismatch");
    std::vector<Vector> xs, us;
    decode_primal(y_prev, L.N, L.nx, L.nu, xs, us);
    for (Index k = 0; k < L.N; ++k) {
      const auto [xp, up] = linearization_point(xs, us, x_bar, k, lin_sens->mode);
      const auto& st = lin_sens->stage[static_cast<size_t>(k)];
      const Index r = L.eq_row(k);
      const bool x_from_xbar = (lin_sens->mode == LinearizationMode::CurrentStateFirst && k == 0);
      for (Index m = 0; m < L.nx + L.nu; ++m) {
        const Matrix& dA = st.dA[static_cast<size_t>(m)];
        const Matrix& dB = st.dB[static_cast<size_t>(m)];
        if (inf_norm(dA) == 0.0 && inf_norm(dB) == 0.0) continue;
        Index col;
        if (m < L.nx) {
          col = x_from_xbar ? L.col_xbar() + m
                            : L.col_yprev() + L.x_off(k + 1) + m;
        } else {
          const Index ku = std::min<Index>(k + 1, L.N - 1);
          col = L.col_yprev() + L.u_off(ku) + (m - L.nx);
        }
        Matrix& dF = pj.dF[static_cast<size_t>(col)];
        if (dF.size() == 0) dF = Matrix::Zero(neq, ny);
        dF.block(r, L.x_off(k), L.nx, L.nx) -= dA;
        dF.block(r, L.u_off(k), L.nx, L.nu) -= dB;
        pj.dphi.block(r, col, L.nx, 1) += -dA * xp - dB * up;
      }
    }
  }

  return {QpInstance(std::move(Q), std::move(q), std::move(F), std::move(phi), std::move(G),
                     std::move(g)),
          std::move(pj)};
}

/// One MPC evaluation: applied input, full primal/dual, slacks, solver
/// stats, and (optionally) the Jacobian blocks of u0, y, eps with respect
/// to x_bar, y_prev, and p.
struct MpcStep {
  Vector u0;
  Vector y;
  Vector z;
  Vector eps;
  SolveOutput qp_out;
  Matrix Ju0_xbar, Ju0_yprev, Ju0_p;
  Matrix Jy_xbar, Jy_yprev, Jy_p;
  Matrix Jeps_xbar, Jeps_yprev, Jeps_p;
  Matrix Jz_xbar, Jz_yprev, Jz_p;
  double cond_U = 0.0;
  bool ill_conditioned = false;
};

struct MpcSolveOptions {
  DualSolveOptions dual;
  SensitivityOptions sensitivity;
  // A MaxIter solve within this factor of the target residual is accepted
  // and recorded; anything worse aborts the pipeline.
  double accept_factor = 100.0;
};

inline MpcStep solve_mpc(const MpcDefinition& def, const Vector& x_bar, const LinearModel& model,
                         const Vector& y_prev, const Vector& p, bool with_jacobians,
                         const LinearModelSensitivity* lin_sens = nullptr,
                         const MpcSolveOptions& opts = {}, const Vector* warm_start = nullptr) {
  const MpcLayout L(def);
  auto [qp, pjac] = build_qp(def, x_bar, model, y_prev, p, lin_sens);
  const DualQp dual = assemble_dual(qp);
  const DualSolveResult ds = solve_dual(dual, opts.dual, warm_start);
  if (ds.status == SolveStatus::Infeasible) {
    throw InfeasibleError("MPC problem infeasible");
  }
  if (ds.status == SolveStatus::MaxIter) {
    // accept stalled solves that reached the representable accuracy of this
    // problem's scale; beyond that the result would poison the pipeline
    const double r = dual_fixed_point_residual(dual, ds.z);
    const double floor = 1e3 * std::numeric_limits<double>::epsilon() *
                         (inf_norm(dual.H) * (1.0 + inf_norm(ds.z)) + inf_norm(dual.h));
    if (r > std::max(opts.accept_factor * opts.dual.tol, floor)) {
      throw NoConvergenceError("dual solver stalled at residual " + std::to_string(r));
    }
  }

  MpcStep step;
  step.qp_out.status = ds.status;
  step.qp_out.iterations = ds.iterations;
  step.qp_out.lambda = ds.z.head(qp.n_in());
  step.qp_out.mu = ds.z.tail(qp.n_eq());
  step.qp_out.y = recover_primal(qp, ds.z);
  step.qp_out.kkt = kkt_residual(qp, step.qp_out.y, step.qp_out.lambda, step.qp_out.mu);
  step.y = step.qp_out.y;
  step.z = ds.z;
  step.u0 = step.y.segment(L.u_off(0), L.nu);
  step.eps = L.n_eps() > 0 ? Vector(step.y.tail(L.n_eps())) : Vector();

  if (with_jacobians) {
    const SensitivityResult sens =
        qp_sensitivity(qp, dual, step.qp_out, pjac, opts.sensitivity);
    step.cond_U = sens.cond_U;
    step.ill_conditioned = sens.ill_conditioned;
    const auto slice = [&](Index row0, Index rows) {
      return std::array<Matrix, 3>{
          sens.Jy.block(row0, L.col_xbar(), rows, L.nx),
          sens.Jy.block(row0, L.col_yprev(), rows, L.n_y()),
          sens.Jy.block(row0, L.col_p(), rows, L.np)};
    };
    auto ju0 = slice(L.u_off(0), L.nu);
    step.Ju0_xbar = std::move(ju0[0]);
    step.Ju0_yprev = std::move(ju0[1]);
    step.Ju0_p = std::move(ju0[2]);
    auto jy = slice(0, L.n_y());
    step.Jy_xbar = std::move(jy[0]);
    step.Jy_yprev = std::move(jy[1]);
    step.Jy_p = std::move(jy[2]);
    if (L.n_eps() > 0) {
      auto je = slice(L.eps_off(0), L.n_eps());
      step.Jeps_xbar = std::move(je[0]);
      step.Jeps_yprev = std::move(je[1]);
      step.Jeps_p = std::move(je[2]);
    } else {
      step.Jeps_xbar = Matrix::Zero(0, L.nx);
      step.Jeps_yprev = Matrix::Zero(0, L.n_y());
      step.Jeps_p = Matrix::Zero(0, L.np);
    }
    step.Jz_xbar = sens.Jz.middleCols(L.col_xbar(), L.nx);
    step.Jz_yprev = sens.Jz.middleCols(L.col_yprev(), L.n_y());
    step.Jz_p = sens.Jz.middleCols(L.col_p(), L.np);
  }
  return step;
}

}  // namespace bpmpc
