#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <utility>
#include <vector>

#include "bpmpc/qp.hpp"
#include "bpmpc/types.hpp"

namespace bpmpc {

/// Jacobians of all parameter-dependent QP data with respect to a stacked
/// parameter vector. Matrix-valued data (Q, F, G) is stored as one slice per
/// parameter; an empty slice marks a structurally zero derivative so the
/// pipeline can skip it. Vector-valued data (q, phi, g) is stored densely.
struct ParamJacobians {
  std::vector<Matrix> dQ;  // n_y x n_y each, symmetric
  std::vector<Matrix> dF;  // n_eq x n_y each
  std::vector<Matrix> dG;  // n_in x n_y each
  Matrix dq;               // n_y x n_p
  Matrix dphi;             // n_eq x n_p
  Matrix dg;               // n_in x n_p

  Index n_param() const { return dq.cols(); }

  static ParamJacobians zeros(Index ny, Index ne, Index ni, Index np) {
    ParamJacobians pj;
    pj.dQ.assign(static_cast<size_t>(np), Matrix());
    pj.dF.assign(static_cast<size_t>(np), Matrix());
    pj.dG.assign(static_cast<size_t>(np), Matrix());
    pj.dq = Matrix::Zero(ny, np);
    pj.dphi = Matrix::Zero(ne, np);
    pj.dg = Matrix::Zero(ni, np);
    return pj;
  }

  void validate(const QpInstance& qp) const {
    const Index np = n_param();
    require(static_cast<Index>(dQ.size()) == np && static_cast<Index>(dF.size()) == np &&
                static_cast<Index>(dG.size()) == np,
            "ParamJacobians slice count mismatch");
    require(dq.rows() == qp.n_y() && dphi.rows() == qp.n_eq() && dg.rows() == qp.n_in(),
            "ParamJacobians row mismatch");
    require(dphi.cols() == np && dg.cols() == np, "ParamJacobians trailing dimension mismatch");
  }
};

/// Partition of the inequality set at a dual solution, following the
/// multiplier/slack trichotomy: positive multiplier, positive slack, or
/// both at zero (weakly active).
struct ConstraintClasses {
  std::vector<Index> inactive;
  std::vector<Index> weakly_active;
  std::vector<Index> strongly_active;

  Index n_in() const {
    return static_cast<Index>(inactive.size() + weakly_active.size() + strongly_active.size());
  }
};

inline ConstraintClasses classify_constraints(const QpInstance& qp, const SolveOutput& out,
                                              double class_tol = 1e-7) {
  ConstraintClasses c;
  if (qp.n_in() == 0) return c;
  const Vector slack = qp.g() - qp.G() * out.y;
  for (Index i = 0; i < qp.n_in(); ++i) {
    if (out.lambda[i] > class_tol) {
      c.strongly_active.push_back(i);
    } else if (slack[i] > class_tol) {
      c.inactive.push_back(i);
    } else {
      c.weakly_active.push_back(i);
    }
  }
  return c;
}

/// Diagonal of the projector's generalized Jacobian: 1 on strongly active
/// rows, 0 on inactive rows, beta on weakly active rows (beta = 0 is the
/// sign(0) = 0 selection and the default), 1 on every equality entry.
inline Vector projector_jacobian(const ConstraintClasses& classes, Index n_eq,
                                 double beta = 0.0) {
  Vector d = Vector::Zero(classes.n_in() + n_eq);
  for (Index i : classes.strongly_active) d[i] = 1.0;
  for (Index i : classes.weakly_active) d[i] = beta;
  for (Index i = classes.n_in(); i < d.size(); ++i) d[i] = 1.0;
  return d;
}

/// Fixed-point-map Jacobians at a dual solution:
///   U = J_PC (I - gamma H) - I
///   V = -gamma J_PC (A z + B),  column j of Az+B given by dH_j z + dh_j.
/// dH slices may be empty to denote zero.
inline std::pair<Matrix, Matrix> fixed_point_jacobians(const DualQp& dual, const Vector& z,
                                                       const std::vector<Matrix>& dH,
                                                       const Matrix& dh, const Vector& J_PC_diag,
                                                       double gamma) {
  const Index nz = dual.n_z();
  require(z.size() == nz, "z size mismatch");
  require(J_PC_diag.size() == nz, "projector diagonal size mismatch");
  require(dh.rows() == nz, "dh row mismatch");
  require(static_cast<Index>(dH.size()) == dh.cols(), "dH slice count mismatch");
  Matrix U = J_PC_diag.asDiagonal() * (Matrix::Identity(nz, nz) - gamma * dual.H);
  U -= Matrix::Identity(nz, nz);
  Matrix V(nz, dh.cols());
  for (Index j = 0; j < dh.cols(); ++j) {
    Vector col = dh.col(j);
    if (dH[static_cast<size_t>(j)].size() > 0) col += dH[static_cast<size_t>(j)] * z;
    V.col(j) = -gamma * J_PC_diag.asDiagonal() * col;
  }
  return {std::move(U), std::move(V)};
}

namespace detail {

struct LuSolveResult {
  Matrix X;
  double cond = 0.0;
};

// -U^{-1} V through LU with partial pivoting. Rank deficiency (a vanishing
// pivot) signals a constraint-qualification violation.
inline LuSolveResult solve_neg_inv(const Matrix& U, const Matrix& V) {
  LuSolveResult r;
  if (U.rows() == 0) {
    r.X = Matrix(0, V.cols());
    r.cond = 1.0;
    return r;
  }
  Eigen::PartialPivLU<Matrix> lu(U);
  const Vector piv = lu.matrixLU().diagonal().cwiseAbs();
  const double pmax = piv.maxCoeff();
  if (pmax == 0.0 || piv.minCoeff() <= pmax * 1e-14) {
    throw SingularUError("fixed-point Jacobian U is rank deficient");
  }
  const double rc = lu.rcond();
  r.cond = rc > 0.0 ? 1.0 / rc : std::numeric_limits<double>::infinity();
  r.X = -lu.solve(V);
  return r;
}

}  // namespace detail

/// One element of the conservative Jacobian of the dual optimizer,
/// Jz = -U^{-1} V, plus a condition estimate of U.
inline Matrix dual_sensitivity(const Matrix& U, const Matrix& V, double* cond_out = nullptr) {
  require(U.rows() == U.cols(), "U must be square");
  require(V.rows() == U.rows(), "U/V row mismatch");
  auto r = detail::solve_neg_inv(U, V);
  if (cond_out != nullptr) *cond_out = r.cond;
  return r.X;
}

/// Primal sensitivity through the recovery map:
///   Jy = W - Q^{-1} [G' F'] Jz,   W_j = -Q^{-1}(dQ_j y + dF_j' mu + dG_j' lambda + dq_j)
inline Matrix primal_sensitivity(const QpInstance& qp, const Vector& z, const Matrix& Jz,
                                 const ParamJacobians& pjac) {
  pjac.validate(qp);
  const Index ny = qp.n_y();
  const Index ni = qp.n_in();
  const Index ne = qp.n_eq();
  const Index np = pjac.n_param();
  require(Jz.rows() == ni + ne && Jz.cols() == np, "Jz shape mismatch");
  const Vector lambda = z.head(ni);
  const Vector mu = z.tail(ne);
  const Vector y = recover_primal(qp, z);

  Matrix S = pjac.dq;
  for (Index j = 0; j < np; ++j) {
    const Matrix& dQj = pjac.dQ[static_cast<size_t>(j)];
    const Matrix& dFj = pjac.dF[static_cast<size_t>(j)];
    const Matrix& dGj = pjac.dG[static_cast<size_t>(j)];
    if (dQj.size() > 0) S.col(j) += dQj * y;
    if (dFj.size() > 0 && ne > 0) S.col(j) += dFj.transpose() * mu;
    if (dGj.size() > 0 && ni > 0) S.col(j) += dGj.transpose() * lambda;
  }
  if (ni > 0) S += qp.G().transpose() * Jz.topRows(ni);
  if (ne > 0) S += qp.F().transpose() * Jz.bottomRows(ne);
  return -qp.solve_Q(S);
}

/// Dual-data Jacobian slices synthesized from ParamJacobians by the product
/// rule on H = [G;F] Q^{-1} [G;F]' and h = [G;F] Q^{-1} q + (g, phi), with
/// d(Q^{-1}) = -Q^{-1} dQ Q^{-1}. Intended for tests and the slice-level
/// API; the solver pipeline never materializes these.
inline std::pair<std::vector<Matrix>, Matrix> dual_param_jacobians(const QpInstance& qp,
                                                                   const ParamJacobians& pjac) {
  pjac.validate(qp);
  const Index ni = qp.n_in();
  const Index ne = qp.n_eq();
  const Index nz = ni + ne;
  const Index np = pjac.n_param();
  Matrix J(nz, qp.n_y());
  if (ni > 0) J.topRows(ni) = qp.G();
  if (ne > 0) J.bottomRows(ne) = qp.F();
  const Matrix QinvJt = qp.solve_Q(Matrix(J.transpose()));
  const Vector Qinvq = qp.solve_Q(qp.q());

  std::vector<Matrix> dH(static_cast<size_t>(np));
  Matrix dh(nz, np);
  for (Index j = 0; j < np; ++j) {
    Matrix dJ = Matrix::Zero(nz, qp.n_y());
    bool dJ_zero = true;
    if (ni > 0 && pjac.dG[static_cast<size_t>(j)].size() > 0) {
      dJ.topRows(ni) = pjac.dG[static_cast<size_t>(j)];
      dJ_zero = false;
    }
    if (ne > 0 && pjac.dF[static_cast<size_t>(j)].size() > 0) {
      dJ.bottomRows(ne) = pjac.dF[static_cast<size_t>(j)];
      dJ_zero = false;
    }
    const Matrix& dQj = pjac.dQ[static_cast<size_t>(j)];

    Matrix dHj = Matrix::Zero(nz, nz);
    Vector dhj = Vector::Zero(nz);
    if (!dJ_zero) {
      const Matrix cross = dJ * QinvJt;
      dHj += cross + cross.transpose();
      dhj += dJ * Qinvq;
    }
    if (dQj.size() > 0) {
      dHj -= QinvJt.transpose() * dQj * QinvJt;
      dhj -= QinvJt.transpose() * (dQj * Qinvq);
    }
    dhj += QinvJt.transpose() * pjac.dq.col(j);
    if (ni > 0) dhj.head(ni) += pjac.dg.col(j);
    if (ne > 0) dhj.tail(ne) += pjac.dphi.col(j);
    dH[static_cast<size_t>(j)] = std::move(dHj);
    dh.col(j) = dhj;
  }
  return {std::move(dH), std::move(dh)};
}

struct SensitivityOptions {
  double gamma = 1.0;
  double class_tol = 1e-7;
  double beta_weakly_active = 0.0;
  double cond_warn_threshold = 1e12;
};

struct SensitivityResult {
  Matrix Jz;  // (n_in + n_eq) x n_p
  Matrix Jy;  // n_y x n_p
  double cond_U = 0.0;
  bool ill_conditioned = false;
  ConstraintClasses classes;
};

/// Full sensitivity pass at a solved QP. V is assembled column by column
/// without materializing the dH slices:
///   dH_j z + dh_j = -dJ_j y + J Q^{-1} s_j + (dg_j, dphi_j),
///   s_j = dQ_j y + dF_j' mu + dG_j' lambda + dq_j,
/// and the system is reduced to the rows with nonzero projector diagonal;
/// the remaining rows of Jz are zero by construction, which keeps inactive
/// rows exactly zero.
inline SensitivityResult qp_sensitivity(const QpInstance& qp, const DualQp& dual,
                                        const SolveOutput& out, const ParamJacobians& pjac,
                                        const SensitivityOptions& opts = {}) {
  pjac.validate(qp);
  const Index ny = qp.n_y();
  const Index ni = qp.n_in();
  const Index ne = qp.n_eq();
  const Index nz = ni + ne;
  const Index np = pjac.n_param();
  const double gamma = opts.gamma;

  SensitivityResult res;
  res.classes = classify_constraints(qp, out, opts.class_tol);
  const Vector d = projector_jacobian(res.classes, ne, opts.beta_weakly_active);
  const Vector y = out.y;
  const Vector z = out.z();

  // s_j and the shared solve Q^{-1} s_j
  Matrix S = pjac.dq;
  for (Index j = 0; j < np; ++j) {
    const Matrix& dQj = pjac.dQ[static_cast<size_t>(j)];
    const Matrix& dFj = pjac.dF[static_cast<size_t>(j)];
    const Matrix& dGj = pjac.dG[static_cast<size_t>(j)];
    if (dQj.size() > 0) S.col(j) += dQj * y;
    if (dFj.size() > 0 && ne > 0) S.col(j) += dFj.transpose() * out.mu;
    if (dGj.size() > 0 && ni > 0) S.col(j) += dGj.transpose() * out.lambda;
  }
  const Matrix X = qp.solve_Q(S);  // n_y x n_p

  Matrix J(nz, ny);
  if (ni > 0) J.topRows(ni) = qp.G();
  if (ne > 0) J.bottomRows(ne) = qp.F();

  Matrix M = J * X;  // dH_j z + dh_j stacked over j
  for (Index j = 0; j < np; ++j) {
    const Matrix& dFj = pjac.dF[static_cast<size_t>(j)];
    const Matrix& dGj = pjac.dG[static_cast<size_t>(j)];
    if (dGj.size() > 0 && ni > 0) M.col(j).head(ni) -= dGj * y;
    if (dFj.size() > 0 && ne > 0) M.col(j).tail(ne) -= dFj * y;
  }
  if (ni > 0) M.topRows(ni) += pjac.dg;
  if (ne > 0) M.bottomRows(ne) += pjac.dphi;

  // reduced system over rows with nonzero projector diagonal
  std::vector<Index> keep;
  keep.reserve(static_cast<size_t>(nz));
  for (Index i = 0; i < nz; ++i) {
    if (d[i] != 0.0) keep.push_back(i);
  }
  const Index nk = static_cast<Index>(keep.size());
  res.Jz = Matrix::Zero(nz, np);
  if (nk > 0) {
    Matrix Ur(nk, nk);
    Matrix Vr(nk, np);
    for (Index a = 0; a < nk; ++a) {
      const Index ia = keep[static_cast<size_t>(a)];
      for (Index b = 0; b < nk; ++b) {
        const Index ib = keep[static_cast<size_t>(b)];
        const double eye = (ia == ib) ? 1.0 : 0.0;
        Ur(a, b) = d[ia] * (eye - gamma * dual.H(ia, ib)) - eye;
      }
      Vr.row(a) = -gamma * d[ia] * M.row(ia);
    }
    auto sol = detail::solve_neg_inv(Ur, Vr);
    res.cond_U = sol.cond;
    res.ill_conditioned = sol.cond > opts.cond_warn_threshold;
    for (Index a = 0; a < nk; ++a) res.Jz.row(keep[static_cast<size_t>(a)]) = sol.X.row(a);
  } else {
    res.cond_U = 1.0;
  }

  // Jy = -Q^{-1}(S + J' Jz)
  Matrix rhs = S;
  if (nz > 0) rhs += J.transpose() * res.Jz;
  res.Jy = -qp.solve_Q(rhs);
  return res;
}

}  // namespace bpmpc
