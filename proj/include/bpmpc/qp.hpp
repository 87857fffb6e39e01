#pragma once

#include <Eigen/Cholesky>
#include <Eigen/Dense>

#include <cmath>
#include <utility>
#include <vector>

#include "bpmpc/types.hpp"

namespace bpmpc {

/// Strongly convex quadratic program in standard form:
///
///   minimize    1/2 y'Qy + q'y
///   subject to  F y  = phi
///               G y <= g
///
/// Q must be symmetric positive definite. The Cholesky factor of Q is
/// computed once at construction and reused by every operation that needs
/// Q^{-1}; the inverse itself is never formed.
class QpInstance {
 public:
  QpInstance(Matrix Q, Vector q, Matrix F, Vector phi, Matrix G, Vector g)
      : Q_(std::move(Q)),
        q_(std::move(q)),
        F_(std::move(F)),
        phi_(std::move(phi)),
        G_(std::move(G)),
        g_(std::move(g)) {
    const Index n = Q_.rows();
    require(Q_.cols() == n, "Q must be square");
    require(q_.size() == n, "q size mismatch");
    require(F_.rows() == phi_.size(), "F/phi row mismatch");
    require(G_.rows() == g_.size(), "G/g row mismatch");
    require(F_.size() == 0 || F_.cols() == n, "F column mismatch");
    require(G_.size() == 0 || G_.cols() == n, "G column mismatch");
    if (!Q_.isApprox(Q_.transpose(), 1e-12)) {
      throw NotPositiveDefiniteError("Q is not symmetric");
    }
    llt_.compute(Q_);
    if (llt_.info() != Eigen::Success) {
      throw NotPositiveDefiniteError("Q factorization failed: not positive definite");
    }
  }

  Index n_y() const { return Q_.rows(); }
  Index n_eq() const { return F_.rows(); }
  Index n_in() const { return G_.rows(); }

  const Matrix& Q() const { return Q_; }
  const Vector& q() const { return q_; }
  const Matrix& F() const { return F_; }
  const Vector& phi() const { return phi_; }
  const Matrix& G() const { return G_; }
  const Vector& g() const { return g_; }

  /// Applies Q^{-1} through the cached Cholesky factor.
  Vector solve_Q(const Vector& rhs) const { return llt_.solve(rhs); }
  Matrix solve_Q(const Matrix& rhs) const { return llt_.solve(rhs); }

 private:
  Matrix Q_;
  Vector q_;
  Matrix F_;
  Vector phi_;
  Matrix G_;
  Vector g_;
  Eigen::LLT<Matrix> llt_;
};

/// Lagrange dual of a QpInstance:
///
///   minimize    1/2 z'Hz + h'z
///   subject to  first n_in entries of z nonnegative
///
/// with z = (lambda, mu). H is positive semidefinite by construction.
struct DualQp {
  Matrix H;
  Vector h;
  Index n_in = 0;
  Index n_eq = 0;

  Index n_z() const { return n_in + n_eq; }
};

enum class SolveStatus { Solved, MaxIter, Infeasible };

struct KktResidual {
  double stationarity = 0.0;
  double feasibility = 0.0;
  double complementarity = 0.0;

  double max() const { return std::max(stationarity, std::max(feasibility, complementarity)); }
};

struct SolveOutput {
  Vector y;
  Vector lambda;
  Vector mu;
  KktResidual kkt;
  Index iterations = 0;
  SolveStatus status = SolveStatus::MaxIter;

  Vector z() const {
    Vector out(lambda.size() + mu.size());
    out << lambda, mu;
    return out;
  }
};

struct DualSolveOptions {
  double tol = 1e-9;
  Index max_iter = 200000;
  double divergence_threshold = 1e10;  // ||z||_inf beyond this flags an unbounded dual
  bool polish = true;                  // active-set acceleration between gradient sweeps
  Index poll_interval = 50;
  Index polish_rounds = 200;  // working-set changes allowed per polish attempt
  Index stall_polls = 40;     // consecutive polls without progress before giving up
};

struct DualSolveResult {
  Vector z;
  Index iterations = 0;
  SolveStatus status = SolveStatus::MaxIter;
};

/// Builds the dual QP data
///   H = [G;F] Q^{-1} [G;F]',   h = [G;F] Q^{-1} q + (g, phi)
/// with the constant term dropped.
inline DualQp assemble_dual(const QpInstance& qp) {
  const Index ni = qp.n_in();
  const Index ne = qp.n_eq();
  DualQp dual;
  dual.n_in = ni;
  dual.n_eq = ne;
  Matrix J(ni + ne, qp.n_y());
  if (ni > 0) J.topRows(ni) = qp.G();
  if (ne > 0) J.bottomRows(ne) = qp.F();
  if (J.rows() == 0) {
    dual.H.resize(0, 0);
    dual.h.resize(0);
    return dual;
  }
  const Matrix X = qp.solve_Q(Matrix(J.transpose()));  // Q^{-1} J'
  dual.H = J * X;
  dual.H = 0.5 * (dual.H + dual.H.transpose()).eval();
  dual.h = J * qp.solve_Q(qp.q());
  if (ni > 0) dual.h.head(ni) += qp.g();
  if (ne > 0) dual.h.tail(ne) += qp.phi();
  return dual;
}

/// Projects onto the dual feasible cone: nonnegativity on the lambda block.
inline void project_dual_cone(Vector& z, Index n_in) {
  for (Index i = 0; i < n_in; ++i) z[i] = std::max(z[i], 0.0);
}

/// Optimality measure for the dual: || P_C[z - gamma (Hz+h)] - z ||_inf.
/// Measured at unit step (gamma = 1) so that it bounds the recovered
/// primal's feasibility and complementarity residuals directly.
inline double dual_fixed_point_residual(const DualQp& dual, const Vector& z,
                                        double gamma = 1.0) {
  if (dual.n_z() == 0) return 0.0;
  Vector w = z - gamma * (dual.H * z + dual.h);
  project_dual_cone(w, dual.n_in);
  return inf_norm(Vector(w - z));
}

/// Power-iteration estimate of ||H||_2 (largest eigenvalue of the PSD dual
/// Hessian), used to set the projected-gradient step 1/L.
inline double spectral_norm_estimate(const Matrix& H, Index iters = 100) {
  const Index n = H.rows();
  if (n == 0) return 0.0;
  Vector v(n);
  for (Index i = 0; i < n; ++i) v[i] = 1.0 + 1e-3 * static_cast<double>(i) / static_cast<double>(n);
  v /= v.norm();
  double lam = 0.0;
  for (Index it = 0; it < iters; ++it) {
    Vector w = H * v;
    const double nw = w.norm();
    if (nw <= 1e-300) return 0.0;
    w /= nw;
    if (it > 3 && std::abs(nw - lam) <= 1e-12 * nw) return nw;
    lam = nw;
    v = w;
  }
  return lam;
}

namespace detail {

// Solves H_FF x = -h_F on the given free set with LDLT plus iterative
// refinement. Returns false on factorization breakdown or non-finite output.
inline bool reduced_solve(const DualQp& dual, const std::vector<Index>& free_idx, Vector& zf) {
  const Index nf = static_cast<Index>(free_idx.size());
  Matrix Hff(nf, nf);
  Vector hf(nf);
  for (Index a = 0; a < nf; ++a) {
    hf[a] = dual.h[free_idx[static_cast<size_t>(a)]];
    for (Index b = 0; b < nf; ++b) {
      Hff(a, b) = dual.H(free_idx[static_cast<size_t>(a)], free_idx[static_cast<size_t>(b)]);
    }
  }
  Eigen::LDLT<Matrix> ldlt(Hff);
  if (ldlt.info() != Eigen::Success) return false;
  zf = ldlt.solve(-hf);
  if (!zf.allFinite()) return false;
  double best = (Hff * zf + hf).cwiseAbs().maxCoeff();
  for (int round = 0; round < 10; ++round) {
    Vector r = -hf - Hff * zf;
    Vector zf_next = zf + ldlt.solve(r);
    if (!zf_next.allFinite()) break;
    const double res = (Hff * zf_next + hf).cwiseAbs().maxCoeff();
    if (res >= best) break;
    best = res;
    zf = std::move(zf_next);
  }
  return true;
}

// Primal active-set passes on the nonnegativity-constrained dual, starting
// from the current (cone-feasible) iterate. Each round solves the equality
// subproblem on the free set; if the target violates the cone we step to the
// first blocking bound and pin it, otherwise we release the most negative
// gradient entry. Bounded rounds; the caller only adopts the result when it
// improves the fixed-point residual, so this is an accelerator, not a
// correctness dependency.
inline bool active_set_polish(const DualQp& dual, const Vector& z_start, Index max_rounds,
                              Vector& out) {
  const Index nz = dual.n_z();
  const Index ni = dual.n_in;
  Vector z = z_start;
  project_dual_cone(z, ni);
  const double pin_eps = 1e-14 * std::max(1.0, inf_norm(z));
  std::vector<bool> pinned(static_cast<size_t>(ni), false);
  std::vector<bool> taboo(static_cast<size_t>(ni), false);  // degenerate pin/release cycles
  for (Index i = 0; i < ni; ++i) pinned[static_cast<size_t>(i)] = z[i] <= pin_eps;

  Index last_released = -1;
  for (Index round = 0; round < max_rounds; ++round) {
    std::vector<Index> free_idx;
    free_idx.reserve(static_cast<size_t>(nz));
    for (Index i = 0; i < ni; ++i) {
      if (!pinned[static_cast<size_t>(i)]) free_idx.push_back(i);
    }
    for (Index i = ni; i < nz; ++i) free_idx.push_back(i);

    Vector target = Vector::Zero(nz);
    if (!free_idx.empty()) {
      Vector zf;
      if (!reduced_solve(dual, free_idx, zf)) break;
      for (size_t a = 0; a < free_idx.size(); ++a) target[free_idx[a]] = zf[static_cast<Index>(a)];
    }

    // longest cone-feasible step toward the subproblem optimum
    double alpha = 1.0;
    Index blocking = -1;
    for (Index i = 0; i < ni; ++i) {
      if (pinned[static_cast<size_t>(i)] || target[i] >= 0.0) continue;
      const double a = z[i] / std::max(z[i] - target[i], 1e-300);
      if (a < alpha) {
        alpha = a;
        blocking = i;
      }
    }
    z = z + alpha * (target - z);
    for (Index i = 0; i < ni; ++i) {
      if (pinned[static_cast<size_t>(i)]) z[i] = 0.0;
    }
    if (blocking >= 0) {
      z[blocking] = 0.0;
      pinned[static_cast<size_t>(blocking)] = true;
      if (blocking == last_released && alpha < 1e-12) {
        // releasing this index immediately re-blocks: numerical noise, not
        // descent; never touch it again within this polish attempt
        taboo[static_cast<size_t>(blocking)] = true;
      }
      continue;
    }

    // at the subproblem optimum; release the most negative pinned gradient
    const Vector grad = dual.H * z + dual.h;
    Index release = -1;
    double most_negative = -1e-9 * std::max(1.0, inf_norm(grad));
    for (Index i = 0; i < ni; ++i) {
      if (pinned[static_cast<size_t>(i)] && !taboo[static_cast<size_t>(i)] &&
          grad[i] < most_negative) {
        most_negative = grad[i];
        release = i;
      }
    }
    if (release < 0) {
      out = z;
      return true;
    }
    pinned[static_cast<size_t>(release)] = false;
    last_released = release;
  }
  out = z;
  return true;
}

}  // namespace detail

/// Solves the dual QP by accelerated projected gradient with gradient-based
/// restart, step 1/L from a power-iteration estimate of ||H||_2. A periodic
/// polish step solves the reduced equality system on the tentative active
/// set and is accepted only when it lowers the fixed-point residual.
/// Divergent iterates (||z||_inf above the threshold) signal an unbounded
/// dual, i.e. an infeasible primal.
inline DualSolveResult solve_dual(const DualQp& dual, const DualSolveOptions& opts = {},
                                  const Vector* warm_start = nullptr) {
  const Index nz = dual.n_z();
  DualSolveResult res;
  res.z = Vector::Zero(nz);
  if (nz == 0) {
    res.status = SolveStatus::Solved;
    return res;
  }

  const double L_raw = spectral_norm_estimate(dual.H);
  if (L_raw <= 1e-300) {
    // H vanishes: the dual is linear. It is bounded only if h has no
    // descent direction inside the cone.
    bool bounded = true;
    for (Index i = 0; i < dual.n_in; ++i) bounded = bounded && dual.h[i] >= -opts.tol;
    for (Index i = dual.n_in; i < nz; ++i) bounded = bounded && std::abs(dual.h[i]) <= opts.tol;
    res.z.setZero();
    res.status = bounded ? SolveStatus::Solved : SolveStatus::Infeasible;
    return res;
  }

  // Jacobi equilibration. MPC duals mix curvature scales across many orders
  // of magnitude; iterating in scaled variables keeps both the gradient
  // steps and the polish factorization sane. The convergence test below is
  // still performed on the original variables, and the scaled objective
  // equals the original one.
  const double dmax = dual.H.diagonal().maxCoeff();
  Vector scale(nz);
  for (Index i = 0; i < nz; ++i) {
    scale[i] = 1.0 / std::sqrt(std::max(dual.H(i, i), std::max(1e-12 * dmax, 1e-300)));
  }
  DualQp sd;
  sd.n_in = dual.n_in;
  sd.n_eq = dual.n_eq;
  sd.H = scale.asDiagonal() * dual.H * scale.asDiagonal();
  sd.h = scale.asDiagonal() * dual.h;
  const auto to_original = [&scale](const Vector& zs) { return Vector(scale.asDiagonal() * zs); };

  Vector z = Vector::Zero(nz);
  if (warm_start != nullptr && warm_start->size() == nz) {
    z = scale.cwiseInverse().asDiagonal() * (*warm_start);
    project_dual_cone(z, sd.n_in);
  }

  const double L = spectral_norm_estimate(sd.H);
  const double step = 1.0 / (1.02 * std::max(L, 1e-300));

  const auto objective = [&sd](const Vector& zz) {
    return 0.5 * zz.dot(sd.H * zz) + sd.h.dot(zz);
  };

  Vector v = z;  // extrapolated point carrier
  double tk = 1.0;
  Vector candidate;
  Vector z_poll = z;
  double f_poll = objective(z);
  Vector best_z = to_original(z);
  double best_res = dual_fixed_point_residual(dual, best_z);
  Index stalled_polls = 0;
  Index polish_backoff = 1;  // polls between polish attempts; doubles on failure
  Index polls_since_polish = 0;

  for (Index it = 0; it <= opts.max_iter; ++it) {
    if (it % opts.poll_interval == 0) {
      const Vector z_orig = to_original(z);
      const double r_now = dual_fixed_point_residual(dual, z_orig);
      if (r_now <= opts.tol) {
        res.z = z_orig;
        res.iterations = it;
        res.status = SolveStatus::Solved;
        return res;
      }
      if (r_now < 0.99 * best_res) {
        best_res = r_now;
        best_z = z_orig;
        stalled_polls = 0;
      } else if (++stalled_polls >= opts.stall_polls) {
        // progress has flattened at this problem's numerical floor
        res.z = best_z;
        res.iterations = it;
        res.status = SolveStatus::MaxIter;
        return res;
      }
      // Unbounded duals drift outward with ever-decreasing objective; ride
      // the drift ray with doubling steps until the divergence threshold
      // certifies infeasibility. Bounded problems reject the first doubled
      // point and continue unaffected.
      double f = objective(z);
      if (it > 0 && f < f_poll - 1e-12 * (1.0 + std::abs(f_poll)) &&
          inf_norm(z) > 1.01 * inf_norm(z_poll)) {
        Vector d = z - z_poll;
        bool moved = false;
        while (inf_norm(to_original(z)) <= opts.divergence_threshold) {
          Vector z_try = z + d;
          project_dual_cone(z_try, sd.n_in);
          const double f_try = objective(z_try);
          if (f_try < f - 1e-12 * (1.0 + std::abs(f))) {
            z = z_try;
            f = f_try;
            d *= 2.0;
            moved = true;
          } else {
            break;
          }
        }
        if (inf_norm(to_original(z)) > opts.divergence_threshold) {
          res.z = to_original(z);
          res.iterations = it;
          res.status = SolveStatus::Infeasible;
          return res;
        }
        if (moved) {
          v = z;
          tk = 1.0;
        }
      }
      z_poll = z;
      f_poll = f;
      if (opts.polish && ++polls_since_polish >= polish_backoff) {
        polls_since_polish = 0;
        if (detail::active_set_polish(sd, z, opts.polish_rounds, candidate)) {
          const double rc = dual_fixed_point_residual(dual, to_original(candidate));
          if (rc <= opts.tol) {
            res.z = to_original(candidate);
            res.iterations = it;
            res.status = SolveStatus::Solved;
            return res;
          }
          if (rc < best_res) {
            best_res = rc;
            best_z = to_original(candidate);
            stalled_polls = 0;
            polish_backoff = 1;
            z = candidate;
            v = z;
            tk = 1.0;
          } else {
            polish_backoff = std::min<Index>(polish_backoff * 2, 32);
          }
        } else {
          polish_backoff = std::min<Index>(polish_backoff * 2, 32);
        }
      }
    }

    Vector grad = sd.H * v + sd.h;
    Vector znew = v - step * grad;
    project_dual_cone(znew, sd.n_in);
    if ((v - znew).dot(znew - z) > 0.0) {
      tk = 1.0;
      v = znew;
    } else {
      const double tnext = 0.5 * (1.0 + std::sqrt(1.0 + 4.0 * tk * tk));
      v = znew + ((tk - 1.0) / tnext) * (znew - z);
      tk = tnext;
    }
    z = znew;

    if (inf_norm(to_original(z)) > opts.divergence_threshold) {
      res.z = to_original(z);
      res.iterations = it;
      res.status = SolveStatus::Infeasible;
      return res;
    }
  }

  res.z = best_res <= dual_fixed_point_residual(dual, to_original(z)) ? best_z : to_original(z);
  res.iterations = opts.max_iter;
  res.status = SolveStatus::MaxIter;
  return res;
}

/// Recovers the primal optimizer from the dual one:
///   y = -Q^{-1} (F' mu + G' lambda + q)
inline Vector recover_primal(const QpInstance& qp, const Vector& z) {
  require(z.size() == qp.n_in() + qp.n_eq(), "dual vector size mismatch");
  Vector rhs = qp.q();
  if (qp.n_in() > 0) rhs += qp.G().transpose() * z.head(qp.n_in());
  if (qp.n_eq() > 0) rhs += qp.F().transpose() * z.tail(qp.n_eq());
  return -qp.solve_Q(rhs);
}

inline KktResidual kkt_residual(const QpInstance& qp, const Vector& y, const Vector& lambda,
                                const Vector& mu) {
  require(y.size() == qp.n_y(), "y size mismatch");
  require(lambda.size() == qp.n_in(), "lambda size mismatch");
  require(mu.size() == qp.n_eq(), "mu size mismatch");
  KktResidual r;
  Vector stat = qp.Q() * y + qp.q();
  if (qp.n_eq() > 0) stat += qp.F().transpose() * mu;
  if (qp.n_in() > 0) stat += qp.G().transpose() * lambda;
  r.stationarity = inf_norm(stat);
  double feas = 0.0;
  if (qp.n_eq() > 0) feas = inf_norm(Vector(qp.F() * y - qp.phi()));
  if (qp.n_in() > 0) {
    Vector slack_violation = (qp.G() * y - qp.g()).cwiseMax(0.0);
    feas = std::max(feas, inf_norm(slack_violation));
    r.complementarity = inf_norm(Vector(lambda.cwiseProduct(qp.G() * y - qp.g())));
  }
  r.feasibility = feas;
  return r;
}

/// Full dual-based solve: assemble, solve, recover, assess.
inline SolveOutput solve_qp(const QpInstance& qp, const DualSolveOptions& opts = {},
                            const Vector* warm_start = nullptr) {
  const DualQp dual = assemble_dual(qp);
  const DualSolveResult ds = solve_dual(dual, opts, warm_start);
  SolveOutput out;
  out.iterations = ds.iterations;
  out.status = ds.status;
  out.lambda = ds.z.head(qp.n_in());
  out.mu = ds.z.tail(qp.n_eq());
  if (ds.status == SolveStatus::Infeasible) {
    out.y = Vector::Zero(qp.n_y());
    return out;
  }
  out.y = recover_primal(qp, ds.z);
  out.kkt = kkt_residual(qp, out.y, out.lambda, out.mu);
  return out;
}

struct LicqReport {
  std::vector<Index> active_rows;  // indices into the inequality block
  Index rank = 0;
  bool licq_holds = false;
};

/// Stacks the active inequality rows atop all equality rows and tests for
/// full row rank with a rank-revealing QR factorization.
inline LicqReport check_licq(const QpInstance& qp, const Vector& y, double active_tol = 1e-7) {
  require(y.size() == qp.n_y(), "y size mismatch");
  LicqReport report;
  if (qp.n_in() > 0) {
    const Vector slack = qp.g() - qp.G() * y;
    for (Index i = 0; i < qp.n_in(); ++i) {
      if (slack[i] <= active_tol) report.active_rows.push_back(i);
    }
  }
  const Index rows = static_cast<Index>(report.active_rows.size()) + qp.n_eq();
  if (rows == 0) {
    report.licq_holds = true;
    return report;
  }
  Matrix stacked(rows, qp.n_y());
  for (Index i = 0; i < static_cast<Index>(report.active_rows.size()); ++i) {
    stacked.row(i) = qp.G().row(report.active_rows[static_cast<size_t>(i)]);
  }
  if (qp.n_eq() > 0) stacked.bottomRows(qp.n_eq()) = qp.F();
  Eigen::ColPivHouseholderQR<Matrix> qr(stacked);
  report.rank = qr.rank();
  report.licq_holds = (report.rank == rows);
  return report;
}

}  // namespace bpmpc
