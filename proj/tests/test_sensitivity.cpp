#include "bpmpc/sensitivity.hpp"

#include <catch2/catch_amalgamated.hpp>

#include "bpmpc/qp.hpp"
#include "oracles.hpp"

using namespace bpmpc;

namespace {

// Affine family of QPs for probing the sensitivity pipeline: every data
// block moves linearly in theta, so the exact ParamJacobians are the slopes.
struct AffineQpFamily {
  Matrix Q0;
  Vector q0;
  Matrix F0;
  Vector phi0;
  Matrix G0;
  Vector g0;
  std::vector<Matrix> Qs;  // symmetric slopes
  std::vector<Matrix> Fs;
  std::vector<Matrix> Gs;
  Matrix qs;    // n_y x n_p
  Matrix phis;  // n_eq x n_p
  Matrix gs;    // n_in x n_p

  Index n_param() const { return qs.cols(); }

  QpInstance at(const Vector& theta) const {
    Matrix Q = Q0;
    Vector q = q0 + qs * theta;
    Matrix F = F0;
    Vector phi = phi0 + phis * theta;
    Matrix G = G0;
    Vector g = g0 + gs * theta;
    for (Index j = 0; j < theta.size(); ++j) {
      Q += theta[j] * Qs[static_cast<size_t>(j)];
      if (F.size() > 0) F += theta[j] * Fs[static_cast<size_t>(j)];
      if (G.size() > 0) G += theta[j] * Gs[static_cast<size_t>(j)];
    }
    return QpInstance(Q, q, F, phi, G, g);
  }

  ParamJacobians jacobians() const {
    ParamJacobians pj;
    pj.dQ = Qs;
    pj.dF = Fs;
    pj.dG = Gs;
    pj.dq = qs;
    pj.dphi = phis;
    pj.dg = gs;
    return pj;
  }
};

AffineQpFamily random_family(oracle::Rng& rng, Index ny, Index ni, Index ne, Index np,
                             double slope_scale = 0.2) {
  AffineQpFamily fam;
  const QpInstance base = oracle::random_qp(rng, ny, ni, ne);
  fam.Q0 = base.Q() + 2.0 * Matrix::Identity(ny, ny);  // headroom for Q slopes
  fam.q0 = base.q();
  fam.F0 = base.F();
  fam.phi0 = base.phi();
  fam.G0 = base.G();
  fam.g0 = base.g();
  for (Index j = 0; j < np; ++j) {
    Matrix s = slope_scale * rng.normal_matrix(ny, ny);
    fam.Qs.push_back(0.5 * (s + s.transpose()));
    fam.Fs.push_back(ne > 0 ? Matrix(slope_scale * rng.normal_matrix(ne, ny)) : Matrix());
    fam.Gs.push_back(ni > 0 ? Matrix(slope_scale * rng.normal_matrix(ni, ny)) : Matrix());
  }
  fam.qs = rng.normal_matrix(ny, np);
  fam.phis = ne > 0 ? Matrix(rng.normal_matrix(ne, np)) : Matrix::Zero(0, np);
  fam.gs = ni > 0 ? Matrix(rng.normal_matrix(ni, np)) : Matrix::Zero(0, np);
  return fam;
}

SolveOutput tight_solve(const QpInstance& qp) {
  DualSolveOptions opts;
  opts.tol = 1e-12;
  return solve_qp(qp, opts);
}

std::vector<Index> strongly_active_set(const QpInstance& qp, const SolveOutput& out) {
  return classify_constraints(qp, out).strongly_active;
}

}  // namespace

TEST_CASE("classify_constraints trichotomy", "[sensitivity]") {
  Matrix Q = Matrix::Identity(2, 2);
  Matrix G(2, 2);
  G << 1, 0, 0, 1;
  Vector g(2);

  SECTION("strong and inactive") {
    // y = (1, 0.5) with bounds y1 <= 1 (tight, multiplier 1), y2 <= 1 (slack 0.5)
    g << 1.0, 1.0;
    QpInstance qp(Q, Vector::Zero(2), Matrix(0, 2), Vector(0), G, g);
    SolveOutput out;
    out.y = Vector(2);
    out.y << 1.0, 0.5;
    out.lambda = Vector(2);
    out.lambda << 1.0, 0.0;
    out.mu = Vector(0);
    const ConstraintClasses c = classify_constraints(qp, out);
    REQUIRE(c.strongly_active == std::vector<Index>{0});
    REQUIRE(c.inactive == std::vector<Index>{1});
    REQUIRE(c.weakly_active.empty());
  }
  SECTION("boundary case is weakly active") {
    g << 0.0, 1.0;
    QpInstance qp(Q, Vector::Zero(2), Matrix(0, 2), Vector(0), G, g);
    SolveOutput out;
    out.y = Vector::Zero(2);
    out.lambda = Vector::Zero(2);
    out.mu = Vector(0);
    const ConstraintClasses c = classify_constraints(qp, out);
    REQUIRE(c.weakly_active == std::vector<Index>{0});
    REQUIRE(c.inactive == std::vector<Index>{1});
  }
}

TEST_CASE("projector_jacobian selections", "[sensitivity]") {
  SECTION("mixed with one equality") {
    ConstraintClasses c;
    c.strongly_active = {0};
    c.inactive = {1};
    const Vector d = projector_jacobian(c, 1);
    REQUIRE(d.size() == 3);
    REQUIRE(d[0] == 1.0);
    REQUIRE(d[1] == 0.0);
    REQUIRE(d[2] == 1.0);
  }
  SECTION("all inactive, no equalities") {
    ConstraintClasses c;
    c.inactive = {0, 1};
    const Vector d = projector_jacobian(c, 0);
    REQUIRE(d.cwiseAbs().maxCoeff() == 0.0);
  }
  SECTION("weakly active uses the sign(0) = 0 selection") {
    ConstraintClasses c;
    c.weakly_active = {0};
    const Vector d = projector_jacobian(c, 0);
    REQUIRE(d[0] == 0.0);
    REQUIRE(projector_jacobian(c, 0, 0.5)[0] == 0.5);
  }
}

TEST_CASE("fixed_point_jacobians scalar cases", "[sensitivity]") {
  DualQp dual;
  dual.n_in = 1;
  dual.n_eq = 0;
  dual.H = Matrix::Constant(1, 1, 1.0);
  dual.h = Vector::Constant(1, -1.0);
  Vector z = Vector::Constant(1, 1.0);
  std::vector<Matrix> dH{Matrix::Zero(1, 1)};
  Matrix dh = Matrix::Constant(1, 1, -1.0);

  SECTION("strongly active") {
    const Vector d = Vector::Constant(1, 1.0);
    const auto [U, V] = fixed_point_jacobians(dual, z, dH, dh, d, 0.5);
    REQUIRE(U(0, 0) == Catch::Approx(-0.5).margin(1e-15));
    REQUIRE(V(0, 0) == Catch::Approx(0.5).margin(1e-15));
    double cond = 0.0;
    const Matrix Jz = dual_sensitivity(U, V, &cond);
    REQUIRE(Jz(0, 0) == Catch::Approx(1.0).margin(1e-14));  // dlambda/dp for lambda(p) = p
    REQUIRE(cond >= 1.0);
  }
  SECTION("inactive") {
    const Vector d = Vector::Constant(1, 0.0);
    const auto [U, V] = fixed_point_jacobians(dual, z, dH, dh, d, 0.5);
    REQUIRE(U(0, 0) == Catch::Approx(-1.0).margin(1e-15));
    REQUIRE(V(0, 0) == 0.0);
  }
  SECTION("zero V gives zero sensitivity") {
    const Vector d = Vector::Constant(1, 1.0);
    const auto [U, V] = fixed_point_jacobians(dual, z, dH, Matrix::Zero(1, 1), d, 0.5);
    REQUIRE(dual_sensitivity(U, V).cwiseAbs().maxCoeff() == 0.0);
  }
}

TEST_CASE("primal sensitivity reproduces the analytic 1-D law", "[sensitivity]") {
  // min y^2 s.t. -y <= -p has y(p) = p for p > 0
  const double p = 0.3;
  Matrix Q(1, 1), G(1, 1);
  Q << 2.0;
  G << -1.0;
  Vector g(1);
  g << -p;
  const QpInstance qp(Q, Vector::Zero(1), Matrix(0, 1), Vector(0), G, g);
  const SolveOutput out = tight_solve(qp);
  REQUIRE(out.status == SolveStatus::Solved);
  REQUIRE(out.y[0] == Catch::Approx(p).margin(1e-10));

  ParamJacobians pj = ParamJacobians::zeros(1, 0, 1, 2);
  pj.dg(0, 0) = -1.0;  // parameter 0 moves g; parameter 1 appears nowhere
  const SensitivityResult sr = qp_sensitivity(qp, assemble_dual(qp), out, pj);
  REQUIRE(sr.Jy(0, 0) == Catch::Approx(1.0).margin(1e-9));
  REQUIRE(sr.Jy(0, 1) == 0.0);
  REQUIRE(sr.Jz.col(1).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("product-rule dual data slices match finite differences", "[sensitivity]") {
  oracle::Rng rng(101);
  const AffineQpFamily fam = random_family(rng, 5, 3, 2, 3);
  const Vector theta0 = Vector::Zero(3);
  const QpInstance qp = fam.at(theta0);
  const auto [dH, dh] = dual_param_jacobians(qp, fam.jacobians());

  const double h = 1e-6;
  for (Index j = 0; j < 3; ++j) {
    Vector tp = theta0, tm = theta0;
    tp[j] += h;
    tm[j] -= h;
    const DualQp dp = assemble_dual(fam.at(tp));
    const DualQp dm = assemble_dual(fam.at(tm));
    const Matrix dH_fd = (dp.H - dm.H) / (2.0 * h);
    const Vector dh_fd = (dp.h - dm.h) / (2.0 * h);
    REQUIRE((dH[static_cast<size_t>(j)] - dH_fd).cwiseAbs().maxCoeff() < 1e-6);
    REQUIRE((dh.col(j) - dh_fd).cwiseAbs().maxCoeff() < 1e-6);
  }
}

TEST_CASE("fused pipeline equals the slice-level construction", "[sensitivity]") {
  oracle::Rng rng(77);
  const AffineQpFamily fam = random_family(rng, 6, 4, 2, 4);
  const QpInstance qp = fam.at(Vector::Zero(4));
  const SolveOutput out = tight_solve(qp);
  REQUIRE(out.status == SolveStatus::Solved);
  const DualQp dual = assemble_dual(qp);
  const ParamJacobians pj = fam.jacobians();

  const SensitivityResult fused = qp_sensitivity(qp, dual, out, pj);

  const auto [dH, dh] = dual_param_jacobians(qp, pj);
  const Vector d = projector_jacobian(classify_constraints(qp, out), qp.n_eq());
  const auto [U, V] = fixed_point_jacobians(dual, out.z(), dH, dh, d, 1.0);
  const Matrix Jz_full = dual_sensitivity(U, V);
  const Matrix Jy_full = primal_sensitivity(qp, out.z(), Jz_full, pj);

  REQUIRE((fused.Jz - Jz_full).cwiseAbs().maxCoeff() < 1e-9);
  REQUIRE((fused.Jy - Jy_full).cwiseAbs().maxCoeff() < 1e-9);
}

TEST_CASE("sensitivities match finite differences of the solver", "[sensitivity][property]") {
  oracle::Rng rng(404);
  const double h = 1e-6;
  int tested = 0;
  int skipped = 0;
  for (int trial = 0; trial < 60; ++trial) {
    const Index ny = 3 + static_cast<Index>(rng.uniform(0, 4.999));
    const Index ni = 1 + static_cast<Index>(rng.uniform(0, 4.999));
    const Index ne = static_cast<Index>(rng.uniform(0, 2.999));
    const Index np = 3;
    const AffineQpFamily fam = random_family(rng, ny, ni, ne, np);
    const Vector theta0 = Vector::Zero(np);
    const QpInstance qp = fam.at(theta0);
    const SolveOutput out = tight_solve(qp);
    if (out.status != SolveStatus::Solved) continue;
    if (!check_licq(qp, out.y).licq_holds) continue;
    const ConstraintClasses classes = classify_constraints(qp, out);
    if (!classes.weakly_active.empty()) continue;

    const SensitivityResult sr = qp_sensitivity(qp, assemble_dual(qp), out, fam.jacobians());

    bool active_set_stable = true;
    Matrix Jz_fd(qp.n_in() + qp.n_eq(), np);
    Matrix Jy_fd(ny, np);
    for (Index j = 0; j < np; ++j) {
      Vector tp = theta0, tm = theta0;
      tp[j] += h;
      tm[j] -= h;
      const QpInstance qpp = fam.at(tp);
      const QpInstance qpm = fam.at(tm);
      const SolveOutput op = tight_solve(qpp);
      const SolveOutput om = tight_solve(qpm);
      if (op.status != SolveStatus::Solved || om.status != SolveStatus::Solved ||
          strongly_active_set(qpp, op) != strongly_active_set(qpm, om)) {
        active_set_stable = false;
        break;
      }
      Jz_fd.col(j) = (op.z() - om.z()) / (2.0 * h);
      Jy_fd.col(j) = (op.y - om.y) / (2.0 * h);
    }
    if (!active_set_stable) {
      ++skipped;
      continue;
    }

    const double scale_z = std::max(1.0, inf_norm(Jz_fd));
    const double scale_y = std::max(1.0, inf_norm(Jy_fd));
    REQUIRE(inf_norm(Matrix(sr.Jz - Jz_fd)) / scale_z < 1e-5);
    REQUIRE(inf_norm(Matrix(sr.Jy - Jy_fd)) / scale_y < 1e-5);

    // gamma independence of the dual sensitivity
    SensitivityOptions o1, o2;
    o1.gamma = 0.5;
    o2.gamma = 2.0;
    const SensitivityResult s1 = qp_sensitivity(qp, assemble_dual(qp), out, fam.jacobians(), o1);
    const SensitivityResult s2 = qp_sensitivity(qp, assemble_dual(qp), out, fam.jacobians(), o2);
    REQUIRE(inf_norm(Matrix(s1.Jz - s2.Jz)) <= 1e-10 * std::max(1.0, inf_norm(s1.Jz)));

    // inactive rows are exactly zero
    for (Index i : classify_constraints(qp, out).inactive) {
      REQUIRE(sr.Jz.row(i).cwiseAbs().maxCoeff() == 0.0);
    }
    ++tested;
  }
  INFO("tested " << tested << " skipped " << skipped);
  REQUIRE(tested >= 30);
}

TEST_CASE("LICQ violation raises SingularU", "[sensitivity]") {
  // duplicated active row: y <= 1 listed twice with the optimum pushed onto it
  Matrix Q(1, 1);
  Q << 2.0;
  Vector q(1);
  q << -4.0;  // unconstrained optimum y = 2
  Matrix G(2, 1);
  G << 1.0, 1.0;
  Vector g(2);
  g << 1.0, 1.0;
  const QpInstance qp(Q, q, Matrix(0, 1), Vector(0), G, g);

  // a valid multiplier split with both rows strongly active
  SolveOutput out;
  out.y = Vector::Constant(1, 1.0);
  out.lambda = Vector::Constant(2, 1.0);  // total must be 2; split evenly
  out.mu = Vector(0);
  REQUIRE(kkt_residual(qp, out.y, out.lambda, out.mu).max() < 1e-12);

  ParamJacobians pj = ParamJacobians::zeros(1, 0, 2, 1);
  pj.dg.setOnes();
  REQUIRE_THROWS_AS(qp_sensitivity(qp, assemble_dual(qp), out, pj), SingularUError);
}

TEST_CASE("random LICQ instances keep U invertible", "[sensitivity][property]") {
  oracle::Rng rng(2211);
  int tested = 0;
  while (tested < 120) {
    const Index ny = 2 + static_cast<Index>(rng.uniform(0, 6.999));
    const Index ni = static_cast<Index>(rng.uniform(0, 6.999));
    const Index ne = static_cast<Index>(rng.uniform(0, std::min<double>(2.999, ny - 1)));
    const QpInstance qp = oracle::random_qp(rng, ny, ni, ne);
    const SolveOutput out = tight_solve(qp);
    if (out.status != SolveStatus::Solved) continue;
    if (!check_licq(qp, out.y).licq_holds) continue;
    ParamJacobians pj = ParamJacobians::zeros(ny, ne, ni, 2);
    pj.dq = rng.normal_matrix(ny, 2);
    REQUIRE_NOTHROW(qp_sensitivity(qp, assemble_dual(qp), out, pj));
    ++tested;
  }
}
