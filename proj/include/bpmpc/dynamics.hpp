#pragma once

#include <Eigen/Dense>

#include <memory>
#include <utility>
#include <vector>

#include "bpmpc/types.hpp"

namespace bpmpc {

/// Discrete-time plant interface. Implementations must keep step() and
/// jacobians() consistent: the contract test compares the analytic
/// jacobians against central differences of step().
class DynamicsModel {
 public:
  virtual ~DynamicsModel() = default;
  virtual Index n_x() const = 0;
  virtual Index n_u() const = 0;
  virtual Vector step(const Vector& x, const Vector& u) const = 0;
  /// (df/dx, df/du) at (x, u)
  virtual std::pair<Matrix, Matrix> jacobians(const Vector& x, const Vector& u) const = 0;
};

/// Continuous-time vector field with analytic Jacobians, discretized by the
/// RK4 wrapper below.
class ContinuousOde {
 public:
  virtual ~ContinuousOde() = default;
  virtual Index n_x() const = 0;
  virtual Index n_u() const = 0;
  virtual Vector deriv(const Vector& x, const Vector& u) const = 0;
  virtual std::pair<Matrix, Matrix> deriv_jacobians(const Vector& x, const Vector& u) const = 0;
};

/// Classical RK4 step with zero-order-hold input.
inline Vector rk4_step(const ContinuousOde& ode, const Vector& x, const Vector& u, double dt) {
  const Vector k1 = ode.deriv(x, u);
  const Vector k2 = ode.deriv(x + 0.5 * dt * k1, u);
  const Vector k3 = ode.deriv(x + 0.5 * dt * k2, u);
  const Vector k4 = ode.deriv(x + dt * k3, u);
  return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
}

/// RK4 discretization of a continuous model. Jacobians of the discrete map
/// are accumulated forward through the four stages with the chain rule over
/// the ODE's analytic Jacobians; finite differences would be too noisy for
/// the closed-loop gradient checks downstream.
class Rk4Model final : public DynamicsModel {
 public:
  Rk4Model(std::shared_ptr<const ContinuousOde> ode, double dt)
      : ode_(std::move(ode)), dt_(dt) {
    if (dt_ <= 0.0) throw ConfigError("rk4 sampling time must be positive");
  }

  Index n_x() const override { return ode_->n_x(); }
  Index n_u() const override { return ode_->n_u(); }
  double dt() const { return dt_; }
  const ContinuousOde& ode() const { return *ode_; }

  Vector step(const Vector& x, const Vector& u) const override {
    return rk4_step(*ode_, x, u, dt_);
  }

  std::pair<Matrix, Matrix> jacobians(const Vector& x, const Vector& u) const override {
    const Index nx = n_x();
    const Vector k1 = ode_->deriv(x, u);
    const Vector x2 = x + 0.5 * dt_ * k1;
    const Vector k2 = ode_->deriv(x2, u);
    const Vector x3 = x + 0.5 * dt_ * k2;
    const Vector k3 = ode_->deriv(x3, u);
    const Vector x4 = x + dt_ * k3;

    const auto [f1x, f1u] = ode_->deriv_jacobians(x, u);
    const auto [f2x, f2u] = ode_->deriv_jacobians(x2, u);
    const auto [f3x, f3u] = ode_->deriv_jacobians(x3, u);
    const auto [f4x, f4u] = ode_->deriv_jacobians(x4, u);

    const Matrix I = Matrix::Identity(nx, nx);
    const Matrix K1x = f1x;
    const Matrix K2x = f2x * (I + 0.5 * dt_ * K1x);
    const Matrix K3x = f3x * (I + 0.5 * dt_ * K2x);
    const Matrix K4x = f4x * (I + dt_ * K3x);
    const Matrix K1u = f1u;
    const Matrix K2u = f2x * (0.5 * dt_ * K1u) + f2u;
    const Matrix K3u = f3x * (0.5 * dt_ * K2u) + f3u;
    const Matrix K4u = f4x * (dt_ * K3u) + f4u;

    Matrix A = I + (dt_ / 6.0) * (K1x + 2.0 * K2x + 2.0 * K3x + K4x);
    Matrix B = (dt_ / 6.0) * (K1u + 2.0 * K2u + 2.0 * K3u + K4u);
    return {std::move(A), std::move(B)};
  }

 private:
  std::shared_ptr<const ContinuousOde> ode_;
  double dt_;
};

/// Affine discrete plant x+ = Ax + Bu + c, mostly for tests and fixed
/// prediction models.
class LinearPlantModel final : public DynamicsModel {
 public:
  LinearPlantModel(Matrix A, Matrix B, Vector c) : A_(std::move(A)), B_(std::move(B)), c_(std::move(c)) {
    if (c_.size() == 0) c_ = Vector::Zero(A_.rows());
    require(A_.rows() == A_.cols() && A_.rows() == B_.rows() && A_.rows() == c_.size(),
            "linear plant dimension mismatch");
  }
  LinearPlantModel(Matrix A, Matrix B)
      : LinearPlantModel(std::move(A), std::move(B), Vector()) {}

  Index n_x() const override { return A_.rows(); }
  Index n_u() const override { return B_.cols(); }
  Vector step(const Vector& x, const Vector& u) const override { return A_ * x + B_ * u + c_; }
  std::pair<Matrix, Matrix> jacobians(const Vector&, const Vector&) const override {
    return {A_, B_};
  }

 private:
  Matrix A_;
  Matrix B_;
  Vector c_;
};

/// Central-difference Jacobians of a discrete model; the contract-test
/// oracle for analytic implementations.
inline std::pair<Matrix, Matrix> model_jacobians_fd(const DynamicsModel& model, const Vector& x,
                                                    const Vector& u, double h = 1e-6) {
  Matrix A(model.n_x(), model.n_x());
  Matrix B(model.n_x(), model.n_u());
  for (Index j = 0; j < model.n_x(); ++j) {
    Vector xp = x, xm = x;
    xp[j] += h;
    xm[j] -= h;
    A.col(j) = (model.step(xp, u) - model.step(xm, u)) / (2.0 * h);
  }
  for (Index j = 0; j < model.n_u(); ++j) {
    Vector up = u, um = u;
    up[j] += h;
    um[j] -= h;
    B.col(j) = (model.step(x, up) - model.step(x, um)) / (2.0 * h);
  }
  return {std::move(A), std::move(B)};
}

/// Per-stage affine prediction model used inside the MPC problem.
struct LinearModel {
  std::vector<Matrix> A;
  std::vector<Matrix> B;
  std::vector<Vector> c;

  Index horizon() const { return static_cast<Index>(A.size()); }
  Index n_x() const { return A.empty() ? 0 : A.front().rows(); }
  Index n_u() const { return B.empty() ? 0 : B.front().cols(); }

  static LinearModel constant(const Matrix& A0, const Matrix& B0, const Vector& c0, Index N) {
    LinearModel m;
    m.A.assign(static_cast<size_t>(N), A0);
    m.B.assign(static_cast<size_t>(N), B0);
    m.c.assign(static_cast<size_t>(N), c0);
    return m;
  }
};

enum class LinearizationMode { Shifted, CurrentStateFirst };

/// Decodes the previous MPC primal into states and inputs. The primal may
/// carry a slack block at the tail; only the leading (x, u) blocks are read.
inline void decode_primal(const Vector& y_prev, Index N, Index nx, Index nu,
                          std::vector<Vector>& xs, std::vector<Vector>& us) {
  const Index needed = (N + 1) * nx + N * nu;
  if (y_prev.size() < needed) {
    throw DecodeError("previous primal too short for the requested horizon");
  }
  xs.resize(static_cast<size_t>(N + 1));
  us.resize(static_cast<size_t>(N));
  for (Index k = 0; k <= N; ++k) xs[static_cast<size_t>(k)] = y_prev.segment(k * nx, nx);
  for (Index k = 0; k < N; ++k) {
    us[static_cast<size_t>(k)] = y_prev.segment((N + 1) * nx + k * nu, nu);
  }
}

/// Linearization point for stage k of the prediction model built at time t:
/// (x_{k+1|t-1}, u_{k+1|t-1}), with the input trajectory extended by
/// u_{N|t-1} = u_{N-1|t-1}. CurrentStateFirst substitutes the measured
/// state for x_{1|t-1} at stage 0.
inline std::pair<Vector, Vector> linearization_point(const std::vector<Vector>& xs,
                                                     const std::vector<Vector>& us,
                                                     const Vector& x_bar, Index k,
                                                     LinearizationMode mode) {
  const Index N = static_cast<Index>(us.size());
  Vector xp = xs[static_cast<size_t>(k + 1)];
  if (mode == LinearizationMode::CurrentStateFirst && k == 0) xp = x_bar;
  const Index ku = std::min<Index>(k + 1, N - 1);
  return {xp, us[static_cast<size_t>(ku)]};
}

/// Builds the per-stage affine prediction model by linearizing the plant
/// along the previous MPC solution, with c_k = f(x*, u*) - A_k x* - B_k u*.
inline LinearModel linearize_along(const DynamicsModel& model, const Vector& y_prev,
                                   const Vector& x_bar, Index N,
                                   LinearizationMode mode = LinearizationMode::Shifted) {
  const Index nx = model.n_x();
  const Index nu = model.n_u();
  std::vector<Vector> xs, us;
  decode_primal(y_prev, N, nx, nu, xs, us);
  LinearModel out;
  out.A.reserve(static_cast<size_t>(N));
  out.B.reserve(static_cast<size_t>(N));
  out.c.reserve(static_cast<size_t>(N));
  for (Index k = 0; k < N; ++k) {
    const auto [xp, up] = linearization_point(xs, us, x_bar, k, mode);
    auto [A, B] = model.jacobians(xp, up);
    Vector c = model.step(xp, up) - A * xp - B * up;
    out.A.push_back(std::move(A));
    out.B.push_back(std::move(B));
    out.c.push_back(std::move(c));
  }
  return out;
}

/// Derivatives of the per-stage linearization (A_k, B_k) with respect to its
/// own linearization point. These are second derivatives of the plant map,
/// realized by central differences of the analytic Jacobians; dc falls out
/// exactly as dc = -dA x* - dB u* because df/dx* cancels against A.
struct LinearModelSensitivity {
  struct StageDerivs {
    std::vector<Matrix> dA;  // one slice per point coordinate (x* then u*)
    std::vector<Matrix> dB;
  };
  std::vector<StageDerivs> stage;
  LinearizationMode mode = LinearizationMode::Shifted;
};

inline LinearModelSensitivity linearization_sensitivity(const DynamicsModel& model,
                                                        const Vector& y_prev, const Vector& x_bar,
                                                        Index N, LinearizationMode mode,
                                                        double fd_step = 1e-5) {
  const Index nx = model.n_x();
  const Index nu = model.n_u();
  std::vector<Vector> xs, us;
  decode_primal(y_prev, N, nx, nu, xs, us);
  LinearModelSensitivity out;
  out.mode = mode;
  out.stage.resize(static_cast<size_t>(N));
  for (Index k = 0; k < N; ++k) {
    const auto [xp, up] = linearization_point(xs, us, x_bar, k, mode);
    auto& st = out.stage[static_cast<size_t>(k)];
    st.dA.resize(static_cast<size_t>(nx + nu));
    st.dB.resize(static_cast<size_t>(nx + nu));
    for (Index m = 0; m < nx; ++m) {
      Vector xm = xp, xq = xp;
      xm[m] += fd_step;
      xq[m] -= fd_step;
      const auto [Ap, Bp] = model.jacobians(xm, up);
      const auto [Am, Bm] = model.jacobians(xq, up);
      st.dA[static_cast<size_t>(m)] = (Ap - Am) / (2.0 * fd_step);
      st.dB[static_cast<size_t>(m)] = (Bp - Bm) / (2.0 * fd_step);
    }
    for (Index m = 0; m < nu; ++m) {
      Vector um = up, uq = up;
      um[m] += fd_step;
      uq[m] -= fd_step;
      const auto [Ap, Bp] = model.jacobians(xp, um);
      const auto [Am, Bm] = model.jacobians(xp, uq);
      st.dA[static_cast<size_t>(nx + m)] = (Ap - Am) / (2.0 * fd_step);
      st.dB[static_cast<size_t>(nx + m)] = (Bp - Bm) / (2.0 * fd_step);
    }
  }
  return out;
}

}  // namespace bpmpc
