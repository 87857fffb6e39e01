#pragma once

#include <cmath>
#include <memory>
#include <utility>

#include "bpmpc/dynamics.hpp"
#include "bpmpc/types.hpp"

namespace bpmpc {

struct SingularMassMatrixError : Error {
  using Error::Error;
};

/// Pendulum-on-cart constants. The mass-matrix determinant m*J - mu^2 must
/// stay positive over the simulated range.
struct CartPendulumParams {
  double m = 1.0;    // mass
  double J = 1.0;    // inertia
  double mu = 0.1;   // coupling coefficient
  double g = 9.81;   // gravity
  double dt = 0.015; // sampling time [s]
};

/// Pendulum-on-cart vector field. State is (cart position, cart velocity,
/// pendulum angle, pendulum angular velocity) with the upright equilibrium
/// at the origin; the scalar input enters both accelerations through the
/// coupled mass matrix:
///
///   xdd   = (m mu g sin(phi) - mu cos(phi) (u + mu phid^2 sin(phi))) / den
///   phidd = (J (u + mu phid^2 sin(phi)) - mu^2 g sin(phi) cos(phi)) / den
///   den   = m J - mu^2 cos^2(phi)
class CartPendulumOde final : public ContinuousOde {
 public:
  explicit CartPendulumOde(const CartPendulumParams& p) : p_(p) {
    if (p_.m <= 0.0 || p_.J <= 0.0 || p_.mu <= 0.0 || p_.g <= 0.0) {
      throw ConfigError("cart-pendulum constants must be positive");
    }
    if (p_.m * p_.J - p_.mu * p_.mu <= 0.0) {
      throw SingularMassMatrixError("m*J - mu^2 must be positive");
    }
  }

  Index n_x() const override { return 4; }
  Index n_u() const override { return 1; }
  const CartPendulumParams& params() const { return p_; }

  Vector deriv(const Vector& x, const Vector& u) const override {
    const double phi = x[2];
    const double w = x[3];
    const double s = std::sin(phi);
    const double c = std::cos(phi);
    const double den = p_.m * p_.J - p_.mu * p_.mu * c * c;
    if (den <= 0.0) throw SingularMassMatrixError("mass matrix singular at this angle");
    const double thrust = u[0] + p_.mu * w * w * s;
    Vector dx(4);
    dx[0] = x[1];
    dx[1] = (p_.m * p_.mu * p_.g * s - p_.mu * c * thrust) / den;
    dx[2] = w;
    dx[3] = (p_.J * thrust - p_.mu * p_.mu * p_.g * s * c) / den;
    return dx;
  }

  std::pair<Matrix, Matrix> deriv_jacobians(const Vector& x, const Vector& u) const override {
    const double phi = x[2];
    const double w = x[3];
    const double s = std::sin(phi);
    const double c = std::cos(phi);
    const double mu = p_.mu;
    const double den = p_.m * p_.J - mu * mu * c * c;
    if (den <= 0.0) throw SingularMassMatrixError("mass matrix singular at this angle");
    const double dden_dphi = 2.0 * mu * mu * c * s;
    const double thrust = u[0] + mu * w * w * s;
    const double dthrust_dphi = mu * w * w * c;
    const double dthrust_dw = 2.0 * mu * w * s;

    const double num1 = p_.m * mu * p_.g * s - mu * c * thrust;
    const double dnum1_dphi = p_.m * mu * p_.g * c + mu * s * thrust - mu * c * dthrust_dphi;
    const double num3 = p_.J * thrust - mu * mu * p_.g * s * c;
    const double dnum3_dphi = p_.J * dthrust_dphi - mu * mu * p_.g * (c * c - s * s);

    Matrix A = Matrix::Zero(4, 4);
    A(0, 1) = 1.0;
    A(2, 3) = 1.0;
    A(1, 2) = dnum1_dphi / den - num1 * dden_dphi / (den * den);
    A(1, 3) = -mu * c * dthrust_dw / den;
    A(3, 2) = dnum3_dphi / den - num3 * dden_dphi / (den * den);
    A(3, 3) = p_.J * dthrust_dw / den;

    Matrix B = Matrix::Zero(4, 1);
    B(1, 0) = -mu * c / den;
    B(3, 0) = p_.J / den;
    return {std::move(A), std::move(B)};
  }

 private:
  CartPendulumParams p_;
};

inline std::shared_ptr<Rk4Model> make_cart_pendulum_model(const CartPendulumParams& p) {
  return std::make_shared<Rk4Model>(std::make_shared<CartPendulumOde>(p), p.dt);
}

}  // namespace bpmpc
