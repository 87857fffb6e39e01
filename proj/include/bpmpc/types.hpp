#pragma once

#include <Eigen/Dense>

#include <stdexcept>
#include <string>

namespace bpmpc {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
using Index = Eigen::Index;

/// Base class for all library errors.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Cost matrix failed a positive-definiteness check (Cholesky breakdown).
struct NotPositiveDefiniteError : Error {
  using Error::Error;
};

struct DimensionMismatchError : Error {
  using Error::Error;
};

/// The sensitivity system matrix U is rank deficient. This signals a
/// constraint-qualification violation at the current solution.
struct SingularUError : Error {
  using Error::Error;
};

/// Hard-constrained problem has an empty feasible set.
struct InfeasibleError : Error {
  explicit InfeasibleError(const std::string& msg, long time_step = -1)
      : Error(msg), t(time_step) {}
  long t;  // closed-loop step where infeasibility was detected, -1 if n/a
};

struct DecodeError : Error {
  using Error::Error;
};

struct NoConvergenceError : Error {
  using Error::Error;
};

struct EmptyPolytopeError : Error {
  using Error::Error;
};

struct BadParameterizationError : Error {
  using Error::Error;
};

struct ConfigError : Error {
  using Error::Error;
};

inline double inf_norm(const Vector& v) {
  return v.size() == 0 ? 0.0 : v.cwiseAbs().maxCoeff();
}

inline double inf_norm(const Matrix& m) {
  return m.size() == 0 ? 0.0 : m.cwiseAbs().maxCoeff();
}

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw DimensionMismatchError(msg);
}

}  // namespace bpmpc
