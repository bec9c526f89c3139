// Core scalar/vector aliases, error taxonomy, and small smooth-ramp helpers
// shared by every module.
#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <stdexcept>
#include <string>

namespace rsde {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;
using Eigen::Ref;

inline constexpr double kPi = 3.14159265358979323846;

// Contract failures carry a short machine-readable kind plus a human message.
// The CLI maps Error -> exit code 1 and CheckFailure -> exit code 2.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& what)
      : std::runtime_error(kind + ": " + what), kind_(std::move(kind)) {}
  const std::string& kind() const { return kind_; }

 private:
  std::string kind_;
};

#define RSDE_DEFINE_ERROR(Name)                       \
  class Name : public Error {                         \
   public:                                            \
    explicit Name(const std::string& what)            \
        : Error(#Name, what) {}                       \
  }

RSDE_DEFINE_ERROR(ConfigError);
RSDE_DEFINE_ERROR(GridMismatch);
RSDE_DEFINE_ERROR(QuadratureFailure);
RSDE_DEFINE_ERROR(LinearSolveFailure);
RSDE_DEFINE_ERROR(CFLViolation);
RSDE_DEFINE_ERROR(InversionFailure);
RSDE_DEFINE_ERROR(NoRootInInterval);
RSDE_DEFINE_ERROR(CoverFailure);
RSDE_DEFINE_ERROR(StepTooLarge);
RSDE_DEFINE_ERROR(HypothesisViolated);
RSDE_DEFINE_ERROR(NonConvergence);
RSDE_DEFINE_ERROR(OutsideTube);
RSDE_DEFINE_ERROR(DegenerateFit);
RSDE_DEFINE_ERROR(MissingConstant);
RSDE_DEFINE_ERROR(IoError);
RSDE_DEFINE_ERROR(NewtonDivergence);
RSDE_DEFINE_ERROR(OutOfRegion);
RSDE_DEFINE_ERROR(LeftDomainOfDefinition);
RSDE_DEFINE_ERROR(NoAdmissibleT);
RSDE_DEFINE_ERROR(NoFeasibleTheta1);
RSDE_DEFINE_ERROR(LedgerViolation);
RSDE_DEFINE_ERROR(PropertyViolation);

#undef RSDE_DEFINE_ERROR

// Quintic smoothstep: C^2, monotone, 0 at s<=0 and 1 at s>=1.
template <typename T>
T smoothstep(T s) {
  if (s <= T(0)) return T(0);
  if (s >= T(1)) return T(1);
  return s * s * s * (T(10) + s * (T(-15) + T(6) * s));
}

// Ramp from 0 (at x<=a) to 1 (at x>=b).
template <typename T>
T ramp_up(T x, T a, T b) {
  return smoothstep((x - a) / (b - a));
}

// Ramp from 1 (at x<=a) to 0 (at x>=b).
template <typename T>
T ramp_down(T x, T a, T b) {
  return T(1) - ramp_up(x, a, b);
}

// d/dx of smoothstep((x-a)/(b-a)).
template <typename T>
T ramp_up_derivative(T x, T a, T b) {
  T s = (x - a) / (b - a);
  if (s <= T(0) || s >= T(1)) return T(0);
  return (T(30) * s * s * (T(1) - s) * (T(1) - s)) / (b - a);
}

template <typename T>
int sign_of(T v) {
  return (T(0) < v) - (v < T(0));
}

inline double sqr(double v) { return v * v; }

}  // namespace rsde
