// Reflected Euler schemes on the domain presets, the drift-free transformed
// scheme, occupation ratios against space-time Lp norms, and pathwise
// residuals of the boundary Ito identity.
#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "rsde/base.hpp"
#include "rsde/fields.hpp"
#include "rsde/geometry.hpp"
#include "rsde/ledger.hpp"
#include "rsde/rng.hpp"
#include "rsde/zvonkin.hpp"

namespace rsde {

enum class SchemeKind { projection, penalization, transformed };

const char* scheme_name(SchemeKind kind);

// Discretization recipe for one leg.  `substeps` makes the leg consume
// bridge children of the driving increments (must be a power of two), so two
// legs with different substep counts still share their noise exactly.
// `penalty` of zero means the classical 1/dt.
struct SchemeConfig {
  SchemeKind kind = SchemeKind::projection;
  int substeps = 1;
  double penalty = 0.0;
};

// One simulated path.  `pushes` holds the vector boundary increment per step
// (zero at free steps), `noise` the Brownian increment the step consumed,
// `local_time` the cumulative total variation of the pushes.  A step whose
// excursion would leave the certified collar is bridged into halves before
// giving up, so `times` need not be uniform; `splits` counts those halvings.
struct ReflectedPath {
  std::vector<double> times;
  std::vector<Vec> states;
  std::vector<double> local_time;
  std::vector<Vec> pushes;
  std::vector<Vec> noise;
  SchemeKind scheme = SchemeKind::projection;
  double penalty = 0.0;
  double penalty_slack = 0.0;  // worst distance outside the closure
  int reflections = 0;
  int splits = 0;

  double horizon() const { return times.empty() ? 0.0 : times.back(); }
  int steps() const { return static_cast<int>(times.size()) - 1; }
};

// Euler step, then boundary handling per scheme.  Projection snaps an
// escaped proposal to the nearest boundary point and books the displacement
// as the push; penalization adds an inward restoring drift of strength
// penalty * distance outside, evaluated at the left endpoint, and lets the
// state hover outside within the reported slack.  Steps land on the dyadic
// grid of `path` at `level` (plus the leg's substeps); the horizon must sit
// on that grid.  Throws StepTooLarge when an excursion exceeds half the
// collar even after the bridge halvings.
ReflectedPath simulate_reflected(const SchemeConfig& scheme,
                                 const DriftField& drift,
                                 const DomainSpec& domain, const Vec& x0,
                                 double horizon, BrownianPath& path,
                                 int level = 0);

// Image-side scheme: the state advances through the transform, picks up the
// Jacobian as its diffusion matrix, and carries no drift term at all; the
// proposal is pulled back through the inverse and projected in the base
// domain, which realizes the oblique image reflection because the map is
// conormal at the boundary.  NewtonDivergence from the inverse propagates
// once bridge halvings are exhausted.
ReflectedPath simulate_transformed(const ZvonkinTransform& z, const Vec& x0,
                                   double horizon, BrownianPath& path,
                                   int level = 0);

// Discrete reading of the defining path properties: states inside the
// closure (up to the reported slack for penalization), the cumulative push
// flat away from contact steps, and every push aligned with the inward
// normal at its contact point.
struct PathCheckReport {
  int steps = 0;
  int reflections = 0;
  double max_outside = 0.0;
  double worst_angle = 0.0;  // radians between push and inward normal
  double flat_defect = 0.0;  // worst gap between the |L| increment and |push|
};

PathCheckReport check_reflected_path(const ReflectedPath& path,
                                     const DomainSpec& domain);

// Monte Carlo occupation functional E int |f(t, X_t)| dt against the
// space-time Lp norm of f over the cylinder, p = d + 1 for the presets.
// A zero norm yields a zero ratio.
struct OccupationReport {
  double lhs = 0.0;
  double rhs_norm = 0.0;
  double ratio = 0.0;
  int paths = 0;
};

OccupationReport krylov_check(const std::vector<ReflectedPath>& paths,
                              const std::function<double(double, const Vec&)>& f,
                              const DomainSpec& domain, double p,
                              int norm_base_resolution = 96,
                              int norm_max_resolution = 768);

// Ratio family over axis slabs of shrinking width through the domain
// center.  The fitted coefficient is the largest ratio seen; the spread is
// (max - min) / max across the family.  With a ledger the coefficient is
// stored under occupation_coef.
struct OccupationFamilyReport {
  std::vector<double> widths;
  std::vector<OccupationReport> slabs;
  double occupation_coef = 0.0;
  double spread = 0.0;
};

OccupationFamilyReport krylov_family(const std::vector<ReflectedPath>& paths,
                                     const DomainSpec& domain,
                                     const std::vector<double>& widths = {0.1, 0.05, 0.025},
                                     ConstantsLedger* ledger = nullptr);

// Scalar space-time field with the derivatives the boundary Ito identity
// consumes.
struct SpaceTimeTestFn {
  std::function<double(double, const Vec&)> value;
  std::function<Vec(double, const Vec&)> gradient;
  std::function<double(double, const Vec&)> laplacian;
  std::function<double(double, const Vec&)> time_derivative;

  static SpaceTimeTestFn coordinate(int axis, int dim);
  static SpaceTimeTestFn norm_squared(int dim);
};

// Terminal defect of the identity along one path: value change minus the
// time, martingale, drift, boundary, and half-Laplacian sums.  Interior
// integrands are read at the left endpoint; the boundary integrand is read
// at the midpoint of each push segment, which integrates gradients of
// quadratics exactly.  Requires a path with recorded noise from a direct
// scheme.
struct ItoBreakdown {
  double residual = 0.0;
  double time_term = 0.0;
  double martingale_term = 0.0;
  double drift_term = 0.0;
  double boundary_term = 0.0;
  double laplace_term = 0.0;
};

ItoBreakdown ito_residual(const SpaceTimeTestFn& fn, const ReflectedPath& path,
                          const DriftField& drift);

// Strong self-consistency under refinement: mean over common-noise paths of
// sup_k |X^(level) - X^(level+1)| at the coarse nodes, one entry per rung,
// with the least-squares order of the error against the step.
struct RefinementReport {
  std::vector<double> dts;
  std::vector<double> errors;
  double order = 0.0;
  int paths = 0;
};

RefinementReport refinement_order(const SchemeConfig& scheme,
                                  const DriftField& drift,
                                  const DomainSpec& domain, const Vec& x0,
                                  double horizon, int base_steps, int rungs,
                                  int n_paths, uint64_t seed);

// Exponential martingale weight that converts a driftless path law into the
// drifted one; the integrals are left-endpoint sums over the recorded noise.
double girsanov_weight(const ReflectedPath& path, const DriftField& drift);

// Upper tail of the chi-squared distribution, for occupation histograms.
double chi_squared_pvalue(double statistic, int dof);

}  // namespace rsde
