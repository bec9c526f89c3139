#pragma once

#include <cstdint>
#include <vector>

#include "rsde/flows.hpp"
#include "rsde/ledger.hpp"

namespace rsde {

// C^2 clamp: 1 below 1/2, identity above 2, nondecreasing, never below the
// identity.  The middle piece is t + (1-s)^3 (1 - 3 s^2 + 2.5 s^3) / 2 in
// s = (t - 1/2) / 1.5, which keeps the gap nonnegative by construction.
double gauge_clamp(double t);
double gauge_clamp_derivative(double t);

// Directional gauge on pairs (rho, xi): |rho|^2 * profile(unit(rho) . xi).
// The profile is 1 - s^2 on the dead band [-band, band] (band = cos of the
// image cone angle) where the radial derivative along xi vanishes
// identically, continued by 1 - s^2 + (|s| - band)^3 outside.
struct PairGauge {
  double image_angle = 0.0;
  double band = 0.0;
  double floor_coef = 0.0;  // fitted lower bound: value >= floor_coef |rho|^2
  double deriv_coef = 0.0;  // fitted bound on first and second derivatives

  double profile(double s) const;
  double profile_derivative(double s) const;
  double value(const Vec& rho, const Vec& xi) const;
  Vec grad_rho(const Vec& rho, const Vec& xi) const;
  Vec grad_xi(const Vec& rho, const Vec& xi) const;
};

struct GaugeReport {
  int samples = 0;
  double floor_coef = 0.0;
  double deriv_coef = 0.0;
  double worst_band_residual = 0.0;  // max |grad_rho . xi| / |rho| on the band
  double worst_sign_margin = 0.0;    // min slack of the one-sided conditions
};

// Samples the six gauge properties (value floor, dead band, one-sided radial
// monotonicity at |xi| = 1, first and second derivative growth) and fits the
// two coefficients.  Throws PropertyViolation on any sign failure; the
// candidate formula is never accepted silently.
GaugeReport verify_gauge(PairGauge& gauge, int samples = 100000,
                         uint64_t seed = 9001);

// Builds the gauge for the given image cone angle and runs the verifier.
PairGauge make_pair_gauge(double image_angle, int samples = 100000,
                          uint64_t seed = 9001);

// Pair test function: eps * clamp(gauge((u(t,x) - u(t,y)) / eps, n(x))),
// with n the extended inward normal.  Equal arguments give exactly eps.
struct PairFunction {
  const ZvonkinTransform* transform = nullptr;
  PairGauge gauge;
  double eps = 0.1;

  double omega(const Vec& rho, const Vec& xi) const;
  double value(double t, const Vec& x, const Vec& y) const;
  Vec normal(const Vec& x) const;
};

struct PairBoundsReport {
  int samples = 0;
  double lower_coef = 0.0;  // value >= lower_coef |x-y|^2 / eps
  double upper_coef = 0.0;  // value <= eps + upper_coef |x-y|^2 / eps
  int violations = 0;       // fresh-sample failures of the fitted sandwich
  double worst_margin = 0.0;
};

// Fits the sandwich coefficients on random pairs, re-checks them on a fresh
// draw, and writes pair_upper_coef, pair_lower_coef, and their ratio
// (boundary_weight) to the ledger.
PairBoundsReport fit_pair_bounds(const PairFunction& pf,
                                 ConstantsLedger& ledger, int samples = 10000,
                                 uint64_t seed = 9101);

struct BoundaryDerivativeReport {
  int samples = 0;
  int violations = 0;
  double max_ratio = 0.0;     // max derivative * eps / |x-y|^2 observed
  double worst_excess = 0.0;  // most positive violation beyond tolerance
};

// Directional derivative of the pair function along the inward normal at a
// boundary argument, against upper_coef |x-y|^2 / eps + 1e-6.  A
// nonpositive upper_coef means fit mode: the max observed ratio is reported
// instead of enforced.  Checks both slots (x on the boundary, then y).
BoundaryDerivativeReport boundary_derivative_checks(const PairFunction& pf,
                                                    double upper_coef,
                                                    int samples = 1000,
                                                    uint64_t seed = 9102);

// Radial C^2 bump on the hitting hyperplane: (1 - q^2)^3 in q = |p - center|
// over the support radius; 1 at the center, vanishing with two derivatives
// at the edge.
struct BumpProfile {
  Vec center;
  double radius = 0.0;

  double value(const Vec& p) const;
  Vec gradient(const Vec& p) const;
};

// One characteristic patch: the bump carried back along the reflection flow,
// h(t,x) = bump(hit point of x on the hyperplane through core).
struct BoundaryPatch {
  double t0 = 0.0;
  Vec anchor;        // boundary image point the patch is centered on
  Vec core;          // half a patch depth inside, along the flow
  Vec axis;          // field direction at the core (hyperplane normal)
  Vec pull;          // field direction at the anchor
  double radius = 0.0;   // patch ball radius about the core
  double angle = 0.0;    // patch cone half-angle
  double hit_tol = 1e-12;
  BumpProfile bump;

  double value(const DirectionField& dir, double t, const Vec& x) const;
};

// Builds the patch frame at (t0, boundary param): core by flowing half a
// radius inward, bump support radius * tan(angle) on the hyperplane.
BoundaryPatch local_patch(const DirectionField& dir, double t0, double param,
                          double radius, double angle);

struct PatchSupportReport {
  int samples = 0;
  int positive = 0;    // samples with a nonzero patch value
  int violations = 0;  // positive samples outside the (slackened) cone
};

// Samples the patch ball and counts support points escaping the patch cone.
PatchSupportReport patch_support_check(const BoundaryPatch& patch,
                                       const DirectionField& dir, double t,
                                       int samples = 10000,
                                       uint64_t seed = 9301);

// Core-ball fraction for the patch annulus: the largest-margin kappa in
// (1/2, 1) whose two side conditions clear the image cone angle.
struct CoreFraction {
  double kappa = 0.0;
  double exterior_margin = 0.0;
  double interior_margin = 0.0;
};
CoreFraction solve_kappa(double image_angle, double patch_angle);

struct BarrierOptions {
  double patch_radius = 0.0;    // 0: ledger patch_radius
  double window_halftime = 0.0; // 0: half the ledger interior halftime
  double core_fraction = 0.0;   // 0: solve_kappa from the ledger angles
  double t_lo = 0.0;
  double t_hi = -1.0;           // < 0: ledger horizon
  double param_lo = 0.0;
  double param_hi = 1.0;
  int max_patches = 10000;
  double rescale_margin = 0.12;
  int annulus_samples = 48;
  double hit_tol = 1e-9;  // cap; the build tightens it to the needle scale
};

// Sum of cover patches h * chi1 * chi2, rescaled so the sampled boundary
// slope along the field stays at least one.
class BoundaryBarrier {
 public:
  double eval(double t, const Vec& x) const;
  Vec gradient(double t, const Vec& x) const;  // central differences
  double slope(double t, const Vec& x) const;  // difference along the field

  int patch_count() const { return static_cast<int>(patches_.size()); }
  double scale() const { return scale_; }
  double grid_min_slope() const { return grid_min_; }
  const BarrierOptions& options() const { return opts_; }

 private:
  struct Patch {
    BoundaryPatch section;
    double offset = 0.0;  // chi2 constant
  };

  friend BoundaryBarrier build_boundary_barrier(const DirectionField&,
                                                ConstantsLedger&,
                                                const BarrierOptions&);

  double patch_chi1(const Patch& p, double t, const Vec& x) const;
  double patch_term(const Patch& p, double t, const Vec& x) const;
  double slope_estimate(double t, const Vec& x) const;

  const DirectionField* dir_ = nullptr;
  std::vector<Patch> patches_;
  BarrierOptions opts_;
  double kappa_ = 0.0;
  double scale_ = 1.0;
  double grid_min_ = 0.0;
  double fd_step_ = 0.0;
};

// Lays a patch lattice over the requested boundary window (needle spacing in
// space, half a window in time), checks the per-patch annulus separation and
// cover completeness, and rescales.  Writes the window halftime and core
// fraction to the ledger when it selects them.  Throws CoverFailure when the
// lattice would exceed max_patches or a cover sample is missed.
BoundaryBarrier build_boundary_barrier(const DirectionField& dir,
                                       ConstantsLedger& ledger,
                                       const BarrierOptions& opts = {});

struct BarrierReport {
  int samples = 0;
  double min_slope = 0.0;
  int violations = 0;  // held-out boundary samples with slope < 1 - tol
};

// Held-out check of the boundary slope on fresh draws from the barrier's
// own window.
BarrierReport verify_barrier(const BoundaryBarrier& barrier,
                             const DirectionField& dir, int samples = 1000,
                             uint64_t seed = 9201, double tol = 1e-3);

}  // namespace rsde
