// Reflecting-direction field on the image side of the transform, the
// parameter flows it drives (trajectory, Jacobian, base-time derivative),
// hyperplane hitting with the implicit-function derivative formulas, and the
// shrink-until-pass sweeps that calibrate the window radii and half-times.
#pragma once

#include <cstdint>
#include <functional>

#include "rsde/ledger.hpp"
#include "rsde/zvonkin.hpp"

namespace rsde {

// Distance from x to the time-t image of the domain boundary: exact for the
// interval, parameter scan plus golden-section refinement for the planar
// presets.
double image_boundary_distance(const ZvonkinTransform& transform, double t,
                               const Vec& x, int boundary_samples = 48);

struct DirectionFieldOptions {
  // Spatial differencing step; zero means twice the grid step of the
  // underlying transform.
  double fd_step = 0.0;
  // Time differencing step; zero means the transform's slab spacing.
  double time_fd_step = 0.0;
  int boundary_samples = 48;
};

// The field n(u^{-1}(t,x)) faded by a cutoff in the image variable: the
// cutoff is 1 on the image and within half the image collar of it, 0 beyond
// three quarters of the collar.  Where the inversion fails the field is zero,
// so flows freeze instead of escaping.  Immutable and safe to share across
// threads.
class DirectionField {
 public:
  DirectionField(const ZvonkinTransform& transform, double image_collar,
                 DirectionFieldOptions opts = {});

  int dimension() const { return transform_->dimension(); }
  double horizon() const { return transform_->horizon(); }
  const ZvonkinTransform& transform() const { return *transform_; }
  double image_collar() const { return image_collar_; }
  double fd_step() const { return fd_step_; }
  double time_fd_step() const { return time_step_; }

  // Cutoff factor alone; 1 everywhere on the image.
  double cutoff(double t, const Vec& x) const;

  // The field itself.  The hint, when given, seeds the inversion and
  // receives the preimage found, which makes tight evaluation clusters
  // cheap; it never changes the value.
  Vec eval(double t, const Vec& x) const;
  Vec eval(double t, const Vec& x, Vec* preimage_hint) const;

  // d field^j / d x_i at (j, i), central differences at fd_step.
  Mat jacobian(double t, const Vec& x) const;
  Mat jacobian(double t, const Vec& x, Vec* preimage_hint) const;

  // d field / d t, central differences at time_fd_step, one-sided windows at
  // the ends of [0, horizon].
  Vec time_derivative(double t, const Vec& x) const;
  Vec time_derivative(double t, const Vec& x, Vec* preimage_hint) const;

  // Forward image of the boundary point at a unit parameter: the anchor
  // points the window sweeps revolve around.
  Vec boundary_anchor(double t, double param) const;

 private:
  const ZvonkinTransform* transform_;
  double image_collar_;
  DirectionFieldOptions opts_;
  double fd_step_ = 0.0;
  double time_step_ = 0.0;
};

struct FlowOptions {
  double step = 1e-3;  // sub-step cap; larger requests throw StepTooLarge
  bool track_jacobian = true;
  bool track_time_derivative = false;
  // Throw LeftDomainOfDefinition when the endpoint sits where the field
  // vanishes; by default the flow just freezes there and reports it.
  bool require_support = false;
};

// State of the parameter flow started at (t, x): the moved point, its
// Jacobian in the starting point, and its derivative in the base time.  At
// r = 0 the state is (x, identity, zero).
struct FlowState {
  double t = 0.0;
  Vec x;
  double r = 0.0;
  Vec y;
  Mat psi;
  Vec lambda;
  bool left_support = false;
};

// Classical fourth-order one-step integration of the coupled system; local
// error O(step^4) on smooth stretches of the field.
FlowState flow(const DirectionField& dir, double t, const Vec& x, double r,
               const FlowOptions& opts = {});

struct HittingOptions {
  double radius = 0.0;  // the root is searched in (-radius, radius)
  double step = 1e-3;
  double tol = 1e-9;
  bool derivatives = true;
};

// Flow parameter at which the trajectory from (t, x) meets the hyperplane
// through z normal to the field at (t0, z), with the implicit-function
// derivatives of that parameter in x and t.
struct HittingRecord {
  double t0 = 0.0;
  Vec z;
  double t = 0.0;
  Vec x;
  double r_hit = 0.0;
  Vec hit_point;
  double defect = 0.0;    // hyperplane residual at r_hit
  double axis_dot = 0.0;  // field at the hit point against the axis
  Vec grad_r_hit;
  double dt_r_hit = 0.0;
};

// Monotone bracket march plus bisection and a Newton polish; the residual
// derivative in r is the field against the axis, which transversality keeps
// away from zero.  Throws NoRootInInterval when no sign change occurs within
// the radius (the caller's window is too large).
HittingRecord hitting_time(const DirectionField& dir, double t, const Vec& x,
                           double t0, const Vec& z,
                           const HittingOptions& opts);

// Tube of half-width 2 * radius * tan(patch_angle) around the axis line
// through z, intersected with the open ball B(z, radius).
bool cone_Cz_contains(const Vec& z, const Vec& axis, double radius,
                      double patch_angle, const Vec& x);

struct TransversalityReport {
  int samples = 0;         // hitting records accepted
  int root_failures = 0;   // windows where no root was found
  double min_dot = 1.0;    // worst field-against-axis product seen
  double threshold = 0.0;  // cos(patch angle) minus the slack
  bool pass() const {
    return samples > 0 && root_failures == 0 && min_dot >= threshold;
  }
};

// Sweeps anchored hitting windows and records the worst transversality
// product.  Reads the patch angle, window half-times, and radii from the
// ledger.
TransversalityReport transversality_check(const DirectionField& dir,
                                          const ConstantsLedger& ledger,
                                          int samples, uint64_t seed = 3001);

struct InteriorReport {
  int requested = 0;
  int selected = 0;  // samples that met the cone and depth entry conditions
  int checks = 0;    // intermediate flow points examined
  int violations = 0;
  bool vacuous() const { return selected == 0; }
  bool pass() const { return violations == 0; }
};

// Along each accepted hitting trajectory, verifies the flow keeps the stated
// clearance from the image complement at 32 intermediate parameters.
InteriorReport interior_preservation_check(const DirectionField& dir,
                                           const ConstantsLedger& ledger,
                                           double eps, int samples,
                                           uint64_t seed = 3002);

// Axis box with an optional membership predicate; an empty predicate keeps
// the whole box.
struct SpatialRegion {
  Vec lo, hi;
  std::function<bool(const Vec&)> contains;
};

struct MeasureChangeResult {
  double lhs = 0.0;  // integral of f composed with the flow over the region
  double rhs = 0.0;  // integral of f over the flowed region
  long cells = 0;
};

// Midpoint lattice at `resolution` cells per axis; the right side changes
// variables back through the flow, so it is the same lattice weighted by
// |det psi|.  The two-sided bound under test is lhs <= 2 * rhs.
MeasureChangeResult measure_change_bound(
    const DirectionField& dir, double t, double r,
    const std::function<double(const Vec&)>& f, const SpatialRegion& region,
    int resolution = 24, const FlowOptions& fopts = {});

struct FlowCalibrationOptions {
  int anchors = 4;          // (t0, z0) pairs per sweep
  int window_pairs = 24;    // field samples per anchor in the window sweep
  int flow_starts = 4;      // trajectories per anchor in the det sweep
  int det_stations = 8;     // checkpoints per trajectory
  int hitting_trials = 6;   // hitting windows per anchor
  int interior_samples = 12;
  int max_shrink = 9;
  double shrink = 0.6;
  double step = 1e-3;
  uint64_t seed = 4001;
};

struct FlowCalibration {
  double window_radius = 0.0;      // ball radius of the direction window
  double window_halftime = 0.0;    // half-time of the direction window
  double flow_radius = 0.0;        // largest dyadic |r| keeping |det psi| >= 1/2
  double hitting_radius = 0.0;     // root interval radius
  double seed_radius = 0.0;        // ball radius of the hitting window
  double hitting_halftime = 0.0;   // half-time of the hitting window
  double interior_halftime = 0.0;  // half-time of the interior window
  double patch_radius = 0.0;       // cone radius of the local patches
};

// Shrink-until-pass sweeps for the window constants, in dependency order:
// direction window, then the det-band flow radius, then the hitting window,
// then the interior window.  Requires the horizon, image cone angle and
// radius, and patch angle on the ledger; writes every calibrated value back
// as fitted.
FlowCalibration calibrate_flow_constants(const DirectionField& dir,
                                         ConstantsLedger& ledger,
                                         const FlowCalibrationOptions& opts = {});

}  // namespace rsde
