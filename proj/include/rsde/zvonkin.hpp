// The component solve wrapped as an invertible space-time map: Newton
// inverse, distortion and determinant sweeps, cone verification on the image
// domains, and the search for the largest workable horizon.
#pragma once

#include <array>
#include <cstdint>

#include "rsde/fields.hpp"
#include "rsde/geometry.hpp"
#include "rsde/ledger.hpp"
#include "rsde/pde.hpp"

namespace rsde {

struct NewtonOptions {
  int max_iter = 40;
  double tol = 1e-10;
};

// Invertible map x -> u(t,x) built from the solved component field after
// boundary extension.  Immutable once constructed; value, jacobian, and
// invert are const and safe to call from multiple threads.
class ZvonkinTransform {
 public:
  ZvonkinTransform(SpaceTimeVectorField field, DomainSpec domain,
                   NewtonOptions newton = {});

  int dimension() const { return domain_.dimension(); }
  double horizon() const { return horizon_; }
  const DomainSpec& domain() const { return domain_; }
  const SpaceTimeVectorField& field() const { return field_; }
  const NewtonOptions& newton() const { return newton_; }

  Vec value(double t, const Vec& x) const { return field_.value(t, x); }
  Mat jacobian(double t, const Vec& x) const { return field_.jacobian(t, x); }

  enum class InvertStatus { ok, diverged, out_of_region };

  // Newton iteration seeded from the stored node whose value is nearest y.
  // On ok, `preimage` satisfies |u(t, preimage) - y| <= newton.tol and lies
  // in the enlarged domain (within half the collar of the base domain).
  InvertStatus try_invert(double t, const Vec& y, Vec& preimage) const;

  // Same, but seeded from the caller's guess (typically the preimage found at
  // a nearby point); falls back to the scanning seed when the guess stalls.
  InvertStatus try_invert(double t, const Vec& y, const Vec& seed,
                          Vec& preimage) const;

  // Throwing wrapper: NewtonDivergence when the iteration stalls,
  // OutOfRegion when the preimage falls outside the enlarged domain.
  Vec invert(double t, const Vec& y) const;

 private:
  InvertStatus newton_from(double t, const Vec& y, Vec x, Vec& preimage) const;

  SpaceTimeVectorField field_;
  DomainSpec domain_;
  NewtonOptions newton_;
  double horizon_ = 0.0;
  Vec clamp_lo_, clamp_hi_;
};

// Image-side membership, always routed through the inverse so the image
// domain never has to be meshed.
struct TimeDependentDomain {
  const ZvonkinTransform* transform = nullptr;

  // y lies in the image of the open base domain at time t.
  bool membership(double t, const Vec& y) const;

  // y lies in the inner image region: points whose distance to the image
  // complement exceeds `clearance`.  Pulled back through the inverse, the
  // distance is bounded below via the contraction floor, so the test is
  // conservative.
  bool inner_region(double t, const Vec& y, double clearance,
                    double contraction_floor) const;
};

struct BilipschitzEstimate {
  double lower = 0.0;
  double upper = 0.0;
};

// Min/max of |u(t,x) - u(t,y)| / |x - y| over random pairs in the enlarged
// domain and times in [0, horizon].  When a ledger is supplied the bounds are
// recorded, together with the image collar if the collar itself is on file.
BilipschitzEstimate estimate_bilipschitz(const ZvonkinTransform& z,
                                         int samples, uint64_t seed = 2001,
                                         ConstantsLedger* ledger = nullptr);

// Smallest c with ratio >= 1 - c * horizon^exponent over random pairs closer
// than half the collar, inflated by 5% so later sweeps with fresh samples
// stay inside the fitted bound.  Zero when no contraction is observed.
double close_pair_coefficient(const ZvonkinTransform& z, double time_exponent,
                              int samples, uint64_t seed = 2002);

struct DetBandReport {
  double band_lo = 0.45;
  double band_hi = 2.05;
  double min_det = 0.0;
  double max_det = 0.0;
  long violations = 0;
  long samples = 0;
  bool pass() const { return violations == 0; }
};

// Determinant of the interpolated Jacobian at random (t,x) in the enlarged
// domain; counts exits from the tolerance band around [1/2, 2].  Out-of-band
// determinants are reported, never thrown.
DetBandReport jacobian_det_report(const ZvonkinTransform& z, int samples,
                                  uint64_t seed = 2003);

struct ConeReport {
  long trials = 0;
  long exterior_violations = 0;
  long interior_violations = 0;
  // Worst signed clearance seen on either side; positive means the probe
  // cleared the boundary of the base domain after pullback.
  double worst_exterior_margin = 0.0;
  double worst_interior_margin = 0.0;
  long violations() const { return exterior_violations + interior_violations; }
  bool pass() const { return trials > 0 && violations() == 0; }
};

// Probes cones with apex at the image of a boundary point and axis along the
// boundary normal there: the outward cone must pull back outside the closed
// domain, the inward cone inside the open one.  Probe membership is decided
// through the inverse; an inverse failure counts as a violation.
ConeReport verify_cone_conditions(const ZvonkinTransform& z, double cone_angle,
                                  double cone_radius, int trials,
                                  uint64_t seed = 2004);

// The four closed-form inequalities a patch angle must satisfy at a given
// image cone angle; margins are the slack of each (the first two are allowed
// to touch zero, the last two must stay strictly positive).
std::array<double, 4> patch_angle_margins(double patch_angle,
                                          double image_angle);
bool patch_angle_feasible(double patch_angle, double image_angle);

// Largest feasible patch angle on a 1e5-point scan of
// (0, min(image_angle / 2, atan(1/24))).  Throws NoFeasibleTheta1 if the scan
// reaches its floor of 1e-6 without a feasible point.
double solve_theta1(double image_angle);

struct TransformBuildOptions {
  double dt = 1.0 / 256.0;
  double h = 1.0 / 32.0;
  int angular_nodes = 64;
  int output_time_stride = 0;
  NewtonOptions newton;
};

// Solve the component system at the given horizon, extend it across the
// boundary, and wrap it as a transform.
ZvonkinTransform build_transform(const DomainSpec& dom, const DriftField& drift,
                                 double horizon,
                                 const TransformBuildOptions& opts = {});

struct HorizonSearchOptions {
  TransformBuildOptions build;
  int det_samples = 2000;
  int pair_samples = 1500;
  int cone_trials = 1200;
  uint64_t seed = 77;
};

// Largest dyadic horizon T = 2^-k, k in 0..10, at which the determinant band
// holds and the cone verifier passes.  Writes the fitted constants plus the
// selected horizon, image cone angle, and image cone radius to the ledger.
// Throws NoAdmissibleT when even the smallest candidate fails.
double select_T1(const DomainSpec& dom, const DriftField& drift,
                 ConstantsLedger& ledger,
                 const HorizonSearchOptions& opts = {});

}  // namespace rsde
