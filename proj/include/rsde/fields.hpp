#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "rsde/base.hpp"
#include "rsde/geometry.hpp"

namespace rsde {

// Bounded measurable drift. `eval` must be defined for every (t, x) that is
// ever queried; presets return 0 at points where a direction would be
// ill-defined (e.g. the center of radial_jump).
struct DriftField {
  std::function<Vec(double, const Vec&)> eval;
  double bound = 0.0;
  int dimension = 1;
  bool time_independent = false;
  std::string preset;  // empty for ad-hoc fields

  Vec operator()(double t, const Vec& x) const { return eval(t, x); }

  static DriftField zero(int dim);
  static DriftField constant(const Vec& c);
  static DriftField sign1d(double bound, double mid);
  // Alternating-sign field on a square lattice anchored at the origin,
  // pointing along (1,1)/sqrt(2); |value| equals bound in every cell.
  static DriftField checkerboard2d(double bound, double cell);
  // Radial field flipping sign at |x| = radius/2; zero at the origin.
  static DriftField radial_jump(double bound, double radius);
  static DriftField from_preset(const std::string& name,
                                const std::vector<double>& params, int dim);
};

// Tensor-product bump kernel at dyadic scale 2^-level.  The 1-D profile is
// exp(-1/(1-s^2)) on (-1,1), normalized once by quadrature.
class MollifierKernel {
 public:
  MollifierKernel(int space_dim, int level);

  int space_dimension() const { return dim_; }
  int level() const { return level_; }
  double scale() const { return scale_; }

  // Normalized 1-D profile on (-1,1); zero outside.
  double profile1d(double s) const;
  // Rescaled per-axis factor at the kernel scale (integrates to 1).
  double factor(double z) const;
  // Full density over the d+1 space-time axes.
  double density(double t, const Vec& y) const;

  // Independent quadrature check of the unit-mass normalization.
  double mass(int panels = 96) const;

 private:
  int dim_;
  int level_;
  double scale_;
};

// Convolution of b with the kernel, evaluated on demand by adaptive
// tensor-product quadrature over the kernel support.  The quadrature weights
// are positive and the result is normalized by the quadrature mass of the
// kernel itself, so the sup bound contracts exactly and constants are
// reproduced to roundoff.  Target accuracy is 1e-6 * bound for smooth
// integrands; for discontinuous drifts the adaptive refinement guarantees
// 1e-3 * bound before giving up with QuadratureFailure.
DriftField mollify(const DriftField& b, const MollifierKernel& kernel);

enum class Interp { linear, cubic };

// Vector field on a uniform tensor grid in space, linear in time between
// slabs.  Cubic mode uses a local 4-point stencil per axis with quadratic
// edge extrapolation, so grid values are reproduced exactly and quadratics
// are interpolated exactly.
class SpaceTimeVectorField {
 public:
  SpaceTimeVectorField(std::vector<double> time_nodes,
                       std::vector<std::vector<double>> axis_nodes,
                       int out_dim, Interp interp);

  int in_dimension() const { return static_cast<int>(axes_.size()); }
  int out_dimension() const { return out_dim_; }
  int num_times() const { return static_cast<int>(times_.size()); }
  Interp interpolation() const { return interp_; }
  const std::vector<double>& times() const { return times_; }
  const std::vector<double>& axis(int a) const { return axes_[a]; }
  double axis_step(int a) const { return steps_[a]; }
  std::int64_t nodes_per_slab() const { return nodes_per_slab_; }

  // Row r of the slab matrix holds the value at flat node r (C order, axis 0
  // slowest); columns are output components.
  Mat& slab(int time_index) { return values_[time_index]; }
  const Mat& slab(int time_index) const { return values_[time_index]; }

  Vec node_point(std::int64_t flat) const;

  void fill(const std::function<Vec(double, const Vec&)>& f);

  Vec value(double t, const Vec& x) const;
  // Central difference of the interpolant at the grid step per axis.
  Mat jacobian(double t, const Vec& x) const;
  Vec time_derivative(double t, const Vec& x) const;

  // Flat binary layout (header: dims and grids, payload: row-major values)
  // plus a JSON sidecar at path + ".json" describing the axes.
  void save(const std::string& path) const;
  static SpaceTimeVectorField load(const std::string& path);

 private:
  struct AxisWeights {
    int base = 0;
    int count = 0;
    double w[4] = {0, 0, 0, 0};
  };
  AxisWeights axis_weights(int a, double x) const;
  Vec value_on_slab(int time_index, const Vec& x) const;

  std::vector<double> times_;
  std::vector<std::vector<double>> axes_;
  std::vector<double> steps_;
  int out_dim_;
  Interp interp_;
  std::int64_t nodes_per_slab_;
  std::vector<Mat> values_;
};

// Time-dependent region over a bounding box; `contains` may be empty, in
// which case the whole box counts.
struct SpaceTimeRegion {
  double t0 = 0.0;
  double t1 = 1.0;
  Vec lo, hi;
  std::function<bool(double, const Vec&)> contains;

  static SpaceTimeRegion cylinder(const DomainSpec& dom, double t0, double t1);
};

// Midpoint tensor quadrature of |f|^p over the region, then the p-th root.
// Resolution doubles from `base_resolution` until two successive levels agree
// to 5e-4 relative or `max_resolution` is reached; the finest value is
// returned.  Setting base == max evaluates a single level.
double norm_Lp_spacetime(const std::function<double(double, const Vec&)>& f,
                         double p, const SpaceTimeRegion& region,
                         int base_resolution = 48, int max_resolution = 384);

}  // namespace rsde
