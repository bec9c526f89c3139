// Domain presets and the boundary calculus the rest of the code leans on:
// level functions, true signed distance, nearest-boundary projection, the
// inward normal extended off the boundary by a smooth bump, and cones.
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "rsde/base.hpp"

namespace rsde {

class DomainSpec {
 public:
  static DomainSpec interval(double a, double b);
  static DomainSpec disk(double radius);
  static DomainSpec ellipse(double a, double b);
  static DomainSpec from_preset(const std::string& name, const Vec& params);

  int dimension() const { return dim_; }
  const std::string& preset() const { return preset_; }
  const Vec& params() const { return params_; }

  // Level function: positive inside, zero on the boundary.  For interval and
  // disk it coincides with the signed distance; for the ellipse it is the
  // algebraic level 1 - (x/a)^2 - (y/b)^2.
  double level(const Vec& x) const;
  Vec level_gradient(const Vec& x) const;

  bool inside(const Vec& x) const { return level(x) > 0.0; }
  bool inside_closed(const Vec& x, double tol = 0.0) const;

  // Half-width of the collar around the boundary in which nearest-point
  // projection is single-valued (the uniform interior sphere radius).
  double collar_width() const;

  // Axis-aligned bounding box of the closed domain.
  void bounding_box(Vec& lo, Vec& hi) const;

 private:
  DomainSpec() = default;
  int dim_ = 0;
  std::string preset_;
  Vec params_;
};

// True signed distance to the boundary, positive inside.
double signed_distance(const DomainSpec& domain, const Vec& x);

// Nearest boundary point.  Defined on the collar around the boundary; for the
// convex presets it is in fact global (away from the medial axis).
Vec project_to_boundary(const DomainSpec& domain, const Vec& x);

// Unit inward normal at a boundary point.
Vec boundary_normal(const DomainSpec& domain, const Vec& boundary_point);

// Inward normal carried off the boundary: n(project(x)) times a quintic bump
// that is 1 within half the collar width of the boundary and 0 beyond the
// full collar width.  Smooth and globally defined (zero deep inside/outside).
Vec inward_normal_extended(const DomainSpec& domain, const Vec& x);

// Spatial gradient of the extended normal, d(n^i)/dx_j at (i,j).
// Analytic for interval/disk, central differences for the ellipse.
Mat inward_normal_gradient(const DomainSpec& domain, const Vec& x);

double uniform_sphere_radius(const DomainSpec& domain);

struct Cone {
  Vec apex;
  Vec axis;           // unit vector
  double half_angle;  // radians, in (0, pi/2)
  double radius;
};

// Open cone membership: 0 < |y-apex| < radius and the direction to y makes an
// angle below half_angle with the axis.  The apex itself is excluded.
bool cone_contains(const Cone& cone, const Vec& y);

// Largest half-angle (on a grid of `angle_steps` values below pi/2) such that
// at `boundary_samples` probed boundary points both the inward cone lies in
// the closed domain and the outward cone lies in its complement, with the
// paired radius returned through `radius`.  Used to seed the image-side cone
// geometry.  Probing is dense and randomized but deterministic in `seed`.
double probe_cone_angle(const DomainSpec& domain, double& radius,
                        int boundary_samples = 64, int angle_steps = 64,
                        uint64_t seed = 12345);

// Deterministic sample of boundary points (parameter-uniform).
std::vector<Vec> sample_boundary(const DomainSpec& domain, int count);

}  // namespace rsde
