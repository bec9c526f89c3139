#pragma once

#include <functional>

#include "rsde/base.hpp"
#include "rsde/fields.hpp"
#include "rsde/geometry.hpp"

namespace rsde {

// Backward Neumann problem data.  Internally the march runs forward in
// tau = T - t, so slab 0 of the returned field is t = 0 and the last slab is
// the terminal identity.
struct ParabolicProblem {
  DomainSpec domain = DomainSpec::interval(0.0, 1.0);
  DriftField drift = DriftField::zero(1);
  double horizon = 0.25;  // T, at most 1
  double dt = 1.0 / 256.0;
  double h = 1.0 / 32.0;      // node spacing (radial spacing on the disk)
  int angular_nodes = 64;     // disk only; even, at least 8
  int output_time_stride = 0;  // 0 = choose automatically (~129 slabs)

  void validate() const;
};

// Scalar Neumann problem: terminal data at t = T and normal-derivative data
// on the boundary (time-independent).
struct ScalarNeumannData {
  std::function<double(const Vec&)> terminal;
  std::function<double(const Vec&)> neumann;
};

// Component-wise solution of du/dt + (1/2) Lap u + b . grad u = 0 backward
// from u(T,x) = x with boundary data du^c/dn = n^c.  Interval: full
// Crank-Nicolson on a uniform node grid (unconditional).  Disk: staggered
// polar rings r_j = (j+1/2) dr, spectral in angle, Crank-Nicolson diffusion
// per angular mode and explicit advection under dt <= h / (2 bound).
SpaceTimeVectorField solve_neumann_terminal(const ParabolicProblem& p);

// Same schemes for a single scalar unknown with caller-supplied data.
SpaceTimeVectorField solve_scalar_neumann(const ParabolicProblem& p,
                                          const ScalarNeumannData& data);

// Reflection extension 2 u(t, proj(x)) - u(t, 2 proj(x) - x) for x outside
// the closed domain up to margin_fraction of the collar width; beyond that
// (box corners only) the values blend into the identity.
SpaceTimeVectorField extend_across_boundary(const SpaceTimeVectorField& u,
                                            const DomainSpec& dom,
                                            double margin_fraction = 0.95);

struct HolderFit {
  double coefficient = 0.0;  // modulus bound: coefficient * |t-s|^exponent
  double exponent = 1.0;
};

// Fits the time modulus max_x(|u(t,.)-u(s,.)| + |Du(t,.)-Du(s,.)|) against
// |t-s| in log-log; the coefficient is the sample envelope, so the bound
// holds at every sampled pair.  Time-constant fields yield {0, 1}.
HolderFit holder_estimate(const SpaceTimeVectorField& u,
                          int gradient_samples = 128);

}  // namespace rsde
