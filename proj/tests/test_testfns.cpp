#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <limits>

#include "rsde/geometry.hpp"
#include "rsde/ledger.hpp"
#include "rsde/rng.hpp"
#include "rsde/testfns.hpp"
#include "rsde/zvonkin.hpp"

using namespace rsde;

namespace {

Vec make_vec(std::initializer_list<double> v) {
  Vec x(static_cast<int>(v.size()));
  int i = 0;
  for (double s : v) x[i++] = s;
  return x;
}

const ZvonkinTransform& identity_interval() {
  static ZvonkinTransform z = [] {
    TransformBuildOptions o;
    o.dt = 1.0 / 128.0;
    o.h = 1.0 / 32.0;
    return build_transform(DomainSpec::interval(0.0, 1.0),
                           DriftField::zero(1), 0.5, o);
  }();
  return z;
}

const ZvonkinTransform& identity_disk() {
  static ZvonkinTransform z = [] {
    TransformBuildOptions o;
    o.dt = 1.0 / 64.0;
    o.h = 1.0 / 16.0;
    o.angular_nodes = 48;
    return build_transform(DomainSpec::disk(1.0), DriftField::zero(2), 1.0,
                           o);
  }();
  return z;
}

}  // namespace

TEST_CASE("the gauge clamp stays above the identity and joins smoothly") {
  CHECK(gauge_clamp(0.3) == 1.0);
  CHECK(gauge_clamp(0.5) == 1.0);
  CHECK(gauge_clamp(2.0) == 2.0);
  CHECK(gauge_clamp(2.5) == 2.5);
  CHECK(gauge_clamp_derivative(0.3) == 0.0);
  CHECK(gauge_clamp_derivative(0.5) == 0.0);
  CHECK(gauge_clamp_derivative(2.0) == 1.0);
  CHECK(gauge_clamp_derivative(2.4) == 1.0);

  double prev = gauge_clamp(0.0);
  for (int i = 0; i <= 3000; ++i) {
    double t = 3.0 * i / 3000.0;
    double v = gauge_clamp(t);
    CHECK(v >= 1.0 - 1e-12);
    CHECK(v >= t - 1e-12);
    CHECK(v <= std::max(1.0, t) + 0.5 + 1e-12);
    CHECK(v >= prev - 1e-12);
    prev = v;

    double h = 1e-6;
    double fd = (gauge_clamp(t + h) - gauge_clamp(t - h)) / (2.0 * h);
    CHECK(std::abs(gauge_clamp_derivative(t) - fd) < 2e-5);
  }

  // Curvature dies out on both sides of each join.
  auto second = [](double t, double h) {
    return (gauge_clamp(t + h) - 2.0 * gauge_clamp(t) + gauge_clamp(t - h)) /
           (h * h);
  };
  CHECK(std::abs(second(0.5 - 2e-4, 1e-4)) < 1e-3);
  CHECK(std::abs(second(0.5 + 2e-4, 1e-4)) < 0.05);
  CHECK(std::abs(second(2.0 - 2e-4, 1e-4)) < 0.05);
  CHECK(std::abs(second(2.0 + 2e-4, 1e-4)) < 1e-3);
}

TEST_CASE("the pair gauge holds its floor, band, and growth") {
  PairGauge g = make_pair_gauge(kPi / 3.0, 20000, 101);
  CHECK(g.band == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(g.floor_coef == doctest::Approx(0.125).epsilon(1e-12));

  Vec zero = Vec::Zero(2);
  CHECK(g.value(zero, zero) == 0.0);

  Vec rho = make_vec({2.0, 0.0});
  Vec xi = make_vec({0.0, 1.0});
  CHECK(g.value(rho, xi) == 4.0);
  CHECK(std::abs(g.grad_rho(rho, xi).dot(xi)) < 1e-12);

  // Inside the dead band the radial slope vanishes identically at |xi| = 1.
  Vec xi2 = make_vec({0.3, std::sqrt(0.91)});
  CHECK(std::abs(g.grad_rho(rho, xi2).dot(xi2)) <= 1e-12 * rho.norm());

  for (double a : {kPi / 6.0, kPi / 4.0, 1.2}) {
    PairGauge gg;
    gg.image_angle = a;
    gg.band = std::cos(a);
    GaugeReport r = verify_gauge(gg, 20000, 707);
    CHECK(r.samples == 20000);
    CHECK(r.worst_band_residual <= 1e-12);
    CHECK(r.worst_sign_margin >= -1e-12);
    CHECK(r.floor_coef > 0.0);
    CHECK(r.deriv_coef >= 2.0);
    CHECK(gg.floor_coef == r.floor_coef);
  }

  // A band reaching the poles kills the profile floor.
  PairGauge bad;
  bad.image_angle = 0.0;
  bad.band = 1.0;
  CHECK_THROWS_AS(verify_gauge(bad, 1000, 5), PropertyViolation);
}

TEST_CASE("kappa solve balances the annulus margins") {
  double theta0 = kPi / 3.0;
  double theta1 = solve_theta1(theta0);
  CoreFraction cf = solve_kappa(theta0, theta1);
  CHECK(cf.kappa > 0.5);
  CHECK(cf.kappa < 1.0);
  CHECK(cf.exterior_margin > 0.0);
  CHECK(cf.interior_margin > 0.0);

  double tn = std::tan(theta1);
  double ct = std::cos(theta1);
  double c0 = std::cos(theta0);
  auto ext = [&](double k) {
    double root = std::sqrt(k * k - 4.0 * tn * tn) * ct;
    return (root - 2.0 * tn - 0.5) /
               std::sqrt(1.25 + 4.0 * tn * tn + 2.0 * tn - root) -
           c0;
  };
  auto inr = [&](double k) {
    double root = std::sqrt(k * k - 4.0 * tn * tn) * ct;
    return (root - 2.0 * tn + 0.5 * ct) /
               std::sqrt(2.25 + 4.0 * tn * tn + 2.0 * tn) -
           c0;
  };

  // At a full core the slack degenerates to the plain patch-angle margins.
  std::array<double, 4> m = patch_angle_margins(theta1, theta0);
  CHECK(ext(1.0) == doctest::Approx(m[2]).epsilon(1e-12));
  CHECK(inr(1.0) == doctest::Approx(m[3]).epsilon(1e-12));

  CHECK(cf.exterior_margin == doctest::Approx(ext(cf.kappa)).epsilon(1e-12));
  CHECK(cf.interior_margin == doctest::Approx(inr(cf.kappa)).epsilon(1e-12));

  // Both margins grow with the fraction; halfway below the solved fraction
  // feasibility is already lost.
  CHECK(ext(1.0) > cf.exterior_margin);
  CHECK(inr(1.0) > cf.interior_margin);
  double k_min = 2.0 * cf.kappa - 1.0;
  if (k_min > 0.52) {
    double below = k_min - 0.01;
    CHECK(!(ext(below) > 0.0 && inr(below) > 0.0));
  }

  CHECK_THROWS_AS(solve_kappa(theta0, theta0), ConfigError);
  // A patch angle this blunt never clears the exterior inequality: the
  // numerator at a full core is already negative.
  CHECK_THROWS_AS(solve_kappa(kPi / 4.0, 0.35), HypothesisViolated);
}

TEST_CASE("pair function is exact on the diagonal and in the linear regime") {
  PairFunction pf;
  pf.transform = &identity_interval();
  pf.gauge = make_pair_gauge(kPi / 3.0, 5000, 33);
  pf.eps = 0.05;

  Vec x = make_vec({0.3});
  CHECK(pf.value(0.2, x, x) == pf.eps);

  // Far pairs land beyond the clamp knee, where the value is eps times the
  // raw gauge with no adjustment at all.
  Vec y = make_vec({0.85});
  Vec rho = (pf.transform->value(0.2, x) - pf.transform->value(0.2, y)) /
            pf.eps;
  double gval = pf.gauge.value(rho, pf.normal(x));
  CHECK(gval >= 2.0);
  CHECK(pf.value(0.2, x, y) == pf.eps * gval);
}

TEST_CASE("pair sandwich fits and holds on fresh draws") {
  PairFunction pf;
  pf.transform = &identity_disk();
  pf.gauge = make_pair_gauge(kPi / 3.0, 5000, 33);
  pf.eps = 0.1;

  ConstantsLedger ledger;
  PairBoundsReport rep = fit_pair_bounds(pf, ledger, 3000, 4242);
  CHECK(rep.samples == 3000);
  CHECK(rep.violations == 0);
  CHECK(rep.worst_margin >= -1e-12);
  CHECK(rep.lower_coef > 0.0);
  CHECK(rep.upper_coef > rep.lower_coef);

  // The identity map pins the lower ratio against the gauge floor.
  CHECK(rep.lower_coef <= pf.gauge.floor_coef * 1.01);
  CHECK(rep.lower_coef >= pf.gauge.floor_coef * 0.9);

  CHECK(ledger.require(keys::pair_lower_coef) == rep.lower_coef);
  CHECK(ledger.require(keys::pair_upper_coef) == rep.upper_coef);
  CHECK(ledger.require(keys::boundary_weight) ==
        doctest::Approx(rep.upper_coef / rep.lower_coef).epsilon(1e-12));
  CHECK(ledger.require(keys::gauge_lower) == pf.gauge.floor_coef);
  CHECK(ledger.require(keys::gauge_derivative_coef) == pf.gauge.deriv_coef);
}

TEST_CASE("boundary derivative stays under the pair bound") {
  PairFunction pf;
  pf.transform = &identity_disk();
  pf.gauge = make_pair_gauge(kPi / 3.0, 5000, 33);
  pf.eps = 0.1;

  ConstantsLedger ledger;
  fit_pair_bounds(pf, ledger, 2000, 99);
  double upper = ledger.require(keys::pair_upper_coef);

  BoundaryDerivativeReport rep =
      boundary_derivative_checks(pf, upper, 600, 1234);
  CHECK(rep.samples == 600);
  CHECK(rep.violations == 0);
  CHECK(rep.worst_excess <= 0.0);
  CHECK(rep.max_ratio > 0.0);

  // Fit mode never counts violations, it only reports the family.
  BoundaryDerivativeReport fit = boundary_derivative_checks(pf, 0.0, 200, 77);
  CHECK(fit.violations == 0);
  CHECK(fit.max_ratio > 0.0);

  // A coincident pair stays on the flat part of the clamp no matter how the
  // boundary slot is nudged.
  const DomainSpec& dom = pf.transform->domain();
  Vec b = sample_boundary(dom, 8)[3];
  Vec n = boundary_normal(dom, b);
  double h = 1e-5 * dom.collar_width();
  CHECK(pf.value(0.4, b + h * n, b) == pf.eps);
  CHECK(pf.value(0.4, b - h * n, b) == pf.eps);
}

TEST_CASE("local patch pins its center and rides the flow") {
  DirectionField dir(identity_disk(), 0.5);
  double theta1 = solve_theta1(kPi / 3.0);
  double d5 = 0.005;
  BoundaryPatch patch = local_patch(dir, 0.5, 0.2, d5, theta1);

  CHECK(patch.radius == d5);
  CHECK(patch.bump.radius ==
        doctest::Approx(d5 * std::tan(theta1)).epsilon(1e-12));
  CHECK((patch.core - patch.anchor).norm() ==
        doctest::Approx(0.5 * d5).epsilon(1e-3));
  CHECK(patch.axis.dot(patch.pull) > 0.999);

  CHECK(patch.value(dir, 0.5, patch.anchor) == doctest::Approx(1.0).epsilon(1e-6));
  CHECK(patch.value(dir, 0.5, patch.core) == doctest::Approx(1.0).epsilon(1e-9));

  Vec perp = make_vec({-patch.axis[1], patch.axis[0]});
  CHECK(patch.value(dir, 0.5, Vec(patch.core + 0.5 * d5 * perp)) == 0.0);

  // The patch value rides its own flow lines: the directional derivative
  // along the field vanishes wherever the bump is informative.
  UniformStream rng(4040, 7);
  double step = patch.bump.radius / 100.0;
  int informative = 0;
  for (int i = 0; i < 40; ++i) {
    double along = rng.range(-0.002, 0.004);
    double across = rng.range(-0.7, 0.7) * patch.bump.radius;
    Vec p = patch.core + along * patch.axis + across * perp;
    double v = patch.value(dir, 0.5, p);
    if (!(v > 0.05 && v < 0.95)) continue;
    ++informative;
    Vec grad(2);
    for (int a = 0; a < 2; ++a) {
      Vec pp = p, pm = p;
      pp[a] += step;
      pm[a] -= step;
      grad[a] = (patch.value(dir, 0.5, pp) - patch.value(dir, 0.5, pm)) /
                (2.0 * step);
    }
    Vec gam = dir.eval(0.5, p);
    CHECK(std::abs(grad.dot(gam)) <= 1e-3 * grad.norm() + 1e-12);
  }
  CHECK(informative >= 12);

  PatchSupportReport sup = patch_support_check(patch, dir, 0.5, 10000, 31);
  CHECK(sup.samples == 10000);
  CHECK(sup.violations == 0);
  CHECK(sup.positive > 150);

  CHECK_THROWS_AS(local_patch(dir, 0.5, 0.2, -1.0, theta1), ConfigError);
  CHECK_THROWS_AS(local_patch(dir, 0.5, 0.2, d5, kPi / 3.0), ConfigError);
}

TEST_CASE("interval barrier covers the window and holds its slope") {
  DirectionField dir(identity_interval(), 0.25);
  auto fill = [](ConstantsLedger& led) {
    led.set(keys::image_cone_angle, kPi / 3.0, Provenance::assumed);
    led.set(keys::patch_cone_angle, solve_theta1(kPi / 3.0),
            Provenance::verified);
    led.set(keys::patch_radius, 0.1, Provenance::assumed);
    led.set(keys::interior_window_halftime, 0.5, Provenance::assumed);
  };

  ConstantsLedger ledger;
  fill(ledger);
  BoundaryBarrier bar = build_boundary_barrier(dir, ledger);
  CHECK(bar.patch_count() == 4);
  CHECK(bar.grid_min_slope() > 0.0);
  CHECK(ledger.require(keys::cover_window_halftime) ==
        doctest::Approx(0.25).epsilon(1e-12));
  CHECK(ledger.require(keys::patch_core_fraction) > 0.5);

  BarrierReport rep = verify_barrier(bar, dir, 400, 555);
  CHECK(rep.violations == 0);
  CHECK(rep.min_slope >= 1.0 - 1e-3);

  // Nonnegative everywhere, and dead in the bulk.
  UniformStream rng(808, 0);
  for (int i = 0; i < 200; ++i) {
    double t = rng.range(0.0, 0.5);
    Vec x = make_vec({rng.range(-0.05, 1.05)});
    CHECK(bar.eval(t, x) >= 0.0);
  }
  CHECK(bar.eval(0.3, make_vec({0.5})) == 0.0);
  CHECK(bar.gradient(0.3, make_vec({0.5})).norm() == 0.0);

  // Same inputs, same barrier, bit for bit.
  ConstantsLedger ledger2;
  fill(ledger2);
  BoundaryBarrier bar2 = build_boundary_barrier(dir, ledger2);
  CHECK(bar2.patch_count() == bar.patch_count());
  CHECK(bar2.scale() == bar.scale());
  Vec probe = make_vec({0.02});
  CHECK(bar2.eval(0.21, probe) == bar.eval(0.21, probe));
}

TEST_CASE("disk barrier window rescales and verifies") {
  DirectionField dir(identity_disk(), 0.5);
  double theta1 = solve_theta1(kPi / 3.0);
  ConstantsLedger ledger;
  ledger.set(keys::image_cone_angle, kPi / 3.0, Provenance::assumed);
  ledger.set(keys::patch_cone_angle, theta1, Provenance::verified);

  BarrierOptions opts;
  opts.patch_radius = 0.1;
  opts.window_halftime = 0.25;
  opts.t_lo = 0.48;
  opts.t_hi = 0.52;
  opts.param_lo = 0.15;
  opts.param_hi = 0.156;
  BoundaryBarrier bar = build_boundary_barrier(dir, ledger, opts);

  // Cores half a needle apart along the window's image arc.
  double needle = opts.patch_radius * std::tan(theta1);
  double arc = (opts.param_hi - opts.param_lo) * 2.0 * kPi;
  int est = static_cast<int>(std::ceil(arc / (0.5 * needle)));
  CHECK(bar.patch_count() >= est - 2);
  CHECK(bar.patch_count() <= est + 2);
  CHECK(bar.grid_min_slope() > 0.0);

  BarrierReport rep = verify_barrier(bar, dir, 40, 7001);
  CHECK(rep.violations == 0);
  CHECK(rep.min_slope >= 1.0 - 1e-3);

  // Far from the window the barrier is identically zero.
  CHECK(bar.eval(0.5, make_vec({0.0, -0.9})) == 0.0);
}

TEST_CASE("barrier refuses an oversized lattice") {
  DirectionField dir(identity_disk(), 0.5);
  ConstantsLedger ledger;
  ledger.set(keys::image_cone_angle, kPi / 3.0, Provenance::assumed);
  ledger.set(keys::patch_cone_angle, solve_theta1(kPi / 3.0),
             Provenance::verified);

  BarrierOptions tiny;
  tiny.patch_radius = 0.002;
  tiny.window_halftime = 0.25;
  CHECK_THROWS_AS(build_boundary_barrier(dir, ledger, tiny), CoverFailure);

  BarrierOptions capped;
  capped.patch_radius = 0.35;
  capped.window_halftime = 0.25;
  capped.t_lo = 0.48;
  capped.t_hi = 0.52;
  capped.param_lo = 0.15;
  capped.param_hi = 0.30;
  capped.max_patches = 3;
  CHECK_THROWS_AS(build_boundary_barrier(dir, ledger, capped), CoverFailure);
}
