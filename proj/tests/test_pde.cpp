#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "rsde/pde.hpp"

using namespace rsde;

namespace {

Vec make_vec(std::initializer_list<double> v) {
  Vec x(static_cast<int>(v.size()));
  int i = 0;
  for (double s : v) x[i++] = s;
  return x;
}

ParabolicProblem interval_problem(DriftField b, double T = 0.25) {
  ParabolicProblem p;
  p.domain = DomainSpec::interval(0.0, 1.0);
  p.drift = std::move(b);
  p.horizon = T;
  p.dt = 1.0 / 128.0;
  p.h = 1.0 / 32.0;
  return p;
}

ParabolicProblem disk_problem(DriftField b, double T = 0.25) {
  ParabolicProblem p;
  p.domain = DomainSpec::disk(1.0);
  p.drift = std::move(b);
  p.horizon = T;
  p.dt = 1.0 / 64.0;
  p.h = 1.0 / 24.0;
  p.angular_nodes = 32;
  return p;
}

// max |u - ref| over slab nodes; disk grids restrict to the closed disk
double max_error(const SpaceTimeVectorField& u, const DomainSpec& dom,
                 const std::function<Vec(double, const Vec&)>& ref) {
  double e = 0.0;
  for (int ti = 0; ti < u.num_times(); ++ti) {
    double t = u.times()[static_cast<size_t>(ti)];
    for (std::int64_t r = 0; r < u.nodes_per_slab(); ++r) {
      Vec x = u.node_point(r);
      if (!dom.inside_closed(x, 1e-12)) continue;
      Vec got = u.slab(ti).row(r).transpose();
      e = std::max(e, (got - ref(t, x)).norm());
    }
  }
  return e;
}

}  // namespace

TEST_CASE("interval solution is exact for zero and constant drifts") {
  auto p0 = interval_problem(DriftField::zero(1));
  auto u0 = solve_neumann_terminal(p0);
  CHECK(max_error(u0, p0.domain, [](double, const Vec& x) { return x; }) <= 1e-10);

  auto pc = interval_problem(DriftField::constant(make_vec({0.8})));
  auto uc = solve_neumann_terminal(pc);
  double T = pc.horizon;
  CHECK(max_error(uc, pc.domain, [T](double t, const Vec& x) {
          return (x.array() + (T - t) * 0.8).matrix().eval();
        }) <= 1e-10);
}

TEST_CASE("terminal slab equals the identity") {
  auto p = interval_problem(DriftField::sign1d(1.0, 0.5));
  auto u = solve_neumann_terminal(p);
  int last = u.num_times() - 1;
  CHECK(u.times()[static_cast<size_t>(last)] == doctest::Approx(p.horizon));
  for (std::int64_t r = 0; r < u.nodes_per_slab(); ++r)
    CHECK(u.slab(last)(r, 0) == u.node_point(r)[0]);
}

TEST_CASE("constant scalar data stays constant") {
  ScalarNeumannData data;
  data.terminal = [](const Vec&) { return 7.0; };
  data.neumann = [](const Vec&) { return 0.0; };

  auto pi = interval_problem(DriftField::zero(1));
  auto ui = solve_scalar_neumann(pi, data);
  for (int ti = 0; ti < ui.num_times(); ++ti)
    CHECK((ui.slab(ti).array() - 7.0).abs().maxCoeff() < 1e-10);

  auto pd = disk_problem(DriftField::zero(2));
  auto ud = solve_scalar_neumann(pd, data);
  double e = 0.0;
  for (int ti = 0; ti < ud.num_times(); ++ti)
    for (std::int64_t r = 0; r < ud.nodes_per_slab(); ++r)
      if (pd.domain.inside_closed(ud.node_point(r), 1e-12))
        e = std::max(e, std::abs(ud.slab(ti)(r, 0) - 7.0));
  CHECK(e < 1e-10);
}

TEST_CASE("disk solution is exact for zero and constant drifts") {
  auto p0 = disk_problem(DriftField::zero(2));
  auto u0 = solve_neumann_terminal(p0);
  CHECK(max_error(u0, p0.domain, [](double, const Vec& x) { return x; }) <= 1e-10);

  Vec c = make_vec({0.3, -0.4});
  auto pc = disk_problem(DriftField::constant(c));
  auto uc = solve_neumann_terminal(pc);
  double T = pc.horizon;
  CHECK(max_error(uc, pc.domain, [T, c](double t, const Vec& x) {
          return (x + (T - t) * c).eval();
        }) <= 1e-10);
}

TEST_CASE("one-sided boundary flux matches the Neumann data at first order") {
  auto p = disk_problem(DriftField::radial_jump(0.5, 1.0));
  auto u = solve_neumann_terminal(p);
  double h = p.h;
  double worst = 0.0;
  for (int i = 0; i < 100; ++i) {
    double phi = 2.0 * kPi * i / 100.0;
    Vec er = make_vec({std::cos(phi), std::sin(phi)});
    Vec outer = u.value(0.0, (1.0 - 1e-12) * er);
    Vec inner = u.value(0.0, (1.0 - h) * er);
    Vec flux = (outer - inner) / h;
    worst = std::max(worst, (flux - er).norm());
  }
  CHECK(worst < 8.0 * h);
}

TEST_CASE("self-convergence under spatial halving for sign drift") {
  auto base = interval_problem(DriftField::sign1d(1.0, 0.5));
  base.dt = 1.0 / 1024.0;

  auto solve_at = [&](double h) {
    ParabolicProblem p = base;
    p.h = h;
    return solve_neumann_terminal(p);
  };
  auto u1 = solve_at(1.0 / 16.0);
  auto u2 = solve_at(1.0 / 32.0);
  auto u3 = solve_at(1.0 / 64.0);

  auto gap = [](const SpaceTimeVectorField& coarse,
                const SpaceTimeVectorField& fine) {
    double e = 0.0;
    for (std::int64_t r = 0; r < coarse.nodes_per_slab(); ++r)
      e = std::max(e, std::abs(coarse.slab(0)(r, 0) - fine.slab(0)(2 * r, 0)));
    return e;
  };
  double d12 = gap(u1, u2), d23 = gap(u2, u3);
  CHECK(d12 / d23 >= 3.0);
}

TEST_CASE("solutions with mollified drifts converge to the rough solution") {
  auto p = interval_problem(DriftField::sign1d(1.0, 0.5));
  auto u = solve_neumann_terminal(p);

  std::vector<double> errs;
  for (int n = 3; n <= 5; ++n) {
    ParabolicProblem pn = p;
    pn.drift = mollify(p.drift, MollifierKernel(1, n));
    auto un = solve_neumann_terminal(pn);
    double e = 0.0;
    for (int ti = 0; ti < u.num_times(); ++ti)
      e = std::max(e, (u.slab(ti) - un.slab(ti)).cwiseAbs().maxCoeff());
    errs.push_back(e);
  }
  CHECK(errs[1] <= 1.1 * errs[0]);
  CHECK(errs[2] <= 1.1 * errs[1]);
  CHECK(errs[2] < errs[0]);
}

TEST_CASE("holder fit on exact and rough solutions") {
  auto u0 = solve_neumann_terminal(interval_problem(DriftField::zero(1)));
  auto f0 = holder_estimate(u0);
  CHECK(f0.coefficient == 0.0);
  CHECK(f0.exponent == 1.0);

  auto uc = solve_neumann_terminal(
      interval_problem(DriftField::constant(make_vec({0.8}))));
  auto fc = holder_estimate(uc);
  CHECK(fc.exponent > 0.95);
  CHECK(fc.coefficient > 0.7);
  CHECK(fc.coefficient < 1.0);

  auto ps = interval_problem(DriftField::sign1d(1.0, 0.5));
  ps.dt = 1.0 / 256.0;
  auto us = solve_neumann_terminal(ps);
  auto fs = holder_estimate(us);
  ParabolicProblem ps2 = ps;
  ps2.h /= 2.0;
  auto fs2 = holder_estimate(solve_neumann_terminal(ps2));
  CHECK(fs.exponent > 0.0);
  CHECK(fs.exponent < 1.0);
  CHECK(std::abs(fs.exponent - fs2.exponent) <= 0.1);
}

TEST_CASE("reflection extension reproduces affine solutions") {
  auto pc = interval_problem(DriftField::constant(make_vec({0.8})));
  auto uc = solve_neumann_terminal(pc);
  auto ext = extend_across_boundary(uc, pc.domain);
  CHECK(ext.axis(0).front() < -0.4);
  CHECK(ext.axis(0).back() > 1.4);
  double T = pc.horizon;
  double e = 0.0;
  for (int ti = 0; ti < ext.num_times(); ++ti) {
    double t = ext.times()[static_cast<size_t>(ti)];
    for (std::int64_t r = 0; r < ext.nodes_per_slab(); ++r)
      e = std::max(e, std::abs(ext.slab(ti)(r, 0) -
                               (ext.node_point(r)[0] + (T - t) * 0.8)));
  }
  CHECK(e <= 1e-10);

  auto p0 = disk_problem(DriftField::zero(2));
  auto u0 = solve_neumann_terminal(p0);
  auto ext0 = extend_across_boundary(u0, p0.domain);
  double e0 = 0.0;
  for (int ti = 0; ti < ext0.num_times(); ++ti)
    for (std::int64_t r = 0; r < ext0.nodes_per_slab(); ++r) {
      Vec x = ext0.node_point(r);
      e0 = std::max(e0, (ext0.slab(ti).row(r).transpose() - x).norm());
    }
  CHECK(e0 <= 1e-10);
}

TEST_CASE("extension is continuous across the boundary for rough drift") {
  auto p = disk_problem(DriftField::radial_jump(0.5, 1.0));
  auto u = solve_neumann_terminal(p);
  auto ext = extend_across_boundary(u, p.domain);
  double h = p.h;
  double worst = 0.0;
  for (int i = 0; i < 1000; ++i) {
    double phi = 2.0 * kPi * i / 1000.0;
    Vec er = make_vec({std::cos(phi), std::sin(phi)});
    Vec in = ext.value(0.0, (1.0 - 0.4 * h) * er);
    Vec out = ext.value(0.0, (1.0 + 0.4 * h) * er);
    worst = std::max(worst, (out - in).norm());
  }
  CHECK(worst < 8.0 * h);
}

TEST_CASE("problem validation and CFL guard") {
  ParabolicProblem p = interval_problem(DriftField::zero(1));
  p.horizon = 1.5;
  CHECK_THROWS_AS(solve_neumann_terminal(p), ConfigError);

  p = interval_problem(DriftField::zero(1));
  p.dt = -1.0;
  CHECK_THROWS_AS(solve_neumann_terminal(p), ConfigError);

  p = interval_problem(DriftField::zero(1));
  p.domain = DomainSpec::ellipse(2.0, 1.0);
  CHECK_THROWS_AS(solve_neumann_terminal(p), ConfigError);

  p = interval_problem(DriftField::zero(2));
  CHECK_THROWS_AS(solve_neumann_terminal(p), GridMismatch);

  ParabolicProblem d = disk_problem(DriftField::constant(make_vec({2.0, 0.0})));
  d.dt = d.h;  // violates dt <= h / (2 bound)
  CHECK_THROWS_AS(solve_neumann_terminal(d), CFLViolation);

  d = disk_problem(DriftField::zero(2));
  d.angular_nodes = 9;
  CHECK_THROWS_AS(solve_neumann_terminal(d), ConfigError);
}
