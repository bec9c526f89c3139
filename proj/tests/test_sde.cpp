#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "rsde/fields.hpp"
#include "rsde/geometry.hpp"
#include "rsde/ledger.hpp"
#include "rsde/rng.hpp"
#include "rsde/sde.hpp"
#include "rsde/zvonkin.hpp"

using namespace rsde;

namespace {

Vec make_vec(std::initializer_list<double> v) {
  Vec x(static_cast<int>(v.size()));
  int i = 0;
  for (double s : v) x[i++] = s;
  return x;
}

ReflectedPath run_one(SchemeKind kind, const DriftField& b,
                      const DomainSpec& dom, const Vec& x0, double T,
                      int steps, uint64_t seed, uint64_t idx) {
  SchemeConfig cfg;
  cfg.kind = kind;
  BrownianPath w(b.dimension, T, steps, seed, idx);
  return simulate_reflected(cfg, b, dom, x0, T, w, 0);
}

}  // namespace

TEST_CASE("projection paths stay admissible and reproduce bitwise") {
  DomainSpec disk = DomainSpec::disk(1.0);
  DriftField b = DriftField::constant(make_vec({0.8, -0.3}));
  Vec x0 = make_vec({0.3, 0.0});
  int reflecting = 0;
  for (int p = 0; p < 50; ++p) {
    ReflectedPath path = run_one(SchemeKind::projection, b, disk, x0, 1.0, 64,
                                 101, p);
    PathCheckReport rep = check_reflected_path(path, disk);
    CHECK(rep.max_outside <= 1e-12);
    CHECK(rep.worst_angle <= 1e-2);
    CHECK(rep.flat_defect <= 1e-12);
    reflecting += rep.reflections;

    ReflectedPath again = run_one(SchemeKind::projection, b, disk, x0, 1.0, 64,
                                  101, p);
    REQUIRE(again.states.size() == path.states.size());
    for (size_t k = 0; k < path.states.size(); ++k)
      CHECK(again.states[k] == path.states[k]);
    CHECK(again.local_time.back() == path.local_time.back());
  }
  CHECK(reflecting > 50);  // the outward drift makes contact routine
}

TEST_CASE("local time increases only at boundary contact") {
  DomainSpec dom = DomainSpec::interval(0.0, 1.0);
  DriftField out = DriftField::sign1d(4.0, 0.5);
  Vec x0 = make_vec({0.5});
  int touched = 0;
  for (int p = 0; p < 200; ++p) {
    ReflectedPath path = run_one(SchemeKind::projection, out, dom, x0, 1.0, 128,
                                 77, p);
    if (path.local_time.back() > 0.0) ++touched;
    for (int k = 0; k < path.steps(); ++k) {
      double dl = path.local_time[k + 1] - path.local_time[k];
      CHECK(dl >= 0.0);
      if (dl > 0.0) {
        // the push lands the state exactly on the wall
        CHECK(std::abs(signed_distance(dom, path.states[k + 1])) <= 1e-12);
      }
    }
  }
  CHECK(touched == 200);
}

TEST_CASE("interval symmetry of the terminal mean") {
  DomainSpec dom = DomainSpec::interval(0.0, 1.0);
  DriftField b0 = DriftField::zero(1);
  Vec x0 = make_vec({0.5});
  int n = 100000;
  double mean = 0.0, sq = 0.0;
  for (int p = 0; p < n; ++p) {
    ReflectedPath path = run_one(SchemeKind::projection, b0, dom, x0, 1.0, 64,
                                 300, p);
    double v = path.states.back()[0];
    mean += v / n;
    sq += v * v / n;
  }
  double sem = std::sqrt((sq - mean * mean) / n);
  CHECK(std::abs(mean - 0.5) <= 3.0 * sem);
}

TEST_CASE("long-run occupation is uniform away from the walls") {
  // One million steps at dt 2^-10; draws are decorrelated by subsampling at
  // half the interval mixing time, else the chi-squared inflates under the
  // serial correlation of consecutive states.
  DomainSpec dom = DomainSpec::interval(0.0, 1.0);
  DriftField b0 = DriftField::zero(1);
  SchemeConfig cfg;
  Vec x0 = make_vec({0.5});
  std::vector<long> bins(16, 0);
  long draws = 0, steps = 0;
  for (int p = 0; p < 64; ++p) {
    BrownianPath w(1, 16.0, 16384, 99, p);
    ReflectedPath path = simulate_reflected(cfg, b0, dom, x0, 16.0, w, 0);
    steps += path.steps();
    for (size_t k = 1024; k < path.states.size(); k += 512) {
      double v = path.states[k][0];
      if (v < 0.1 || v >= 0.9) continue;
      bins[static_cast<int>((v - 0.1) / 0.05)]++;
      draws++;
    }
  }
  REQUIRE(steps >= 1000000);
  double expd = static_cast<double>(draws) / 16.0, chi = 0.0;
  for (long c : bins) chi += (c - expd) * (c - expd) / expd;
  CHECK(chi_squared_pvalue(chi, 15) > 1e-3);
}

TEST_CASE("penalized paths report slack and shadow the projected ones") {
  DomainSpec dom = DomainSpec::interval(0.0, 1.0);
  DriftField b0 = DriftField::zero(1);
  Vec x0 = make_vec({0.5});
  std::vector<int> steps = {64, 256, 1024};
  std::vector<double> gap;
  for (int s : steps) {
    double g = 0.0;
    for (int p = 0; p < 200; ++p) {
      BrownianPath w(1, 1.0, s, 404, p);
      SchemeConfig proj;
      ReflectedPath a = simulate_reflected(proj, b0, dom, x0, 1.0, w, 0);
      BrownianPath w2(1, 1.0, s, 404, p);
      SchemeConfig pen;
      pen.kind = SchemeKind::penalization;
      ReflectedPath bth = simulate_reflected(pen, b0, dom, x0, 1.0, w2, 0);
      CHECK(bth.penalty == doctest::Approx(s).epsilon(1e-12));
      CHECK(bth.penalty_slack < 0.5 * dom.collar_width());
      PathCheckReport rep = check_reflected_path(bth, dom);
      CHECK(rep.worst_angle <= 1e-2);
      g += (a.states.back() - bth.states.back()).norm() / 200.0;
    }
    gap.push_back(g);
  }
  CHECK(gap[1] < gap[0]);
  CHECK(gap[2] < gap[1]);
  CHECK(gap[2] < 0.25 * gap[0]);
}

TEST_CASE("oversized steps either split or refuse") {
  DomainSpec dom = DomainSpec::interval(0.0, 1.0);
  Vec x0 = make_vec({0.5});
  SchemeConfig cfg;

  // Moderate coarseness: the dyadic fallback absorbs the excursions.
  DriftField mild = DriftField::constant(make_vec({2.0}));
  BrownianPath w(1, 1.0, 16, 18, 3);
  ReflectedPath path = simulate_reflected(cfg, mild, dom, x0, 1.0, w, 0);
  CHECK(check_reflected_path(path, dom).max_outside <= 1e-12);

  // A drift that crosses the whole domain in one step cannot be saved.
  DriftField wild = DriftField::constant(make_vec({60.0}));
  BrownianPath w2(1, 1.0, 2, 18, 4);
  CHECK_THROWS_AS(simulate_reflected(cfg, wild, dom, x0, 1.0, w2, 0),
                  StepTooLarge);

  SchemeConfig bad;
  bad.substeps = 3;
  BrownianPath w3(1, 1.0, 16, 18, 5);
  CHECK_THROWS_AS(
      simulate_reflected(bad, mild, dom, x0, 1.0, w3, 0), ConfigError);
}

TEST_CASE("strong error shrinks under dyadic refinement") {
  DomainSpec dom = DomainSpec::interval(0.0, 1.0);
  DriftField b0 = DriftField::zero(1);
  SchemeConfig cfg;
  Vec x0 = make_vec({0.5});
  RefinementReport rep =
      refinement_order(cfg, b0, dom, x0, 1.0, 64, 4, 300, 4242);
  REQUIRE(rep.errors.size() == 4);
  for (size_t r = 1; r < rep.errors.size(); ++r)
    CHECK(rep.errors[r] < rep.errors[r - 1]);
  // Boundary projection events thin out like dt^{-1/2} while each contributes
  // an O(sqrt(dt)) mismatch, so the sup-gap decays near the quarter rate; see
  // the notes in the report struct.
  CHECK(rep.order >= 0.2);
  CHECK(rep.order <= 0.6);
}

TEST_CASE("transformed scheme is the identity map when drift vanishes") {
  DomainSpec dom = DomainSpec::interval(0.0, 1.0);
  TransformBuildOptions o;
  o.dt = 1.0 / 128.0;
  o.h = 1.0 / 32.0;
  ZvonkinTransform z = build_transform(dom, DriftField::zero(1), 0.25, o);
  SchemeConfig cfg;
  DriftField b0 = DriftField::zero(1);
  Vec x0 = make_vec({0.5});
  double worst = 0.0;
  for (int p = 0; p < 200; ++p) {
    BrownianPath w(1, 0.25, 64, 5, p);
    ReflectedPath direct = simulate_reflected(cfg, b0, dom, x0, 0.25, w, 0);
    BrownianPath w2(1, 0.25, 64, 5, p);
    ReflectedPath trans = simulate_transformed(z, x0, 0.25, w2, 0);
    REQUIRE(direct.states.size() == trans.states.size());
    for (size_t k = 0; k < direct.states.size(); ++k)
      worst = std::max(worst, (direct.states[k] - trans.states[k]).norm());
    CHECK(check_reflected_path(trans, dom).max_outside <= 1e-9);
  }
  CHECK(worst <= 1e-12);
}

TEST_CASE("transformed scheme reproduces the drifted law without a drift term") {
  DomainSpec dom = DomainSpec::disk(1.0);
  Vec c = make_vec({0.7, -0.4});
  DriftField bc = DriftField::constant(c);
  TransformBuildOptions o;
  o.dt = 1.0 / 64.0;
  o.h = 1.0 / 12.0;
  o.angular_nodes = 32;
  ZvonkinTransform z = build_transform(dom, bc, 0.25, o);
  SchemeConfig cfg;
  Vec x0 = make_vec({0.1, 0.2});
  int nd = 4000, nt = 2000;
  Vec md = Vec::Zero(2), mt = Vec::Zero(2), vd = Vec::Zero(2);
  for (int p = 0; p < nd; ++p) {
    BrownianPath w(2, 0.25, 64, 21, p);
    md += simulate_reflected(cfg, bc, dom, x0, 0.25, w, 0).states.back() / nd;
  }
  for (int p = 0; p < nd; ++p) {
    BrownianPath w(2, 0.25, 64, 21, p);
    Vec xT = simulate_reflected(cfg, bc, dom, x0, 0.25, w, 0).states.back();
    vd += (xT - md).cwiseAbs2() / nd;
  }
  for (int p = 0; p < nt; ++p) {
    BrownianPath w(2, 0.25, 64, 22, p);
    mt += simulate_transformed(z, x0, 0.25, w, 0).states.back() / nt;
  }
  double sem = std::sqrt(vd.maxCoeff() * (1.0 / nd + 1.0 / nt));
  CHECK((md - mt).cwiseAbs().maxCoeff() <= 3.0 * sem);
}

TEST_CASE("transformed scheme hits the terminal identity slice exactly") {
  DomainSpec dom = DomainSpec::interval(0.0, 1.0);
  TransformBuildOptions o;
  o.dt = 1.0 / 128.0;
  o.h = 1.0 / 32.0;
  double T = 0.25;
  ZvonkinTransform z = build_transform(dom, DriftField::sign1d(1.0, 0.5), T, o);
  Vec x0 = make_vec({0.5});
  for (int p = 0; p < 50; ++p) {
    BrownianPath w(1, T, 64, 9, p);
    ReflectedPath path = simulate_transformed(z, x0, T, w, 0);
    Vec xT = path.states.back();
    CHECK((z.value(T, xT) - xT).norm() <= 1e-12);
  }
}

TEST_CASE("occupation functionals against space-time norms") {
  DomainSpec dom = DomainSpec::disk(1.0);
  DriftField b0 = DriftField::zero(2);
  SchemeConfig cfg;
  Vec x0 = make_vec({0.0, 0.0});
  std::vector<ReflectedPath> paths;
  for (int p = 0; p < 1500; ++p) {
    BrownianPath w(2, 1.0, 256, 31, p);
    paths.push_back(simulate_reflected(cfg, b0, dom, x0, 1.0, w, 0));
  }

  auto one = [](double, const Vec&) { return 1.0; };
  OccupationReport unit = krylov_check(paths, one, dom, 3.0);
  CHECK(unit.lhs == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(unit.rhs_norm ==
        doctest::Approx(std::pow(M_PI, 1.0 / 3.0)).epsilon(2e-3));

  auto zero = [](double, const Vec&) { return 0.0; };
  OccupationReport none = krylov_check(paths, zero, dom, 3.0);
  CHECK(none.lhs == 0.0);
  CHECK(none.rhs_norm == 0.0);
  CHECK(none.ratio == 0.0);

  ConstantsLedger ledger;
  OccupationFamilyReport fam = krylov_family(paths, dom, {0.1, 0.05, 0.025},
                                             &ledger);
  REQUIRE(fam.slabs.size() == 3);
  for (size_t i = 0; i < fam.slabs.size(); ++i) {
    CHECK(std::isfinite(fam.slabs[i].ratio));
    CHECK(fam.slabs[i].ratio > 0.0);
    CHECK(fam.slabs[i].ratio < 0.3);  // bounded as the slabs thin
    if (i > 0) CHECK(fam.slabs[i].ratio < fam.slabs[i - 1].ratio);
  }
  CHECK(fam.occupation_coef == fam.slabs[0].ratio);
  CHECK(ledger.require(keys::occupation_coef) == fam.occupation_coef);
}

TEST_CASE("pathwise identity residuals") {
  DomainSpec dom = DomainSpec::disk(1.0);
  DriftField sgn = DriftField::radial_jump(1.0, 1.0);
  SchemeConfig cfg;
  Vec x0 = make_vec({0.0, 0.0});

  SUBCASE("constants and coordinates are exact") {
    SpaceTimeTestFn cst;
    cst.value = [](double, const Vec&) { return 3.75; };
    cst.gradient = [](double, const Vec& x) { return Vec::Zero(x.size()).eval(); };
    cst.laplacian = [](double, const Vec&) { return 0.0; };
    cst.time_derivative = [](double, const Vec&) { return 0.0; };
    for (int p = 0; p < 100; ++p) {
      BrownianPath w(2, 1.0, 128, 61, p);
      ReflectedPath path = simulate_reflected(cfg, sgn, dom, x0, 1.0, w, 0);
      CHECK(ito_residual(cst, path, sgn).residual == 0.0);
      for (int axis = 0; axis < 2; ++axis) {
        SpaceTimeTestFn coord = SpaceTimeTestFn::coordinate(axis, 2);
        CHECK(std::abs(ito_residual(coord, path, sgn).residual) <= 1e-12);
      }
    }
  }

  SUBCASE("quadratic mean residual is centered, boundary term negative") {
    SpaceTimeTestFn sq = SpaceTimeTestFn::norm_squared(2);
    int n = 4000;
    double mean = 0.0, var = 0.0, bnd = 0.0;
    int reflecting = 0;
    for (int p = 0; p < n; ++p) {
      BrownianPath w(2, 1.0, 256, 62, p);
      ReflectedPath path = simulate_reflected(cfg, sgn, dom, x0, 1.0, w, 0);
      ItoBreakdown r = ito_residual(sq, path, sgn);
      mean += r.residual / n;
      var += r.residual * r.residual / n;
      if (path.reflections > 0) {
        ++reflecting;
        CHECK(r.boundary_term < 0.0);
        bnd += r.boundary_term;
      }
    }
    CHECK(reflecting > n / 2);
    CHECK(bnd < 0.0);
    CHECK(std::abs(mean) <= 3.0 * std::sqrt((var - mean * mean) / n));
  }
}

TEST_CASE("mean local time is stable in the path count") {
  DomainSpec dom = DomainSpec::disk(1.0);
  DriftField b0 = DriftField::zero(2);
  SchemeConfig cfg;
  Vec x0 = make_vec({0.0, 0.0});
  double m_small = 0.0, m_large = 0.0;
  for (int p = 0; p < 40000; ++p) {
    BrownianPath w(2, 1.0, 64, 777, p);
    double lt =
        simulate_reflected(cfg, b0, dom, x0, 1.0, w, 0).local_time.back();
    if (p < 10000) m_small += lt / 10000.0;
    m_large += lt / 40000.0;
  }
  CHECK(m_large > 0.0);
  CHECK(std::abs(m_small - m_large) / m_large < 0.05);
}

TEST_CASE("reweighted driftless paths match the drifted scheme") {
  DomainSpec dom = DomainSpec::interval(0.0, 1.0);
  Vec c = make_vec({0.8});
  DriftField bc = DriftField::constant(c);
  DriftField b0 = DriftField::zero(1);
  SchemeConfig cfg;
  Vec x0 = make_vec({0.5});
  int n = 10000;
  double d1 = 0.0, d2 = 0.0, r1 = 0.0, r2 = 0.0, s1 = 0.0, s2 = 0.0;
  for (int p = 0; p < n; ++p) {
    BrownianPath w(1, 1.0, 256, 13, p);
    double xT =
        simulate_reflected(cfg, bc, dom, x0, 1.0, w, 0).states.back()[0];
    d1 += xT / n;
    d2 += xT * xT / n;
    BrownianPath w2(1, 1.0, 256, 14, p);
    ReflectedPath flat = simulate_reflected(cfg, b0, dom, x0, 1.0, w2, 0);
    double g = girsanov_weight(flat, bc);
    double v = flat.states.back()[0];
    r1 += g * v / n;
    r2 += g * v * v / n;
    s1 += g * v * g * v / n;
    s2 += g * v * v * g * v * v / n;
  }
  double sem1 = std::sqrt((s1 - r1 * r1) / n + (d2 - d1 * d1) / n);
  double sem2 = std::sqrt((s2 - r2 * r2) / n) * 2.0;  // crude combined scale
  CHECK(std::abs(r1 - d1) <= 3.0 * sem1);
  CHECK(std::abs(r2 - d2) <= 3.0 * sem2);
}

TEST_CASE("chi-squared tail helper") {
  CHECK(chi_squared_pvalue(0.0, 5) == doctest::Approx(1.0));
  CHECK(chi_squared_pvalue(200.0, 5) < 1e-12);
  // median of the 2-dof distribution is 2 ln 2
  CHECK(chi_squared_pvalue(2.0 * std::log(2.0), 2) ==
        doctest::Approx(0.5).epsilon(1e-10));
  CHECK(chi_squared_pvalue(15.0, 15) == doctest::Approx(0.4514).epsilon(1e-3));
}
