#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>

#include "rsde/fields.hpp"
#include "rsde/rng.hpp"

using namespace rsde;

namespace {

Vec make_vec(std::initializer_list<double> v) {
  Vec x(static_cast<int>(v.size()));
  int i = 0;
  for (double s : v) x[i++] = s;
  return x;
}

}  // namespace

TEST_CASE("drift presets respect their stated bound") {
  auto fields = {DriftField::sign1d(2.0, 0.3),
                 DriftField::checkerboard2d(1.5, 0.25),
                 DriftField::radial_jump(1.0, 1.0),
                 DriftField::constant(make_vec({0.6, -0.8}))};
  for (const auto& b : fields) {
    for (int i = 0; i < 500; ++i) {
      auto u = uniform4(99, 1, i);
      Vec x(b.dimension);
      for (int a = 0; a < b.dimension; ++a) x[a] = 4.0 * u[a] - 2.0;
      CHECK(b(u[3], x).norm() <= b.bound + 1e-12);
    }
  }
}

TEST_CASE("preset dispatch by name") {
  auto b = DriftField::from_preset("sign1d", {1.0, 0.5}, 1);
  CHECK(b(0.0, make_vec({0.7}))[0] == 1.0);
  CHECK(b(0.0, make_vec({0.2}))[0] == -1.0);

  auto c = DriftField::from_preset("constant", {0.3, 0.4}, 2);
  CHECK(c.bound == doctest::Approx(0.5));

  CHECK_THROWS_AS(DriftField::from_preset("spiral", {}, 2), ConfigError);
  CHECK_THROWS_AS(DriftField::from_preset("sign1d", {1.0}, 1), ConfigError);
}

TEST_CASE("mollifier kernel has unit mass and compact support") {
  for (int d : {1, 2}) {
    for (int n = 2; n <= 6; ++n) {
      MollifierKernel k(d, n);
      CHECK(std::abs(k.mass() - 1.0) < 1e-6);
      CHECK(k.factor(k.scale()) == 0.0);
      CHECK(k.factor(-1.001 * k.scale()) == 0.0);
      CHECK(k.factor(0.0) > 0.0);
    }
  }
}

TEST_CASE("mollification of zero and constant drifts is exact") {
  MollifierKernel k1(1, 3);
  auto z = mollify(DriftField::zero(1), k1);
  CHECK(z(0.1, make_vec({0.4})).norm() == 0.0);

  Vec c = make_vec({0.3, -0.7});
  MollifierKernel k2(2, 3);
  auto bc = mollify(DriftField::constant(c), k2);
  Vec got = bc(0.25, make_vec({0.1, 0.9}));
  CHECK((got - c).norm() < 1e-12);
}

TEST_CASE("sign drift mollifies to zero at the jump and saturates away from it") {
  for (int n = 2; n <= 5; ++n) {
    MollifierKernel k(1, n);
    auto bn = mollify(DriftField::sign1d(1.0, 0.5), k);
    CHECK(std::abs(bn(0.0, make_vec({0.5}))[0]) < 1e-10);
    double far = 0.5 + 2.0 * k.scale();
    CHECK(bn(0.0, make_vec({far}))[0] == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(bn(0.0, make_vec({0.5 - 2.0 * k.scale()}))[0] ==
          doctest::Approx(-1.0).epsilon(1e-12));
  }
}

TEST_CASE("mollification contracts the sup norm") {
  for (int n = 2; n <= 6; ++n) {
    MollifierKernel k(1, n);
    auto bn = mollify(DriftField::sign1d(2.0, 0.3), k);
    for (int i = 0; i <= 40; ++i) {
      double x = 0.3 + (i - 20) * 0.01;
      CHECK(bn(0.0, make_vec({x})).norm() <= 2.0 + 1e-12);
    }
  }
  for (int n : {3, 4}) {
    MollifierKernel k(2, n);
    auto bn = mollify(DriftField::checkerboard2d(1.5, 0.25), k);
    for (int i = 0; i < 9; ++i) {
      auto u = uniform4(7, 2, i);
      Vec x = make_vec({0.5 * u[0], 0.5 * u[1]});
      CHECK(bn(0.0, x).norm() <= 1.5 + 1e-12);
    }
    auto br = mollify(DriftField::radial_jump(1.0, 1.0), k);
    for (int i = 0; i < 9; ++i) {
      auto u = uniform4(8, 2, i);
      Vec x = make_vec({u[0] - 0.5, u[1] - 0.5});
      CHECK(br(0.0, x).norm() <= 1.0 + 1e-12);
    }
  }
}

TEST_CASE("mollification converges where the drift is smooth") {
  DriftField smooth;
  smooth.dimension = 1;
  smooth.bound = 1.0;
  smooth.time_independent = true;
  smooth.eval = [](double, const Vec& x) { return make_vec({std::sin(2.0 * x[0])}); };

  std::vector<double> errs;
  for (int n = 2; n <= 6; ++n) {
    MollifierKernel k(1, n);
    auto bn = mollify(smooth, k);
    double e = 0.0;
    for (int i = 0; i <= 10; ++i) {
      double x = -1.0 + 0.2 * i;
      e = std::max(e, std::abs(bn(0.0, make_vec({x}))[0] - std::sin(2.0 * x)));
    }
    errs.push_back(e);
  }
  for (size_t i = 1; i < errs.size(); ++i) CHECK(errs[i] <= 1.1 * errs[i - 1]);
  CHECK(errs.back() < errs.front() / 16.0);
}

TEST_CASE("gridded field reproduces its nodes and low-degree polynomials") {
  std::vector<double> times = {0.0, 0.5, 1.0};
  std::vector<double> xs;
  for (int i = 0; i <= 8; ++i) xs.push_back(i / 8.0);
  SpaceTimeVectorField f(times, {xs}, 1, Interp::cubic);
  f.fill([](double t, const Vec& x) {
    return make_vec({(1.0 + t) * x[0] * x[0]});
  });

  for (double t : times)
    for (double x : xs)
      CHECK(f.value(t, make_vec({x}))[0] ==
            doctest::Approx((1.0 + t) * x * x).epsilon(1e-14));

  for (int i = 0; i < 200; ++i) {
    auto u = uniform4(3, 1, i);
    double t = u[0], x = u[1];
    CHECK(std::abs(f.value(t, make_vec({x}))[0] - (1.0 + t) * x * x) < 1e-12);
    CHECK(std::abs(f.jacobian(t, make_vec({x}))(0, 0) - (1.0 + t) * 2.0 * x) < 1e-10);
    CHECK(std::abs(f.time_derivative(t, make_vec({x}))[0] - x * x) < 1e-10);
  }
}

TEST_CASE("cubic interpolation error decays at third order") {
  auto max_err = [](int nodes) {
    std::vector<double> xs;
    for (int i = 0; i < nodes; ++i) xs.push_back(static_cast<double>(i) / (nodes - 1));
    SpaceTimeVectorField f({0.0}, {xs}, 1, Interp::cubic);
    f.fill([](double, const Vec& x) {
      return Vec::Constant(1, std::sin(3.0 * x[0]));
    });
    double e = 0.0;
    for (int i = 0; i <= 1000; ++i) {
      double x = i / 1000.0;
      e = std::max(e, std::abs(f.value(0.0, Vec::Constant(1, x))[0] - std::sin(3.0 * x)));
    }
    return e;
  };
  double e9 = max_err(9), e17 = max_err(17);
  CHECK(e17 < e9 / 5.0);
}

TEST_CASE("two-dimensional tensor interpolation is exact on quadratics") {
  std::vector<double> xs, ys;
  for (int i = 0; i <= 6; ++i) xs.push_back(i / 6.0);
  for (int i = 0; i <= 5; ++i) ys.push_back(i / 5.0);
  SpaceTimeVectorField f({0.0, 1.0}, {xs, ys}, 2, Interp::cubic);
  f.fill([](double, const Vec& x) {
    return make_vec({x[0] * x[0] + x[1], x[0] * x[1]});
  });
  for (int i = 0; i < 100; ++i) {
    auto u = uniform4(4, 1, i);
    Vec x = make_vec({u[0], u[1]});
    Vec got = f.value(0.3, x);
    CHECK(std::abs(got[0] - (x[0] * x[0] + x[1])) < 1e-12);
    CHECK(std::abs(got[1] - x[0] * x[1]) < 1e-12);
    Mat j = f.jacobian(0.3, x);
    CHECK(std::abs(j(0, 0) - 2.0 * x[0]) < 1e-10);
    CHECK(std::abs(j(0, 1) - 1.0) < 1e-10);
    CHECK(std::abs(j(1, 0) - x[1]) < 1e-10);
    CHECK(std::abs(j(1, 1) - x[0]) < 1e-10);
  }
}

TEST_CASE("field save and load round-trips exactly") {
  std::vector<double> xs = {0.0, 0.25, 0.5, 0.75, 1.0};
  SpaceTimeVectorField f({0.0, 0.5}, {xs, xs}, 2, Interp::cubic);
  f.fill([](double t, const Vec& x) {
    return make_vec({std::sin(x[0] + t), std::cos(x[1] - t)});
  });
  const std::string path = "field_roundtrip.bin";
  f.save(path);
  auto g = SpaceTimeVectorField::load(path);
  REQUIRE(g.num_times() == f.num_times());
  REQUIRE(g.nodes_per_slab() == f.nodes_per_slab());
  CHECK(g.interpolation() == Interp::cubic);
  for (int ti = 0; ti < f.num_times(); ++ti)
    CHECK((g.slab(ti) - f.slab(ti)).cwiseAbs().maxCoeff() == 0.0);
  std::remove(path.c_str());
  std::remove((path + ".json").c_str());
}

TEST_CASE("space-time Lp norms match closed forms") {
  auto region = SpaceTimeRegion::cylinder(DomainSpec::disk(1.0), 0.0, 1.0);

  double v1 = norm_Lp_spacetime([](double, const Vec&) { return 1.0; }, 3.0,
                                region, 64, 256);
  double pi13 = std::cbrt(kPi);
  CHECK(std::abs(v1 - pi13) / pi13 < 1e-3);

  double v0 = norm_Lp_spacetime([](double, const Vec&) { return 0.0; }, 2.0,
                                region, 32, 64);
  CHECK(v0 == 0.0);

  double v2 = norm_Lp_spacetime([](double, const Vec& x) { return x.norm(); },
                                2.0, region, 64, 256);
  double target = std::sqrt(kPi / 2.0);
  CHECK(std::abs(v2 - target) / target < 1e-3);
}

TEST_CASE("Lp quadrature refines at second order on smooth integrands") {
  SpaceTimeRegion box;
  box.t0 = 0.0;
  box.t1 = 1.0;
  box.lo = make_vec({0.0});
  box.hi = make_vec({1.0});

  auto f = [](double t, const Vec& x) { return t * t + x[0] * x[0]; };
  double exact = 2.0 / 3.0;
  auto err = [&](int n) {
    return std::abs(norm_Lp_spacetime(f, 1.0, box, n, n) - exact);
  };
  double e8 = err(8), e16 = err(16), e32 = err(32);
  CHECK(e8 / e16 > 3.5);
  CHECK(e16 / e32 > 3.5);
}

TEST_CASE("invalid norm arguments are rejected") {
  SpaceTimeRegion box;
  box.lo = make_vec({0.0});
  box.hi = make_vec({1.0});
  CHECK_THROWS_AS(
      norm_Lp_spacetime([](double, const Vec&) { return 1.0; }, 0.5, box),
      ConfigError);
}
