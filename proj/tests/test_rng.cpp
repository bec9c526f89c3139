#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "rsde/rng.hpp"

using namespace rsde;

TEST_CASE("counter rng is a pure function of its address") {
  double a = normal_at(42, 7, 1001);
  double b = normal_at(42, 7, 1001);
  CHECK(a == b);
  CHECK(normal_at(42, 7, 1002) != a);
  CHECK(normal_at(42, 8, 1001) != a);
  CHECK(normal_at(43, 7, 1001) != a);
}

TEST_CASE("uniforms live strictly inside (0,1)") {
  for (int i = 0; i < 1000; ++i) {
    auto u = uniform4(9, 3, i);
    for (double v : u) {
      CHECK(v > 0.0);
      CHECK(v < 1.0);
    }
  }
}

TEST_CASE("normal stream moments") {
  const int n = 400000;
  double sum = 0.0, sum2 = 0.0, sum4 = 0.0;
  for (int i = 0; i < n; ++i) {
    double z = normal_at(2024, 0, i);
    sum += z;
    sum2 += z * z;
    sum4 += z * z * z * z;
  }
  double mean = sum / n;
  double var = sum2 / n - mean * mean;
  double kurt = (sum4 / n) / (var * var);
  CHECK(std::abs(mean) < 0.01);
  CHECK(std::abs(var - 1.0) < 0.02);
  CHECK(std::abs(kurt - 3.0) < 0.1);
}

TEST_CASE("brownian path refinement preserves coarse increments") {
  BrownianPath path(2, 1.0, 16, 99, 5);
  Mat coarse = path.increments(0);
  Mat fine = path.increments(3);
  REQUIRE(fine.cols() == 16 * 8);
  for (int c = 0; c < 2; ++c) {
    for (int k = 0; k < 16; ++k) {
      double sum = 0.0;
      for (int j = 0; j < 8; ++j) sum += fine(c, 8 * k + j);
      CHECK(sum == doctest::Approx(coarse(c, k)).epsilon(1e-12));
    }
  }
}

TEST_CASE("brownian increments have the right scale per level") {
  double dt0 = 0.5 / 32;
  for (int level : {0, 2}) {
    double acc = 0.0;
    int count = 0;
    for (uint64_t p = 0; p < 200; ++p) {
      BrownianPath path(1, 0.5, 32, 7, p);
      Mat inc = path.increments(level);
      for (int k = 0; k < inc.cols(); ++k) {
        acc += inc(0, k) * inc(0, k);
        ++count;
      }
    }
    double expected = dt0 / (1 << level);
    CHECK(acc / count == doctest::Approx(expected).epsilon(0.05));
  }
}

TEST_CASE("distinct paths decorrelate") {
  BrownianPath a(1, 1.0, 256, 11, 0);
  BrownianPath b(1, 1.0, 256, 11, 1);
  Mat ia = a.increments(0);
  Mat ib = b.increments(0);
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (int k = 0; k < 256; ++k) {
    dot += ia(0, k) * ib(0, k);
    na += ia(0, k) * ia(0, k);
    nb += ib(0, k) * ib(0, k);
  }
  CHECK(std::abs(dot / std::sqrt(na * nb)) < 0.2);
}
