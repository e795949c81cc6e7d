#include "doctest.h"
#include "fedq/rng.hpp"

#include <cmath>
#include <vector>

using namespace fedq;

TEST_CASE("derived keys are stable and distinct") {
  auto k1 = rng::derive_key(7, rng::Domain::minibatch, 0, 3);
  auto k2 = rng::derive_key(7, rng::Domain::minibatch, 0, 3);
  auto k3 = rng::derive_key(7, rng::Domain::minibatch, 0, 4);
  auto k4 = rng::derive_key(7, rng::Domain::weight_quant, 0, 3);
  CHECK(k1 == k2);
  CHECK(k1 != k3);
  CHECK(k1 != k4);
}

TEST_CASE("counter-based uniforms are order independent and in [0,1)") {
  std::vector<double> fwd(100), bwd(100);
  for (int i = 0; i < 100; ++i) fwd[i] = rng::uniform_at(99, i);
  for (int i = 99; i >= 0; --i) bwd[i] = rng::uniform_at(99, i);
  CHECK(fwd == bwd);
  for (double u : fwd) {
    CHECK(u >= 0.0);
    CHECK(u < 1.0);
  }
}

TEST_CASE("stream moments are sane") {
  rng::Stream s(123);
  const int n = 200000;
  double sum = 0.0, sumsq = 0.0;
  for (int i = 0; i < n; ++i) {
    double u = s.uniform();
    sum += u;
    sumsq += u * u;
  }
  CHECK(sum / n == doctest::Approx(0.5).epsilon(0.01));
  CHECK(sumsq / n == doctest::Approx(1.0 / 3.0).epsilon(0.01));

  rng::Stream g(321);
  double m = 0.0, v = 0.0;
  for (int i = 0; i < n; ++i) {
    double x = g.normal();
    m += x;
    v += x * x;
  }
  CHECK(m / n == doctest::Approx(0.0).epsilon(0.02));
  CHECK(v / n == doctest::Approx(1.0).epsilon(0.02));
}

TEST_CASE("below produces full range without bias at small n") {
  rng::Stream s(5);
  std::vector<int> counts(7, 0);
  for (int i = 0; i < 70000; ++i) counts[s.below(7)]++;
  for (int c : counts) CHECK(std::abs(c - 10000) < 500);
}
