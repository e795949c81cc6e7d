#include "doctest.h"
#include "fedq/bound.hpp"

#include <cmath>
#include <stdexcept>
#include <vector>

using namespace fedq;

namespace {

bound::ProblemConstants unit_constants() {
  bound::ProblemConstants c;
  c.L = 1.0;
  c.sigma_sq = 1.0;
  c.tau_sq = 1.0;
  c.G_sq = 0.0;
  c.dim = 4;
  c.batch_size = 1;
  c.num_devices = 1;
  c.p = {1.0};
  c.delta_F = 1.0;
  return c;
}

}  // namespace

TEST_CASE("hand-evaluated four-term sum") {
  auto c = unit_constants();
  std::vector<double> dg{0.1}, dw{0.1};
  auto t = bound::theorem1_rhs(c, 100, 1, dg, dw);
  // 4*1/10 + 2*1*1*(2*0.1 + 1)/10 + 0 + 2*1*2*1*(1.1*0.1)
  CHECK(t.term1 == doctest::Approx(0.4).epsilon(1e-12));
  CHECK(t.term2 == doctest::Approx(0.24).epsilon(1e-12));
  CHECK(t.term3 == doctest::Approx(0.0));
  CHECK(t.term4 == doctest::Approx(0.44).epsilon(1e-12));
  CHECK(t.total() == doctest::Approx(1.08).epsilon(1e-12));
}

TEST_CASE("surviving terms at delta = 0, H = 1") {
  auto c = unit_constants();
  c.delta_F = 2.0;
  c.sigma_sq = 3.0;
  std::vector<double> zero{0.0};
  auto t = bound::theorem1_rhs(c, 400, 1, zero, zero);
  CHECK(t.term1 == doctest::Approx(8.0 / 20.0).epsilon(1e-12));
  CHECK(t.term2 == doctest::Approx(2.0 * 3.0 * 1.0 / 20.0).epsilon(1e-12));
  CHECK(t.term3 == 0.0);
  CHECK(t.term4 == 0.0);
}

TEST_CASE("quadrupling K halves the K-dependent terms, floor unchanged") {
  auto c = unit_constants();
  c.G_sq = 0.5;
  std::vector<double> dg{0.2}, dw{0.05};
  auto t1 = bound::theorem1_rhs(c, 100, 4, dg, dw);
  auto t4 = bound::theorem1_rhs(c, 400, 4, dg, dw);
  CHECK(t4.term1 == doctest::Approx(0.5 * t1.term1).epsilon(1e-12));
  CHECK(t4.term2 == doctest::Approx(0.5 * t1.term2).epsilon(1e-12));
  CHECK(t4.term3 == doctest::Approx(0.5 * t1.term3).epsilon(1e-12));
  CHECK(t4.term4 == doctest::Approx(t1.term4).epsilon(1e-15));
}

TEST_CASE("monotone in the constants, non-increasing in K") {
  auto c = unit_constants();
  c.G_sq = 0.3;
  std::vector<double> dg{0.1}, dw{0.02};
  double base = bound::theorem1_rhs(c, 200, 5, dg, dw).total();

  auto c2 = c;
  c2.delta_F *= 2.0;
  CHECK(bound::theorem1_rhs(c2, 200, 5, dg, dw).total() > base);
  c2 = c;
  c2.sigma_sq *= 2.0;
  CHECK(bound::theorem1_rhs(c2, 200, 5, dg, dw).total() > base);
  c2 = c;
  c2.G_sq *= 2.0;
  CHECK(bound::theorem1_rhs(c2, 200, 5, dg, dw).total() > base);
  c2 = c;
  c2.dim *= 4;
  CHECK(bound::theorem1_rhs(c2, 200, 5, dg, dw).total() > base);

  CHECK(bound::theorem1_rhs(c, 800, 5, dg, dw).total() < base);
  CHECK(bound::theorem1_rhs(c, 200, 10, dg, dw).total() > base);
  std::vector<double> dg2{0.2};
  CHECK(bound::theorem1_rhs(c, 200, 5, dg2, dw).total() > base);
}

TEST_CASE("with delta_g = 0 the rhs is independent of H") {
  auto c = unit_constants();
  c.G_sq = 1.0;
  std::vector<double> dg{0.0}, dw{0.05};
  auto a = bound::theorem1_rhs(c, 300, 1, dg, dw);
  auto b = bound::theorem1_rhs(c, 300, 25, dg, dw);
  CHECK(a.total() == doctest::Approx(b.total()).epsilon(1e-15));
  // and the floor term is the only delta_w contribution
  CHECK(a.term4 > 0.0);
}

TEST_CASE("check_bound needs the theorem schedule and reports warnings") {
  fl::TrainingTrace trace;
  trace.schedule = fl::LrSchedule::per_round_decay;
  trace.grad_norm_sq = {1.0};
  auto c = unit_constants();
  std::vector<double> z{0.0};
  CHECK_THROWS_AS(bound::check_bound(trace, c, z, z), std::invalid_argument);

  trace.schedule = fl::LrSchedule::sqrt_mn_over_k;
  trace.total_iters = 4;  // eta = sqrt(1/4) = 0.5
  trace.local_iters = 1;
  trace.grad_norm_sq = {0.0, 0.0};
  auto rep = bound::check_bound(trace, c, z, z);
  CHECK(rep.lhs == 0.0);
  CHECK(rep.holds);
  CHECK(rep.warnings.empty());

  auto rep2 = bound::check_bound(trace, c, z, z);
  CHECK(rep.rhs == rep2.rhs);  // pure function

  auto big = c;
  big.L = 3.0;  // eta*L = 1.5 > 1 and 3*eta^2*L^2*H^2 > 1
  auto rep3 = bound::check_bound(trace, big, z, z);
  CHECK(rep3.warnings.size() == 2);
}
