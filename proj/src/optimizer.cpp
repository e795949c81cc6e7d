#include "fedq/optimizer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>
#include <string>

#include <Eigen/Dense>

#include "opt_internal.hpp"

namespace fedq::opt {

namespace detail {

double exact_continuous_objective(const OptFleet& fleet, const ConvergenceCoeffs& coeffs,
                                  double local_iters, std::span<const double> v_g,
                                  std::span<const double> v_w) {
  const int N = fleet.num_devices();
  const double c = delta_scale(fleet);
  double s1 = 0.0, s2 = 0.0, s3 = 0.0;
  for (int n = 0; n < N; ++n) {
    double p2 = fleet.p[n] * fleet.p[n];
    double dg = c * v_g[n], dw = c * v_w[n];
    s1 += p2 * dg;
    s2 += p2 * dg * dw;
    s3 += p2 * dw;
  }
  double den = coeffs.eps - coeffs.B0 * local_iters * s2 - coeffs.C0 * s3;
  if (!(den > 0.0)) return std::numeric_limits<double>::infinity();
  double num = coeffs.A1 + coeffs.A0 * local_iters * s1;
  double k_real = num * num / (N * den * den);
  double t_round = 0.0;
  for (int n = 0; n < N; ++n) {
    t_round = std::max(t_round, round_delay(fleet, n, local_iters, q_of_v(v_g[n]), q_of_v(v_w[n])));
  }
  return k_real / local_iters * t_round;
}

}  // namespace detail

void ConvergenceCoeffs::validate() const {
  if (A1 < 0.0 || A0 < 0.0 || B0 < 0.0 || C0 < 0.0) {
    throw std::invalid_argument("ConvergenceCoeffs: coefficients must be nonnegative");
  }
  if (!(eps > 0.0)) throw std::invalid_argument("ConvergenceCoeffs: eps must be > 0");
}

FeasibleSets FeasibleSets::defaults() {
  FeasibleSets s;
  s.H.resize(50);
  std::iota(s.H.begin(), s.H.end(), 1);
  s.q_g = {2, 3, 4, 8, 16, 32};
  s.q_w = {4, 8, 16, 32};
  return s;
}

void FeasibleSets::validate() const {
  auto check = [](const std::vector<int>& v, int cap, const char* what) {
    if (v.empty()) throw std::invalid_argument(std::string("FeasibleSets: empty ") + what);
    int prev = 0;
    for (int x : v) {
      if (x <= prev || x > cap) {
        throw std::invalid_argument(std::string("FeasibleSets: ") + what +
                                    " must be ascending positive integers <= " +
                                    std::to_string(cap));
      }
      prev = x;
    }
  };
  check(H, 50, "H");
  check(q_g, 32, "q_g");
  check(q_w, 32, "q_w");
}

void OptFleet::validate() const {
  const std::size_t n = p.size();
  if (n == 0 || beta.size() != n || u1.size() != n || u2.size() != n) {
    throw std::invalid_argument("OptFleet: inconsistent per-device arrays");
  }
  if (!lambda.empty() && lambda.size() != n) {
    throw std::invalid_argument("OptFleet: lambda must be empty or per-device");
  }
  if (dim < 1) throw std::invalid_argument("OptFleet: dim must be >= 1");
  double ps = 0.0;
  bool any_delay = false;
  for (std::size_t i = 0; i < n; ++i) {
    if (u1[i] < 0.0 || u2[i] < 0.0 || beta[i].beta1 < 0.0 || beta[i].beta0 < 0.0) {
      throw std::invalid_argument("OptFleet: delay coefficients must be nonnegative");
    }
    if (u1[i] > 0.0 || u2[i] > 0.0 || beta[i].beta1 > 0.0 || beta[i].beta0 > 0.0) any_delay = true;
    ps += p[i];
  }
  if (std::abs(ps - 1.0) > 1e-9) throw std::invalid_argument("OptFleet: weights must sum to 1");
  if (!any_delay) throw std::invalid_argument("OptFleet: all delay coefficients are zero");
}

OptFleet make_fleet(const std::vector<delay::DeviceDelay>& devices,
                    const delay::CommCoeffs& coeffs, std::span<const double> weights,
                    quant::DeltaForm form) {
  if (devices.empty() || devices.size() != weights.size()) {
    throw std::invalid_argument("make_fleet: need matching nonempty devices and weights");
  }
  coeffs.validate();
  OptFleet f;
  f.dim = coeffs.dim;
  f.delta_form = form;
  f.p.assign(weights.begin(), weights.end());
  for (const auto& dev : devices) {
    f.beta.push_back(dev.compute.simplified ? *dev.compute.simplified
                                            : delay::derive_beta(dev.compute));
    if (!(dev.rate_bps > 0.0)) throw std::invalid_argument("make_fleet: rate must be > 0");
    f.u1.push_back(coeffs.s1 * static_cast<double>(coeffs.dim) / dev.rate_bps);
    f.u2.push_back(coeffs.s0 / dev.rate_bps);
  }
  f.validate();
  return f;
}

double required_iterations(const ConvergenceCoeffs& coeffs, double local_iters,
                           std::span<const double> p, std::span<const double> delta_g,
                           std::span<const double> delta_w) {
  coeffs.validate();
  if (!(local_iters >= 1.0)) throw std::invalid_argument("required_iterations: H must be >= 1");
  const std::size_t N = p.size();
  if (N == 0 || delta_g.size() != N || delta_w.size() != N) {
    throw std::invalid_argument("required_iterations: mismatched per-device arrays");
  }
  double s1 = 0.0, s2 = 0.0, s3 = 0.0;
  for (std::size_t n = 0; n < N; ++n) {
    double p2 = p[n] * p[n];
    s1 += p2 * delta_g[n];
    s2 += p2 * delta_g[n] * delta_w[n];
    s3 += p2 * delta_w[n];
  }
  double den = coeffs.eps - coeffs.B0 * local_iters * s2 - coeffs.C0 * s3;
  if (!(den > 0.0)) {
    char buf[160];
    std::snprintf(buf, sizeof(buf),
                  "infeasible: convergence constraint cannot reach eps=%g at any K "
                  "(quantization floor exceeds eps by %g)",
                  coeffs.eps, -den);
    throw infeasible_error(buf);
  }
  double num = coeffs.A1 + coeffs.A0 * local_iters * s1;
  return num * num / (static_cast<double>(N) * den * den);
}

std::optional<Strategy> evaluate_strategy(const OptFleet& fleet, const ConvergenceCoeffs& coeffs,
                                          int local_iters, std::span<const int> q_g,
                                          std::span<const int> q_w) {
  const int N = fleet.num_devices();
  std::vector<double> dg(N), dw(N);
  for (int n = 0; n < N; ++n) {
    dg[n] = quant::delta_coefficient(q_g[n], static_cast<int>(fleet.dim), fleet.delta_form);
    dw[n] = quant::delta_coefficient(q_w[n], static_cast<int>(fleet.dim), fleet.delta_form);
  }
  double k_real;
  try {
    k_real = required_iterations(coeffs, local_iters, fleet.p, dg, dw);
  } catch (const infeasible_error&) {
    return std::nullopt;
  }
  Strategy s;
  s.H = local_iters;
  s.q_g.assign(q_g.begin(), q_g.end());
  s.q_w.assign(q_w.begin(), q_w.end());
  s.K_real = k_real;
  double k_ceil = std::max(1.0, std::ceil(k_real));
  double rounds = std::ceil(k_ceil / local_iters);
  s.K = static_cast<long long>(std::min(k_ceil, 9.0e18));
  s.rounds = static_cast<long long>(std::min(rounds, 9.0e18));
  for (int n = 0; n < N; ++n) {
    double t = fleet.u1[n] * q_g[n] + fleet.u2[n] +
               delay::compute_delay_simplified(fleet.beta[n], q_w[n], local_iters);
    s.t_round_s = std::max(s.t_round_s, t);
  }
  s.t_total_s = rounds * s.t_round_s;
  return s;
}

bool strategy_less(const Strategy& a, const Strategy& b) {
  if (a.t_total_s != b.t_total_s) return a.t_total_s < b.t_total_s;
  if (a.H != b.H) return a.H < b.H;
  long long qa = std::accumulate(a.q_g.begin(), a.q_g.end(), 0ll);
  long long qb = std::accumulate(b.q_g.begin(), b.q_g.end(), 0ll);
  if (qa != qb) return qa > qb;
  if (a.q_g != b.q_g) return a.q_g < b.q_g;
  return a.q_w < b.q_w;
}

FitResult fit_coefficients(std::span<const FitRun> runs, double eps, int num_devices,
                           std::span<const double> p, double max_rel_residual) {
  if (!(eps > 0.0)) throw std::invalid_argument("fit_coefficients: eps must be > 0");
  if (static_cast<int>(p.size()) != num_devices || num_devices < 1) {
    throw std::invalid_argument("fit_coefficients: p must have num_devices entries");
  }
  if (runs.size() < 4) {
    throw needs_more_samples_error("fit_coefficients: need at least 4 runs");
  }
  const int R = static_cast<int>(runs.size());
  Eigen::MatrixXd A(R, 4);
  Eigen::VectorXd b(R);
  for (int i = 0; i < R; ++i) {
    const auto& run = runs[i];
    if (run.delta_g.size() != p.size() || run.delta_w.size() != p.size()) {
      throw std::invalid_argument("fit_coefficients: run delta arrays must match p");
    }
    if (!(run.observed_K > 0.0) || !(run.local_iters >= 1.0)) {
      throw std::invalid_argument("fit_coefficients: runs need K > 0 and H >= 1");
    }
    double s1 = 0.0, s2 = 0.0, s3 = 0.0;
    for (int n = 0; n < num_devices; ++n) {
      double p2 = p[n] * p[n];
      s1 += p2 * run.delta_g[n];
      s2 += p2 * run.delta_g[n] * run.delta_w[n];
      s3 += p2 * run.delta_w[n];
    }
    double root = std::sqrt(num_devices * run.observed_K);
    A(i, 0) = 1.0;
    A(i, 1) = run.local_iters * s1;
    A(i, 2) = root * run.local_iters * s2;
    A(i, 3) = root * s3;
    b(i) = root * eps;
  }

  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(A);
  qr.setThreshold(1e-10);
  if (qr.rank() < 4) {
    throw needs_more_samples_error(
        "fit_coefficients: rank-deficient design (coefficients unidentifiable); vary H and the "
        "quantization levels across runs");
  }

  // Exact nonnegative least squares over the 16 support sets.
  double best_res = std::numeric_limits<double>::infinity();
  Eigen::Vector4d best_x = Eigen::Vector4d::Zero();
  for (int mask = 0; mask < 16; ++mask) {
    std::vector<int> cols;
    for (int j = 0; j < 4; ++j) {
      if (mask & (1 << j)) cols.push_back(j);
    }
    Eigen::VectorXd x = Eigen::VectorXd::Zero(4);
    double res;
    if (cols.empty()) {
      res = b.norm();
    } else {
      Eigen::MatrixXd As(R, static_cast<int>(cols.size()));
      for (std::size_t j = 0; j < cols.size(); ++j) As.col(j) = A.col(cols[j]);
      Eigen::VectorXd xs = As.colPivHouseholderQr().solve(b);
      bool ok = true;
      for (int j = 0; j < xs.size(); ++j) {
        if (xs(j) < -1e-9) {
          ok = false;
          break;
        }
      }
      if (!ok) continue;
      for (std::size_t j = 0; j < cols.size(); ++j) x(cols[j]) = std::max(0.0, xs(j));
      res = (A * x - b).norm();
    }
    if (res < best_res) {
      best_res = res;
      best_x = x;
    }
  }

  FitResult out;
  out.coeffs.A1 = best_x(0);
  out.coeffs.A0 = best_x(1);
  out.coeffs.B0 = best_x(2);
  out.coeffs.C0 = best_x(3);
  out.coeffs.eps = eps;
  out.rel_residual = best_res / b.norm();
  if (out.rel_residual > max_rel_residual) {
    throw fit_rejected_error("fit_coefficients: relative residual " +
                             std::to_string(out.rel_residual) + " exceeds " +
                             std::to_string(max_rel_residual));
  }
  return out;
}

namespace {

int nearest_member(double value, const std::vector<int>& set, bool tie_larger) {
  int best = set.front();
  double best_d = std::abs(value - best);
  for (int m : set) {
    double d = std::abs(value - m);
    if (d < best_d - 1e-12 || (std::abs(d - best_d) <= 1e-12 && tie_larger && m > best)) {
      best = m;
      best_d = d;
    }
  }
  return best;
}

struct GridSpec {
  std::vector<int> groups;          // device -> class
  int num_groups = 0;
  std::vector<double> p2_of_group;  // sum of p_n^2 per class
};

GridSpec make_grid(const OptFleet& fleet, std::span<const int> groups) {
  GridSpec g;
  const int N = fleet.num_devices();
  if (groups.empty()) {
    g.groups.resize(N);
    std::iota(g.groups.begin(), g.groups.end(), 0);
    g.num_groups = N;
  } else {
    if (static_cast<int>(groups.size()) != N) {
      throw std::invalid_argument("brute_force: groups must have one entry per device");
    }
    g.groups.assign(groups.begin(), groups.end());
    g.num_groups = *std::max_element(groups.begin(), groups.end()) + 1;
    for (int v : groups) {
      if (v < 0 || v >= g.num_groups) {
        throw std::invalid_argument("brute_force: group ids must be contiguous from 0");
      }
    }
  }
  g.p2_of_group.assign(g.num_groups, 0.0);
  for (int n = 0; n < N; ++n) g.p2_of_group[g.groups[n]] += fleet.p[n] * fleet.p[n];
  return g;
}

struct GridBest {
  double t_total = std::numeric_limits<double>::infinity();
  int H = 0;
  long long assignment = -1;
  long long qg_sum = 0;  // over devices

  bool better_than(const GridBest& o) const {
    if (t_total != o.t_total) return t_total < o.t_total;
    if (H != o.H) return H < o.H;
    if (qg_sum != o.qg_sum) return qg_sum > o.qg_sum;
    return assignment < o.assignment;
  }
};

// Scores every (H, assignment) pair in [a_lo, a_hi) and returns the block
// optimum. Assignment digits: q_g indices for groups 0..G-1 (most
// significant), then q_w indices.
GridBest scan_block(const OptFleet& fleet, const ConvergenceCoeffs& coeffs,
                    const FeasibleSets& sets, const GridSpec& grid, long long a_lo,
                    long long a_hi) {
  const int N = fleet.num_devices();
  const int G = grid.num_groups;
  const double c = detail::delta_scale(fleet);
  std::vector<double> dg_of(sets.q_g.size()), dw_of(sets.q_w.size());
  for (std::size_t i = 0; i < sets.q_g.size(); ++i) dg_of[i] = c * detail::v_of_q(sets.q_g[i]);
  for (std::size_t i = 0; i < sets.q_w.size(); ++i) dw_of[i] = c * detail::v_of_q(sets.q_w[i]);

  std::vector<int> qg_idx(G), qw_idx(G);
  std::vector<double> a_dev(N), b_dev(N);
  GridBest best;

  for (long long a = a_lo; a < a_hi; ++a) {
    long long rem = a;
    for (int g = G - 1; g >= 0; --g) {
      qw_idx[g] = static_cast<int>(rem % sets.q_w.size());
      rem /= static_cast<long long>(sets.q_w.size());
    }
    for (int g = G - 1; g >= 0; --g) {
      qg_idx[g] = static_cast<int>(rem % sets.q_g.size());
      rem /= static_cast<long long>(sets.q_g.size());
    }

    double s1 = 0.0, s2 = 0.0, s3 = 0.0;
    long long qg_sum = 0;
    for (int g = 0; g < G; ++g) {
      double dg = dg_of[qg_idx[g]], dw = dw_of[qw_idx[g]];
      s1 += grid.p2_of_group[g] * dg;
      s2 += grid.p2_of_group[g] * dg * dw;
      s3 += grid.p2_of_group[g] * dw;
    }
    for (int n = 0; n < N; ++n) {
      int g = grid.groups[n];
      a_dev[n] = fleet.u1[n] * sets.q_g[qg_idx[g]] + fleet.u2[n];
      b_dev[n] = fleet.beta[n].beta1 * sets.q_w[qw_idx[g]] + fleet.beta[n].beta0;
      qg_sum += sets.q_g[qg_idx[g]];
    }

    for (int H : sets.H) {
      double den = coeffs.eps - coeffs.B0 * H * s2 - coeffs.C0 * s3;
      if (!(den > 0.0)) continue;
      double num = coeffs.A1 + coeffs.A0 * H * s1;
      double k_real = num * num / (N * den * den);
      double rounds = std::ceil(std::max(1.0, std::ceil(k_real)) / H);
      double t_round = 0.0;
      for (int n = 0; n < N; ++n) t_round = std::max(t_round, a_dev[n] + H * b_dev[n]);
      GridBest cand{rounds * t_round, H, a, qg_sum};
      if (cand.better_than(best)) best = cand;
    }
  }
  return best;
}

Strategy grid_best_to_strategy(const OptFleet& fleet, const ConvergenceCoeffs& coeffs,
                               const FeasibleSets& sets, const GridSpec& grid,
                               const GridBest& best) {
  if (best.assignment < 0) {
    throw infeasible_error("brute_force: no feasible strategy in the search space");
  }
  const int G = grid.num_groups;
  std::vector<int> qg_idx(G), qw_idx(G);
  long long rem = best.assignment;
  for (int g = G - 1; g >= 0; --g) {
    qw_idx[g] = static_cast<int>(rem % sets.q_w.size());
    rem /= static_cast<long long>(sets.q_w.size());
  }
  for (int g = G - 1; g >= 0; --g) {
    qg_idx[g] = static_cast<int>(rem % sets.q_g.size());
    rem /= static_cast<long long>(sets.q_g.size());
  }
  const int N = fleet.num_devices();
  std::vector<int> qg(N), qw(N);
  for (int n = 0; n < N; ++n) {
    qg[n] = sets.q_g[qg_idx[grid.groups[n]]];
    qw[n] = sets.q_w[qw_idx[grid.groups[n]]];
  }
  auto s = evaluate_strategy(fleet, coeffs, best.H, qg, qw);
  return *s;
}

Strategy brute_force_impl(const OptFleet& fleet, const ConvergenceCoeffs& coeffs,
                          const FeasibleSets& sets, std::span<const int> groups,
                          long long max_points, bool parallel) {
  fleet.validate();
  coeffs.validate();
  sets.validate();
  GridSpec grid = make_grid(fleet, groups);
  double points = static_cast<double>(sets.H.size());
  for (int g = 0; g < grid.num_groups; ++g) {
    points *= static_cast<double>(sets.q_g.size()) * static_cast<double>(sets.q_w.size());
  }
  if (points > static_cast<double>(max_points)) {
    throw budget_exceeded_error(
        "brute_force: search space of " + std::to_string(points) + " points exceeds budget " +
        std::to_string(max_points) + "; group devices into capability classes");
  }
  long long assignments = 1;
  for (int g = 0; g < grid.num_groups; ++g) {
    assignments *= static_cast<long long>(sets.q_g.size()) * sets.q_w.size();
  }

  constexpr long long kBlock = 4096;
  const long long blocks = (assignments + kBlock - 1) / kBlock;
  std::vector<GridBest> block_best(blocks);
  if (parallel) {
#pragma omp parallel for schedule(dynamic)
    for (long long blk = 0; blk < blocks; ++blk) {
      block_best[blk] = scan_block(fleet, coeffs, sets, grid, blk * kBlock,
                                   std::min(assignments, (blk + 1) * kBlock));
    }
  } else {
    for (long long blk = 0; blk < blocks; ++blk) {
      block_best[blk] = scan_block(fleet, coeffs, sets, grid, blk * kBlock,
                                   std::min(assignments, (blk + 1) * kBlock));
    }
  }
  GridBest best;
  for (const auto& cand : block_best) {
    if (cand.better_than(best)) best = cand;
  }
  return grid_best_to_strategy(fleet, coeffs, sets, grid, best);
}

}  // namespace

Strategy brute_force(const OptFleet& fleet, const ConvergenceCoeffs& coeffs,
                     const FeasibleSets& sets, std::span<const int> groups, long long max_points) {
  return brute_force_impl(fleet, coeffs, sets, groups, max_points, true);
}

Strategy brute_force_serial(const OptFleet& fleet, const ConvergenceCoeffs& coeffs,
                            const FeasibleSets& sets, std::span<const int> groups,
                            long long max_points) {
  return brute_force_impl(fleet, coeffs, sets, groups, max_points, false);
}

namespace {

// Feasible-set members bracketing a continuous value (equal when the value
// sits on or beyond a member).
std::pair<int, int> bracket_members(double value, const std::vector<int>& set) {
  int lo = set.front(), hi = set.back();
  for (int m : set) {
    if (m <= value) lo = m;
  }
  for (auto it = set.rbegin(); it != set.rend(); ++it) {
    if (*it >= value) hi = *it;
  }
  if (value < set.front()) hi = set.front();
  if (value > set.back()) lo = set.back();
  return {lo, hi};
}

}  // namespace

// Integerization of the relaxed solution. Nearest-member snapping alone can
// lose a large factor against the integer optimum when the continuous point
// falls between coarse set members, so the rounding considers both
// bracketing members per quantization level and a small window of H members
// (within 25% of the continuous H, where ceil(K/H) round-count effects
// live), then polishes with a deterministic adjacent-member descent. An
// already-integral feasible relaxed point is returned unchanged.
Strategy round_and_repair(const RelaxedSolution& relaxed, const OptFleet& fleet,
                          const ConvergenceCoeffs& coeffs, const FeasibleSets& sets) {
  fleet.validate();
  coeffs.validate();
  sets.validate();
  const int N = fleet.num_devices();
  if (static_cast<int>(relaxed.v_g.size()) != N || static_cast<int>(relaxed.v_w.size()) != N) {
    throw std::invalid_argument("round_and_repair: relaxed solution does not match fleet");
  }

  std::vector<double> qg_cont(N), qw_cont(N);
  for (int n = 0; n < N; ++n) {
    qg_cont[n] = detail::q_of_v(relaxed.v_g[n]);
    qw_cont[n] = detail::q_of_v(relaxed.v_w[n]);
  }

  // Echo an integral, feasible relaxed point (singleton-set pipelines).
  {
    bool integral = std::abs(relaxed.H - std::llround(relaxed.H)) < 1e-9 &&
                    std::binary_search(sets.H.begin(), sets.H.end(),
                                       static_cast<int>(std::llround(relaxed.H)));
    for (int n = 0; integral && n < N; ++n) {
      integral = std::abs(qg_cont[n] - std::llround(qg_cont[n])) < 1e-9 &&
                 std::binary_search(sets.q_g.begin(), sets.q_g.end(),
                                    static_cast<int>(std::llround(qg_cont[n]))) &&
                 std::abs(qw_cont[n] - std::llround(qw_cont[n])) < 1e-9 &&
                 std::binary_search(sets.q_w.begin(), sets.q_w.end(),
                                    static_cast<int>(std::llround(qw_cont[n])));
    }
    if (integral) {
      std::vector<int> qg(N), qw(N);
      for (int n = 0; n < N; ++n) {
        qg[n] = static_cast<int>(std::llround(qg_cont[n]));
        qw[n] = static_cast<int>(std::llround(qw_cont[n]));
      }
      auto echo =
          evaluate_strategy(fleet, coeffs, static_cast<int>(std::llround(relaxed.H)), qg, qw);
      if (echo) return *echo;
    }
  }

  std::optional<Strategy> best;
  auto offer = [&](int h, const std::vector<int>& qg, const std::vector<int>& qw) {
    auto s = evaluate_strategy(fleet, coeffs, h, qg, qw);
    if (s && (!best || strategy_less(*s, *best))) best = std::move(s);
  };

  std::vector<int> h_candidates;
  for (int h : sets.H) {
    if (h >= relaxed.H / 1.25 && h <= relaxed.H * 1.25) h_candidates.push_back(h);
  }
  if (h_candidates.empty()) h_candidates.push_back(nearest_member(relaxed.H, sets.H, false));

  std::vector<std::pair<int, int>> bg(N), bw(N);
  int corner_bits = 0;
  for (int n = 0; n < N; ++n) {
    bg[n] = bracket_members(qg_cont[n], sets.q_g);
    bw[n] = bracket_members(qw_cont[n], sets.q_w);
    corner_bits += 2;
  }
  if (corner_bits <= 12) {
    for (long long mask = 0; mask < (1ll << corner_bits); ++mask) {
      std::vector<int> qg(N), qw(N);
      for (int n = 0; n < N; ++n) {
        qg[n] = (mask >> n) & 1 ? bg[n].second : bg[n].first;
        qw[n] = (mask >> (N + n)) & 1 ? bw[n].second : bw[n].first;
      }
      for (int h : h_candidates) offer(h, qg, qw);
    }
  } else {
    // Large fleets: greedy bracket choice per coordinate at the nearest H,
    // then the H window.
    int h0 = nearest_member(relaxed.H, sets.H, false);
    std::vector<int> qg(N), qw(N);
    for (int n = 0; n < N; ++n) {
      qg[n] = nearest_member(qg_cont[n], sets.q_g, true);
      qw[n] = nearest_member(qw_cont[n], sets.q_w, true);
    }
    for (int n = 0; n < N; ++n) {
      for (int cand : {bg[n].first, bg[n].second}) {
        auto trial = qg;
        trial[n] = cand;
        auto a = evaluate_strategy(fleet, coeffs, h0, trial, qw);
        auto b = evaluate_strategy(fleet, coeffs, h0, qg, qw);
        if (a && (!b || strategy_less(*a, *b))) qg = trial;
      }
      for (int cand : {bw[n].first, bw[n].second}) {
        auto trial = qw;
        trial[n] = cand;
        auto a = evaluate_strategy(fleet, coeffs, h0, qg, trial);
        auto b = evaluate_strategy(fleet, coeffs, h0, qg, qw);
        if (a && (!b || strategy_less(*a, *b))) qw = trial;
      }
    }
    for (int h : h_candidates) offer(h, qg, qw);
  }

  if (best) {
    // Deterministic adjacent-member polish.
    auto index_of = [](const std::vector<int>& set, int v) {
      return static_cast<int>(std::lower_bound(set.begin(), set.end(), v) - set.begin());
    };
    bool improved = true;
    for (int pass = 0; improved && pass < 100; ++pass) {
      improved = false;
      Strategy cur = *best;
      auto try_point = [&](int h, const std::vector<int>& qg, const std::vector<int>& qw) {
        auto s = evaluate_strategy(fleet, coeffs, h, qg, qw);
        if (s && strategy_less(*s, *best)) {
          best = std::move(s);
          improved = true;
        }
      };
      int hi = index_of(sets.H, cur.H);
      if (hi > 0) try_point(sets.H[hi - 1], cur.q_g, cur.q_w);
      if (hi + 1 < static_cast<int>(sets.H.size())) try_point(sets.H[hi + 1], cur.q_g, cur.q_w);
      for (int n = 0; n < N; ++n) {
        for (int dir : {-1, +1}) {
          int gi = index_of(sets.q_g, cur.q_g[n]) + dir;
          if (gi >= 0 && gi < static_cast<int>(sets.q_g.size())) {
            auto qg = cur.q_g;
            qg[n] = sets.q_g[gi];
            try_point(cur.H, qg, cur.q_w);
          }
          int wi = index_of(sets.q_w, cur.q_w[n]) + dir;
          if (wi >= 0 && wi < static_cast<int>(sets.q_w.size())) {
            auto qw = cur.q_w;
            qw[n] = sets.q_w[wi];
            try_point(cur.H, cur.q_g, qw);
          }
        }
      }
    }
    return *best;
  }

  // No feasible point near the relaxed solution: nearest snap, then greedy
  // feasibility repair.
  int H = nearest_member(relaxed.H, sets.H, /*tie_larger=*/false);
  std::vector<int> qg(N), qw(N);
  for (int n = 0; n < N; ++n) {
    qg[n] = nearest_member(std::llround(qg_cont[n]), sets.q_g, true);
    qw[n] = nearest_member(std::llround(qw_cont[n]), sets.q_w, true);
  }

  const double c = detail::delta_scale(fleet);
  auto denominator = [&](int h, const std::vector<int>& g, const std::vector<int>& w) {
    double s2 = 0.0, s3 = 0.0;
    for (int n = 0; n < N; ++n) {
      double p2 = fleet.p[n] * fleet.p[n];
      double dg = c * detail::v_of_q(g[n]), dw = c * detail::v_of_q(w[n]);
      s2 += p2 * dg * dw;
      s3 += p2 * dw;
    }
    return coeffs.eps - coeffs.B0 * h * s2 - coeffs.C0 * s3;
  };
  auto t_round = [&](int h, const std::vector<int>& g, const std::vector<int>& w) {
    double t = 0.0;
    for (int n = 0; n < N; ++n) t = std::max(t, detail::round_delay(fleet, n, h, g[n], w[n]));
    return t;
  };

  auto set_index = [](const std::vector<int>& set, int value) {
    return static_cast<int>(std::lower_bound(set.begin(), set.end(), value) - set.begin());
  };

  // Greedy repair: raise a quantization level or lower H, preferring the
  // best denominator gain per unit of per-round delay cost.
  for (int iter = 0; denominator(H, qg, qw) <= 0.0; ++iter) {
    if (iter > 64 * (2 * N + 1)) {
      throw infeasible_error("round_and_repair: repair did not terminate");
    }
    double cur_den = denominator(H, qg, qw);
    double cur_t = t_round(H, qg, qw);
    struct Move {
      int kind = -1;  // 0: lower H, 1: raise q_g[n], 2: raise q_w[n]
      int n = -1;
      double gain = 0.0, cost = 0.0;
    };
    Move best;
    auto consider = [&](int kind, int n, double den_new, double t_new) {
      double gain = den_new - cur_den;
      if (!(gain > 0.0)) return;
      double cost = t_new - cur_t;
      Move m{kind, n, gain, cost};
      if (best.kind < 0) {
        best = m;
        return;
      }
      // Free or delay-reducing moves first (largest gain), then best ratio.
      bool m_free = m.cost <= 0.0, b_free = best.cost <= 0.0;
      if (m_free != b_free) {
        if (m_free) best = m;
        return;
      }
      if (m_free) {
        if (m.gain > best.gain) best = m;
        return;
      }
      if (m.gain / m.cost > best.gain / best.cost) best = m;
    };

    int h_idx = set_index(sets.H, H);
    if (h_idx > 0) {
      int h2 = sets.H[h_idx - 1];
      consider(0, -1, denominator(h2, qg, qw), t_round(h2, qg, qw));
    }
    for (int n = 0; n < N; ++n) {
      int gi = set_index(sets.q_g, qg[n]);
      if (gi + 1 < static_cast<int>(sets.q_g.size())) {
        auto g2 = qg;
        g2[n] = sets.q_g[gi + 1];
        consider(1, n, denominator(H, g2, qw), t_round(H, g2, qw));
      }
      int wi = set_index(sets.q_w, qw[n]);
      if (wi + 1 < static_cast<int>(sets.q_w.size())) {
        auto w2 = qw;
        w2[n] = sets.q_w[wi + 1];
        consider(2, n, denominator(H, qg, w2), t_round(H, qg, w2));
      }
    }
    if (best.kind < 0) {
      throw infeasible_error("round_and_repair: no feasible integer point in the feasible sets");
    }
    if (best.kind == 0) {
      H = sets.H[set_index(sets.H, H) - 1];
    } else if (best.kind == 1) {
      qg[best.n] = sets.q_g[set_index(sets.q_g, qg[best.n]) + 1];
    } else {
      qw[best.n] = sets.q_w[set_index(sets.q_w, qw[best.n]) + 1];
    }
  }

  auto s = evaluate_strategy(fleet, coeffs, H, qg, qw);
  if (!s) throw infeasible_error("round_and_repair: rounded strategy infeasible");
  return *s;
}

BaselineKind baseline_from_string(const std::string& s) {
  if (s == "ifedavg") return BaselineKind::ifedavg;
  if (s == "fedpaq") return BaselineKind::fedpaq;
  if (s == "quwg_pro") return BaselineKind::quwg_pro;
  if (s == "adah") return BaselineKind::adah;
  throw std::invalid_argument("unknown baseline: " + s);
}

std::string baseline_name(BaselineKind kind) {
  switch (kind) {
    case BaselineKind::ifedavg: return "ifedavg";
    case BaselineKind::fedpaq: return "fedpaq";
    case BaselineKind::quwg_pro: return "quwg_pro";
    case BaselineKind::adah: return "adah";
  }
  return "?";
}

Strategy baseline(BaselineKind kind, const OptFleet& fleet, const ConvergenceCoeffs& coeffs,
                  const FeasibleSets& sets) {
  fleet.validate();
  coeffs.validate();
  sets.validate();
  const int N = fleet.num_devices();
  std::optional<Strategy> best;
  auto offer = [&](int H, const std::vector<int>& qg, const std::vector<int>& qw) {
    auto s = evaluate_strategy(fleet, coeffs, H, qg, qw);
    if (s && (!best || strategy_less(*s, *best))) best = std::move(s);
  };

  switch (kind) {
    case BaselineKind::ifedavg: {
      std::vector<int> q32(N, 32);
      for (int H : sets.H) offer(H, q32, q32);
      break;
    }
    case BaselineKind::fedpaq: {
      std::vector<int> qw32(N, 32);
      for (int qg_val : sets.q_g) {
        std::vector<int> qg(N, qg_val);
        for (int H : sets.H) offer(H, qg, qw32);
      }
      break;
    }
    case BaselineKind::quwg_pro: {
      // Gradient levels proportional to the bandwidth share, weights at 16
      // bits (nearest feasible member).
      std::vector<double> base(N);
      for (int n = 0; n < N; ++n) {
        if (!fleet.lambda.empty()) {
          base[n] = fleet.lambda[n];
        } else {
          base[n] = fleet.u1[n] > 0.0 ? 1.0 / fleet.u1[n] : std::numeric_limits<double>::infinity();
        }
      }
      double base_max = *std::max_element(base.begin(), base.end());
      int qg_max = sets.q_g.back();
      std::vector<int> qg(N), qw(N, nearest_member(16.0, sets.q_w, true));
      for (int n = 0; n < N; ++n) {
        double raw = std::isfinite(base[n]) && std::isfinite(base_max) && base_max > 0.0
                         ? qg_max * base[n] / base_max
                         : qg_max;
        qg[n] = nearest_member(raw, sets.q_g, true);
      }
      for (int H : sets.H) offer(H, qg, qw);
      break;
    }
    case BaselineKind::adah:
      throw std::invalid_argument("baseline: adah is a round schedule, use adah_schedule()");
  }
  if (!best) {
    throw infeasible_error("baseline " + baseline_name(kind) + ": no feasible strategy");
  }
  return *best;
}

std::function<int(int, double)> adah_schedule(int h0) {
  if (h0 < 1) throw std::invalid_argument("adah_schedule: h0 must be >= 1");
  return [h0](int, double loss_ratio) {
    double r = std::sqrt(std::max(0.0, loss_ratio));
    return std::max(1, static_cast<int>(std::llround(r * h0)));
  };
}

Strategy optimize_strategy(const OptFleet& fleet, const ConvergenceCoeffs& coeffs,
                           const FeasibleSets& sets, const SolveOptions& options) {
  std::optional<Strategy> best;
  auto offer = [&](const Strategy& s) {
    if (!best || strategy_less(s, *best)) best = s;
  };

  std::string gp_failure;
  try {
    offer(round_and_repair(solve_relaxed(fleet, coeffs, sets, options), fleet, coeffs, sets));
  } catch (const std::exception& e) {
    gp_failure = e.what();
  }
  auto in_sets = [&](const Strategy& s) {
    auto member = [](const std::vector<int>& set, int v) {
      return std::binary_search(set.begin(), set.end(), v);
    };
    for (int q : s.q_g) {
      if (!member(sets.q_g, q)) return false;
    }
    for (int q : s.q_w) {
      if (!member(sets.q_w, q)) return false;
    }
    return true;
  };
  for (auto kind : {BaselineKind::ifedavg, BaselineKind::fedpaq, BaselineKind::quwg_pro}) {
    try {
      Strategy s = baseline(kind, fleet, coeffs, sets);
      if (in_sets(s)) offer(s);
    } catch (const infeasible_error&) {
    }
  }
  if (!best) {
    throw infeasible_error("optimize_strategy: no feasible strategy" +
                           (gp_failure.empty() ? "" : " (" + gp_failure + ")"));
  }

  // Deterministic coordinate polish over adjacent feasible-set members.
  const int N = fleet.num_devices();
  auto index_of = [](const std::vector<int>& set, int v) {
    return static_cast<int>(std::lower_bound(set.begin(), set.end(), v) - set.begin());
  };
  bool improved = true;
  for (int pass = 0; improved && pass < 200; ++pass) {
    improved = false;
    Strategy cur = *best;
    auto try_point = [&](int H, const std::vector<int>& qg, const std::vector<int>& qw) {
      auto s = evaluate_strategy(fleet, coeffs, H, qg, qw);
      if (s && strategy_less(*s, *best)) {
        best = std::move(s);
        improved = true;
      }
    };
    int hi = index_of(sets.H, cur.H);
    if (hi > 0) try_point(sets.H[hi - 1], cur.q_g, cur.q_w);
    if (hi + 1 < static_cast<int>(sets.H.size())) try_point(sets.H[hi + 1], cur.q_g, cur.q_w);
    for (int n = 0; n < N; ++n) {
      for (int dir : {-1, +1}) {
        int gi = index_of(sets.q_g, cur.q_g[n]) + dir;
        if (gi >= 0 && gi < static_cast<int>(sets.q_g.size())) {
          auto qg = cur.q_g;
          qg[n] = sets.q_g[gi];
          try_point(cur.H, qg, cur.q_w);
        }
        int wi = index_of(sets.q_w, cur.q_w[n]) + dir;
        if (wi >= 0 && wi < static_cast<int>(sets.q_w.size())) {
          auto qw = cur.q_w;
          qw[n] = sets.q_w[wi];
          try_point(cur.H, cur.q_g, qw);
        }
      }
    }
  }
  return *best;
}

}  // namespace fedq::opt
