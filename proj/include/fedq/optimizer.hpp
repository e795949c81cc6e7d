#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

#include "fedq/delay.hpp"
#include "fedq/quantization.hpp"

// Service-delay minimization over (H, q_g per device, q_w per device):
//
//   minimize  ceil(K / H) * max_n { u1_n q_g_n + u2_n + H (beta1_n q_w_n + beta0_n) }
//   where     K = (A1 + A0 H S1)^2 / (N (eps - B0 H S2 - C0 S3)^2)
//             S1 = sum p_n^2 delta_g_n, S2 = sum p_n^2 delta_g_n delta_w_n,
//             S3 = sum p_n^2 delta_w_n.
//
// The relaxed problem substitutes v = 1/(2^q - 1) (so delta = c_d * v
// exactly) and solves a geometric program in log variables; bit-widths in the
// delay terms are handled by successively refit monomials q ~ kappa * v^-a,
// tangent (and exact) at the expansion point, which majorize the true
// q(v) = log2(1 + 1/v). Integer strategies come from nearest-member rounding
// plus a greedy feasibility repair; a brute-force enumerator serves as the
// oracle.

namespace fedq::opt {

struct infeasible_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct needs_more_samples_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct fit_rejected_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct budget_exceeded_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct solver_failure_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ConvergenceCoeffs {
  double A1 = 0.0;
  double A0 = 0.0;
  double B0 = 0.0;
  double C0 = 0.0;
  double eps = 1.0;  // target threshold, > 0

  void validate() const;
};

struct FeasibleSets {
  std::vector<int> H;
  std::vector<int> q_g;
  std::vector<int> q_w;

  static FeasibleSets defaults();  // H 1..50, q_g {2,3,4,8,16,32}, q_w {4,8,16,32}
  void validate() const;           // nonempty, ascending, q <= 32, H <= 50
};

// Per-device delay parameters in the linear form consumed by the optimizer.
struct OptFleet {
  std::vector<delay::BetaCoeffs> beta;  // compute: H * (beta1 q_w + beta0)
  std::vector<double> u1;               // comm: u1 q_g + u2, u1 = s1 d / r
  std::vector<double> u2;               //                    u2 = s0 / r
  std::vector<double> p;                // aggregation weights, sum to 1
  std::vector<double> lambda;           // bandwidth shares (optional, for quwg_pro)
  long long dim = 1;                    // model dimension d
  quant::DeltaForm delta_form = quant::DeltaForm::halved;

  int num_devices() const { return static_cast<int>(p.size()); }
  void validate() const;
};

OptFleet make_fleet(const std::vector<delay::DeviceDelay>& devices,
                    const delay::CommCoeffs& coeffs, std::span<const double> weights,
                    quant::DeltaForm form = quant::DeltaForm::halved);

struct Strategy {
  int H = 1;
  std::vector<int> q_g;
  std::vector<int> q_w;
  double K_real = 0.0;     // Eq.-14 value before rounding
  long long K = 0;         // ceil(K_real)
  long long rounds = 0;    // ceil(K / H)
  double t_round_s = 0.0;  // straggler per-round delay
  double t_total_s = 0.0;  // rounds * t_round
};

// Iterations required to satisfy the convergence constraint with equality
// (returned as a real; callers round up at strategy finalization). Throws
// infeasible_error when the constraint denominator is nonpositive (eps
// unreachable at any K).
double required_iterations(const ConvergenceCoeffs& coeffs, double local_iters,
                           std::span<const double> p, std::span<const double> delta_g,
                           std::span<const double> delta_w);

// Exact integer-strategy evaluation; nullopt when infeasible.
std::optional<Strategy> evaluate_strategy(const OptFleet& fleet, const ConvergenceCoeffs& coeffs,
                                          int local_iters, std::span<const int> q_g,
                                          std::span<const int> q_w);

// Deterministic preference order: smaller T_tot, then smaller H, then larger
// sum of q_g, then lexicographically smaller (q_g, q_w).
bool strategy_less(const Strategy& a, const Strategy& b);

// --- Coefficient fitting -------------------------------------------------

struct FitRun {
  double local_iters = 1.0;
  std::vector<double> delta_g;
  std::vector<double> delta_w;
  double observed_K = 1.0;
};

struct FitResult {
  ConvergenceCoeffs coeffs;
  double rel_residual = 0.0;
};

// Nonnegative least squares for (A1, A0, B0, C0) from observed (H, deltas, K)
// runs; the relation is linear in the coefficients after multiplying the
// constraint through by sqrt(N K). Throws needs_more_samples_error on a
// rank-deficient design (fewer than 4 runs or unidentifiable columns) and
// fit_rejected_error when the relative residual exceeds max_rel_residual.
FitResult fit_coefficients(std::span<const FitRun> runs, double eps, int num_devices,
                           std::span<const double> p, double max_rel_residual = 0.25);

// --- Relaxed solve and rounding ------------------------------------------

struct SolveOptions {
  double gap_tolerance = 1e-10;   // barrier duality-gap target (per constraint)
  int max_outer_refits = 40;      // monomial refit iterations
  int max_newton_iters = 400;     // per barrier stage
  int multistarts = 3;
};

struct RelaxedSolution {
  double H = 1.0;
  std::vector<double> v_g, v_w;  // auxiliary variables, v = 1/(2^q - 1)
  std::vector<double> q_g, q_w;  // exact continuous bits log2(1 + 1/v)
  double phi = 0.0;              // sqrt(N K) slack
  double psi = 0.0;              // solver objective (monomial delay model)
  double objective = 0.0;        // exact continuous T_tot at the solution
  double kkt_residual = 0.0;
  int outer_iterations = 0;
};

RelaxedSolution solve_relaxed(const OptFleet& fleet, const ConvergenceCoeffs& coeffs,
                              const FeasibleSets& sets, const SolveOptions& options = {});

// Nearest-member rounding of a relaxed solution, with greedy feasibility
// repair (raise the quantization level or lower H with the best
// feasibility-gain per delay-cost) when the rounded point violates the
// convergence constraint. Throws infeasible_error when no feasible integer
// point is reachable.
Strategy round_and_repair(const RelaxedSolution& relaxed, const OptFleet& fleet,
                          const ConvergenceCoeffs& coeffs, const FeasibleSets& sets);

// Exhaustive search over (H, per-group q_g, per-group q_w). `groups` maps each
// device to a capability class sharing one decision (empty: one class per
// device). Throws budget_exceeded_error when the grid exceeds max_points.
Strategy brute_force(const OptFleet& fleet, const ConvergenceCoeffs& coeffs,
                     const FeasibleSets& sets, std::span<const int> groups = {},
                     long long max_points = 10'000'000);
Strategy brute_force_serial(const OptFleet& fleet, const ConvergenceCoeffs& coeffs,
                            const FeasibleSets& sets, std::span<const int> groups = {},
                            long long max_points = 10'000'000);

// --- Baselines ------------------------------------------------------------

enum class BaselineKind { ifedavg, fedpaq, quwg_pro, adah };

BaselineKind baseline_from_string(const std::string& s);
std::string baseline_name(BaselineKind kind);

// Static baseline strategies: ifedavg (full precision, H scanned), fedpaq
// (full-precision weights, one shared q_g, 2-d scan), quwg_pro (q_g
// proportional to bandwidth share, q_w = 16, H scanned). adah is a round
// schedule, not a static strategy; use adah_schedule.
Strategy baseline(BaselineKind kind, const OptFleet& fleet, const ConvergenceCoeffs& coeffs,
                  const FeasibleSets& sets);

// H^t = round(sqrt(F^t / F^0) * h0), floored at 1.
std::function<int(int, double)> adah_schedule(int h0 = 30);

// Full pipeline: relaxed solve + rounding, with the static baselines added to
// the candidate pool so the returned strategy never loses to a restricted
// scan of its own search space.
Strategy optimize_strategy(const OptFleet& fleet, const ConvergenceCoeffs& coeffs,
                           const FeasibleSets& sets, const SolveOptions& options = {});

}  // namespace fedq::opt
