#pragma once

#include <span>
#include <string>
#include <vector>

#include "fedq/fl.hpp"

// Convergence-bound evaluator: the four-term upper bound on the mean squared
// gradient norm (1/K) sum_k ||grad F(w^k)||^2 of quantized local SGD run with
// step size eta = sqrt(MN/K):
//
//   4*dF/sqrt(MNK) + 2*L*sigma^2*(2*H*dbar_g + pbar)/sqrt(MNK)
//   + 12*M*L*H*dbar_g*G^2/sqrt(MNK)
//   + 2*L*sqrt(d)*tau * sum_n p_n^2 (delta_g_n + 1) delta_w_n
//
// with dbar_g = sum p_n^2 delta_g_n and pbar = sum p_n^2. The fourth term is
// the quantization floor: independent of K and H.

namespace fedq::bound {

struct ProblemConstants {
  double L = 0.0;
  double sigma_sq = 0.0;
  double tau_sq = 0.0;
  double G_sq = 0.0;
  long long dim = 1;      // d
  int batch_size = 1;     // M
  int num_devices = 1;    // N
  std::vector<double> p;  // aggregation weights, sum to 1
  double delta_F = 0.0;   // F(w^0) - F(w^K)

  void validate() const;  // throws std::invalid_argument

  double p_bar() const;  // sum p_n^2
};

ProblemConstants from_estimates(const fl::EstimatedConstants& est, long long dim, int batch_size,
                                std::span<const double> weights);

struct BoundTerms {
  double term1 = 0.0, term2 = 0.0, term3 = 0.0, term4 = 0.0;
  double total() const { return term1 + term2 + term3 + term4; }
};

// Right-hand side of the bound, term by term, exactly as printed above.
BoundTerms theorem1_rhs(const ProblemConstants& c, long long total_iters, int local_iters,
                        std::span<const double> delta_g, std::span<const double> delta_w);

struct BoundReport {
  double lhs = 0.0;  // mean of recorded ||grad F(w^k)||^2
  double rhs = 0.0;
  BoundTerms terms;
  bool holds = false;
  // Step-size validity conditions (eta * L <= 1 and 1 - 3 eta^2 L^2 H^2 > 0)
  // are reported as warnings; the rhs is still computed.
  std::vector<std::string> warnings;
};

// Checks the bound against a recorded trace. The trace must have been run
// with the sqrt(MN/K) schedule and per-iteration gradient norms; otherwise a
// configuration error (std::invalid_argument) is thrown.
BoundReport check_bound(const fl::TrainingTrace& trace, const ProblemConstants& constants,
                        std::span<const double> delta_g, std::span<const double> delta_w);

}  // namespace fedq::bound
