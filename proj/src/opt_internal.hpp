#pragma once

#include <cmath>
#include <span>

#include "fedq/optimizer.hpp"

namespace fedq::opt::detail {

inline double v_of_q(double q) { return 1.0 / (std::exp2(q) - 1.0); }
inline double q_of_v(double v) { return std::log2(1.0 + 1.0 / v); }

// delta = scale / (2^q - 1) = scale * v
inline double delta_scale(const OptFleet& fleet) {
  return quant::delta_dimension_scale(static_cast<int>(fleet.dim), fleet.delta_form);
}

inline double round_delay(const OptFleet& fleet, int n, double local_iters, double q_g,
                          double q_w) {
  return fleet.u1[n] * q_g + fleet.u2[n] +
         local_iters * (fleet.beta[n].beta1 * q_w + fleet.beta[n].beta0);
}

// Exact continuous objective K(H, delta(v)) / H * max_n round_delay, with
// exact bit-widths q = log2(1 + 1/v). +inf when the convergence constraint
// cannot be met.
double exact_continuous_objective(const OptFleet& fleet, const ConvergenceCoeffs& coeffs,
                                  double local_iters, std::span<const double> v_g,
                                  std::span<const double> v_w);

}  // namespace fedq::opt::detail
