#include "fedq/bound.hpp"

#include <cmath>
#include <stdexcept>

namespace fedq::bound {

void ProblemConstants::validate() const {
  if (L < 0.0 || sigma_sq < 0.0 || tau_sq < 0.0 || G_sq < 0.0 || delta_F < 0.0) {
    throw std::invalid_argument("ProblemConstants: constants must be nonnegative");
  }
  if (dim < 1 || batch_size < 1 || num_devices < 1) {
    throw std::invalid_argument("ProblemConstants: dim, batch_size, num_devices must be >= 1");
  }
  if (static_cast<int>(p.size()) != num_devices) {
    throw std::invalid_argument("ProblemConstants: p must have num_devices entries");
  }
  double s = 0.0;
  for (double v : p) s += v;
  if (std::abs(s - 1.0) > 1e-9) {
    throw std::invalid_argument("ProblemConstants: weights must sum to 1");
  }
}

double ProblemConstants::p_bar() const {
  double s = 0.0;
  for (double v : p) s += v * v;
  return s;
}

ProblemConstants from_estimates(const fl::EstimatedConstants& est, long long dim, int batch_size,
                                std::span<const double> weights) {
  ProblemConstants c;
  c.L = est.L;
  c.sigma_sq = est.sigma_sq;
  c.tau_sq = est.tau_sq;
  c.G_sq = est.G_sq;
  c.delta_F = est.delta_F;
  c.dim = dim;
  c.batch_size = batch_size;
  c.num_devices = static_cast<int>(weights.size());
  c.p.assign(weights.begin(), weights.end());
  c.validate();
  return c;
}

BoundTerms theorem1_rhs(const ProblemConstants& c, long long total_iters, int local_iters,
                        std::span<const double> delta_g, std::span<const double> delta_w) {
  c.validate();
  if (total_iters < 1 || local_iters < 1) {
    throw std::invalid_argument("theorem1_rhs: K and H must be >= 1");
  }
  if (delta_g.size() != c.p.size() || delta_w.size() != c.p.size()) {
    throw std::invalid_argument("theorem1_rhs: per-device delta lists must match p");
  }
  double dbar_g = 0.0, floor_sum = 0.0;
  for (std::size_t n = 0; n < c.p.size(); ++n) {
    double p2 = c.p[n] * c.p[n];
    dbar_g += p2 * delta_g[n];
    floor_sum += p2 * (delta_g[n] + 1.0) * delta_w[n];
  }
  double root = std::sqrt(static_cast<double>(c.batch_size) * c.num_devices *
                          static_cast<double>(total_iters));
  BoundTerms t;
  t.term1 = 4.0 * c.delta_F / root;
  t.term2 = 2.0 * c.L * c.sigma_sq * (2.0 * local_iters * dbar_g + c.p_bar()) / root;
  t.term3 = 12.0 * c.batch_size * c.L * local_iters * dbar_g * c.G_sq / root;
  t.term4 = 2.0 * c.L * std::sqrt(static_cast<double>(c.dim)) * std::sqrt(c.tau_sq) * floor_sum;
  return t;
}

BoundReport check_bound(const fl::TrainingTrace& trace, const ProblemConstants& constants,
                        std::span<const double> delta_g, std::span<const double> delta_w) {
  if (trace.schedule != fl::LrSchedule::sqrt_mn_over_k) {
    throw std::invalid_argument("check_bound: trace was not run with the sqrt(MN/K) schedule");
  }
  if (trace.grad_norm_sq.empty()) {
    throw std::invalid_argument("check_bound: trace has no recorded gradient norms");
  }
  BoundReport rep;
  rep.lhs = trace.mean_grad_norm_sq();
  rep.terms = theorem1_rhs(constants, trace.total_iters, trace.local_iters, delta_g, delta_w);
  rep.rhs = rep.terms.total();
  rep.holds = rep.lhs <= rep.rhs;

  double eta = std::sqrt(static_cast<double>(constants.batch_size) * constants.num_devices /
                         static_cast<double>(trace.total_iters));
  if (eta * constants.L > 1.0) {
    rep.warnings.push_back("eta*L > 1");
  }
  double q = 3.0 * eta * eta * constants.L * constants.L *
             static_cast<double>(trace.local_iters) * trace.local_iters;
  if (q >= 1.0) {
    rep.warnings.push_back("1 - 3*eta^2*L^2*H^2 <= 0");
  }
  return rep;
}

}  // namespace fedq::bound
