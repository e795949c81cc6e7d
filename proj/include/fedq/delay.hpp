#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

// Per-device compute and communication delay models and the per-round /
// total service delay of a synchronized FL system.
//
// Compute (full form):
//   T_cp(q_w, H) = H * (alpha1(q_w) * t_core + alpha2(q_w) * theta_mem / f_mem) + t0
// with alpha1(q_w) = (1 - m) + m * q_w / 32 (tensor-core acceleration of the
// fraction m) and alpha2(q_w) = q_w / 32 by default (memory traffic linear in
// bit-width, normalized so q_w = 32 is the full-precision baseline).
//
// Simplified form: T_cp = H * (beta1 * q_w + beta0), everything inside the H
// multiplier. The two forms agree at q_w = 32, H = 1 when beta is derived
// from the same coefficients; they deliberately differ in how t0 scales.
//
// Communication: S(q_g) = s1 * d * q_g + s0 bits, T_cm = S / rate, with the
// OFDMA expected rate r = lambda * W * E[log2(1 + snr * |h|^2)].

namespace fedq::delay {

struct BetaCoeffs {
  double beta1 = 0.0;  // seconds per (iteration * weight bit)
  double beta0 = 0.0;  // seconds per iteration
};

struct ComputeProfile {
  double t_core_s = 0.0;      // one full-precision iteration, core part
  double theta_mem = 0.0;     // memory cycles per iteration
  double f_mem_hz = 1.0;      // memory frequency
  double t0_s = 0.0;          // fixed overhead outside the H multiplier
  double accel_fraction = 0.0;  // m in [0, 1]
  // Affine memory scaling alpha2(q) = slope * q + intercept; defaults give
  // q/32. The affine form exists for fitting measured profiles.
  double alpha2_slope = 1.0 / 32.0;
  double alpha2_intercept = 0.0;
  std::optional<BetaCoeffs> simplified;  // use the simplified model if set

  void validate() const;
};

// Accelerator factor; speedup is 1 / alpha1. Throws on q outside [1, 32] or
// m outside [0, 1].
double alpha1(int q_w, double accel_fraction);

// Full-model compute delay (Eq. form above); uses the simplified form when
// the profile carries one.
double compute_delay(const ComputeProfile& profile, int q_w, int local_iters);

double compute_delay_simplified(const BetaCoeffs& beta, int q_w, int local_iters);

// Beta coefficients consistent with the full model: exact agreement at
// H = 1 for every q_w when t0 = 0, and at (q_w = 32, H = 1) in general.
BetaCoeffs derive_beta(const ComputeProfile& profile);

struct CommCoeffs {
  double s1 = 1.0;   // per-parameter-bit scale
  double s0 = 0.0;   // fixed overhead bits
  long long dim = 1; // model dimension d

  void validate() const;
};

struct ChannelProfile {
  // One of: a measured rate override, a deterministic |h|^2 gain, or
  // Rayleigh fading where |h|^2 is exponential with the given mean power.
  std::optional<double> measured_rate_bps;
  double lambda = 1.0;      // bandwidth share in [0, 1]
  double bandwidth_hz = 1.0;
  double tx_power_w = 1.0;
  double noise_w = 1.0;
  bool rayleigh = false;
  double gain = 1.0;        // deterministic |h|^2, or the Rayleigh mean power
  std::uint64_t seed = 1;

  void validate() const;
};

// Expected uplink rate in bits/s. Monte-Carlo over the fading law for
// Rayleigh channels (deterministic for a fixed seed and sample count,
// independent of thread count); closed form otherwise.
double expected_rate(const ChannelProfile& channel, int mc_samples = 100000);
double expected_rate_serial(const ChannelProfile& channel, int mc_samples = 100000);

// (s1 * d * q_g + s0) / rate. Throws if rate <= 0.
double comm_delay(int q_g, double rate_bps, const CommCoeffs& coeffs);

// Ratio of one full-precision local iteration's compute delay to the
// full-precision communication delay; classifies compute- vs
// communication-dominant regimes.
double rho(const ComputeProfile& profile, double rate_bps, const CommCoeffs& coeffs);

struct DeviceDelay {
  ComputeProfile compute;
  double rate_bps = 1.0;
  int q_w = 32;
  int q_g = 32;
};

struct DelayReport {
  std::vector<double> t_cp_s;
  std::vector<double> t_cm_s;
  std::vector<double> t_n_s;
  int straggler = 0;        // argmax t_n (smallest index on ties)
  double t_round_s = 0.0;   // max_n t_n
  long long rounds = 0;     // ceil(K / H)
  double t_total_s = 0.0;   // rounds * t_round
};

DelayReport service_delay(const std::vector<DeviceDelay>& devices, const CommCoeffs& coeffs,
                          int local_iters, long long total_iters);

// Profiles calibrated to measured one-pass training delays of two boards.
// The full-precision one-pass delay (q_w = 32, H = 1) reproduces the fitted
// estimates exactly; paired effective uplink rates reproduce the measured
// compute/communication ratios.
namespace profiles {
ComputeProfile xavier_nx_resnet20();   // 77.3 ms one-pass
ComputeProfile rtx8000_resnet20();     // 15.2 ms
ComputeProfile xavier_nx_mobilenetv2();  // 401.3 ms
ComputeProfile rtx8000_mobilenetv2();    // 144.6 ms
CommCoeffs resnet20_comm();            // d = 0.27M params, s1 = 1, s0 = 0
CommCoeffs mobilenetv2_comm();         // d = 3.4M params
double wifi_rate_bps();                // 88 Mbps measured average
double fiveg_rate_bps();               // 14 Mbps measured average
double effective_rate_rtx_resnet20();    // pairs with rho = 0.14
double effective_rate_xavier_resnet20(); // pairs with rho = 0.61
}  // namespace profiles

}  // namespace fedq::delay
