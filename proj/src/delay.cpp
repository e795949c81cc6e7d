#include "fedq/delay.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

#include "fedq/rng.hpp"

namespace fedq::delay {

void ComputeProfile::validate() const {
  if (t_core_s < 0.0 || theta_mem < 0.0 || t0_s < 0.0 || !(f_mem_hz > 0.0)) {
    throw std::invalid_argument("ComputeProfile: coefficients must be nonnegative, f_mem > 0");
  }
  if (accel_fraction < 0.0 || accel_fraction > 1.0) {
    throw std::invalid_argument("ComputeProfile: accel_fraction must be in [0, 1]");
  }
  if (simplified && (simplified->beta1 < 0.0 || simplified->beta0 < 0.0)) {
    throw std::invalid_argument("ComputeProfile: beta coefficients must be nonnegative");
  }
}

void CommCoeffs::validate() const {
  if (!(s1 > 0.0) || s0 < 0.0 || dim < 1) {
    throw std::invalid_argument("CommCoeffs: need s1 > 0, s0 >= 0, dim >= 1");
  }
}

void ChannelProfile::validate() const {
  if (measured_rate_bps) {
    if (!(*measured_rate_bps > 0.0)) {
      throw std::invalid_argument("ChannelProfile: measured rate must be > 0");
    }
    return;
  }
  if (lambda < 0.0 || lambda > 1.0) {
    throw std::invalid_argument("ChannelProfile: lambda must be in [0, 1]");
  }
  if (!(bandwidth_hz > 0.0) || !(tx_power_w > 0.0) || !(noise_w > 0.0) || !(gain > 0.0)) {
    throw std::invalid_argument("ChannelProfile: bandwidth, power, noise, gain must be > 0");
  }
}

double alpha1(int q_w, double accel_fraction) {
  if (q_w < 1 || q_w > 32) {
    throw std::invalid_argument("alpha1: q_w must be in [1, 32], got " + std::to_string(q_w));
  }
  if (accel_fraction < 0.0 || accel_fraction > 1.0) {
    throw std::invalid_argument("alpha1: accel fraction must be in [0, 1]");
  }
  if (q_w == 32 || accel_fraction == 0.0) return 1.0;
  return (1.0 - accel_fraction) + accel_fraction * static_cast<double>(q_w) / 32.0;
}

double compute_delay(const ComputeProfile& profile, int q_w, int local_iters) {
  profile.validate();
  if (local_iters < 1) throw std::invalid_argument("compute_delay: local_iters must be >= 1");
  if (profile.simplified) return compute_delay_simplified(*profile.simplified, q_w, local_iters);
  double a1 = alpha1(q_w, profile.accel_fraction);
  double a2 = profile.alpha2_slope * static_cast<double>(q_w) + profile.alpha2_intercept;
  return local_iters * (a1 * profile.t_core_s + a2 * profile.theta_mem / profile.f_mem_hz) +
         profile.t0_s;
}

double compute_delay_simplified(const BetaCoeffs& beta, int q_w, int local_iters) {
  if (q_w < 1 || q_w > 32) throw std::invalid_argument("compute_delay: q_w must be in [1, 32]");
  if (local_iters < 1) throw std::invalid_argument("compute_delay: local_iters must be >= 1");
  return local_iters * (beta.beta1 * static_cast<double>(q_w) + beta.beta0);
}

BetaCoeffs derive_beta(const ComputeProfile& profile) {
  profile.validate();
  double mem_per_cycle = profile.theta_mem / profile.f_mem_hz;
  BetaCoeffs b;
  b.beta1 = profile.accel_fraction * profile.t_core_s / 32.0 + profile.alpha2_slope * mem_per_cycle;
  b.beta0 = (1.0 - profile.accel_fraction) * profile.t_core_s +
            profile.alpha2_intercept * mem_per_cycle + profile.t0_s;
  return b;
}

namespace {

// Deterministic chunked Monte-Carlo mean of log2(1 + snr * |h|^2) under
// exponential |h|^2. Chunk boundaries are fixed, so the summation order does
// not depend on the thread count.
double rayleigh_mean_log_term(double snr, double mean_power, std::uint64_t key, int samples) {
  constexpr int kChunk = 8192;
  const int chunks = (samples + kChunk - 1) / kChunk;
  std::vector<double> partial(chunks, 0.0);
#pragma omp parallel for schedule(static)
  for (int c = 0; c < chunks; ++c) {
    const int lo = c * kChunk;
    const int hi = std::min(samples, lo + kChunk);
    double acc = 0.0;
    for (int i = lo; i < hi; ++i) {
      double u = rng::uniform_at(key, static_cast<std::uint64_t>(i));
      double h2 = -mean_power * std::log1p(-u);
      acc += std::log2(1.0 + snr * h2);
    }
    partial[c] = acc;
  }
  double total = 0.0;
  for (double p : partial) total += p;
  return total / static_cast<double>(samples);
}

// Same fixed-chunk summation, plain loop: the parallel kernel must match it
// bit for bit.
double rayleigh_mean_log_term_serial(double snr, double mean_power, std::uint64_t key,
                                     int samples) {
  constexpr int kChunk = 8192;
  const int chunks = (samples + kChunk - 1) / kChunk;
  double total = 0.0;
  for (int c = 0; c < chunks; ++c) {
    const int lo = c * kChunk;
    const int hi = std::min(samples, lo + kChunk);
    double acc = 0.0;
    for (int i = lo; i < hi; ++i) {
      double u = rng::uniform_at(key, static_cast<std::uint64_t>(i));
      double h2 = -mean_power * std::log1p(-u);
      acc += std::log2(1.0 + snr * h2);
    }
    total += acc;
  }
  return total / static_cast<double>(samples);
}

double expected_rate_impl(const ChannelProfile& ch, int mc_samples, bool parallel) {
  ch.validate();
  if (ch.measured_rate_bps) return *ch.measured_rate_bps;
  double snr = ch.tx_power_w / ch.noise_w;
  if (!ch.rayleigh) {
    return ch.lambda * ch.bandwidth_hz * std::log2(1.0 + snr * ch.gain);
  }
  if (mc_samples < 1) throw std::invalid_argument("expected_rate: mc_samples must be >= 1");
  std::uint64_t key = rng::derive_key(ch.seed, rng::Domain::channel);
  double mean = parallel ? rayleigh_mean_log_term(snr, ch.gain, key, mc_samples)
                         : rayleigh_mean_log_term_serial(snr, ch.gain, key, mc_samples);
  return ch.lambda * ch.bandwidth_hz * mean;
}

}  // namespace

double expected_rate(const ChannelProfile& channel, int mc_samples) {
  return expected_rate_impl(channel, mc_samples, true);
}

double expected_rate_serial(const ChannelProfile& channel, int mc_samples) {
  return expected_rate_impl(channel, mc_samples, false);
}

double comm_delay(int q_g, double rate_bps, const CommCoeffs& coeffs) {
  coeffs.validate();
  if (q_g < 1 || q_g > 32) throw std::invalid_argument("comm_delay: q_g must be in [1, 32]");
  if (!(rate_bps > 0.0)) throw std::invalid_argument("comm_delay: rate must be > 0");
  double bits = coeffs.s1 * static_cast<double>(coeffs.dim) * q_g + coeffs.s0;
  return bits / rate_bps;
}

double rho(const ComputeProfile& profile, double rate_bps, const CommCoeffs& coeffs) {
  double cm = comm_delay(32, rate_bps, coeffs);
  if (!(cm > 0.0)) throw std::invalid_argument("rho: communication delay is zero");
  return compute_delay(profile, 32, 1) / cm;
}

DelayReport service_delay(const std::vector<DeviceDelay>& devices, const CommCoeffs& coeffs,
                          int local_iters, long long total_iters) {
  if (devices.empty()) throw std::invalid_argument("service_delay: empty device list");
  if (local_iters < 1 || total_iters < 1) {
    throw std::invalid_argument("service_delay: local_iters and total_iters must be >= 1");
  }
  DelayReport rep;
  rep.t_cp_s.reserve(devices.size());
  for (std::size_t n = 0; n < devices.size(); ++n) {
    const auto& dev = devices[n];
    double cp = compute_delay(dev.compute, dev.q_w, local_iters);
    double cm = comm_delay(dev.q_g, dev.rate_bps, coeffs);
    rep.t_cp_s.push_back(cp);
    rep.t_cm_s.push_back(cm);
    rep.t_n_s.push_back(cp + cm);
    if (rep.t_n_s.back() > rep.t_round_s) {
      rep.t_round_s = rep.t_n_s.back();
      rep.straggler = static_cast<int>(n);
    }
  }
  // A partial last round still costs a full round.
  rep.rounds = (total_iters + local_iters - 1) / local_iters;
  rep.t_total_s = static_cast<double>(rep.rounds) * rep.t_round_s;
  return rep;
}

namespace profiles {

// Coefficient splits are representative (tensor-core fraction 0.75, memory
// share ~20%, small fixed overhead); what is calibrated is the full-precision
// one-pass sum, matching the fitted estimates for each board/model pair.
ComputeProfile xavier_nx_resnet20() {
  ComputeProfile p;
  p.t_core_s = 0.060;
  p.theta_mem = 2.4e7;
  p.f_mem_hz = 1.6e9;  // theta/f = 15 ms
  p.t0_s = 0.0773 - 0.060 - 0.015;
  p.accel_fraction = 0.75;
  return p;
}

ComputeProfile rtx8000_resnet20() {
  ComputeProfile p;
  p.t_core_s = 0.012;
  p.theta_mem = 1.75e7;
  p.f_mem_hz = 7.0e9;  // theta/f = 2.5 ms
  p.t0_s = 0.0152 - 0.012 - 0.0025;
  p.accel_fraction = 0.75;
  return p;
}

ComputeProfile xavier_nx_mobilenetv2() {
  ComputeProfile p;
  p.t_core_s = 0.310;
  p.theta_mem = 1.28e8;
  p.f_mem_hz = 1.6e9;  // theta/f = 80 ms
  p.t0_s = 0.4013 - 0.310 - 0.080;
  p.accel_fraction = 0.75;
  return p;
}

ComputeProfile rtx8000_mobilenetv2() {
  ComputeProfile p;
  p.t_core_s = 0.115;
  p.theta_mem = 1.75e8;
  p.f_mem_hz = 7.0e9;  // theta/f = 25 ms
  p.t0_s = 0.1446 - 0.115 - 0.025;
  p.accel_fraction = 0.75;
  return p;
}

CommCoeffs resnet20_comm() { return CommCoeffs{1.0, 0.0, 270000}; }
CommCoeffs mobilenetv2_comm() { return CommCoeffs{1.0, 0.0, 3400000}; }

double wifi_rate_bps() { return 88e6; }
double fiveg_rate_bps() { return 14e6; }

double effective_rate_rtx_resnet20() {
  CommCoeffs c = resnet20_comm();
  double bits = c.s1 * static_cast<double>(c.dim) * 32.0 + c.s0;
  return bits * 0.14 / compute_delay(rtx8000_resnet20(), 32, 1);
}

double effective_rate_xavier_resnet20() {
  CommCoeffs c = resnet20_comm();
  double bits = c.s1 * static_cast<double>(c.dim) * 32.0 + c.s0;
  return bits * 0.61 / compute_delay(xavier_nx_resnet20(), 32, 1);
}

}  // namespace profiles

}  // namespace fedq::delay
