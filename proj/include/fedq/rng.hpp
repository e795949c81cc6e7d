#pragma once

#include <cmath>
#include <cstdint>

// Deterministic random streams for the simulator.
//
// Every consumer of randomness derives its own stream key from (seed, domain,
// ids...). Keys are cheap to derive and streams never share state, so device
// loops, Monte-Carlo chunks and quantization kernels can run in any order (or
// in parallel) and still produce identical results. Counter-based draws
// (uniform_at) are used inside parallel kernels; the small stateful Stream is
// used where a sequential draw order is natural (minibatch sampling, data
// generation).

namespace fedq::rng {

// Stream domains. Adding a domain never perturbs existing streams.
enum class Domain : std::uint64_t {
  dataset = 1,
  partition = 2,
  init = 3,
  minibatch = 4,
  weight_quant = 5,
  grad_quant = 6,
  channel = 7,
  probe = 8,
  generic = 9,
  sync_quant = 10,
};

constexpr std::uint64_t splitmix(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ull;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

constexpr std::uint64_t combine(std::uint64_t key, std::uint64_t v) {
  return splitmix(key ^ (v + 0x9e3779b97f4a7c15ull + (key << 6) + (key >> 2)));
}

constexpr std::uint64_t derive_key(std::uint64_t seed, Domain dom) {
  return combine(splitmix(seed), static_cast<std::uint64_t>(dom));
}

constexpr std::uint64_t derive_key(std::uint64_t seed, Domain dom, std::uint64_t a) {
  return combine(derive_key(seed, dom), a);
}

constexpr std::uint64_t derive_key(std::uint64_t seed, Domain dom, std::uint64_t a,
                                   std::uint64_t b) {
  return combine(derive_key(seed, dom, a), b);
}

// Counter-based draws: value depends only on (key, index).
inline std::uint64_t bits_at(std::uint64_t key, std::uint64_t index) {
  return splitmix(combine(key, index));
}

// Uniform in [0, 1), 53-bit mantissa.
inline double uniform_at(std::uint64_t key, std::uint64_t index) {
  return static_cast<double>(bits_at(key, index) >> 11) * 0x1.0p-53;
}

// Small sequential generator (splitmix64 sequence).
class Stream {
public:
  explicit Stream(std::uint64_t key) : state_(key) {}

  std::uint64_t next_u64() {
    state_ += 0x9e3779b97f4a7c15ull;
    std::uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  // [0, 1)
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // [lo, hi)
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Unbiased integer in [0, n)
  std::uint64_t below(std::uint64_t n) {
    // Rejection-free multiply-shift; the modulo bias is < 2^-64 * n, well
    // under anything observable here, but keep the widening form anyway.
    unsigned __int128 m = static_cast<unsigned __int128>(next_u64()) * n;
    return static_cast<std::uint64_t>(m >> 64);
  }

  // Standard normal via Box-Muller (two fresh uniforms per call, no cache).
  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    if (u1 <= 0.0) u1 = 0x1.0p-53;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586477 * u2);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  // Exponential with the given mean.
  double exponential(double mean) {
    double u = uniform();
    return -mean * std::log1p(-u);
  }

private:
  std::uint64_t state_;
};

}  // namespace fedq::rng
