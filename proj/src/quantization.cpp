#include "fedq/quantization.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

namespace fedq::quant {

double delta_dimension_scale(int dimension, DeltaForm form) {
  if (dimension < 1) {
    throw std::invalid_argument("delta_coefficient: dimension must be >= 1, got " +
                                std::to_string(dimension));
  }
  double num = 1.0 + std::sqrt(2.0 * dimension - 1.0);
  return form == DeltaForm::halved ? num / 2.0 : num;
}

double delta_coefficient(int bits, int dimension, DeltaForm form) {
  if (bits < 1 || bits > kFullPrecisionBits) {
    throw std::invalid_argument("delta_coefficient: bits must be in [1, 32], got " +
                                std::to_string(bits));
  }
  // 2^q - 1 is exact in double for q <= 32.
  double levels = std::exp2(static_cast<double>(bits)) - 1.0;
  return delta_dimension_scale(dimension, form) / levels;
}

void QuantizerSpec::validate() const {
  if (bits < 1 || bits > kFullPrecisionBits) {
    throw std::invalid_argument("QuantizerSpec: bits must be in [1, 32], got " +
                                std::to_string(bits));
  }
  if (dimension < 1) {
    throw std::invalid_argument("QuantizerSpec: dimension must be >= 1, got " +
                                std::to_string(dimension));
  }
}

namespace {

struct Grid {
  double lo = 0.0;
  double width = 0.0;  // spacing between adjacent levels
  double hi = 0.0;
  std::int64_t top = 0;  // index of the highest level (2^q - 1)

  double level(std::int64_t k) const { return k == top ? hi : lo + static_cast<double>(k) * width; }
};

// Stochastic rounding of one element. Probabilities are computed from the
// actual level values, not from the fractional index, so an element that sits
// exactly on a level maps to itself (p is exactly 0 or 1) and E[out] == x.
inline double round_element(double x, const Grid& g, std::uint64_t key, std::uint64_t i) {
  double t = (x - g.lo) / g.width;
  std::int64_t k = static_cast<std::int64_t>(std::floor(t));
  k = std::clamp<std::int64_t>(k, 0, g.top - 1);
  double l0 = g.level(k);
  double l1 = g.level(k + 1);
  double p = (x - l0) / (l1 - l0);
  p = std::clamp(p, 0.0, 1.0);
  return rng::uniform_at(key, i) < p ? l1 : l0;
}

template <bool Parallel>
void quantize_impl(std::span<const double> in, std::span<double> out, const QuantizerSpec& spec,
                   std::uint64_t stream_key) {
  spec.validate();
  if (in.size() != static_cast<std::size_t>(spec.dimension) || out.size() != in.size()) {
    throw std::invalid_argument("quantize: vector length does not match spec.dimension");
  }
  if (spec.bits == kFullPrecisionBits) {
    std::copy(in.begin(), in.end(), out.begin());
    return;
  }
  auto [lo_it, hi_it] = std::minmax_element(in.begin(), in.end());
  Grid g;
  g.lo = *lo_it;
  g.hi = *hi_it;
  if (!(g.hi > g.lo)) {  // degenerate range: zero-width grid, keep the input
    std::copy(in.begin(), in.end(), out.begin());
    return;
  }
  g.top = (std::int64_t{1} << spec.bits) - 1;
  g.width = (g.hi - g.lo) / static_cast<double>(g.top);

  const std::int64_t n = static_cast<std::int64_t>(in.size());
  if constexpr (Parallel) {
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < n; ++i) {
      out[i] = round_element(in[i], g, stream_key, static_cast<std::uint64_t>(i));
    }
  } else {
    for (std::int64_t i = 0; i < n; ++i) {
      out[i] = round_element(in[i], g, stream_key, static_cast<std::uint64_t>(i));
    }
  }
}

}  // namespace

void quantize(std::span<const double> in, std::span<double> out, const QuantizerSpec& spec,
              std::uint64_t stream_key) {
  quantize_impl<true>(in, out, spec, stream_key);
}

void quantize_serial(std::span<const double> in, std::span<double> out,
                     const QuantizerSpec& spec, std::uint64_t stream_key) {
  quantize_impl<false>(in, out, spec, stream_key);
}

std::vector<double> quantized(std::span<const double> in, const QuantizerSpec& spec,
                              std::uint64_t stream_key) {
  std::vector<double> out(in.size());
  quantize(in, out, spec, stream_key);
  return out;
}

double residual_second_moment(
    std::span<const std::pair<std::vector<double>, std::vector<double>>> samples) {
  if (samples.empty()) {
    throw std::invalid_argument("residual_second_moment: empty sample list");
  }
  double acc = 0.0;
  for (const auto& [input, output] : samples) {
    if (input.size() != output.size()) {
      throw std::invalid_argument("residual_second_moment: mismatched pair dimensions");
    }
    double s = 0.0;
    for (std::size_t i = 0; i < input.size(); ++i) {
      double r = output[i] - input[i];
      s += r * r;
    }
    acc += s;
  }
  return acc / static_cast<double>(samples.size());
}

}  // namespace fedq::quant
