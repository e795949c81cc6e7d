#pragma once

#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include "fedq/rng.hpp"

// Unbiased stochastic min-max quantization.
//
// A vector is quantized onto 2^q uniformly spaced levels spanning
// [min(v), max(v)]; each element rounds stochastically to one of its two
// bracketing levels with probabilities that keep the expectation equal to the
// input. q = 32 is a hard full-precision bypass. The variance coefficient
// delta bounds E||Q(v) - v||^2 <= delta * ||v||^2.

namespace fedq::quant {

// Two published forms of the variance coefficient differ by a factor of two
// in the denominator:
//   halved:    (1 + sqrt(2d-1)) / (2 (2^q - 1))
//   unhalved:  (1 + sqrt(2d-1)) / (2^q - 1)
// `halved` is the default everywhere; `unhalved` is selectable so optimizer
// experiments can match either convention.
enum class DeltaForm { halved, unhalved };

inline constexpr int kFullPrecisionBits = 32;

// Variance coefficient delta(q, d). Throws std::invalid_argument for
// q outside [1, 32] or d < 1.
double delta_coefficient(int bits, int dimension, DeltaForm form = DeltaForm::halved);

// Dimension-only scale factor c(d) such that delta = c(d) / (2^q - 1).
double delta_dimension_scale(int dimension, DeltaForm form = DeltaForm::halved);

struct QuantizerSpec {
  int bits = kFullPrecisionBits;  // q in [1, 32]; 32 = identity
  int dimension = 1;              // d >= 1
  DeltaForm form = DeltaForm::halved;

  double variance_coeff() const { return delta_coefficient(bits, dimension, form); }
  void validate() const;  // throws std::invalid_argument
};

// Quantize `in` into `out` (may alias). `stream_key` scopes the randomness;
// each element i draws its own counter-based uniform, so results do not
// depend on evaluation order. Parallelized over elements.
void quantize(std::span<const double> in, std::span<double> out, const QuantizerSpec& spec,
              std::uint64_t stream_key);

// Plain-loop reference, kept for testing the parallel kernel.
void quantize_serial(std::span<const double> in, std::span<double> out,
                     const QuantizerSpec& spec, std::uint64_t stream_key);

std::vector<double> quantized(std::span<const double> in, const QuantizerSpec& spec,
                              std::uint64_t stream_key);

// Mean of ||output - input||^2 over a sample of quantizer (input, output)
// pairs. Throws std::invalid_argument on an empty sample or mismatched
// dimensions.
double residual_second_moment(
    std::span<const std::pair<std::vector<double>, std::vector<double>>> samples);

}  // namespace fedq::quant
