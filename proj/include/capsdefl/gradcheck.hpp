#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "capsdefl/tensor.hpp"

namespace capsdefl {

struct GradCheckOptions {
  double step = 1e-3;               // central-difference half width
  std::size_t coords_per_input = 48;
  // A coordinate whose two one-sided slopes disagree by more than this
  // (relative) straddles a kink (relu, max, argmax switch) and is skipped.
  double kink_tolerance = 1e-2;
  // Inputs listed here also skip coordinates with |value| < kink_band, for
  // ops whose kink sits at a known input value (leaky relu at 0).
  std::vector<std::size_t> kink_inputs;
  double kink_band = 1e-4;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::size_t skipped = 0;
};

// The op under test, evaluated in double: maps inputs to a scalar loss.
using ScalarFn64 = std::function<Tensor64(const std::vector<Tensor64>&)>;

// Compares reverse-mode gradients with central finite differences at the
// given point. Relative error per coordinate is |a - n| / max(|a|, |n|, s)
// where s = 1e-6 + 1e-3 * (largest analytic magnitude seen), so coordinates
// with a vanishing gradient do not dominate.
GradCheckResult grad_check_at(const ScalarFn64& fn, const std::vector<Tensor64>& inputs,
                              std::uint64_t seed, const GradCheckOptions& options = {});

// Same, with inputs drawn uniformly from [-1, 1] for the given shapes.
GradCheckResult grad_check(const ScalarFn64& fn, const std::vector<Shape>& input_shapes,
                           std::uint64_t seed, const GradCheckOptions& options = {});

// Random fixed weights turning a tensor-valued op into a scalar.
Tensor64 random_projection(const Tensor64& output, std::uint64_t seed);

}  // namespace capsdefl
