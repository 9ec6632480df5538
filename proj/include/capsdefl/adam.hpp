#pragma once

#include <cstdint>
#include <vector>

#include "capsdefl/tensor.hpp"

namespace capsdefl {

struct AdamState {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::uint64_t step = 0;
  std::vector<std::vector<float>> first_moment;
  std::vector<std::vector<float>> second_moment;
};

// One bias-corrected Adam update over `params`, reading each tensor's grad.
// Moment buffers are created on the first call and must keep matching shapes.
void adam_step(std::vector<Tensor>& params, AdamState& state);

}  // namespace capsdefl
