#pragma once

#include <random>
#include <string>

#include "capsdefl/model_config.hpp"
#include "capsdefl/params.hpp"

namespace capsdefl::detail {

// Truncated normal (cut at two standard deviations), std = gain / sqrt(fan_in).
Tensor truncated_normal(const Shape& shape, double fan_in, double gain, std::mt19937_64& rng);

void add_trunk_parameters(ParameterStore<float>& store, const ModelConfig& config,
                          std::mt19937_64& rng);

}  // namespace capsdefl::detail
