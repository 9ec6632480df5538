#pragma once

#include <vector>

#include "capsdefl/model_config.hpp"
#include "capsdefl/params.hpp"
#include "capsdefl/tensor.hpp"

namespace capsdefl {

// Anything the attacks can differentiate through. Parameters are read-only
// here; only training flips them to requires_grad.
class Classifier {
 public:
  virtual ~Classifier() = default;

  virtual ModelKind kind() const = 0;
  virtual const ModelConfig& config() const = 0;
  virtual const ParameterStore<float>& parameters() const = 0;
  virtual ParameterStore<float>& parameters() = 0;

  // Inputs of the cross-entropy loss, (N, n).
  virtual Tensor logits(const Tensor& x) const = 0;
  // Monotone class scores used for argmax and the CW/EAD hinge, (N, n).
  virtual Tensor scores(const Tensor& x) const = 0;

  // argmax of scores, ties broken toward the lowest index.
  std::vector<int> predict(const Tensor& x) const;
};

std::vector<int> argmax_rows(const Tensor& scores);

}  // namespace capsdefl
