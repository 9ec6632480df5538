#pragma once

#include <cstdint>

#include "capsdefl/classifier.hpp"

namespace capsdefl {

ParameterStore<float> init_cnn_parameters(const ModelConfig& config, std::uint64_t seed);

// Trunk, then a 3x3 conv head, global average pooling and a dense layer to
// n logits. The capsule layer and reconstruction path do not exist here.
template <typename T>
BasicTensor<T> cnn_logits(const ModelConfig& config, const ParameterStore<T>& params,
                          const BasicTensor<T>& x);

class BaselineCnn final : public Classifier {
 public:
  BaselineCnn(ModelConfig config, ParameterStore<float> params);
  static BaselineCnn initialized(const ModelConfig& config, std::uint64_t seed);

  ModelKind kind() const override { return ModelKind::BaselineCnn; }
  const ModelConfig& config() const override { return config_; }
  const ParameterStore<float>& parameters() const override { return params_; }
  ParameterStore<float>& parameters() override { return params_; }

  Tensor logits(const Tensor& x) const override;
  Tensor scores(const Tensor& x) const override { return logits(x); }
  // Row-wise softmax of the logits, (N, n).
  std::vector<float> probabilities(const Tensor& x) const;

 private:
  ModelConfig config_;
  ParameterStore<float> params_;
};

}  // namespace capsdefl
