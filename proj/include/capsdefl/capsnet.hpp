#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "capsdefl/classifier.hpp"

namespace capsdefl {

// Classifier output for a batch of N inputs.
template <typename T>
struct CapsOutput {
  BasicTensor<T> poses;    // (N, m, d): class capsules first, then background
  BasicTensor<T> lengths;  // (N, n): norms of the class-capsule poses
  std::vector<int> prediction;
};

// Registers every trunk/capsule/decoder tensor with seeded truncated-normal
// weights (std = gain / sqrt(fan_in), cut at 2 std) and zero biases.
ParameterStore<float> init_capsnet_parameters(const ModelConfig& config, std::uint64_t seed);

// Shared by the capsule network and the baseline CNN.
template <typename T>
BasicTensor<T> trunk_forward(const ModelConfig& config, const ParameterStore<T>& params,
                             const BasicTensor<T>& x);

// Input poses (N, primary_caps, A) -> capsule output with `routing_iters`
// rounds of routing-by-agreement; one round means uniform coupling 1/m.
template <typename T>
CapsOutput<T> caps_layer(const ModelConfig& config, const ParameterStore<T>& params,
                         const BasicTensor<T>& primary);

template <typename T>
CapsOutput<T> caps_classify(const ModelConfig& config, const ParameterStore<T>& params,
                            const BasicTensor<T>& x);

// (R, m * d) masked poses -> (R, C, H, W) images in [0, 1].
template <typename T>
BasicTensor<T> caps_reconstruct(const ModelConfig& config, const ParameterStore<T>& params,
                                const BasicTensor<T>& masked);

// Reconstruction of each input from capsule `classes[i]` plus the background.
template <typename T>
BasicTensor<T> reconstruct_from(const ModelConfig& config, const ParameterStore<T>& params,
                                const BasicTensor<T>& poses, std::span<const int> classes);

template <typename T>
BasicTensor<T> caps_logits(const ModelConfig& config, const BasicTensor<T>& lengths);

// Mean over the batch of CE(f(r(v_{f(x)})), f(x)); the target is the
// model's own prediction on x.
template <typename T>
BasicTensor<T> cycle_loss(const ModelConfig& config, const ParameterStore<T>& params,
                          const BasicTensor<T>& x);

template <typename T>
struct TrainingLosses {
  BasicTensor<T> margin, recon, cycle, total;
};

// margin + lambda_recon * SSE(r(v_label), x) + lambda_cyc * cycle, each
// averaged over the batch. Reconstruction for the SSE term is conditioned on
// the true label.
template <typename T>
TrainingLosses<T> training_objective(const ModelConfig& config, const ParameterStore<T>& params,
                                     const BasicTensor<T>& x, std::span<const int> labels);

// Zeroes every class capsule except k (per row) and flattens to (N, m*d).
template <typename T>
BasicTensor<T> mask_for_reconstruction(const ModelConfig& config, const BasicTensor<T>& poses,
                                       std::span<const int> classes);

class CapsNet final : public Classifier {
 public:
  CapsNet(ModelConfig config, ParameterStore<float> params);
  static CapsNet initialized(const ModelConfig& config, std::uint64_t seed);

  ModelKind kind() const override { return ModelKind::CapsNet; }
  const ModelConfig& config() const override { return config_; }
  const ParameterStore<float>& parameters() const override { return params_; }
  ParameterStore<float>& parameters() override { return params_; }

  Tensor logits(const Tensor& x) const override;
  Tensor scores(const Tensor& x) const override;

  CapsOutput<float> classify(const Tensor& x) const;
  Tensor reconstruct(const Tensor& masked) const;
  Tensor reconstruct_from(const Tensor& poses, std::span<const int> classes) const;

 private:
  ModelConfig config_;
  ParameterStore<float> params_;
};

}  // namespace capsdefl
