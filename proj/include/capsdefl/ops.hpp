#pragma once

#include <span>

#include "capsdefl/tensor.hpp"

namespace capsdefl {

// Negative slope of every leaky ReLU in the project.
inline constexpr double kLeakySlope = 0.1;

enum class Activation { LeakyRelu, Sigmoid };
enum class Reduction { Mean, Sum };

// --- layers ---------------------------------------------------------------

// input NCHW, weight OIHW, bias O (may be undefined).
template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& input, const BasicTensor<T>& weight,
                      const BasicTensor<T>& bias, std::size_t stride, std::size_t padding);

// Transposed convolution. weight is laid out (C_in, C_out, kH, kW), so that
// deconv2d(., w) is the adjoint of conv2d(., w) with w read as OIHW.
// Output side = (H - 1) * stride + kH - 2 * padding.
template <typename T>
BasicTensor<T> deconv2d(const BasicTensor<T>& input, const BasicTensor<T>& weight,
                        const BasicTensor<T>& bias, std::size_t stride, std::size_t padding = 0);

template <typename T>
BasicTensor<T> avg_pool2d(const BasicTensor<T>& input, std::size_t pool, std::size_t stride);

// input (N, K), weight (M, K), bias (M) -> (N, M).
template <typename T>
BasicTensor<T> dense(const BasicTensor<T>& input, const BasicTensor<T>& weight,
                     const BasicTensor<T>& bias);

template <typename T>
BasicTensor<T> leaky_relu(const BasicTensor<T>& input, T slope = T(kLeakySlope));
template <typename T>
BasicTensor<T> sigmoid(const BasicTensor<T>& input);
template <typename T>
BasicTensor<T> activation(const BasicTensor<T>& input, Activation kind);

// --- losses and reductions -----------------------------------------------

// logits (N, C); one target per row.
template <typename T>
BasicTensor<T> softmax_cross_entropy(const BasicTensor<T>& logits, std::span<const int> targets,
                                     Reduction reduction = Reduction::Mean);

// Euclidean norm of (a - b) over all elements.
template <typename T>
BasicTensor<T> l2_distance(const BasicTensor<T>& a, const BasicTensor<T>& b);

// Per-row Euclidean distance: rows are the leading dimension. Result shape (N).
template <typename T>
BasicTensor<T> row_l2_distance(const BasicTensor<T>& a, const BasicTensor<T>& b);

// Sum over all elements of (a - b)^2.
template <typename T>
BasicTensor<T> squared_error(const BasicTensor<T>& a, const BasicTensor<T>& b);

// Capsule margin loss averaged over the batch. lengths (N, n).
template <typename T>
BasicTensor<T> margin_loss(const BasicTensor<T>& lengths, std::span<const int> labels,
                           T m_plus = T(0.9), T m_minus = T(0.1), T lambda = T(0.5));

// Per-row max(max_{j != t} z_j - z_t, -kappa) for scores (N, C) -> (N).
template <typename T>
BasicTensor<T> target_margin(const BasicTensor<T>& scores, std::span<const int> targets, T kappa);

template <typename T>
BasicTensor<T> sum(const BasicTensor<T>& input);
template <typename T>
BasicTensor<T> mean(const BasicTensor<T>& input);
// Sum of input[i] * weights[i] with constant weights.
template <typename T>
BasicTensor<T> weighted_sum(const BasicTensor<T>& input, std::span<const T> weights);

// --- elementwise and layout ---------------------------------------------

template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <typename T>
BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <typename T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <typename T>
BasicTensor<T> scale(const BasicTensor<T>& input, T factor);
template <typename T>
BasicTensor<T> reshape(const BasicTensor<T>& input, Shape shape);
// Each leading-dimension row repeated `times` times consecutively.
template <typename T>
BasicTensor<T> repeat_rows(const BasicTensor<T>& input, std::size_t times);

// --- capsules -------------------------------------------------------------

// u (N, I, A), weight (I, J, D, A) -> prediction vectors (N, I, J, D).
template <typename T>
BasicTensor<T> caps_predict(const BasicTensor<T>& u, const BasicTensor<T>& weight);
// uhat (N, I, J, D), coupling (N, I, J) -> (N, J, D).
template <typename T>
BasicTensor<T> caps_combine(const BasicTensor<T>& uhat, const BasicTensor<T>& coupling);
// uhat (N, I, J, D), v (N, J, D) -> dot products (N, I, J).
template <typename T>
BasicTensor<T> caps_agreement(const BasicTensor<T>& uhat, const BasicTensor<T>& v);
template <typename T>
BasicTensor<T> softmax_lastdim(const BasicTensor<T>& input);
// Squash along the last dimension: |s|^2 / (1 + |s|^2) * s / |s|.
template <typename T>
BasicTensor<T> squash(const BasicTensor<T>& input);
// Norms of the first `count` capsules of v (N, M, D) -> (N, count).
template <typename T>
BasicTensor<T> caps_lengths(const BasicTensor<T>& v, std::size_t count);
// v (N, M, D) -> (N * k, M * D). Output row r copies sample r / k with every
// class capsule (index < n_class) other than keep[r] zeroed.
template <typename T>
BasicTensor<T> mask_capsules(const BasicTensor<T>& v, std::size_t n_class,
                             std::span<const int> keep);

}  // namespace capsdefl
