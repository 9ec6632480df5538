#include <algorithm>
#include <cmath>

#include "capsdefl/error.hpp"
#include "capsdefl/ops.hpp"

namespace capsdefl {
namespace {

template <typename T>
void require_same_shape(const BasicTensor<T>& a, const BasicTensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ConfigError(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " +
                      shape_str(b.shape()) + " differ");
  }
}

template <typename T>
void accumulate(Node<T>& in, const std::vector<T>& g, T factor = T(1)) {
  if (!in.requires_grad) return;
  T* dst = in.grad_buffer();
  for (std::size_t i = 0; i < g.size(); ++i) dst[i] += factor * g[i];
}

}  // namespace

template <typename T>
BasicTensor<T> leaky_relu(const BasicTensor<T>& input, T slope) {
  std::vector<T> out(input.numel());
  const auto x = input.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] > T(0) ? x[i] : slope * x[i];
  return make_op<T>(OpKind::LeakyRelu, input.shape(), std::move(out), {input},
                    [slope](Node<T>& self) {
                      auto& in = *self.inputs[0];
                      T* dx = in.grad_buffer();
                      for (std::size_t i = 0; i < self.grad.size(); ++i)
                        dx[i] += in.data[i] > T(0) ? self.grad[i] : slope * self.grad[i];
                    });
}

template <typename T>
BasicTensor<T> sigmoid(const BasicTensor<T>& input) {
  std::vector<T> out(input.numel());
  const auto x = input.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    // Split by sign so exp never overflows.
    if (x[i] >= T(0)) {
      out[i] = T(1) / (T(1) + std::exp(-x[i]));
    } else {
      const T e = std::exp(x[i]);
      out[i] = e / (T(1) + e);
    }
  }
  return make_op<T>(OpKind::Sigmoid, input.shape(), std::move(out), {input}, [](Node<T>& self) {
    T* dx = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const T y = self.data[i];
      dx[i] += self.grad[i] * y * (T(1) - y);
    }
  });
}

template <typename T>
BasicTensor<T> activation(const BasicTensor<T>& input, Activation kind) {
  switch (kind) {
    case Activation::LeakyRelu: return leaky_relu(input, T(kLeakySlope));
    case Activation::Sigmoid: return sigmoid(input);
  }
  throw UsageError("activation: unknown kind");
}

template <typename T>
BasicTensor<T> softmax_cross_entropy(const BasicTensor<T>& logits, std::span<const int> targets,
                                     Reduction reduction) {
  if (logits.rank() != 2) {
    throw ConfigError("softmax_cross_entropy: logits " + shape_str(logits.shape()) +
                      " must be (N, C)");
  }
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  if (targets.size() != n) {
    throw ConfigError("softmax_cross_entropy: " + std::to_string(targets.size()) +
                      " targets for logits " + shape_str(logits.shape()));
  }
  std::vector<T> probs(n * c);
  std::vector<int> tgt(targets.begin(), targets.end());
  T total = 0;
  const auto z = logits.data();
  for (std::size_t i = 0; i < n; ++i) {
    if (tgt[i] < 0 || static_cast<std::size_t>(tgt[i]) >= c) {
      throw UsageError("softmax_cross_entropy: target " + std::to_string(tgt[i]) +
                       " out of range for " + std::to_string(c) + " classes");
    }
    const T* row = z.data() + i * c;
    const T zmax = *std::max_element(row, row + c);
    T denom = 0;
    for (std::size_t j = 0; j < c; ++j) {
      probs[i * c + j] = std::exp(row[j] - zmax);
      denom += probs[i * c + j];
    }
    for (std::size_t j = 0; j < c; ++j) probs[i * c + j] /= denom;
    total += std::log(denom) + zmax - row[tgt[i]];
  }
  const T factor = reduction == Reduction::Mean ? T(1) / static_cast<T>(n) : T(1);
  return make_op<T>(OpKind::SoftmaxCrossEntropy, Shape{1}, {total * factor}, {logits},
                    [probs = std::move(probs), tgt = std::move(tgt), n, c, factor](Node<T>& self) {
                      T* dz = self.inputs[0]->grad_buffer();
                      const T g = self.grad[0] * factor;
                      for (std::size_t i = 0; i < n; ++i) {
                        for (std::size_t j = 0; j < c; ++j) {
                          const T onehot = static_cast<int>(j) == tgt[i] ? T(1) : T(0);
                          dz[i * c + j] += g * (probs[i * c + j] - onehot);
                        }
                      }
                    });
}

template <typename T>
BasicTensor<T> l2_distance(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_same_shape(a, b, "l2_distance");
  const auto x = a.data();
  const auto y = b.data();
  T acc = 0;
  for (std::size_t i = 0; i < x.size(); ++i) acc += (x[i] - y[i]) * (x[i] - y[i]);
  const T dist = std::sqrt(acc);
  return make_op<T>(OpKind::L2Distance, Shape{1}, {dist}, {a, b}, [dist](Node<T>& self) {
    if (dist == T(0)) return;  // subgradient 0 at a == b
    auto& na = *self.inputs[0];
    auto& nb = *self.inputs[1];
    const T g = self.grad[0] / dist;
    T* da = na.requires_grad ? na.grad_buffer() : nullptr;
    T* db = nb.requires_grad ? nb.grad_buffer() : nullptr;
    for (std::size_t i = 0; i < na.data.size(); ++i) {
      const T d = g * (na.data[i] - nb.data[i]);
      if (da) da[i] += d;
      if (db) db[i] -= d;
    }
  });
}

template <typename T>
BasicTensor<T> row_l2_distance(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_same_shape(a, b, "row_l2_distance");
  if (a.rank() < 1) throw ConfigError("row_l2_distance: needs a leading row dimension");
  const std::size_t rows = a.dim(0), width = a.numel() / std::max<std::size_t>(rows, 1);
  std::vector<T> out(rows);
  const auto x = a.data();
  const auto y = b.data();
  for (std::size_t r = 0; r < rows; ++r) {
    T acc = 0;
    for (std::size_t i = r * width; i < (r + 1) * width; ++i) acc += (x[i] - y[i]) * (x[i] - y[i]);
    out[r] = std::sqrt(acc);
  }
  return make_op<T>(OpKind::RowL2Distance, Shape{rows}, std::move(out), {a, b},
                    [rows, width](Node<T>& self) {
                      auto& na = *self.inputs[0];
                      auto& nb = *self.inputs[1];
                      T* da = na.requires_grad ? na.grad_buffer() : nullptr;
                      T* db = nb.requires_grad ? nb.grad_buffer() : nullptr;
                      for (std::size_t r = 0; r < rows; ++r) {
                        if (self.data[r] == T(0)) continue;
                        const T g = self.grad[r] / self.data[r];
                        for (std::size_t i = r * width; i < (r + 1) * width; ++i) {
                          const T d = g * (na.data[i] - nb.data[i]);
                          if (da) da[i] += d;
                          if (db) db[i] -= d;
                        }
                      }
                    });
}

template <typename T>
BasicTensor<T> squared_error(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_same_shape(a, b, "squared_error");
  const auto x = a.data();
  const auto y = b.data();
  T acc = 0;
  for (std::size_t i = 0; i < x.size(); ++i) acc += (x[i] - y[i]) * (x[i] - y[i]);
  return make_op<T>(OpKind::SquaredError, Shape{1}, {acc}, {a, b}, [](Node<T>& self) {
    auto& na = *self.inputs[0];
    auto& nb = *self.inputs[1];
    const T g = T(2) * self.grad[0];
    T* da = na.requires_grad ? na.grad_buffer() : nullptr;
    T* db = nb.requires_grad ? nb.grad_buffer() : nullptr;
    for (std::size_t i = 0; i < na.data.size(); ++i) {
      const T d = g * (na.data[i] - nb.data[i]);
      if (da) da[i] += d;
      if (db) db[i] -= d;
    }
  });
}

template <typename T>
BasicTensor<T> margin_loss(const BasicTensor<T>& lengths, std::span<const int> labels, T m_plus,
                           T m_minus, T lambda) {
  if (lengths.rank() != 2 || lengths.dim(0) != labels.size()) {
    throw ConfigError("margin_loss: lengths " + shape_str(lengths.shape()) + " vs " +
                      std::to_string(labels.size()) + " labels");
  }
  const std::size_t n = lengths.dim(0), c = lengths.dim(1);
  std::vector<int> lab(labels.begin(), labels.end());
  const auto len = lengths.data();
  T total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (lab[i] < 0 || static_cast<std::size_t>(lab[i]) >= c)
      throw UsageError("margin_loss: label " + std::to_string(lab[i]) + " out of range");
    for (std::size_t k = 0; k < c; ++k) {
      const T l = len[i * c + k];
      if (static_cast<int>(k) == lab[i]) {
        const T gap = std::max(T(0), m_plus - l);
        total += gap * gap;
      } else {
        const T gap = std::max(T(0), l - m_minus);
        total += lambda * gap * gap;
      }
    }
  }
  const T inv_n = T(1) / static_cast<T>(n);
  return make_op<T>(OpKind::MarginLoss, Shape{1}, {total * inv_n}, {lengths},
                    [lab = std::move(lab), n, c, m_plus, m_minus, lambda, inv_n](Node<T>& self) {
                      auto& in = *self.inputs[0];
                      T* dl = in.grad_buffer();
                      const T g = self.grad[0] * inv_n;
                      for (std::size_t i = 0; i < n; ++i) {
                        for (std::size_t k = 0; k < c; ++k) {
                          const T l = in.data[i * c + k];
                          if (static_cast<int>(k) == lab[i]) {
                            const T gap = std::max(T(0), m_plus - l);
                            dl[i * c + k] -= g * T(2) * gap;
                          } else {
                            const T gap = std::max(T(0), l - m_minus);
                            dl[i * c + k] += g * lambda * T(2) * gap;
                          }
                        }
                      }
                    });
}

template <typename T>
BasicTensor<T> target_margin(const BasicTensor<T>& scores, std::span<const int> targets, T kappa) {
  if (scores.rank() != 2 || scores.dim(0) != targets.size() || scores.dim(1) < 2) {
    throw ConfigError("target_margin: scores " + shape_str(scores.shape()) + " vs " +
                      std::to_string(targets.size()) + " targets");
  }
  const std::size_t n = scores.dim(0), c = scores.dim(1);
  const auto z = scores.data();
  std::vector<T> out(n);
  // Per row: index of the best rival, or -1 when the hinge is clamped.
  std::vector<std::ptrdiff_t> rival(n);
  std::vector<int> tgt(targets.begin(), targets.end());
  for (std::size_t i = 0; i < n; ++i) {
    if (tgt[i] < 0 || static_cast<std::size_t>(tgt[i]) >= c)
      throw UsageError("target_margin: target " + std::to_string(tgt[i]) + " out of range");
    std::size_t best = tgt[i] == 0 ? 1 : 0;
    for (std::size_t k = 0; k < c; ++k)
      if (static_cast<int>(k) != tgt[i] && z[i * c + k] > z[i * c + best]) best = k;
    const T gap = z[i * c + best] - z[i * c + static_cast<std::size_t>(tgt[i])];
    out[i] = std::max(gap, -kappa);
    rival[i] = gap > -kappa ? static_cast<std::ptrdiff_t>(best) : -1;
  }
  return make_op<T>(OpKind::TargetMargin, Shape{n}, std::move(out), {scores},
                    [rival = std::move(rival), tgt = std::move(tgt), c](Node<T>& self) {
                      T* dz = self.inputs[0]->grad_buffer();
                      for (std::size_t i = 0; i < rival.size(); ++i) {
                        if (rival[i] < 0) continue;
                        dz[i * c + static_cast<std::size_t>(rival[i])] += self.grad[i];
                        dz[i * c + static_cast<std::size_t>(tgt[i])] -= self.grad[i];
                      }
                    });
}

template <typename T>
BasicTensor<T> sum(const BasicTensor<T>& input) {
  T acc = 0;
  for (T v : input.data()) acc += v;
  return make_op<T>(OpKind::Sum, Shape{1}, {acc}, {input}, [](Node<T>& self) {
    auto& in = *self.inputs[0];
    T* dx = in.grad_buffer();
    for (std::size_t i = 0; i < in.data.size(); ++i) dx[i] += self.grad[0];
  });
}

template <typename T>
BasicTensor<T> mean(const BasicTensor<T>& input) {
  if (input.numel() == 0) throw UsageError("mean: empty tensor");
  return scale(sum(input), T(1) / static_cast<T>(input.numel()));
}

template <typename T>
BasicTensor<T> weighted_sum(const BasicTensor<T>& input, std::span<const T> weights) {
  if (weights.size() != input.numel()) {
    throw ConfigError("weighted_sum: " + std::to_string(weights.size()) + " weights for " +
                      shape_str(input.shape()));
  }
  std::vector<T> w(weights.begin(), weights.end());
  T acc = 0;
  for (std::size_t i = 0; i < w.size(); ++i) acc += w[i] * input.data()[i];
  return make_op<T>(OpKind::WeightedSum, Shape{1}, {acc}, {input},
                    [w = std::move(w)](Node<T>& self) {
                      T* dx = self.inputs[0]->grad_buffer();
                      for (std::size_t i = 0; i < w.size(); ++i) dx[i] += self.grad[0] * w[i];
                    });
}

template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_same_shape(a, b, "add");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  return make_op<T>(OpKind::Add, a.shape(), std::move(out), {a, b}, [](Node<T>& self) {
    accumulate(*self.inputs[0], self.grad);
    accumulate(*self.inputs[1], self.grad);
  });
}

template <typename T>
BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_same_shape(a, b, "sub");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  return make_op<T>(OpKind::Sub, a.shape(), std::move(out), {a, b}, [](Node<T>& self) {
    accumulate(*self.inputs[0], self.grad);
    accumulate(*self.inputs[1], self.grad, T(-1));
  });
}

template <typename T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_same_shape(a, b, "mul");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  return make_op<T>(OpKind::Mul, a.shape(), std::move(out), {a, b}, [](Node<T>& self) {
    auto& na = *self.inputs[0];
    auto& nb = *self.inputs[1];
    if (na.requires_grad) {
      T* d = na.grad_buffer();
      for (std::size_t i = 0; i < self.grad.size(); ++i) d[i] += self.grad[i] * nb.data[i];
    }
    if (nb.requires_grad) {
      T* d = nb.grad_buffer();
      for (std::size_t i = 0; i < self.grad.size(); ++i) d[i] += self.grad[i] * na.data[i];
    }
  });
}

template <typename T>
BasicTensor<T> scale(const BasicTensor<T>& input, T factor) {
  std::vector<T> out(input.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = factor * input.data()[i];
  return make_op<T>(OpKind::Scale, input.shape(), std::move(out), {input},
                    [factor](Node<T>& self) { accumulate(*self.inputs[0], self.grad, factor); });
}

template <typename T>
BasicTensor<T> reshape(const BasicTensor<T>& input, Shape shape) {
  if (numel(shape) != input.numel()) {
    throw ConfigError("reshape: cannot view " + shape_str(input.shape()) + " as " +
                      shape_str(shape));
  }
  std::vector<T> out(input.data().begin(), input.data().end());
  return make_op<T>(OpKind::Reshape, std::move(shape), std::move(out), {input},
                    [](Node<T>& self) { accumulate(*self.inputs[0], self.grad); });
}

template <typename T>
BasicTensor<T> repeat_rows(const BasicTensor<T>& input, std::size_t times) {
  if (input.rank() < 1 || times < 1) throw ConfigError("repeat_rows: bad arguments");
  const std::size_t rows = input.dim(0), width = input.numel() / rows;
  std::vector<T> out(input.numel() * times);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t t = 0; t < times; ++t)
      std::copy_n(input.data().data() + r * width, width, out.data() + (r * times + t) * width);
  Shape shape = input.shape();
  shape[0] *= times;
  return make_op<T>(OpKind::RepeatRows, std::move(shape), std::move(out), {input},
                    [rows, width, times](Node<T>& self) {
                      T* dx = self.inputs[0]->grad_buffer();
                      for (std::size_t r = 0; r < rows; ++r)
                        for (std::size_t t = 0; t < times; ++t)
                          for (std::size_t i = 0; i < width; ++i)
                            dx[r * width + i] += self.grad[(r * times + t) * width + i];
                    });
}

#define CAPSDEFL_INSTANTIATE_ELEM(T)                                                           \
  template BasicTensor<T> leaky_relu(const BasicTensor<T>&, T);                               \
  template BasicTensor<T> sigmoid(const BasicTensor<T>&);                                     \
  template BasicTensor<T> activation(const BasicTensor<T>&, Activation);                      \
  template BasicTensor<T> softmax_cross_entropy(const BasicTensor<T>&, std::span<const int>,  \
                                                Reduction);                                   \
  template BasicTensor<T> l2_distance(const BasicTensor<T>&, const BasicTensor<T>&);          \
  template BasicTensor<T> row_l2_distance(const BasicTensor<T>&, const BasicTensor<T>&);      \
  template BasicTensor<T> squared_error(const BasicTensor<T>&, const BasicTensor<T>&);        \
  template BasicTensor<T> margin_loss(const BasicTensor<T>&, std::span<const int>, T, T, T);  \
  template BasicTensor<T> target_margin(const BasicTensor<T>&, std::span<const int>, T);        \
  template BasicTensor<T> sum(const BasicTensor<T>&);                                         \
  template BasicTensor<T> mean(const BasicTensor<T>&);                                        \
  template BasicTensor<T> weighted_sum(const BasicTensor<T>&, std::span<const T>);            \
  template BasicTensor<T> add(const BasicTensor<T>&, const BasicTensor<T>&);                  \
  template BasicTensor<T> sub(const BasicTensor<T>&, const BasicTensor<T>&);                  \
  template BasicTensor<T> mul(const BasicTensor<T>&, const BasicTensor<T>&);                  \
  template BasicTensor<T> scale(const BasicTensor<T>&, T);                                    \
  template BasicTensor<T> reshape(const BasicTensor<T>&, Shape);                              \
  template BasicTensor<T> repeat_rows(const BasicTensor<T>&, std::size_t);

CAPSDEFL_INSTANTIATE_ELEM(float)
CAPSDEFL_INSTANTIATE_ELEM(double)

}  // namespace capsdefl
