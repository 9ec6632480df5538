#include "capsdefl/cnn.hpp"

#include <cmath>

#include "capsdefl/capsnet.hpp"
#include "capsdefl/ops.hpp"
#include "init.hpp"

namespace capsdefl {

ParameterStore<float> init_cnn_parameters(const ModelConfig& c, std::uint64_t seed) {
  c.validate();
  std::mt19937_64 rng(seed);
  ParameterStore<float> store;
  detail::add_trunk_parameters(store, c, rng);
  const std::size_t in = c.trunk_out_channels(), head = c.cnn_head_channels;
  store.add("head.conv.w",
            detail::truncated_normal({head, in, 3, 3}, static_cast<double>(in * 9), std::sqrt(2.0), rng));
  store.add("head.conv.b", Tensor::zeros({head}));
  store.add("head.fc.w", detail::truncated_normal({c.n_classes, head}, static_cast<double>(head), 1.0, rng));
  store.add("head.fc.b", Tensor::zeros({c.n_classes}));
  return store;
}

template <typename T>
BasicTensor<T> cnn_logits(const ModelConfig& c, const ParameterStore<T>& p,
                          const BasicTensor<T>& x) {
  BasicTensor<T> h = trunk_forward(c, p, x);
  h = leaky_relu(conv2d(h, p.get("head.conv.w"), p.get("head.conv.b"), 1, 1));
  const std::size_t n = h.dim(0), ch = h.dim(1);
  h = avg_pool2d(h, h.dim(2), h.dim(2));
  return dense(reshape(h, {n, ch}), p.get("head.fc.w"), p.get("head.fc.b"));
}

template BasicTensor<float> cnn_logits(const ModelConfig&, const ParameterStore<float>&,
                                       const BasicTensor<float>&);
template BasicTensor<double> cnn_logits(const ModelConfig&, const ParameterStore<double>&,
                                        const BasicTensor<double>&);

BaselineCnn::BaselineCnn(ModelConfig config, ParameterStore<float> params)
    : config_(std::move(config)), params_(std::move(params)) {
  config_.validate();
  if (config_.height / 4 != config_.width / 4) {
    throw ConfigError("baseline cnn: global pooling expects a square trunk output");
  }
}

BaselineCnn BaselineCnn::initialized(const ModelConfig& config, std::uint64_t seed) {
  return BaselineCnn(config, init_cnn_parameters(config, seed));
}

Tensor BaselineCnn::logits(const Tensor& x) const { return cnn_logits(config_, params_, x); }

std::vector<float> BaselineCnn::probabilities(const Tensor& x) const {
  const Tensor z = logits(x);
  const std::size_t n = z.dim(0), k = z.dim(1);
  std::vector<float> out(n * k);
  for (std::size_t b = 0; b < n; ++b) {
    const float* row = z.data().data() + b * k;
    float mx = row[0];
    for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, row[j]);
    double denom = 0;
    for (std::size_t j = 0; j < k; ++j) denom += std::exp(static_cast<double>(row[j] - mx));
    for (std::size_t j = 0; j < k; ++j)
      out[b * k + j] = static_cast<float>(std::exp(static_cast<double>(row[j] - mx)) / denom);
  }
  return out;
}

}  // namespace capsdefl
