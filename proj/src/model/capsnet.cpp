#include "capsdefl/capsnet.hpp"

#include <algorithm>
#include <cmath>

#include "capsdefl/ops.hpp"
#include "init.hpp"

namespace capsdefl {

namespace detail {

Tensor truncated_normal(const Shape& shape, double fan_in, double gain, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  const double stddev = gain / std::sqrt(fan_in);
  std::vector<float> data(numel(shape));
  for (auto& v : data) {
    double z = normal(rng);
    while (std::abs(z) > 2.0) z = normal(rng);
    v = static_cast<float>(z * stddev);
  }
  return Tensor::from(shape, std::move(data));
}

void add_trunk_parameters(ParameterStore<float>& store, const ModelConfig& c,
                          std::mt19937_64& rng) {
  const double relu_gain = std::sqrt(2.0);
  std::size_t in = c.channels;
  for (std::size_t i = 0; i < 6; ++i) {
    const std::size_t out = c.trunk_channels[i];
    const std::string name = "trunk.conv" + std::to_string(i + 1);
    store.add(name + ".w", truncated_normal({out, in, 3, 3}, static_cast<double>(in * 9), relu_gain, rng));
    store.add(name + ".b", Tensor::zeros({out}));
    in = out;
  }
  if (c.trunk_projection) {
    store.add("trunk.proj.w",
              truncated_normal({c.trunk_projection, in, 1, 1}, static_cast<double>(in), relu_gain, rng));
    store.add("trunk.proj.b", Tensor::zeros({c.trunk_projection}));
  }
}

}  // namespace detail

ParameterStore<float> init_capsnet_parameters(const ModelConfig& c, std::uint64_t seed) {
  c.validate();
  std::mt19937_64 rng(seed);
  ParameterStore<float> store;
  detail::add_trunk_parameters(store, c, rng);
  const std::size_t atoms_in = c.primary_atoms();
  store.add("caps.w", detail::truncated_normal({c.primary_caps, c.n_capsules, c.atoms, atoms_in},
                                               static_cast<double>(atoms_in), 1.0, rng));

  const double relu_gain = std::sqrt(2.0);
  const std::size_t md = c.decoder_input();
  const std::size_t fc2_out = c.decoder_channels * c.decoder_side_h() * c.decoder_side_w();
  store.add("dec.fc1.w", detail::truncated_normal({c.decoder_hidden, md}, static_cast<double>(md),
                                                  relu_gain, rng));
  store.add("dec.fc1.b", Tensor::zeros({c.decoder_hidden}));
  store.add("dec.fc2.w", detail::truncated_normal({fc2_out, c.decoder_hidden},
                                                  static_cast<double>(c.decoder_hidden), relu_gain, rng));
  store.add("dec.fc2.b", Tensor::zeros({fc2_out}));
  const std::size_t k = c.deconv_kernel;
  // A stride-2 transposed conv feeds each output pixel from in * (k/2)^2 inputs.
  store.add("dec.deconv1.w",
            detail::truncated_normal({c.decoder_channels, c.deconv_channels[0], k, k},
                                     static_cast<double>(c.decoder_channels * k * k / 4), relu_gain, rng));
  store.add("dec.deconv1.b", Tensor::zeros({c.deconv_channels[0]}));
  store.add("dec.deconv2.w",
            detail::truncated_normal({c.deconv_channels[0], c.deconv_channels[1], k, k},
                                     static_cast<double>(c.deconv_channels[0] * k * k / 4), relu_gain, rng));
  store.add("dec.deconv2.b", Tensor::zeros({c.deconv_channels[1]}));
  const std::size_t fk = c.final_kernel;
  store.add("dec.out.w", detail::truncated_normal({c.channels, c.deconv_channels[1], fk, fk},
                                                  static_cast<double>(c.deconv_channels[1] * fk * fk),
                                                  1.0, rng));
  store.add("dec.out.b", Tensor::zeros({c.channels}));
  return store;
}

template <typename T>
BasicTensor<T> trunk_forward(const ModelConfig& c, const ParameterStore<T>& p,
                             const BasicTensor<T>& x) {
  if (x.rank() != 4 || x.dim(1) != c.channels || x.dim(2) != c.height || x.dim(3) != c.width) {
    throw UsageError("classifier input " + shape_str(x.shape()) + " does not match configured (N, " +
                     std::to_string(c.channels) + ", " + std::to_string(c.height) + ", " +
                     std::to_string(c.width) + ")");
  }
  BasicTensor<T> h = x;
  for (int i = 1; i <= 6; ++i) {
    const std::string name = "trunk.conv" + std::to_string(i);
    h = leaky_relu(conv2d(h, p.get(name + ".w"), p.get(name + ".b"), 1, 1));
    if (i == 2 || i == 4) h = avg_pool2d(h, 2, 2);
  }
  if (c.trunk_projection) h = leaky_relu(conv2d(h, p.get("trunk.proj.w"), p.get("trunk.proj.b"), 1, 0));
  return h;
}

template <typename T>
CapsOutput<T> caps_layer(const ModelConfig& c, const ParameterStore<T>& p,
                         const BasicTensor<T>& primary) {
  const auto& w = p.get("caps.w");
  if (primary.rank() != 3 || primary.dim(1) != w.dim(0) || primary.dim(2) != w.dim(3)) {
    throw ConfigError("capsule layer: input capsules " + shape_str(primary.shape()) +
                      " incompatible with transformation weights " + shape_str(w.shape()));
  }
  const std::size_t n = primary.dim(0), ni = primary.dim(1), nj = c.n_capsules;
  const BasicTensor<T> uhat = caps_predict(primary, w);
  BasicTensor<T> logits = BasicTensor<T>::zeros({n, ni, nj});
  BasicTensor<T> v;
  for (std::size_t r = 0; r < c.routing_iters; ++r) {
    const BasicTensor<T> coupling = softmax_lastdim(logits);
    v = squash(caps_combine(uhat, coupling));
    if (r + 1 < c.routing_iters) logits = add(logits, caps_agreement(uhat, v));
  }
  CapsOutput<T> out;
  out.poses = v;
  out.lengths = caps_lengths(v, c.n_classes);
  out.prediction.resize(n);
  const auto len = out.lengths.data();
  for (std::size_t b = 0; b < n; ++b) {
    const T* row = len.data() + b * c.n_classes;
    out.prediction[b] = static_cast<int>(std::max_element(row, row + c.n_classes) - row);
  }
  return out;
}

template <typename T>
CapsOutput<T> caps_classify(const ModelConfig& c, const ParameterStore<T>& p,
                            const BasicTensor<T>& x) {
  const BasicTensor<T> features = trunk_forward(c, p, x);
  const std::size_t n = features.dim(0);
  const std::size_t total = features.numel() / n;
  if (total % c.primary_caps) {
    throw ConfigError("capsule layer: trunk output " + shape_str(features.shape()) +
                      " does not split into " + std::to_string(c.primary_caps) + " capsules");
  }
  // Channel-major flattening: NCHW memory order split into equal chunks.
  return caps_layer(c, p, reshape(features, {n, c.primary_caps, total / c.primary_caps}));
}

template <typename T>
BasicTensor<T> caps_reconstruct(const ModelConfig& c, const ParameterStore<T>& p,
                                const BasicTensor<T>& masked) {
  if (masked.rank() != 2 || masked.dim(1) != c.decoder_input()) {
    throw UsageError("reconstruct: masked poses " + shape_str(masked.shape()) +
                     " must be (R, " + std::to_string(c.decoder_input()) + ")");
  }
  const std::size_t rows = masked.dim(0);
  BasicTensor<T> h = leaky_relu(dense(masked, p.get("dec.fc1.w"), p.get("dec.fc1.b")));
  h = leaky_relu(dense(h, p.get("dec.fc2.w"), p.get("dec.fc2.b")));
  h = reshape(h, {rows, c.decoder_channels, c.decoder_side_h(), c.decoder_side_w()});
  h = leaky_relu(deconv2d(h, p.get("dec.deconv1.w"), p.get("dec.deconv1.b"), 2, 1));
  h = leaky_relu(deconv2d(h, p.get("dec.deconv2.w"), p.get("dec.deconv2.b"), 2, 1));
  return sigmoid(conv2d(h, p.get("dec.out.w"), p.get("dec.out.b"), 1, c.final_kernel / 2));
}

template <typename T>
BasicTensor<T> mask_for_reconstruction(const ModelConfig& c, const BasicTensor<T>& poses,
                                       std::span<const int> classes) {
  if (poses.rank() != 3 || poses.dim(1) != c.n_capsules || poses.dim(2) != c.atoms) {
    throw UsageError("mask_for_reconstruction: poses " + shape_str(poses.shape()) +
                     " do not match the capsule configuration");
  }
  for (int k : classes) {
    if (k < 0 || static_cast<std::size_t>(k) >= c.n_classes) {
      throw UsageError("mask_for_reconstruction: class " + std::to_string(k) +
                       " out of range [0, " + std::to_string(c.n_classes) + ")");
    }
  }
  return mask_capsules(poses, c.n_classes, classes);
}

template <typename T>
BasicTensor<T> reconstruct_from(const ModelConfig& c, const ParameterStore<T>& p,
                                const BasicTensor<T>& poses, std::span<const int> classes) {
  return caps_reconstruct(c, p, mask_for_reconstruction(c, poses, classes));
}

template <typename T>
BasicTensor<T> caps_logits(const ModelConfig& c, const BasicTensor<T>& lengths) {
  return scale(lengths, static_cast<T>(c.logit_scale));
}

template <typename T>
BasicTensor<T> cycle_loss(const ModelConfig& c, const ParameterStore<T>& p,
                          const BasicTensor<T>& x) {
  const CapsOutput<T> first = caps_classify(c, p, x);
  const BasicTensor<T> recon = reconstruct_from(c, p, first.poses, std::span<const int>(first.prediction));
  const CapsOutput<T> second = caps_classify(c, p, recon);
  return softmax_cross_entropy(caps_logits(c, second.lengths), first.prediction);
}

template <typename T>
TrainingLosses<T> training_objective(const ModelConfig& c, const ParameterStore<T>& p,
                                     const BasicTensor<T>& x, std::span<const int> labels) {
  if (x.rank() != 4 || x.dim(0) != labels.size() || labels.empty()) {
    throw UsageError("training_objective: batch " + shape_str(x.shape()) + " with " +
                     std::to_string(labels.size()) + " labels");
  }
  const T inv_n = T(1) / static_cast<T>(labels.size());
  const CapsOutput<T> out = caps_classify(c, p, x);
  TrainingLosses<T> losses;
  losses.margin = margin_loss(out.lengths, labels, static_cast<T>(c.m_plus),
                              static_cast<T>(c.m_minus), static_cast<T>(c.lambda_margin));
  const BasicTensor<T> recon_label = reconstruct_from(c, p, out.poses, labels);
  losses.recon = scale(squared_error(recon_label, x), inv_n);
  losses.total = add(losses.margin, scale(losses.recon, static_cast<T>(c.lambda_recon)));
  if (c.lambda_cyc > 0) {
    const bool same = std::equal(labels.begin(), labels.end(), out.prediction.begin());
    const BasicTensor<T> recon_pred =
        same ? recon_label : reconstruct_from(c, p, out.poses, std::span<const int>(out.prediction));
    const CapsOutput<T> again = caps_classify(c, p, recon_pred);
    losses.cycle = softmax_cross_entropy(caps_logits(c, again.lengths), out.prediction);
    losses.total = add(losses.total, scale(losses.cycle, static_cast<T>(c.lambda_cyc)));
  } else {
    losses.cycle = BasicTensor<T>::scalar(T(0));
  }
  return losses;
}

#define CAPSDEFL_INSTANTIATE_CAPSNET(T)                                                             \
  template BasicTensor<T> trunk_forward(const ModelConfig&, const ParameterStore<T>&,              \
                                        const BasicTensor<T>&);                                    \
  template CapsOutput<T> caps_layer(const ModelConfig&, const ParameterStore<T>&,                  \
                                    const BasicTensor<T>&);                                        \
  template CapsOutput<T> caps_classify(const ModelConfig&, const ParameterStore<T>&,               \
                                       const BasicTensor<T>&);                                     \
  template BasicTensor<T> caps_reconstruct(const ModelConfig&, const ParameterStore<T>&,           \
                                           const BasicTensor<T>&);                                 \
  template BasicTensor<T> mask_for_reconstruction(const ModelConfig&, const BasicTensor<T>&,       \
                                                  std::span<const int>);                           \
  template BasicTensor<T> reconstruct_from(const ModelConfig&, const ParameterStore<T>&,           \
                                           const BasicTensor<T>&, std::span<const int>);           \
  template BasicTensor<T> caps_logits(const ModelConfig&, const BasicTensor<T>&);                  \
  template BasicTensor<T> cycle_loss(const ModelConfig&, const ParameterStore<T>&,                 \
                                     const BasicTensor<T>&);                                       \
  template TrainingLosses<T> training_objective(const ModelConfig&, const ParameterStore<T>&,      \
                                                const BasicTensor<T>&, std::span<const int>);

CAPSDEFL_INSTANTIATE_CAPSNET(float)
CAPSDEFL_INSTANTIATE_CAPSNET(double)

CapsNet::CapsNet(ModelConfig config, ParameterStore<float> params)
    : config_(std::move(config)), params_(std::move(params)) {
  config_.validate();
}

CapsNet CapsNet::initialized(const ModelConfig& config, std::uint64_t seed) {
  return CapsNet(config, init_capsnet_parameters(config, seed));
}

Tensor CapsNet::logits(const Tensor& x) const {
  return caps_logits(config_, caps_classify(config_, params_, x).lengths);
}

Tensor CapsNet::scores(const Tensor& x) const { return caps_classify(config_, params_, x).lengths; }

CapsOutput<float> CapsNet::classify(const Tensor& x) const { return caps_classify(config_, params_, x); }

Tensor CapsNet::reconstruct(const Tensor& masked) const {
  return caps_reconstruct(config_, params_, masked);
}

Tensor CapsNet::reconstruct_from(const Tensor& poses, std::span<const int> classes) const {
  return capsdefl::reconstruct_from(config_, params_, poses, classes);
}

std::vector<int> argmax_rows(const Tensor& scores) {
  const std::size_t n = scores.dim(0), c = scores.numel() / scores.dim(0);
  std::vector<int> out(n);
  for (std::size_t b = 0; b < n; ++b) {
    const float* row = scores.data().data() + b * c;
    out[b] = static_cast<int>(std::max_element(row, row + c) - row);
  }
  return out;
}

std::vector<int> Classifier::predict(const Tensor& x) const { return argmax_rows(scores(x)); }

}  // namespace capsdefl
