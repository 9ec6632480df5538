#include "capsdefl/train.hpp"

#include <cmath>

#include "capsdefl/error.hpp"
#include "capsdefl/graph.hpp"
#include "capsdefl/ops.hpp"

namespace capsdefl {
namespace {

void require_finite(const StepLosses& l, std::size_t step) {
  for (double v : {l.margin, l.recon, l.cycle, l.total}) {
    if (!std::isfinite(v)) {
      throw RuntimeFailure("training diverged at step " + std::to_string(step) +
                           ": margin=" + std::to_string(l.margin) + " recon=" +
                           std::to_string(l.recon) + " cycle=" + std::to_string(l.cycle));
    }
  }
}

void check_dataset(const Dataset& data, const ModelConfig& config) {
  if (data.size() == 0) throw UsageError("training on an empty dataset");
  if (data.n_classes != config.n_classes) {
    throw UsageError("dataset has " + std::to_string(data.n_classes) + " classes, model expects " +
                     std::to_string(config.n_classes));
  }
  if (data.channels != config.channels || data.height != config.height || data.width != config.width) {
    throw UsageError("dataset images do not match the model input shape");
  }
}

double accuracy_of(std::span<const int> pred, std::span<const int> labels) {
  std::size_t ok = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) ok += pred[i] == labels[i];
  return static_cast<double>(ok) / static_cast<double>(labels.size());
}

template <typename Model, typename Step>
Checkpoint run_training(Model model, const Dataset& data, const TrainSchedule& schedule,
                        const MetricsSink& sink, Step step) {
  AdamState adam;
  adam.learning_rate = schedule.learning_rate;
  BatchIterator it(data.size(), schedule.batch_size, schedule.seed + 1);
  std::vector<std::size_t> idx;
  std::size_t steps = 0;
  for (std::size_t epoch = 0; epoch < schedule.epochs; ++epoch) {
    while (it.next(idx)) {
      const Tensor x = data.batch(idx);
      const auto labels = data.batch_labels(idx);
      TrainMetrics m = step(model, x, labels, adam);
      ++steps;
      if (sink && schedule.log_every && steps % schedule.log_every == 0) {
        m.step = steps;
        m.epoch = epoch;
        m.batch_accuracy = accuracy_of(model.predict(x), labels);
        sink(m);
      }
    }
  }
  return Checkpoint::from_model(model, steps, schedule.seed);
}

}  // namespace

TrainSchedule TrainSchedule::preset_named(const std::string& name) {
  TrainSchedule s;
  if (name == "toy") return s;
  if (name == "svhn") {
    s.batch_size = 64;
    s.learning_rate = 1e-4;
    s.epochs = 50;
    return s;
  }
  if (name == "cifar") {
    s.batch_size = 128;
    s.learning_rate = 2e-4;
    s.epochs = 100;
    return s;
  }
  throw ConfigError("unknown training preset `" + name + "`");
}

void TrainSchedule::validate() const {
  if (batch_size == 0) throw ConfigError("train.batch_size must be positive");
  if (!(learning_rate > 0)) throw ConfigError("train.learning_rate must be positive");
}

void TrainSchedule::write(KeyValueWriter& out) const {
  out.put("batch_size", batch_size);
  out.put("learning_rate", learning_rate);
  out.put("epochs", epochs);
  out.put("log_every", log_every);
  out.put("seed", static_cast<long long>(seed));
}

TrainSchedule TrainSchedule::read(const KeyValueConfig& in, const TrainSchedule& base,
                                  const std::string& section) {
  TrainSchedule s = base;
  auto count = [&](const char* key, std::size_t fallback) {
    const long long v = in.get_int(section, key, static_cast<long long>(fallback));
    if (v < 0) throw ConfigError(section + "." + key + " must be non-negative");
    return static_cast<std::size_t>(v);
  };
  s.batch_size = count("batch_size", s.batch_size);
  s.learning_rate = in.get_double(section, "learning_rate", s.learning_rate);
  s.epochs = count("epochs", s.epochs);
  s.log_every = count("log_every", s.log_every);
  s.seed = static_cast<std::uint64_t>(in.get_int(section, "seed", static_cast<long long>(s.seed)));
  s.validate();
  return s;
}

StepLosses train_step(CapsNet& model, const Tensor& x, std::span<const int> labels,
                      AdamState& state) {
  auto& params = model.parameters();
  params.set_trainable(true);
  const auto losses = training_objective(model.config(), params, x, labels);
  StepLosses out{losses.margin.item(), losses.recon.item(), losses.cycle.item(), losses.total.item()};
  require_finite(out, state.step + 1);
  backward(losses.total);
  adam_step(params.tensors(), state);
  params.set_trainable(false);
  return out;
}

double train_step(BaselineCnn& model, const Tensor& x, std::span<const int> labels,
                  AdamState& state) {
  auto& params = model.parameters();
  params.set_trainable(true);
  const Tensor loss = softmax_cross_entropy(model.logits(x), labels);
  const double value = loss.item();
  if (!std::isfinite(value)) {
    throw RuntimeFailure("baseline training diverged at step " + std::to_string(state.step + 1));
  }
  backward(loss);
  adam_step(params.tensors(), state);
  params.set_trainable(false);
  return value;
}

Checkpoint train(const Dataset& data, const ModelConfig& config, const TrainSchedule& schedule,
                 const MetricsSink& sink) {
  schedule.validate();
  check_dataset(data, config);
  return run_training(CapsNet::initialized(config, schedule.seed), data, schedule, sink,
                      [](CapsNet& m, const Tensor& x, std::span<const int> y, AdamState& a) {
                        TrainMetrics t;
                        t.losses = train_step(m, x, y, a);
                        return t;
                      });
}

Checkpoint train_baseline(const Dataset& data, const ModelConfig& config,
                          const TrainSchedule& schedule, const MetricsSink& sink) {
  schedule.validate();
  check_dataset(data, config);
  return run_training(BaselineCnn::initialized(config, schedule.seed), data, schedule, sink,
                      [](BaselineCnn& m, const Tensor& x, std::span<const int> y, AdamState& a) {
                        TrainMetrics t;
                        t.losses.total = train_step(m, x, y, a);
                        return t;
                      });
}

}  // namespace capsdefl
