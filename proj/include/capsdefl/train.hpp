#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>

#include "capsdefl/adam.hpp"
#include "capsdefl/checkpoint.hpp"
#include "capsdefl/data.hpp"

namespace capsdefl {

struct TrainSchedule {
  std::size_t batch_size = 32;
  double learning_rate = 1e-3;
  std::size_t epochs = 8;
  std::size_t log_every = 100;  // steps between metric callbacks; 0 disables
  std::uint64_t seed = 1;

  static TrainSchedule preset_named(const std::string& name);
  void validate() const;
  void write(KeyValueWriter& out) const;
  // Reads `[train]` over the named preset's values.
  static TrainSchedule read(const KeyValueConfig& in, const TrainSchedule& base,
                            const std::string& section = "train");
};

struct StepLosses {
  double margin = 0, recon = 0, cycle = 0, total = 0;
};

struct TrainMetrics {
  std::size_t step = 0;
  std::size_t epoch = 0;
  StepLosses losses;      // of the latest step
  double batch_accuracy = 0;
};

using MetricsSink = std::function<void(const TrainMetrics&)>;

// One Adam update of the capsule network on (x, labels). Throws
// RuntimeFailure if any loss component is not finite.
StepLosses train_step(CapsNet& model, const Tensor& x, std::span<const int> labels,
                      AdamState& state);
// Cross-entropy update of the baseline CNN; returns the loss.
double train_step(BaselineCnn& model, const Tensor& x, std::span<const int> labels,
                  AdamState& state);

// Initializes from schedule.seed and trains for schedule.epochs passes.
Checkpoint train(const Dataset& data, const ModelConfig& config, const TrainSchedule& schedule,
                 const MetricsSink& sink = {});
Checkpoint train_baseline(const Dataset& data, const ModelConfig& config,
                          const TrainSchedule& schedule, const MetricsSink& sink = {});

}  // namespace capsdefl
