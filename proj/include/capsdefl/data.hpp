#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "capsdefl/tensor.hpp"

namespace capsdefl {

// N images, row-major (N, C, H, W), pixels in [0, 1].
struct Dataset {
  std::string split = "train";
  std::size_t n_classes = 10;
  std::size_t channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<float> images;
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
  std::size_t image_size() const { return channels * height * width; }
  std::span<const float> image(std::size_t i) const;

  // Stacks the given samples into a (k, C, H, W) tensor.
  Tensor batch(std::span<const std::size_t> indices) const;
  std::vector<int> batch_labels(std::span<const std::size_t> indices) const;
  Dataset subset(std::span<const std::size_t> indices) const;

  // Throws FormatError if labels, sizes or pixel range are off.
  void validate() const;
};

// CIFAR-10 binary batch: 3073-byte records (label byte, then 3x32x32 bytes).
Dataset load_cifar10_binary(const std::string& path);

// IDX image/label pair (magic 0x803 / 0x801). Grayscale is replicated to
// `channels` planes.
Dataset load_idx(const std::string& images_path, const std::string& labels_path,
                 std::size_t channels = 1);

// Writes the first channel of each image as 8-bit IDX, byte = floor(v*255 + 0.5).
void save_idx(const Dataset& data, const std::string& images_path, const std::string& labels_path);

// Little-endian f32 image of the given shape, as written by the attack module.
std::vector<float> load_raw_f32(const std::string& path, std::size_t count);
void save_raw_f32(const std::string& path, std::span<const float> values);

enum class ToySplit { Train, Test };

struct ToyOptions {
  int max_shift = 2;             // translation jitter in pixels, each axis
  double brightness_jitter = 0.1;
  double noise = 0.0;            // std of additive Gaussian pixel noise
  double thickness_jitter = 0.0; // relative stroke-width jitter
  double ink = 0.85;             // stroke intensity before brightness jitter
  double background = 0.0;       // canvas intensity
  std::size_t clutter = 0;       // random distractor strokes per image
  double clutter_ink = 0.5;      // distractor intensity relative to the glyph
};

// Ten procedurally drawn glyph classes on a size x size single-channel
// canvas, `per_class` samples each, class-interleaved. The split is mixed
// into the seed, so train and test draw independent jitter.
Dataset synth_toy(std::uint64_t seed, std::size_t per_class, std::size_t size,
                  ToySplit split = ToySplit::Train, const ToyOptions& options = {});

// Seeded shuffled mini-batches. Each epoch is a fresh permutation of all
// indices; the last batch of an epoch may be short.
class BatchIterator {
 public:
  BatchIterator(std::size_t dataset_size, std::size_t batch_size, std::uint64_t seed);

  // Fills `indices` with the next batch. Returns false (and leaves `indices`
  // empty) once the current epoch is exhausted; the following call starts
  // the next epoch.
  bool next(std::vector<std::size_t>& indices);

  std::size_t epoch() const { return epoch_; }
  const std::vector<std::size_t>& permutation() const { return order_; }

 private:
  void reshuffle();

  std::size_t size_;
  std::size_t batch_;
  std::uint64_t seed_;
  std::size_t epoch_ = 0;
  std::size_t cursor_ = 0;
  std::vector<std::size_t> order_;
};

}  // namespace capsdefl
