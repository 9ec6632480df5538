#pragma once

#include <array>
#include <cstddef>
#include <string>

#include "capsdefl/keyvalue.hpp"

namespace capsdefl {

enum class ModelKind { CapsNet, BaselineCnn };

const char* model_kind_name(ModelKind kind);
ModelKind parse_model_kind(const std::string& text);

// Architecture and loss hyperparameters shared by the capsule model and the
// baseline CNN (which reuses the trunk).
struct ModelConfig {
  std::string preset = "toy";

  std::size_t channels = 1;
  std::size_t height = 20;
  std::size_t width = 20;

  std::size_t n_classes = 10;
  std::size_t n_capsules = 25;  // class capsules first, then background
  std::size_t atoms = 4;        // pose dimension of each output capsule
  std::size_t primary_caps = 16;

  // Six 3x3 convs; average pooling follows the 2nd and 4th.
  std::array<std::size_t, 6> trunk_channels{8, 16, 16, 16, 16, 16};
  // Optional 1x1 projection after the trunk; 0 disables it.
  std::size_t trunk_projection = 0;
  std::size_t routing_iters = 1;

  std::size_t decoder_hidden = 128;
  std::size_t decoder_channels = 16;  // channels of the reshaped dense output
  std::array<std::size_t, 2> deconv_channels{16, 8};
  std::size_t deconv_kernel = 4;
  std::size_t final_kernel = 3;

  std::size_t cnn_head_channels = 32;

  double lambda_recon = 0.005;
  double lambda_cyc = 0.2;
  double m_plus = 0.9;
  double m_minus = 0.1;
  double lambda_margin = 0.5;
  // Class-capsule lengths are multiplied by this to form cross-entropy logits.
  double logit_scale = 10.0;

  std::size_t trunk_side_h() const { return height / 4; }
  std::size_t trunk_side_w() const { return width / 4; }
  std::size_t trunk_out_channels() const {
    return trunk_projection ? trunk_projection : trunk_channels[5];
  }
  std::size_t primary_atoms() const {
    return trunk_out_channels() * trunk_side_h() * trunk_side_w() / primary_caps;
  }
  std::size_t decoder_input() const { return n_capsules * atoms; }
  std::size_t decoder_side_h() const { return height / 4; }
  std::size_t decoder_side_w() const { return width / 4; }
  std::size_t image_size() const { return channels * height * width; }

  // Throws ConfigError on any inconsistency.
  void validate() const;

  void write(KeyValueWriter& out) const;
  static ModelConfig read(const KeyValueConfig& in, const std::string& section = "model");

  static ModelConfig preset_named(const std::string& name);
  static ModelConfig toy();
  static ModelConfig svhn();
  static ModelConfig cifar();

  bool operator==(const ModelConfig&) const = default;
};

}  // namespace capsdefl
