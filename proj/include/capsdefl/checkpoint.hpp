#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "capsdefl/capsnet.hpp"
#include "capsdefl/cnn.hpp"

namespace capsdefl {

// On-disk layout (all integers little-endian):
//   "CAPSDFL1" | u32 version | u32 len + UTF-8 config text | u32 entry count |
//   per entry: u32 len + name | u32 rank | u64 dims[rank] | f32 payload.
// The config text carries the model kind, ModelConfig and training metadata.
struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;

  struct Entry {
    std::string name;
    Shape shape;
    std::vector<float> data;
    bool operator==(const Entry&) const = default;
  };

  std::uint32_t version = kVersion;
  ModelKind kind = ModelKind::CapsNet;
  ModelConfig config;
  std::vector<Entry> entries;
  std::uint64_t steps = 0;
  std::uint64_t seed = 0;

  static Checkpoint from_model(const Classifier& model, std::uint64_t steps, std::uint64_t seed);
  CapsNet to_capsnet() const;
  BaselineCnn to_cnn() const;
  std::unique_ptr<Classifier> to_model() const;

  std::vector<std::uint8_t> serialize() const;
  static Checkpoint deserialize(std::span<const std::uint8_t> bytes);
  void save(const std::string& path) const;
  static Checkpoint load(const std::string& path);

  bool operator==(const Checkpoint&) const = default;
};

}  // namespace capsdefl
