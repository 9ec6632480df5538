#include "capsdefl/data.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numeric>
#include <random>

#include "capsdefl/error.hpp"

namespace capsdefl {
namespace {

std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw UsageError("cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::uint32_t be32(const std::vector<std::uint8_t>& b, std::size_t off) {
  return (std::uint32_t{b[off]} << 24) | (std::uint32_t{b[off + 1]} << 16) |
         (std::uint32_t{b[off + 2]} << 8) | std::uint32_t{b[off + 3]};
}

}  // namespace

std::span<const float> Dataset::image(std::size_t i) const {
  if (i >= size()) throw UsageError("dataset index " + std::to_string(i) + " out of range");
  return std::span<const float>(images).subspan(i * image_size(), image_size());
}

Tensor Dataset::batch(std::span<const std::size_t> indices) const {
  std::vector<float> out;
  out.reserve(indices.size() * image_size());
  for (auto i : indices) {
    auto img = image(i);
    out.insert(out.end(), img.begin(), img.end());
  }
  return Tensor::from({indices.size(), channels, height, width}, std::move(out));
}

std::vector<int> Dataset::batch_labels(std::span<const std::size_t> indices) const {
  std::vector<int> out;
  out.reserve(indices.size());
  for (auto i : indices) out.push_back(labels.at(i));
  return out;
}

Dataset Dataset::subset(std::span<const std::size_t> indices) const {
  Dataset out = *this;
  const Tensor t = batch(indices);
  out.images.assign(t.data().begin(), t.data().end());
  out.labels = batch_labels(indices);
  return out;
}

void Dataset::validate() const {
  if (labels.empty()) throw FormatError("dataset `" + split + "` is empty");
  if (images.size() != labels.size() * image_size()) {
    throw FormatError("dataset `" + split + "`: pixel count does not match " +
                      std::to_string(labels.size()) + " images");
  }
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= n_classes)
      throw FormatError("dataset `" + split + "`: label " + std::to_string(labels[i]) +
                        " of sample " + std::to_string(i) + " out of range");
  }
  for (float v : images) {
    if (!(v >= 0.0f && v <= 1.0f)) throw FormatError("dataset `" + split + "`: pixel outside [0, 1]");
  }
}

Dataset load_cifar10_binary(const std::string& path) {
  constexpr std::size_t kRecord = 3073, kPixels = 3072;
  const auto bytes = read_file(path);
  if (bytes.empty()) throw FormatError(path + ": empty CIFAR-10 file");
  if (bytes.size() % kRecord != 0) {
    throw FormatError(path + ": truncated record at byte offset " +
                      std::to_string(bytes.size() / kRecord * kRecord) + " (file size " +
                      std::to_string(bytes.size()) + " is not a multiple of 3073)");
  }
  Dataset ds;
  ds.split = path;
  ds.channels = 3;
  ds.height = ds.width = 32;
  const std::size_t n = bytes.size() / kRecord;
  ds.images.resize(n * kPixels);
  ds.labels.resize(n);
  for (std::size_t r = 0; r < n; ++r) {
    const std::size_t off = r * kRecord;
    if (bytes[off] > 9) {
      throw FormatError(path + ": label byte " + std::to_string(bytes[off]) + " at byte offset " +
                        std::to_string(off));
    }
    ds.labels[r] = bytes[off];
    for (std::size_t p = 0; p < kPixels; ++p)
      ds.images[r * kPixels + p] = static_cast<float>(bytes[off + 1 + p]) / 255.0f;
  }
  return ds;
}

Dataset load_idx(const std::string& images_path, const std::string& labels_path,
                 std::size_t channels) {
  if (channels == 0) throw ConfigError("idx: channel count must be positive");
  const auto img = read_file(images_path);
  const auto lab = read_file(labels_path);
  if (img.size() < 16 || be32(img, 0) != 0x00000803u)
    throw FormatError(images_path + ": not an IDX image file (magic 0x00000803 expected)");
  if (lab.size() < 8 || be32(lab, 0) != 0x00000801u)
    throw FormatError(labels_path + ": not an IDX label file (magic 0x00000801 expected)");

  const std::size_t n = be32(img, 4), h = be32(img, 8), w = be32(img, 12);
  const std::size_t nl = be32(lab, 4);
  if (n != nl) {
    throw FormatError("idx: " + std::to_string(n) + " images but " + std::to_string(nl) + " labels");
  }
  if (n == 0) throw FormatError(images_path + ": no images");
  if (img.size() != 16 + n * h * w)
    throw FormatError(images_path + ": payload size does not match header dimensions");
  if (lab.size() != 8 + n) throw FormatError(labels_path + ": payload size does not match header count");

  Dataset ds;
  ds.split = images_path;
  ds.channels = channels;
  ds.height = h;
  ds.width = w;
  ds.images.resize(n * channels * h * w);
  ds.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (lab[8 + i] > 9) {
      throw FormatError(labels_path + ": label byte " + std::to_string(lab[8 + i]) +
                        " at byte offset " + std::to_string(8 + i));
    }
    ds.labels[i] = lab[8 + i];
    for (std::size_t c = 0; c < channels; ++c)
      for (std::size_t p = 0; p < h * w; ++p)
        ds.images[(i * channels + c) * h * w + p] = static_cast<float>(img[16 + i * h * w + p]) / 255.0f;
  }
  return ds;
}

void save_idx(const Dataset& data, const std::string& images_path, const std::string& labels_path) {
  data.validate();
  const std::size_t n = data.size(), plane = data.height * data.width;
  auto header = [](std::vector<char>& out, std::initializer_list<std::uint32_t> words) {
    for (std::uint32_t w : words)
      for (int k = 3; k >= 0; --k) out.push_back(static_cast<char>((w >> (8 * k)) & 0xff));
  };
  std::vector<char> img, lab;
  header(img, {0x803u, static_cast<std::uint32_t>(n), static_cast<std::uint32_t>(data.height),
               static_cast<std::uint32_t>(data.width)});
  header(lab, {0x801u, static_cast<std::uint32_t>(n)});
  for (std::size_t i = 0; i < n; ++i) {
    const float* first = data.images.data() + i * data.image_size();
    for (std::size_t p = 0; p < plane; ++p)
      img.push_back(static_cast<char>(static_cast<std::uint8_t>(std::floor(first[p] * 255.0 + 0.5))));
    lab.push_back(static_cast<char>(data.labels[i]));
  }
  for (const auto& [path, bytes] : {std::pair{&images_path, &img}, std::pair{&labels_path, &lab}}) {
    std::ofstream f(*path, std::ios::binary | std::ios::trunc);
    if (!f) throw RuntimeFailure("cannot write " + *path);
    f.write(bytes->data(), static_cast<std::streamsize>(bytes->size()));
    if (!f) throw RuntimeFailure("failed writing " + *path);
  }
}

std::vector<float> load_raw_f32(const std::string& path, std::size_t count) {
  const auto bytes = read_file(path);
  if (bytes.size() != count * 4) {
    throw FormatError(path + ": expected " + std::to_string(count * 4) + " bytes, found " +
                      std::to_string(bytes.size()));
  }
  std::vector<float> out(count);
  for (std::size_t i = 0; i < count; ++i) {
    std::uint32_t u = 0;
    for (int k = 0; k < 4; ++k) u |= std::uint32_t{bytes[i * 4 + k]} << (8 * k);
    out[i] = std::bit_cast<float>(u);
  }
  return out;
}

void save_raw_f32(const std::string& path, std::span<const float> values) {
  std::vector<char> bytes(values.size() * 4);
  for (std::size_t i = 0; i < values.size(); ++i) {
    const auto u = std::bit_cast<std::uint32_t>(values[i]);
    for (int k = 0; k < 4; ++k) bytes[i * 4 + k] = static_cast<char>((u >> (8 * k)) & 0xff);
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw RuntimeFailure("cannot write " + path);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw RuntimeFailure("failed writing " + path);
}

// --- synthetic glyphs -----------------------------------------------------

namespace {

struct Segment {
  double x0, y0, x1, y1;
};

// Strokes in unit coordinates, y pointing down.
std::vector<Segment> glyph_segments(int cls) {
  switch (cls) {
    case 0: return {{0.1, 0.5, 0.9, 0.5}};                                  // horizontal bar
    case 1: return {{0.5, 0.1, 0.5, 0.9}};                                  // vertical bar
    case 2: return {{0.1, 0.5, 0.9, 0.5}, {0.5, 0.1, 0.5, 0.9}};            // plus
    case 3: return {{0.15, 0.15, 0.85, 0.85}, {0.85, 0.15, 0.15, 0.85}};    // cross
    case 4:
      return {{0.15, 0.15, 0.85, 0.15}, {0.85, 0.15, 0.85, 0.85},
              {0.85, 0.85, 0.15, 0.85}, {0.15, 0.85, 0.15, 0.15}};          // box
    case 5: return {};                                                      // ring, drawn separately
    case 6: return {{0.2, 0.1, 0.2, 0.85}, {0.2, 0.85, 0.85, 0.85}};        // L
    case 7: return {{0.1, 0.15, 0.9, 0.15}, {0.5, 0.15, 0.5, 0.9}};         // T
    case 8:
      return {{0.5, 0.1, 0.9, 0.85}, {0.9, 0.85, 0.1, 0.85}, {0.1, 0.85, 0.5, 0.1}};  // triangle
    case 9: return {{0.1, 0.3, 0.9, 0.3}, {0.1, 0.7, 0.9, 0.7}};            // equals
    default: throw UsageError("glyph class out of range");
  }
}

double segment_distance(double px, double py, const Segment& s) {
  const double dx = s.x1 - s.x0, dy = s.y1 - s.y0;
  const double len2 = dx * dx + dy * dy;
  double t = len2 > 0 ? ((px - s.x0) * dx + (py - s.y0) * dy) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  const double ex = s.x0 + t * dx - px, ey = s.y0 + t * dy - py;
  return std::sqrt(ex * ex + ey * ey);
}

}  // namespace

Dataset synth_toy(std::uint64_t seed, std::size_t per_class, std::size_t size, ToySplit split,
                  const ToyOptions& options) {
  if (size < 12) throw ConfigError("synth_toy: size must be at least 12");
  if (per_class == 0) throw ConfigError("synth_toy: per-class count must be positive");
  constexpr std::size_t kClasses = 10;
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    split == ToySplit::Train ? 0x7261696eu : 0x74657374u};
  std::mt19937_64 rng(seq);
  std::uniform_int_distribution<int> shift(-options.max_shift, options.max_shift);
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);

  Dataset ds;
  ds.split = split == ToySplit::Train ? "toy-train" : "toy-test";
  ds.n_classes = kClasses;
  ds.channels = 1;
  ds.height = ds.width = size;
  ds.images.assign(per_class * kClasses * size * size, 0.0f);
  ds.labels.resize(per_class * kClasses);

  // The glyph box leaves room for the largest shift on every side.
  const double box = static_cast<double>(size) - 2.0 * options.max_shift - 2.0;
  const double base_half_width = std::max(0.75, 0.06 * static_cast<double>(size));
  for (std::size_t i = 0; i < per_class * kClasses; ++i) {
    const int cls = static_cast<int>(i % kClasses);
    ds.labels[i] = cls;
    const double ox = 1.0 + options.max_shift + shift(rng);
    const double oy = 1.0 + options.max_shift + shift(rng);
    const double intensity = options.ink * (1.0 + options.brightness_jitter * unit(rng));
    const double half_width = base_half_width * (1.0 + options.thickness_jitter * unit(rng));
    const auto segs = glyph_segments(cls);
    std::vector<Segment> distractors;
    const double span = static_cast<double>(size);
    for (std::size_t d = 0; d < options.clutter; ++d) {
      const double x0 = (unit(rng) * 0.5 + 0.5) * span, y0 = (unit(rng) * 0.5 + 0.5) * span;
      const double angle = unit(rng) * 3.14159265358979;
      const double len = (0.2 + 0.15 * (unit(rng) + 1.0)) * box;
      distractors.push_back({x0, y0, x0 + len * std::cos(angle), y0 + len * std::sin(angle)});
    }
    float* img = ds.images.data() + i * size * size;
    for (std::size_t y = 0; y < size; ++y) {
      for (std::size_t x = 0; x < size; ++x) {
        const double px = static_cast<double>(x) + 0.5, py = static_cast<double>(y) + 0.5;
        double d = 1e9;
        for (const auto& s : segs) {
          Segment p{ox + s.x0 * box, oy + s.y0 * box, ox + s.x1 * box, oy + s.y1 * box};
          d = std::min(d, segment_distance(px, py, p));
        }
        if (cls == 5) {
          const double cx = ox + 0.5 * box, cy = oy + 0.5 * box;
          d = std::abs(std::hypot(px - cx, py - cy) - 0.36 * box);
        }
        // One-pixel linear falloff outside the stroke core.
        double cover = std::clamp(half_width + 0.5 - d, 0.0, 1.0);
        for (const auto& s : distractors)
          cover = std::max(cover, options.clutter_ink *
                                      std::clamp(half_width + 0.5 - segment_distance(px, py, s), 0.0, 1.0));
        double v = options.background + (intensity - options.background) * cover;
        if (options.noise > 0) v += options.noise * gauss(rng);
        img[y * size + x] = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }
  }
  return ds;
}

// --- batching -------------------------------------------------------------

BatchIterator::BatchIterator(std::size_t dataset_size, std::size_t batch_size, std::uint64_t seed)
    : size_(dataset_size), batch_(batch_size), seed_(seed) {
  if (dataset_size == 0) throw UsageError("batch iterator over an empty dataset");
  if (batch_size == 0) throw ConfigError("batch size must be positive");
  reshuffle();
}

void BatchIterator::reshuffle() {
  order_.resize(size_);
  std::iota(order_.begin(), order_.end(), std::size_t{0});
  std::mt19937_64 rng(seed_ ^ (0x9e3779b97f4a7c15ull * (epoch_ + 1)));
  // Fisher-Yates with an explicit modulo draw so the order does not depend
  // on the standard library's distribution implementation.
  for (std::size_t i = size_; i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng() % i);
    std::swap(order_[i - 1], order_[j]);
  }
  cursor_ = 0;
}

bool BatchIterator::next(std::vector<std::size_t>& indices) {
  indices.clear();
  if (cursor_ >= size_) {
    ++epoch_;
    reshuffle();
    return false;
  }
  const std::size_t end = std::min(size_, cursor_ + batch_);
  indices.assign(order_.begin() + static_cast<std::ptrdiff_t>(cursor_),
                 order_.begin() + static_cast<std::ptrdiff_t>(end));
  cursor_ = end;
  return true;
}

}  // namespace capsdefl
