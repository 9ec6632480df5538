#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <numeric>

#include "capsdefl/error.hpp"
#include "capsdefl/eval.hpp"

namespace capsdefl {
namespace {

constexpr std::size_t kChunk = 128;

}  // namespace

double accuracy(const Classifier& model, const Dataset& data) {
  if (data.size() == 0) throw UsageError("accuracy of an empty dataset");
  std::size_t correct = 0;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < data.size(); start += kChunk) {
    idx.resize(std::min(kChunk, data.size() - start));
    std::iota(idx.begin(), idx.end(), start);
    const auto pred = model.predict(data.batch(idx));
    for (std::size_t i = 0; i < idx.size(); ++i) correct += pred[i] == data.labels[idx[i]];
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

double success_rate(std::span<const AttackResult> results) {
  if (results.empty()) return 0.0;
  const auto hits = std::count_if(results.begin(), results.end(), [](const AttackResult& r) { return r.success; });
  return static_cast<double>(hits) / static_cast<double>(results.size());
}

double undetected_rate(std::span<const bool> success, std::span<const bool> detected) {
  if (success.size() != detected.size())
    throw UsageError("undetected_rate: " + std::to_string(success.size()) + " results but " +
                     std::to_string(detected.size()) + " detector flags");
  if (success.empty()) return 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < success.size(); ++i) n += success[i] && !detected[i];
  return static_cast<double>(n) / static_cast<double>(success.size());
}

double undetected_rate(std::span<const AttackResult> results, std::span<const DetectionVerdict> verdicts) {
  if (results.size() != verdicts.size())
    throw UsageError("undetected_rate: " + std::to_string(results.size()) + " results but " +
                     std::to_string(verdicts.size()) + " verdicts");
  if (results.empty()) return 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < results.size(); ++i) n += results[i].success && !verdicts[i].combined;
  return static_cast<double>(n) / static_cast<double>(results.size());
}

Judge judge_of(const Classifier& model) {
  return [&model](const Tensor& x) { return model.predict(x); };
}

KnnJudge::KnnJudge(Dataset reference, std::size_t k) : ref_(std::move(reference)), k_(k) {
  if (ref_.size() == 0) throw UsageError("k-NN judge needs a non-empty reference set");
  if (k_ == 0 || k_ > ref_.size()) throw UsageError("k-NN judge: k must be in [1, reference size]");
}

std::vector<int> KnnJudge::operator()(const Tensor& x) const {
  const std::size_t img = ref_.image_size();
  if (x.rank() != 4 || x.numel() != x.dim(0) * img)
    throw UsageError("k-NN judge: input shape does not match the reference images");
  const auto data = x.data();
  std::vector<int> out;
  std::vector<std::pair<double, std::size_t>> dist(ref_.size());
  for (std::size_t b = 0; b < x.dim(0); ++b) {
    const float* q = data.data() + b * img;
    for (std::size_t r = 0; r < ref_.size(); ++r) {
      const float* p = ref_.images.data() + r * img;
      double acc = 0;
      for (std::size_t i = 0; i < img; ++i) {
        const double d = static_cast<double>(q[i]) - static_cast<double>(p[i]);
        acc += d * d;
      }
      dist[r] = {acc, r};
    }
    std::partial_sort(dist.begin(), dist.begin() + static_cast<std::ptrdiff_t>(k_), dist.end());
    std::vector<std::size_t> votes(ref_.n_classes, 0);
    for (std::size_t j = 0; j < k_; ++j) ++votes[static_cast<std::size_t>(ref_.labels[dist[j].second])];
    const std::size_t best = *std::max_element(votes.begin(), votes.end());
    int label = ref_.labels[dist[0].second];
    for (std::size_t j = 0; j < k_; ++j) {
      const int l = ref_.labels[dist[j].second];
      if (votes[static_cast<std::size_t>(l)] == best) {
        label = l;
        break;
      }
    }
    out.push_back(label);
  }
  return out;
}

std::optional<double> deflection_proxy(std::span<const AttackResult> results, const Judge& judge,
                                       const ModelConfig& geometry) {
  const std::size_t img = geometry.image_size();
  std::vector<float> stacked;
  std::vector<int> targets;
  for (const auto& r : results) {
    if (!r.success || (r.verdict && r.verdict->combined)) continue;
    if (r.adversarial.size() != img) throw UsageError("deflection_proxy: image size does not match the geometry");
    stacked.insert(stacked.end(), r.adversarial.begin(), r.adversarial.end());
    targets.push_back(r.target);
  }
  if (targets.empty()) return std::nullopt;
  const std::size_t n = targets.size();
  const auto labels =
      judge(Tensor::from({n, geometry.channels, geometry.height, geometry.width}, std::move(stacked)));
  if (labels.size() != n) throw UsageError("deflection_proxy: judge returned the wrong number of labels");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < n; ++i) hits += labels[i] == targets[i];
  return static_cast<double>(hits) / static_cast<double>(n);
}

std::vector<std::uint8_t> ppm_bytes(std::span<const float> chw, std::size_t channels, std::size_t height,
                                    std::size_t width) {
  if (channels != 1 && channels != 3) throw UsageError("PPM export supports 1 or 3 channels");
  if (chw.size() != channels * height * width || height == 0 || width == 0)
    throw UsageError("PPM export: pixel count does not match the shape");
  for (float v : chw)
    if (!(v >= 0.0f && v <= 1.0f)) throw UsageError("PPM export: pixel outside [0, 1]");
  char header[64];
  const int n = std::snprintf(header, sizeof(header), "%s\n%zu %zu\n255\n", channels == 1 ? "P5" : "P6", width,
                              height);
  std::vector<std::uint8_t> out(header, header + n);
  const std::size_t plane = height * width;
  for (std::size_t p = 0; p < plane; ++p)
    for (std::size_t c = 0; c < channels; ++c)
      out.push_back(static_cast<std::uint8_t>(std::floor(static_cast<double>(chw[c * plane + p]) * 255.0 + 0.5)));
  return out;
}

void export_ppm(std::span<const float> chw, std::size_t channels, std::size_t height, std::size_t width,
                const std::string& path) {
  const auto bytes = ppm_bytes(chw, channels, height, width);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw RuntimeFailure("cannot write " + path);
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw RuntimeFailure("failed writing " + path);
}

std::vector<float> PpmImage::to_chw() const {
  const std::size_t plane = height * width;
  std::vector<float> out(channels * plane);
  for (std::size_t p = 0; p < plane; ++p)
    for (std::size_t c = 0; c < channels; ++c)
      out[c * plane + p] = static_cast<float>(pixels[p * channels + c]) / 255.0f;
  return out;
}

PpmImage read_ppm(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw UsageError("cannot open " + path);
  const std::vector<char> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  std::size_t pos = 0;
  auto token = [&]() {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
        ++pos;
      } else {
        break;
      }
    }
    std::string t;
    while (pos < bytes.size() && !std::isspace(static_cast<unsigned char>(bytes[pos]))) t += bytes[pos++];
    if (t.empty()) throw FormatError(path + ": truncated header at byte " + std::to_string(pos));
    return t;
  };
  auto number = [&]() {
    const std::string t = token();
    if (t.find_first_not_of("0123456789") != std::string::npos)
      throw FormatError(path + ": bad header field `" + t + "` at byte " + std::to_string(pos));
    return static_cast<std::size_t>(std::stoull(t));
  };
  PpmImage img;
  const std::string magic = token();
  if (magic == "P5") img.channels = 1;
  else if (magic == "P6") img.channels = 3;
  else throw FormatError(path + ": not a binary PGM/PPM (magic `" + magic + "`)");
  img.width = number();
  img.height = number();
  if (number() != 255) throw FormatError(path + ": only maxval 255 is supported");
  ++pos;  // single whitespace byte before the raster
  const std::size_t need = img.channels * img.width * img.height;
  if (bytes.size() < pos + need) throw FormatError(path + ": raster truncated at byte " + std::to_string(bytes.size()));
  if (bytes.size() > pos + need) throw FormatError(path + ": trailing bytes after raster");
  img.pixels.assign(bytes.begin() + static_cast<std::ptrdiff_t>(pos), bytes.end());
  return img;
}

}  // namespace capsdefl
