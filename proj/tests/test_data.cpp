#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "capsdefl/data.hpp"
#include "capsdefl/error.hpp"
#include "test_util.hpp"

using namespace capsdefl;
using testutil::TempDir;
using testutil::write_bytes;

namespace {

std::vector<std::uint8_t> be32(std::uint32_t v) {
  return {std::uint8_t(v >> 24), std::uint8_t(v >> 16), std::uint8_t(v >> 8), std::uint8_t(v)};
}

void append(std::vector<std::uint8_t>& out, const std::vector<std::uint8_t>& more) {
  out.insert(out.end(), more.begin(), more.end());
}

// Two CIFAR records whose pixel byte at position p is (p * 7 + r) mod 256.
std::vector<std::uint8_t> cifar_fixture() {
  std::vector<std::uint8_t> bytes;
  const std::uint8_t labels[] = {3, 9};
  for (int r = 0; r < 2; ++r) {
    bytes.push_back(labels[r]);
    for (int p = 0; p < 3072; ++p) bytes.push_back(std::uint8_t((p * 7 + r) % 256));
  }
  return bytes;
}

// Brute-force k-NN on raw pixels; majority vote, ties to the smaller label.
double knn_accuracy(const Dataset& train, const Dataset& test, std::size_t k) {
  std::size_t correct = 0;
  const std::size_t d = train.image_size();
  for (std::size_t i = 0; i < test.size(); ++i) {
    std::vector<std::pair<double, int>> dist;
    for (std::size_t j = 0; j < train.size(); ++j) {
      double s = 0;
      for (std::size_t p = 0; p < d; ++p) {
        const double diff = double(test.images[i * d + p]) - train.images[j * d + p];
        s += diff * diff;
      }
      dist.emplace_back(s, train.labels[j]);
    }
    std::partial_sort(dist.begin(), dist.begin() + long(k), dist.end());
    int votes[10] = {};
    for (std::size_t m = 0; m < k; ++m) ++votes[dist[m].second];
    const int guess = int(std::max_element(votes, votes + 10) - votes);
    correct += guess == test.labels[i];
  }
  return double(correct) / double(test.size());
}

}  // namespace

TEST_CASE("cifar binary: two-record fixture decodes exactly") {
  TempDir dir("cifar");
  write_bytes(dir.file("b.bin"), cifar_fixture());
  const auto ds = load_cifar10_binary(dir.file("b.bin"));
  REQUIRE(ds.size() == 2);
  CHECK(ds.channels == 3);
  CHECK(ds.height == 32);
  CHECK(ds.width == 32);
  CHECK(ds.labels == std::vector<int>{3, 9});
  for (int r = 0; r < 2; ++r)
    for (int p = 0; p < 3072; ++p) CHECK(ds.images[std::size_t(r * 3072 + p)] == float((p * 7 + r) % 256) / 255.0f);
  // Channel-major: byte 1024 is the first green pixel.
  CHECK(ds.image(0)[1024] == float(1024 * 7 % 256) / 255.0f);
}

TEST_CASE("cifar binary: byte 255 maps to 1") {
  TempDir dir("cifar255");
  std::vector<std::uint8_t> rec(3073, 255);
  rec[0] = 0;
  write_bytes(dir.file("b.bin"), rec);
  const auto ds = load_cifar10_binary(dir.file("b.bin"));
  CHECK(std::all_of(ds.images.begin(), ds.images.end(), [](float v) { return v == 1.0f; }));
}

TEST_CASE("cifar binary: malformed files are format errors") {
  TempDir dir("cifarbad");
  write_bytes(dir.file("empty.bin"), {});
  CHECK_THROWS_AS(load_cifar10_binary(dir.file("empty.bin")), FormatError);

  auto truncated = cifar_fixture();
  truncated.resize(3073 + 100);
  write_bytes(dir.file("trunc.bin"), truncated);
  CHECK_THROWS_WITH_AS(load_cifar10_binary(dir.file("trunc.bin")), doctest::Contains("3073"), FormatError);

  auto bad_label = cifar_fixture();
  bad_label[3073] = 10;
  write_bytes(dir.file("label.bin"), bad_label);
  CHECK_THROWS_WITH_AS(load_cifar10_binary(dir.file("label.bin")), doctest::Contains("offset 3073"), FormatError);
}

TEST_CASE("idx: one-image fixture decodes, replicates channels and round-trips") {
  TempDir dir("idx");
  std::vector<std::uint8_t> img;
  append(img, be32(0x803));
  append(img, be32(1));
  append(img, be32(2));
  append(img, be32(3));
  append(img, {0, 51, 102, 153, 204, 255});
  std::vector<std::uint8_t> lab;
  append(lab, be32(0x801));
  append(lab, be32(1));
  lab.push_back(7);
  write_bytes(dir.file("i.idx"), img);
  write_bytes(dir.file("l.idx"), lab);

  const auto gray = load_idx(dir.file("i.idx"), dir.file("l.idx"));
  CHECK(gray.channels == 1);
  CHECK(gray.height == 2);
  CHECK(gray.width == 3);
  CHECK(gray.labels == std::vector<int>{7});
  CHECK(gray.images == std::vector<float>{0.0f, 0.2f, 0.4f, 0.6f, 0.8f, 1.0f});

  const auto rgb = load_idx(dir.file("i.idx"), dir.file("l.idx"), 3);
  REQUIRE(rgb.images.size() == 18);
  for (int c = 0; c < 3; ++c)
    for (int p = 0; p < 6; ++p) CHECK(rgb.images[std::size_t(c * 6 + p)] == gray.images[std::size_t(p)]);

  save_idx(gray, dir.file("o.idx"), dir.file("ol.idx"));
  CHECK(testutil::read_bytes(dir.file("o.idx")) == img);
  CHECK(testutil::read_bytes(dir.file("ol.idx")) == lab);
}

TEST_CASE("idx: all-zero image gives an all-zero tensor") {
  TempDir dir("idx0");
  std::vector<std::uint8_t> img;
  append(img, be32(0x803));
  append(img, be32(1));
  append(img, be32(4));
  append(img, be32(4));
  img.resize(img.size() + 16, 0);
  std::vector<std::uint8_t> lab;
  append(lab, be32(0x801));
  append(lab, be32(1));
  lab.push_back(0);
  write_bytes(dir.file("i"), img);
  write_bytes(dir.file("l"), lab);
  const auto ds = load_idx(dir.file("i"), dir.file("l"));
  CHECK(std::all_of(ds.images.begin(), ds.images.end(), [](float v) { return v == 0.0f; }));
}

TEST_CASE("idx: wrong magic and count mismatch are format errors") {
  TempDir dir("idxbad");
  std::vector<std::uint8_t> img;
  append(img, be32(0x803));
  append(img, be32(2));
  append(img, be32(1));
  append(img, be32(1));
  append(img, {10, 20});
  std::vector<std::uint8_t> lab;
  append(lab, be32(0x801));
  append(lab, be32(1));
  lab.push_back(1);
  write_bytes(dir.file("i"), img);
  write_bytes(dir.file("l"), lab);
  CHECK_THROWS_AS(load_idx(dir.file("i"), dir.file("l")), FormatError);
  CHECK_THROWS_AS(load_idx(dir.file("l"), dir.file("l")), FormatError);
  CHECK_THROWS_AS(load_idx(dir.file("i"), dir.file("i")), FormatError);
}

TEST_CASE("synth_toy is deterministic, balanced and in range") {
  const auto a = synth_toy(11, 7, 20);
  const auto b = synth_toy(11, 7, 20);
  CHECK(a.images == b.images);
  CHECK(a.labels == b.labels);
  CHECK(a.size() == 70);
  for (int c = 0; c < 10; ++c) CHECK(std::count(a.labels.begin(), a.labels.end(), c) == 7);
  CHECK(std::all_of(a.images.begin(), a.images.end(), [](float v) { return v >= 0.0f && v <= 1.0f; }));
  CHECK_NOTHROW(a.validate());
  const auto test = synth_toy(11, 7, 20, ToySplit::Test);
  CHECK(test.images != a.images);
  CHECK(synth_toy(12, 7, 20).images != a.images);
  CHECK_THROWS_AS(synth_toy(1, 1, 11), ConfigError);
}

TEST_CASE("synth_toy classes are separable by a 5-nearest-neighbour pixel classifier") {
  const auto train = synth_toy(5, 100, 20);
  const auto test = synth_toy(5, 20, 20, ToySplit::Test);
  CHECK(knn_accuracy(train, test, 5) >= 0.8);
}

TEST_CASE("batch iterator: every epoch is a permutation of all indices") {
  BatchIterator it(23, 5, 9);
  std::vector<std::size_t> batch;
  std::vector<std::vector<std::size_t>> epochs;
  for (int e = 0; e < 3; ++e) {
    std::vector<std::size_t> seen;
    std::vector<std::size_t> sizes;
    while (it.next(batch)) {
      sizes.push_back(batch.size());
      seen.insert(seen.end(), batch.begin(), batch.end());
    }
    CHECK(batch.empty());
    CHECK(sizes == std::vector<std::size_t>{5, 5, 5, 5, 3});
    epochs.push_back(seen);
    std::sort(seen.begin(), seen.end());
    std::vector<std::size_t> all(23);
    std::iota(all.begin(), all.end(), 0);
    CHECK(seen == all);
  }
  CHECK(epochs[0] != epochs[1]);
  BatchIterator again(23, 5, 9);
  std::vector<std::size_t> first;
  while (again.next(batch)) first.insert(first.end(), batch.begin(), batch.end());
  CHECK(first == epochs[0]);
  CHECK_THROWS_AS(BatchIterator(0, 4, 1), UsageError);
  CHECK_THROWS_AS(BatchIterator(4, 0, 1), ConfigError);
}

TEST_CASE("dataset validation rejects bad labels and pixels") {
  Dataset d;
  d.channels = 1;
  d.height = 1;
  d.width = 2;
  d.images = {0.5f, 0.25f};
  d.labels = {3};
  CHECK_NOTHROW(d.validate());
  d.labels = {10};
  CHECK_THROWS_AS(d.validate(), FormatError);
  d.labels = {1};
  d.images[0] = 1.5f;
  CHECK_THROWS_AS(d.validate(), FormatError);
  d.images[0] = std::nanf("");
  CHECK_THROWS_AS(d.validate(), FormatError);
  d.labels.clear();
  d.images.clear();
  CHECK_THROWS_AS(d.validate(), FormatError);
}

TEST_CASE("raw f32 files round-trip and reject the wrong size") {
  TempDir dir("raw");
  const std::vector<float> v = {0.0f, 0.5f, 1.0f, 0.125f};
  save_raw_f32(dir.file("x.f32"), v);
  CHECK(testutil::read_bytes(dir.file("x.f32")).size() == 16);
  CHECK(load_raw_f32(dir.file("x.f32"), 4) == v);
  CHECK_THROWS_AS(load_raw_f32(dir.file("x.f32"), 5), FormatError);
}
