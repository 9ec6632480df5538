#include "capsdefl/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <set>

#include "capsdefl/error.hpp"

namespace capsdefl {
namespace {

constexpr char kMagic[8] = {'C', 'A', 'P', 'S', 'D', 'F', 'L', '1'};

class Writer {
 public:
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes_.insert(bytes_.end(), s.begin(), s.end());
  }
  void raw(const char* p, std::size_t n) { bytes_.insert(bytes_.end(), p, p + n); }
  std::vector<std::uint8_t> take() { return std::move(bytes_); }

 private:
  std::vector<std::uint8_t> bytes_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}
  std::uint32_t u32() {
    need(4, "u32");
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_++]) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    need(8, "u64");
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(bytes_[pos_++]) << (8 * i);
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  std::string str() {
    const std::uint32_t n = u32();
    need(n, "string");
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  void expect(const char* p, std::size_t n) {
    need(n, "magic");
    if (std::memcmp(bytes_.data() + pos_, p, n) != 0) {
      throw FormatError("checkpoint: bad magic (expected CAPSDFL1)");
    }
    pos_ += n;
  }
  bool done() const { return pos_ == bytes_.size(); }
  std::size_t pos() const { return pos_; }

 private:
  void need(std::size_t n, const char* what) {
    if (bytes_.size() - pos_ < n) {
      throw FormatError("checkpoint: truncated " + std::string(what) + " at byte offset " +
                        std::to_string(pos_));
    }
  }
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

std::string config_text(const Checkpoint& ck) {
  KeyValueWriter w;
  w.section("checkpoint");
  w.put("kind", std::string(model_kind_name(ck.kind)));
  w.put("steps", static_cast<long long>(ck.steps));
  w.put("seed", static_cast<long long>(ck.seed));
  w.section("model");
  ck.config.write(w);
  return w.text();
}

ParameterStore<float> to_store(const std::vector<Checkpoint::Entry>& entries) {
  ParameterStore<float> store;
  for (const auto& e : entries) store.add(e.name, Tensor::from(e.shape, e.data));
  return store;
}

void check_layout(const ParameterStore<float>& expected, const std::vector<Checkpoint::Entry>& got) {
  if (expected.size() != got.size()) {
    throw FormatError("checkpoint: " + std::to_string(got.size()) + " tensors, model expects " +
                      std::to_string(expected.size()));
  }
  for (std::size_t i = 0; i < got.size(); ++i) {
    if (expected.names()[i] != got[i].name || expected.tensors()[i].shape() != got[i].shape) {
      throw FormatError("checkpoint: tensor `" + got[i].name + "` " + shape_str(got[i].shape) +
                        " does not match model tensor `" + expected.names()[i] + "` " +
                        shape_str(expected.tensors()[i].shape()));
    }
  }
}

}  // namespace

Checkpoint Checkpoint::from_model(const Classifier& model, std::uint64_t steps, std::uint64_t seed) {
  Checkpoint ck;
  ck.kind = model.kind();
  ck.config = model.config();
  ck.steps = steps;
  ck.seed = seed;
  const auto& p = model.parameters();
  for (std::size_t i = 0; i < p.size(); ++i) {
    const auto& t = p.tensors()[i];
    ck.entries.push_back({p.names()[i], t.shape(), std::vector<float>(t.data().begin(), t.data().end())});
  }
  return ck;
}

CapsNet Checkpoint::to_capsnet() const {
  if (kind != ModelKind::CapsNet) throw UsageError("checkpoint holds a baseline CNN, not a capsule network");
  check_layout(init_capsnet_parameters(config, 0), entries);
  return CapsNet(config, to_store(entries));
}

BaselineCnn Checkpoint::to_cnn() const {
  if (kind != ModelKind::BaselineCnn) throw UsageError("checkpoint holds a capsule network, not a baseline CNN");
  check_layout(init_cnn_parameters(config, 0), entries);
  return BaselineCnn(config, to_store(entries));
}

std::unique_ptr<Classifier> Checkpoint::to_model() const {
  if (kind == ModelKind::CapsNet) return std::make_unique<CapsNet>(to_capsnet());
  return std::make_unique<BaselineCnn>(to_cnn());
}

std::vector<std::uint8_t> Checkpoint::serialize() const {
  Writer w;
  w.raw(kMagic, sizeof(kMagic));
  w.u32(version);
  w.str(config_text(*this));
  w.u32(static_cast<std::uint32_t>(entries.size()));
  for (const auto& e : entries) {
    w.str(e.name);
    w.u32(static_cast<std::uint32_t>(e.shape.size()));
    for (auto d : e.shape) w.u64(d);
    for (float v : e.data) w.f32(v);
  }
  return w.take();
}

Checkpoint Checkpoint::deserialize(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  r.expect(kMagic, sizeof(kMagic));
  Checkpoint ck;
  ck.version = r.u32();
  if (ck.version != kVersion) {
    throw FormatError("checkpoint: unsupported format version " + std::to_string(ck.version));
  }
  const auto cfg = KeyValueConfig::parse(r.str(), "checkpoint config");
  ck.kind = parse_model_kind(cfg.require_string("checkpoint", "kind"));
  ck.steps = static_cast<std::uint64_t>(cfg.get_int("checkpoint", "steps", 0));
  ck.seed = static_cast<std::uint64_t>(cfg.get_int("checkpoint", "seed", 0));
  ck.config = ModelConfig::read(cfg, "model");
  cfg.check_all_consumed();

  const std::uint32_t count = r.u32();
  std::set<std::string> seen;
  for (std::uint32_t i = 0; i < count; ++i) {
    Entry e;
    e.name = r.str();
    if (!seen.insert(e.name).second) throw FormatError("checkpoint: duplicate tensor `" + e.name + "`");
    const std::uint32_t rank = r.u32();
    if (rank > 8) throw FormatError("checkpoint: implausible rank for `" + e.name + "`");
    for (std::uint32_t k = 0; k < rank; ++k) e.shape.push_back(static_cast<std::size_t>(r.u64()));
    const std::size_t n = numel(e.shape);
    if (n > (bytes.size() - r.pos()) / 4) {
      throw FormatError("checkpoint: tensor `" + e.name + "` payload truncated at byte offset " +
                        std::to_string(r.pos()));
    }
    e.data.resize(n);
    for (auto& v : e.data) v = r.f32();
    ck.entries.push_back(std::move(e));
  }
  if (!r.done()) throw FormatError("checkpoint: trailing bytes at offset " + std::to_string(r.pos()));
  return ck;
}

void Checkpoint::save(const std::string& path) const {
  const auto bytes = serialize();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw RuntimeFailure("cannot write checkpoint " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw RuntimeFailure("failed writing checkpoint " + path);
}

Checkpoint Checkpoint::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw UsageError("cannot open checkpoint " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize(bytes);
}

}  // namespace capsdefl
