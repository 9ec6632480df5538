#include "capsdefl/model_config.hpp"

#include "capsdefl/error.hpp"

namespace capsdefl {

const char* model_kind_name(ModelKind kind) {
  return kind == ModelKind::CapsNet ? "capsnet" : "cnn";
}

ModelKind parse_model_kind(const std::string& text) {
  if (text == "capsnet") return ModelKind::CapsNet;
  if (text == "cnn") return ModelKind::BaselineCnn;
  throw ConfigError("unknown model kind `" + text + "` (expected capsnet or cnn)");
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError("model config: " + msg); };
  if (channels == 0 || height == 0 || width == 0) fail("input shape must be positive");
  if (n_classes < 2) fail("need at least 2 classes");
  if (n_capsules <= n_classes) fail("capsule count must exceed class count (background capsules)");
  if (atoms < 1) fail("atoms must be >= 1");
  if (routing_iters < 1) fail("routing iteration count must be >= 1");
  if (primary_caps < 1) fail("primary capsule count must be >= 1");
  if (height % 4 || width % 4) fail("input height/width must be divisible by 4 (two 2x2 pools)");
  for (auto c : trunk_channels)
    if (c == 0) fail("trunk channel widths must be positive");
  const std::size_t features = trunk_out_channels() * trunk_side_h() * trunk_side_w();
  if (features % primary_caps) {
    fail("trunk output " + std::to_string(trunk_out_channels()) + "x" +
         std::to_string(trunk_side_h()) + "x" + std::to_string(trunk_side_w()) +
         " does not split into " + std::to_string(primary_caps) + " capsules");
  }
  if (deconv_kernel != 4) fail("deconv kernel must be 4 (stride 2, padding 1 doubles the side)");
  if (final_kernel % 2 == 0) fail("final decoder kernel must be odd");
  if (decoder_hidden == 0 || decoder_channels == 0 || deconv_channels[0] == 0 ||
      deconv_channels[1] == 0) {
    fail("decoder widths must be positive");
  }
  if (lambda_recon < 0 || lambda_cyc < 0 || lambda_margin < 0) fail("loss weights must be >= 0");
  if (!(m_plus > m_minus)) fail("margin m+ must exceed m-");
  if (!(logit_scale > 0)) fail("logit_scale must be positive");
}

void ModelConfig::write(KeyValueWriter& out) const {
  out.put("preset", preset);
  out.put("channels", channels);
  out.put("height", height);
  out.put("width", width);
  out.put("n_classes", n_classes);
  out.put("n_capsules", n_capsules);
  out.put("atoms", atoms);
  out.put("primary_caps", primary_caps);
  out.put("trunk_channels",
          std::vector<std::size_t>(trunk_channels.begin(), trunk_channels.end()));
  out.put("trunk_projection", trunk_projection);
  out.put("routing_iters", routing_iters);
  out.put("decoder_hidden", decoder_hidden);
  out.put("decoder_channels", decoder_channels);
  out.put("deconv_channels",
          std::vector<std::size_t>(deconv_channels.begin(), deconv_channels.end()));
  out.put("deconv_kernel", deconv_kernel);
  out.put("final_kernel", final_kernel);
  out.put("cnn_head_channels", cnn_head_channels);
  out.put("lambda_recon", lambda_recon);
  out.put("lambda_cyc", lambda_cyc);
  out.put("m_plus", m_plus);
  out.put("m_minus", m_minus);
  out.put("lambda_margin", lambda_margin);
  out.put("logit_scale", logit_scale);
}

ModelConfig ModelConfig::read(const KeyValueConfig& in, const std::string& section) {
  ModelConfig c = preset_named(in.get_string(section, "preset", "toy"));
  auto sz = [&](const char* key, std::size_t fallback) {
    const long long v = in.get_int(section, key, static_cast<long long>(fallback));
    if (v < 0) throw ConfigError(std::string("model config: `") + key + "` must be >= 0");
    return static_cast<std::size_t>(v);
  };
  c.channels = sz("channels", c.channels);
  c.height = sz("height", c.height);
  c.width = sz("width", c.width);
  c.n_classes = sz("n_classes", c.n_classes);
  c.n_capsules = sz("n_capsules", c.n_capsules);
  c.atoms = sz("atoms", c.atoms);
  c.primary_caps = sz("primary_caps", c.primary_caps);
  if (in.has(section, "trunk_channels")) {
    const auto v = in.get_ints(section, "trunk_channels", {});
    if (v.size() != 6) throw ConfigError("model config: trunk_channels needs 6 values");
    for (std::size_t i = 0; i < 6; ++i) c.trunk_channels[i] = static_cast<std::size_t>(v[i]);
  }
  c.trunk_projection = sz("trunk_projection", c.trunk_projection);
  c.routing_iters = sz("routing_iters", c.routing_iters);
  c.decoder_hidden = sz("decoder_hidden", c.decoder_hidden);
  c.decoder_channels = sz("decoder_channels", c.decoder_channels);
  if (in.has(section, "deconv_channels")) {
    const auto v = in.get_ints(section, "deconv_channels", {});
    if (v.size() != 2) throw ConfigError("model config: deconv_channels needs 2 values");
    c.deconv_channels = {static_cast<std::size_t>(v[0]), static_cast<std::size_t>(v[1])};
  }
  c.deconv_kernel = sz("deconv_kernel", c.deconv_kernel);
  c.final_kernel = sz("final_kernel", c.final_kernel);
  c.cnn_head_channels = sz("cnn_head_channels", c.cnn_head_channels);
  c.lambda_recon = in.get_double(section, "lambda_recon", c.lambda_recon);
  c.lambda_cyc = in.get_double(section, "lambda_cyc", c.lambda_cyc);
  c.m_plus = in.get_double(section, "m_plus", c.m_plus);
  c.m_minus = in.get_double(section, "m_minus", c.m_minus);
  c.lambda_margin = in.get_double(section, "lambda_margin", c.lambda_margin);
  c.logit_scale = in.get_double(section, "logit_scale", c.logit_scale);
  c.validate();
  return c;
}

ModelConfig ModelConfig::preset_named(const std::string& name) {
  if (name == "toy") return toy();
  if (name == "svhn") return svhn();
  if (name == "cifar") return cifar();
  throw ConfigError("unknown model preset `" + name + "` (expected toy, svhn or cifar)");
}

ModelConfig ModelConfig::toy() { return ModelConfig{}; }

ModelConfig ModelConfig::svhn() {
  ModelConfig c;
  c.preset = "svhn";
  c.channels = 3;
  c.height = c.width = 32;
  c.atoms = 4;
  c.trunk_channels = {256, 512, 128, 256, 64, 128};
  c.decoder_hidden = 1024;
  c.decoder_channels = 256;
  c.deconv_channels = {64, 32};
  c.cnn_head_channels = 128;
  c.lambda_recon = 0.0005;
  c.lambda_cyc = 0.0005;
  return c;
}

ModelConfig ModelConfig::cifar() {
  ModelConfig c = svhn();
  c.preset = "cifar";
  c.atoms = 8;
  c.trunk_channels = {512, 1024, 256, 512, 128, 256};
  // 256 x 8 x 8 trunk features do not split into 16 capsules of 512 atoms;
  // a 1x1 projection to 128 channels restores 16 x 512.
  c.trunk_projection = 128;
  c.cnn_head_channels = 256;
  return c;
}

}  // namespace capsdefl
