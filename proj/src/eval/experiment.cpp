#include <algorithm>
#include <cctype>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <random>
#include <tuple>

#include "capsdefl/error.hpp"
#include "capsdefl/eval.hpp"
#include "capsdefl/train.hpp"

namespace capsdefl {
namespace {

namespace fs = std::filesystem;

// Re-throws with the stage name prefixed, keeping the error category.
template <typename F>
auto stage(const std::string& name, F&& fn) -> decltype(fn()) {
  const std::string tag = "stage `" + name + "`: ";
  try {
    return fn();
  } catch (const ConfigError& e) {
    throw ConfigError(tag + e.what());
  } catch (const UsageError& e) {
    throw UsageError(tag + e.what());
  } catch (const FormatError& e) {
    throw FormatError(tag + e.what());
  } catch (const RuntimeFailure& e) {
    throw RuntimeFailure(tag + e.what());
  } catch (const std::exception& e) {
    throw RuntimeFailure(tag + e.what());
  }
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.6g", v);
  return buf;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw RuntimeFailure("cannot write " + path.string());
  f << text;
  if (!f) throw RuntimeFailure("failed writing " + path.string());
}

std::size_t count(const KeyValueConfig& in, const std::string& s, const char* key, std::size_t fallback) {
  const long long v = in.get_int(s, key, static_cast<long long>(fallback));
  if (v < 0) throw ConfigError(s + "." + key + " must be non-negative");
  return static_cast<std::size_t>(v);
}

std::uint64_t seed_of(const KeyValueConfig& in, const std::string& s, const char* key, std::uint64_t fallback) {
  return static_cast<std::uint64_t>(in.get_int(s, key, static_cast<long long>(fallback)));
}

std::string join_families(const std::vector<AttackFamily>& fams) {
  std::string out;
  for (auto f : fams) {
    if (!out.empty()) out += ',';
    out += attack_family_name(f);
  }
  return out;
}

std::string join_doubles(const std::vector<double>& v) {
  std::string out;
  for (double x : v) {
    if (!out.empty()) out += ", ";
    out += format_double(x);
  }
  return out;
}

// Everything a detector sweep needs about one model's clean behaviour.
struct CleanProfile {
  std::vector<DetectionEvidence> evidence;
  std::vector<double> thetas;
  double theta = 0;
  double fpr = 0;
  double ccd_fpr = 0;
};

CleanProfile profile_clean(const CapsNet& model, const Tensor& clean, const ExperimentConfig& cfg,
                           const DetectorSet& detectors) {
  CleanProfile p;
  p.evidence = gather_evidence(model, clean);
  p.thetas = theta_grid(cfg.theta_max, cfg.theta_step);
  // Clean-only sweep: FPR does not depend on the attack set, so reuse the
  // clean evidence as a placeholder adversarial set.
  std::vector<int> dummy(p.evidence.size(), -1);
  const SweepCurve curve = sweep(p.evidence, p.evidence, dummy, p.thetas, detectors);
  p.theta = reference_theta(curve, cfg.max_fpr);
  p.fpr = curve.at(p.theta).fpr;
  std::size_t ccd_hits = 0;
  for (const auto& e : p.evidence) ccd_hits += e.ccd_flag;
  p.ccd_fpr = static_cast<double>(ccd_hits) / static_cast<double>(p.evidence.size());
  return p;
}

// Loads `path` when given, otherwise builds the checkpoint and keeps a copy in out_dir.
Checkpoint obtain(const std::string& path, const std::function<Checkpoint()>& make, const fs::path& out_dir,
                  const std::string& save_name) {
  if (!path.empty()) return Checkpoint::load(path);
  Checkpoint ck = make();
  if (!out_dir.empty()) ck.save((out_dir / save_name).string());
  return ck;
}

struct Stats {
  double linf = 0, l2 = 0, l1 = 0;
};

Stats mean_norms(std::span<const AttackResult> rs) {
  Stats s;
  if (rs.empty()) return s;
  for (const auto& r : rs) {
    s.linf += r.linf;
    s.l2 += r.l2;
    s.l1 += r.l1;
  }
  const double n = static_cast<double>(rs.size());
  return {s.linf / n, s.l2 / n, s.l1 / n};
}

std::string slug(const std::string& s) {
  std::string out;
  for (char c : s) out += (std::isalnum(static_cast<unsigned char>(c)) || c == '.' || c == '-') ? c : '_';
  return out;
}

struct Context {
  const ExperimentConfig& cfg;
  fs::path out;
  Dataset train, test;
};

// White-box (and optional transfer) evaluation of one attack setting.
AttackSummary evaluate(Context& ctx, const std::string& name, const AttackConfig& ac, const Classifier& target,
                       const CleanProfile* profile, const DetectorSet& detectors, const Tensor& x,
                       std::span<const int> labels, std::span<const int> targets, const Classifier* substitute,
                       const Judge* judge, std::vector<AttackResult>& white) {
  AttackSummary s;
  s.name = name;
  s.attempts = labels.size();
  white = stage("attack:" + name, [&] { return run_attack(x, labels, targets, target, ac); });
  const auto* caps = dynamic_cast<const CapsNet*>(&target);
  if (caps && profile) {
    const auto ev = gather_evidence(*caps, stack_adversarial(white, target.config()));
    for (std::size_t i = 0; i < white.size(); ++i) white[i].verdict = make_verdict(ev[i], profile->theta, detectors);
    s.curve = sweep(profile->evidence, ev, targets, profile->thetas, detectors);
  }
  s.curve.label = name;
  s.success_white = success_rate(white);
  std::size_t undetected = 0;
  for (const auto& r : white) undetected += r.success && !(r.verdict && r.verdict->combined);
  s.undetected_white = white.empty() ? 0.0 : static_cast<double>(undetected) / static_cast<double>(white.size());
  const Stats st = mean_norms(white);
  s.mean_linf = st.linf;
  s.mean_l2 = st.l2;
  s.mean_l1 = st.l1;
  if (judge) s.deflection = deflection_proxy(white, *judge, target.config());

  if (substitute) {
    const auto black = stage("transfer:" + name, [&] { return run_attack(x, labels, targets, *substitute, ac); });
    const TransferReport tr =
        transfer(black, *substitute, target, profile ? profile->theta : 0.0, detectors);
    s.success_black = tr.success_rate;
    s.undetected_black = tr.undetected_rate;
    if (caps && profile) {
      const auto ev = gather_evidence(*caps, stack_adversarial(black, target.config()));
      s.black_curve = sweep(profile->evidence, ev, targets, profile->thetas, detectors);
      s.black_curve->label = name + " (transfer)";
    }
    if (!ctx.out.empty()) write_attack_dir((ctx.out / "attacks" / slug(name) / "transfer").string(), black);
  }

  if (!ctx.out.empty()) {
    const fs::path dir = ctx.out / "attacks" / slug(name);
    write_attack_dir((dir / "white").string(), white);
    if (!s.curve.points.empty()) s.curve.save_csv((ctx.out / "curves" / (slug(name) + ".csv")).string());
    if (s.black_curve) s.black_curve->save_csv((ctx.out / "curves" / (slug(name) + "_transfer.csv")).string());
    const ModelConfig& g = target.config();
    const std::size_t n = std::min(ctx.cfg.export_images, white.size());
    if (n > 0) fs::create_directories(ctx.out / "images" / slug(name));
    for (std::size_t i = 0; i < n; ++i) {
      char file[64];
      std::snprintf(file, sizeof(file), "%03zu_adv_t%d.ppm", i, white[i].target);
      export_ppm(white[i].adversarial, g.channels, g.height, g.width,
                 (ctx.out / "images" / slug(name) / file).string());
    }
  }
  return s;
}

}  // namespace

// --- configuration --------------------------------------------------------

const char* protocol_name(Protocol p) {
  switch (p) {
    case Protocol::Standard: return "standard";
    case Protocol::Ablation: return "ablation";
    case Protocol::AlphaSweep: return "alpha_sweep";
  }
  return "?";
}

Protocol parse_protocol(const std::string& text) {
  if (text == "standard") return Protocol::Standard;
  if (text == "ablation") return Protocol::Ablation;
  if (text == "alpha_sweep") return Protocol::AlphaSweep;
  throw ConfigError("unknown protocol `" + text + "` (expected standard, ablation or alpha_sweep)");
}

void DataSpec::write(KeyValueWriter& out) const {
  out.put("source", source);
  if (source == "toy") {
    out.put("seed", static_cast<long long>(seed));
    out.put("per_class_train", per_class_train);
    out.put("per_class_test", per_class_test);
    out.put("size", size);
    out.put("max_shift", static_cast<long long>(toy.max_shift));
    out.put("brightness_jitter", toy.brightness_jitter);
    out.put("noise", toy.noise);
    out.put("thickness_jitter", toy.thickness_jitter);
    out.put("ink", toy.ink);
    out.put("background", toy.background);
    out.put("clutter", toy.clutter);
    out.put("clutter_ink", toy.clutter_ink);
  } else if (source == "cifar") {
    out.put("train", train_path);
    out.put("test", test_path);
  } else {
    out.put("train_images", train_images);
    out.put("train_labels", train_labels);
    out.put("test_images", test_images);
    out.put("test_labels", test_labels);
    out.put("channels", channels);
  }
}

DataSpec DataSpec::read(const KeyValueConfig& in, const std::string& s) {
  DataSpec d;
  d.source = in.get_string(s, "source", d.source);
  if (d.source == "toy") {
    d.seed = seed_of(in, s, "seed", d.seed);
    d.per_class_train = count(in, s, "per_class_train", d.per_class_train);
    d.per_class_test = count(in, s, "per_class_test", d.per_class_test);
    d.size = count(in, s, "size", d.size);
    d.toy.max_shift = static_cast<int>(in.get_int(s, "max_shift", d.toy.max_shift));
    d.toy.brightness_jitter = in.get_double(s, "brightness_jitter", d.toy.brightness_jitter);
    d.toy.noise = in.get_double(s, "noise", d.toy.noise);
    d.toy.thickness_jitter = in.get_double(s, "thickness_jitter", d.toy.thickness_jitter);
    d.toy.ink = in.get_double(s, "ink", d.toy.ink);
    d.toy.background = in.get_double(s, "background", d.toy.background);
    d.toy.clutter = count(in, s, "clutter", d.toy.clutter);
    d.toy.clutter_ink = in.get_double(s, "clutter_ink", d.toy.clutter_ink);
  } else if (d.source == "cifar") {
    d.train_path = in.require_string(s, "train");
    d.test_path = in.require_string(s, "test");
  } else if (d.source == "idx") {
    d.train_images = in.require_string(s, "train_images");
    d.train_labels = in.require_string(s, "train_labels");
    d.test_images = in.require_string(s, "test_images");
    d.test_labels = in.require_string(s, "test_labels");
    d.channels = count(in, s, "channels", d.channels);
  } else {
    throw ConfigError("data.source must be toy, cifar or idx, got `" + d.source + "`");
  }
  return d;
}

std::pair<Dataset, Dataset> DataSpec::load() const {
  if (source == "toy") {
    return {synth_toy(seed, per_class_train, size, ToySplit::Train, toy),
            synth_toy(seed, per_class_test, size, ToySplit::Test, toy)};
  }
  if (source == "cifar") {
    Dataset tr = load_cifar10_binary(train_path), te = load_cifar10_binary(test_path);
    tr.split = "train";
    te.split = "test";
    return {std::move(tr), std::move(te)};
  }
  if (source == "idx") {
    Dataset tr = load_idx(train_images, train_labels, channels), te = load_idx(test_images, test_labels, channels);
    tr.split = "train";
    te.split = "test";
    return {std::move(tr), std::move(te)};
  }
  throw ConfigError("data.source must be toy, cifar or idx, got `" + source + "`");
}

void ExperimentConfig::validate() const {
  model.validate();
  schedule.validate();
  attack.validate();
  if (families.empty()) throw ConfigError("experiment.attacks must name at least one attack family");
  if (judge != "cnn" && judge != "knn" && judge != "none")
    throw ConfigError("judge.kind must be cnn, knn or none, got `" + judge + "`");
  if (!(max_fpr >= 0 && max_fpr <= 1)) throw ConfigError("detect.max_fpr must be in [0, 1]");
  theta_grid(theta_max, theta_step);
  if (samples == 0) throw ConfigError("experiment.samples must be positive");
  if (protocol == Protocol::AlphaSweep) {
    if (sweep_parameter != "alpha1" && sweep_parameter != "alpha2" && sweep_parameter != "alpha3" &&
        sweep_parameter != "beta")
      throw ConfigError("alpha_sweep.parameter must be alpha1, alpha2, alpha3 or beta");
    if (sweep_values.empty()) throw ConfigError("alpha_sweep.values is empty");
    for (double v : sweep_values)
      if (!(v >= 0)) throw ConfigError("alpha_sweep.values must be non-negative");
  }
  for (const std::string* path : {&target_checkpoint, &substitute_checkpoint, &judge_checkpoint, &data.train_path,
                                  &data.test_path, &data.train_images, &data.train_labels, &data.test_images,
                                  &data.test_labels})
    if (!path->empty() && !fs::exists(*path)) throw ConfigError("referenced file does not exist: " + *path);
  if (protocol == Protocol::Ablation && model.lambda_cyc == 0)
    throw ConfigError("ablation protocol needs model.lambda_cyc > 0 for the deflecting model");
}

std::string ExperimentConfig::to_text() const {
  KeyValueWriter w;
  w.section("experiment");
  w.put("name", name);
  w.put("protocol", std::string(protocol_name(protocol)));
  w.put("samples", samples);
  w.put("clean_samples", clean_samples);
  w.put("seed", static_cast<long long>(seed));
  w.put("attacks", join_families(families));
  w.put("export_images", export_images);
  w.put("target_checkpoint", target_checkpoint);
  w.section("data");
  data.write(w);
  w.section("model");
  model.write(w);
  w.section("train");
  schedule.write(w);
  w.section("attack");
  attack.write(w);
  w.section("detect");
  w.put("detectors", detectors.name());
  w.put("baseline_detectors", baseline_detectors.name());
  w.put("theta_max", theta_max);
  w.put("theta_step", theta_step);
  w.put("max_fpr", max_fpr);
  w.section("blackbox");
  w.put("enabled", std::string(blackbox ? "true" : "false"));
  w.put("seed", static_cast<long long>(substitute_seed));
  w.put("checkpoint", substitute_checkpoint);
  w.section("judge");
  w.put("kind", judge);
  w.put("seed", static_cast<long long>(judge_seed));
  w.put("checkpoint", judge_checkpoint);
  w.section("alpha_sweep");
  w.put("parameter", sweep_parameter);
  w.put("values", join_doubles(sweep_values));
  return w.text();
}

ExperimentConfig ExperimentConfig::parse(const KeyValueConfig& in) {
  ExperimentConfig c;
  const std::string e = "experiment";
  c.name = in.get_string(e, "name", c.name);
  c.protocol = parse_protocol(in.get_string(e, "protocol", protocol_name(c.protocol)));
  c.samples = count(in, e, "samples", c.samples);
  c.clean_samples = count(in, e, "clean_samples", c.clean_samples);
  c.seed = seed_of(in, e, "seed", c.seed);
  if (in.has(e, "attacks")) {
    c.families.clear();
    std::string list = in.get_string(e, "attacks", "");
    std::size_t pos = 0;
    while (pos <= list.size()) {
      const auto comma = list.find(',', pos);
      std::string item = list.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos);
      item.erase(0, item.find_first_not_of(" \t"));
      item.erase(item.find_last_not_of(" \t") + 1);
      if (!item.empty()) c.families.push_back(parse_attack_family(item));
      if (comma == std::string::npos) break;
      pos = comma + 1;
    }
  }
  c.export_images = count(in, e, "export_images", c.export_images);
  c.target_checkpoint = in.get_string(e, "target_checkpoint", c.target_checkpoint);

  c.data = DataSpec::read(in);
  c.model = ModelConfig::read(in);
  c.schedule = TrainSchedule::read(in, TrainSchedule::preset_named(c.model.preset));
  c.attack = AttackConfig::read(in, c.attack);

  const std::string d = "detect";
  if (in.has(d, "detectors")) c.detectors = DetectorSet::parse(in.get_string(d, "detectors", ""));
  if (in.has(d, "baseline_detectors"))
    c.baseline_detectors = DetectorSet::parse(in.get_string(d, "baseline_detectors", ""));
  c.theta_max = in.get_double(d, "theta_max", c.theta_max);
  c.theta_step = in.get_double(d, "theta_step", c.theta_step);
  c.max_fpr = in.get_double(d, "max_fpr", c.max_fpr);

  c.blackbox = in.get_bool("blackbox", "enabled", c.blackbox);
  c.substitute_seed = seed_of(in, "blackbox", "seed", c.substitute_seed);
  c.substitute_checkpoint = in.get_string("blackbox", "checkpoint", c.substitute_checkpoint);
  c.judge = in.get_string("judge", "kind", c.judge);
  c.judge_seed = seed_of(in, "judge", "seed", c.judge_seed);
  c.judge_checkpoint = in.get_string("judge", "checkpoint", c.judge_checkpoint);
  c.sweep_parameter = in.get_string("alpha_sweep", "parameter", c.sweep_parameter);
  c.sweep_values = in.get_doubles("alpha_sweep", "values", c.sweep_values);

  in.check_all_consumed();
  c.validate();
  return c;
}

ExperimentConfig ExperimentConfig::load(const std::string& path) { return parse(KeyValueConfig::load(path)); }

// --- report ---------------------------------------------------------------

std::string Report::to_text() const {
  std::string out;
  auto put = [&](const std::string& k, const std::string& v) { out += k + " = " + v + "\n"; };
  auto opt = [&](const std::string& k, const std::optional<double>& v) {
    put(k, v ? fmt(*v) : std::string("undefined"));
  };
  out += "[report]\n";
  put("name", name);
  put("protocol", protocol);
  put("accuracy", fmt(accuracy));
  if (substitute_accuracy) opt("substitute_accuracy", substitute_accuracy);
  if (judge_accuracy) opt("judge_accuracy", judge_accuracy);
  put("reference_theta", fmt(reference_theta));
  put("reference_fpr", fmt(reference_fpr));
  put("clean_ccd_fpr", fmt(clean_ccd_fpr));
  if (baseline_accuracy) opt("baseline_accuracy", baseline_accuracy);
  if (baseline_ccd_fpr) opt("baseline_ccd_fpr", baseline_ccd_fpr);
  put("attack_pool", std::to_string(attack_pool));
  for (const auto& a : attacks) {
    out += "\n[attack " + a.name + "]\n";
    put("attempts", std::to_string(a.attempts));
    put("success_white", fmt(a.success_white));
    put("undetected_white", fmt(a.undetected_white));
    if (a.success_black) opt("success_black", a.success_black);
    if (a.undetected_black) opt("undetected_black", a.undetected_black);
    opt("deflection_proxy", a.deflection);
    put("mean_linf", fmt(a.mean_linf));
    put("mean_l2", fmt(a.mean_l2));
    put("mean_l1", fmt(a.mean_l1));
  }
  return out;
}

// --- protocols ------------------------------------------------------------

std::vector<std::size_t> evaluation_indices(const Classifier& model, const Dataset& test, std::size_t k,
                                            std::uint64_t seed) {
  std::vector<std::size_t> order(test.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng() % i]);
  std::vector<std::size_t> out;
  constexpr std::size_t kChunk = 128;
  for (std::size_t start = 0; start < order.size() && out.size() < k; start += kChunk) {
    const std::span<const std::size_t> chunk(order.data() + start, std::min(kChunk, order.size() - start));
    const auto pred = model.predict(test.batch(chunk));
    for (std::size_t i = 0; i < chunk.size() && out.size() < k; ++i)
      if (pred[i] == test.labels[chunk[i]]) out.push_back(chunk[i]);
  }
  return out;
}

ExperimentArtifacts run_experiment(const ExperimentConfig& cfg, const std::string& out_dir) {
  cfg.validate();
  Context ctx{cfg, out_dir.empty() ? fs::path() : fs::path(out_dir), {}, {}};
  if (!ctx.out.empty()) {
    stage("output", [&] {
      fs::create_directories(ctx.out / "curves");
      fs::remove(ctx.out / "report.txt");
      write_text(ctx.out / "STALE", "incomplete run; outputs here may be partial\n");
      write_text(ctx.out / "config.txt", cfg.to_text());
      return 0;
    });
  }

  std::tie(ctx.train, ctx.test) = stage("data", [&] { return cfg.data.load(); });
  stage("data", [&] {
    const ModelConfig& m = cfg.model;
    if (ctx.train.channels != m.channels || ctx.train.height != m.height || ctx.train.width != m.width)
      throw ConfigError("dataset geometry does not match the model input shape");
    if (ctx.train.n_classes != m.n_classes) throw ConfigError("dataset class count does not match the model");
    return 0;
  });

  if (cfg.samples > ctx.test.size())
    throw ConfigError("stage `data`: experiment.samples (" + std::to_string(cfg.samples) +
                      ") exceeds the test split size (" + std::to_string(ctx.test.size()) + ")");

  ExperimentArtifacts art;
  Report& rep = art.report;
  rep.name = cfg.name;
  rep.protocol = protocol_name(cfg.protocol);

  const Checkpoint target_ck = stage("train:target", [&] {
    return obtain(cfg.target_checkpoint, [&] { return train(ctx.train, cfg.model, cfg.schedule); },
                  ctx.out, "target.ckpt");
  });
  const auto target = target_ck.to_model();
  rep.accuracy = stage("accuracy", [&] { return accuracy(*target, ctx.test); });

  const std::size_t n_clean = cfg.clean_samples == 0 ? ctx.test.size() : std::min(cfg.clean_samples, ctx.test.size());
  std::vector<std::size_t> clean_idx(n_clean);
  std::iota(clean_idx.begin(), clean_idx.end(), 0);
  const Tensor clean = ctx.test.batch(clean_idx);

  const auto* caps = dynamic_cast<const CapsNet*>(target.get());
  std::optional<CleanProfile> profile;
  if (caps) {
    profile = stage("detect:clean", [&] { return profile_clean(*caps, clean, cfg, cfg.detectors); });
    rep.reference_theta = profile->theta;
    rep.reference_fpr = profile->fpr;
    rep.clean_ccd_fpr = profile->ccd_fpr;
  }

  const auto pool = stage("select", [&] { return evaluation_indices(*target, ctx.test, cfg.samples, cfg.seed); });
  rep.attack_pool = pool.size();
  if (pool.empty()) throw RuntimeFailure("stage `select`: no correctly classified test inputs to attack");
  const Tensor x = ctx.test.batch(pool);
  const auto labels = ctx.test.batch_labels(pool);
  const auto targets = choose_targets(labels, cfg.model.n_classes, cfg.attack.target_policy, cfg.seed);

  std::unique_ptr<Classifier> substitute;
  if (cfg.blackbox && cfg.protocol == Protocol::Standard) {
    const Checkpoint ck = stage("train:substitute", [&] {
      TrainSchedule s = cfg.schedule;
      s.seed = cfg.substitute_seed;
      return obtain(cfg.substitute_checkpoint, [&] { return train(ctx.train, cfg.model, s); },
                    ctx.out, "substitute.ckpt");
    });
    substitute = ck.to_model();
    rep.substitute_accuracy = accuracy(*substitute, ctx.test);
  }

  std::unique_ptr<Classifier> judge_model;
  std::optional<KnnJudge> knn;
  Judge judge;
  if (cfg.judge == "cnn") {
    const Checkpoint ck = stage("train:judge", [&] {
      TrainSchedule s = cfg.schedule;
      s.seed = cfg.judge_seed;
      return obtain(cfg.judge_checkpoint, [&] { return train_baseline(ctx.train, cfg.model, s); }, ctx.out,
                    "judge.ckpt");
    });
    judge_model = ck.to_model();
    rep.judge_accuracy = accuracy(*judge_model, ctx.test);
    judge = judge_of(*judge_model);
  } else if (cfg.judge == "knn") {
    knn.emplace(ctx.train, 5);
    judge = [&knn](const Tensor& t) { return (*knn)(t); };
    rep.judge_accuracy = stage("judge", [&] {
      std::vector<std::size_t> idx(std::min<std::size_t>(ctx.test.size(), 200));
      std::iota(idx.begin(), idx.end(), 0);
      const auto pred = judge(ctx.test.batch(idx));
      std::size_t ok = 0;
      for (std::size_t i = 0; i < idx.size(); ++i) ok += pred[i] == ctx.test.labels[idx[i]];
      return static_cast<double>(ok) / static_cast<double>(idx.size());
    });
  }
  const Judge* judge_ptr = judge ? &judge : nullptr;

  auto add = [&](AttackSummary s, std::vector<AttackResult> white) {
    rep.attacks.push_back(std::move(s));
    art.white_results.push_back(std::move(white));
  };

  const CleanProfile* prof = profile ? &*profile : nullptr;
  if (cfg.protocol == Protocol::Standard) {
    for (AttackFamily f : cfg.families) {
      AttackConfig ac = cfg.attack;
      ac.family = f;
      std::vector<AttackResult> white;
      auto s = evaluate(ctx, attack_family_name(f), ac, *target, prof, cfg.detectors, x, labels, targets,
                        substitute.get(), judge_ptr, white);
      add(std::move(s), std::move(white));
    }
  } else if (cfg.protocol == Protocol::Ablation) {
    const Checkpoint base_ck = stage("train:baseline", [&] {
      ModelConfig m = cfg.model;
      m.lambda_cyc = 0;
      return obtain("", [&] { return train(ctx.train, m, cfg.schedule); }, ctx.out,
                    "baseline_no_cycle.ckpt");
    });
    const auto base = base_ck.to_model();
    rep.baseline_accuracy = accuracy(*base, ctx.test);
    const auto& base_caps = require_capsnet(*base);
    const CleanProfile base_prof =
        stage("detect:baseline", [&] { return profile_clean(base_caps, clean, cfg, cfg.baseline_detectors); });
    rep.baseline_ccd_fpr = base_prof.ccd_fpr;
    for (AttackFamily f : cfg.families) {
      AttackConfig ac = cfg.attack;
      ac.family = f;
      std::vector<AttackResult> white;
      auto s = evaluate(ctx, std::string(attack_family_name(f)) + "@deflecting", ac, *target, prof, cfg.detectors, x,
                        labels, targets, nullptr, judge_ptr, white);
      add(std::move(s), std::move(white));
      std::vector<AttackResult> white_base;
      auto sb = evaluate(ctx, std::string(attack_family_name(f)) + "@baseline", ac, *base, &base_prof,
                         cfg.baseline_detectors, x, labels, targets, nullptr, judge_ptr, white_base);
      add(std::move(sb), std::move(white_base));
    }
  } else {
    for (AttackFamily f : cfg.families) {
      for (double v : cfg.sweep_values) {
        AttackConfig ac = cfg.attack;
        ac.family = f;
        if (cfg.sweep_parameter == "alpha1") ac.alpha1 = v;
        else if (cfg.sweep_parameter == "alpha2") ac.alpha2 = v;
        else if (cfg.sweep_parameter == "alpha3") ac.alpha3 = v;
        else ac.beta = v;
        stage("config", [&] {
          ac.validate();
          return 0;
        });
        std::vector<AttackResult> white;
        auto s = evaluate(ctx, std::string(attack_family_name(f)) + "@" + cfg.sweep_parameter + "=" + fmt(v), ac,
                          *target, prof, cfg.detectors, x, labels, targets, nullptr, judge_ptr, white);
        add(std::move(s), std::move(white));
      }
    }
  }

  if (!ctx.out.empty()) {
    stage("output", [&] {
      write_text(ctx.out / "report.txt", rep.to_text());
      fs::remove(ctx.out / "STALE");
      return 0;
    });
  }
  return art;
}

}  // namespace capsdefl
