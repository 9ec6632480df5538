// Command-line front end: training, data synthesis, attacks, detection,
// sweeps, full experiments and image export.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>

#include "capsdefl/error.hpp"
#include "capsdefl/eval.hpp"

namespace fs = std::filesystem;
using namespace capsdefl;

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out = ".";
  std::string checkpoint;
  std::string input;
  std::optional<double> theta;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "key = value experiment config");
  cmd->add_option("--seed", c.seed, "override the command's seed");
  cmd->add_option("--out", c.out, "output directory");
  cmd->add_option("--checkpoint", c.checkpoint, "model checkpoint");
}

ExperimentConfig load_config(const Common& c) {
  if (c.config.empty()) {
    ExperimentConfig cfg;
    cfg.validate();
    return cfg;
  }
  return ExperimentConfig::load(c.config);
}

fs::path out_dir(const Common& c) {
  fs::path p(c.out);
  std::error_code ec;
  fs::create_directories(p, ec);
  if (ec) throw RuntimeFailure("cannot create " + p.string() + ": " + ec.message());
  return p;
}

std::unique_ptr<Classifier> load_model(const Common& c) {
  if (c.checkpoint.empty()) throw UsageError("--checkpoint is required");
  return Checkpoint::load(c.checkpoint).to_model();
}

void write_file(const fs::path& p, const std::string& text) {
  std::ofstream f(p, std::ios::binary | std::ios::trunc);
  if (!f) throw RuntimeFailure("cannot write " + p.string());
  f << text;
  if (!f) throw RuntimeFailure("failed writing " + p.string());
}

// Clean test subset used for false-positive rates.
Tensor clean_set(const ExperimentConfig& cfg, const Dataset& test) {
  const std::size_t n = cfg.clean_samples == 0 ? test.size() : std::min(cfg.clean_samples, test.size());
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  return test.batch(idx);
}

double clean_reference_theta(const CapsNet& model, const Tensor& clean, const ExperimentConfig& cfg) {
  const auto ev = gather_evidence(model, clean);
  const std::vector<int> none(ev.size(), -1);
  const auto thetas = theta_grid(cfg.theta_max, cfg.theta_step);
  return reference_theta(sweep(ev, ev, none, thetas, cfg.detectors), cfg.max_fpr);
}

int cmd_train(const Common& c, bool baseline) {
  ExperimentConfig cfg = load_config(c);
  if (c.seed) cfg.schedule.seed = *c.seed;
  const auto [train_set, test_set] = cfg.data.load();
  const fs::path out = out_dir(c);
  std::string metrics = "step,epoch,margin,recon,cycle,total,batch_accuracy\n";
  auto sink = [&](const TrainMetrics& m) {
    char line[160];
    std::snprintf(line, sizeof(line), "%zu,%zu,%.6g,%.6g,%.6g,%.6g,%.6g\n", m.step, m.epoch, m.losses.margin,
                  m.losses.recon, m.losses.cycle, m.losses.total, m.batch_accuracy);
    metrics += line;
    std::fprintf(stderr, "step %zu epoch %zu loss %.4f acc %.3f\n", m.step, m.epoch, m.losses.total,
                 m.batch_accuracy);
  };
  const Checkpoint ck = baseline ? train_baseline(train_set, cfg.model, cfg.schedule, sink)
                                 : train(train_set, cfg.model, cfg.schedule, sink);
  const std::string name = baseline ? "baseline.ckpt" : "model.ckpt";
  ck.save((out / name).string());
  write_file(out / (baseline ? "baseline_metrics.csv" : "metrics.csv"), metrics);
  const auto model = ck.to_model();
  std::printf("%s test_accuracy = %.6g\n", (out / name).string().c_str(), accuracy(*model, test_set));
  return 0;
}

int cmd_synth(const Common& c) {
  ExperimentConfig cfg = load_config(c);
  if (c.seed) cfg.data.seed = *c.seed;
  if (cfg.data.source != "toy") throw UsageError("synth-data needs data.source = toy");
  const auto [train_set, test_set] = cfg.data.load();
  const fs::path out = out_dir(c);
  save_idx(train_set, (out / "train-images.idx3-ubyte").string(), (out / "train-labels.idx1-ubyte").string());
  save_idx(test_set, (out / "test-images.idx3-ubyte").string(), (out / "test-labels.idx1-ubyte").string());
  std::printf("wrote %zu train and %zu test images to %s\n", train_set.size(), test_set.size(),
              out.string().c_str());
  return 0;
}

int cmd_attack(const Common& c) {
  ExperimentConfig cfg = load_config(c);
  if (c.seed) cfg.seed = *c.seed;
  const auto model = load_model(c);
  const auto [train_set, test_set] = cfg.data.load();
  const auto pool = evaluation_indices(*model, test_set, cfg.samples, cfg.seed);
  if (pool.empty()) throw RuntimeFailure("no correctly classified test inputs to attack");
  const auto labels = test_set.batch_labels(pool);
  const auto targets = choose_targets(labels, model->config().n_classes, cfg.attack.target_policy, cfg.seed);
  AttackConfig ac = cfg.attack;
  ac.seed = cfg.seed;
  auto results = run_attack(test_set.batch(pool), labels, targets, *model, ac);
  std::optional<double> theta;
  if (const auto* caps = dynamic_cast<const CapsNet*>(model.get())) {
    theta = c.theta ? *c.theta : clean_reference_theta(*caps, clean_set(cfg, test_set), cfg);
    attach_verdicts(results, *model, *theta, cfg.detectors);
  }
  const fs::path out = out_dir(c);
  write_attack_dir(out.string(), results);
  std::string summary = "family = " + std::string(attack_family_name(ac.family)) + "\n";
  char line[96];
  std::snprintf(line, sizeof(line), "attempts = %zu\nsuccess_rate = %.6g\n", results.size(), success_rate(results));
  summary += line;
  if (theta) {
    std::size_t und = 0;
    for (const auto& r : results) und += r.success && !r.verdict->combined;
    std::snprintf(line, sizeof(line), "theta = %.6g\nundetected_rate = %.6g\n", *theta,
                  static_cast<double>(und) / static_cast<double>(results.size()));
    summary += line;
  }
  write_file(out / "summary.txt", summary);
  std::fputs(summary.c_str(), stdout);
  return 0;
}

// Detector flags for an attack directory (--input) or the clean test split.
int cmd_detect(const Common& c) {
  ExperimentConfig cfg = load_config(c);
  const auto model = load_model(c);
  const CapsNet& caps = require_capsnet(*model);
  const auto [train_set, test_set] = cfg.data.load();
  const double theta = c.theta ? *c.theta : clean_reference_theta(caps, clean_set(cfg, test_set), cfg);
  Tensor x;
  if (c.input.empty()) {
    x = clean_set(cfg, test_set);
  } else {
    const auto recs = read_attack_dir(c.input, model->config().image_size());
    std::vector<float> flat;
    for (const auto& r : recs) flat.insert(flat.end(), r.adversarial.begin(), r.adversarial.end());
    const ModelConfig& g = model->config();
    x = Tensor::from({recs.size(), g.channels, g.height, g.width}, std::move(flat));
  }
  std::string csv = "index,prediction,winning_error,recon_prediction,gtd,lbd,ccd,combined\n";
  std::size_t flagged = 0, i = 0;
  for (const auto& v : detect_all(x, *model, theta, cfg.detectors)) {
    char line[128];
    std::snprintf(line, sizeof(line), "%zu,%d,%.6g,%d,%d,%d,%d,%d\n", i++, v.prediction, v.winning_error,
                  v.recon_prediction, v.gtd_flag, v.lbd_flag, v.ccd_flag, v.combined);
    csv += line;
    flagged += v.combined;
  }
  const fs::path out = out_dir(c);
  write_file(out / "detections.csv", csv);
  std::printf("theta = %.6g\nflagged = %zu of %zu\n", theta, flagged, i);
  return 0;
}

int cmd_sweep(const Common& c) {
  ExperimentConfig cfg = load_config(c);
  if (c.input.empty()) throw UsageError("sweep needs --input ATTACK_DIR");
  const auto model = load_model(c);
  const CapsNet& caps = require_capsnet(*model);
  const auto [train_set, test_set] = cfg.data.load();
  const auto recs = read_attack_dir(c.input, model->config().image_size());
  if (recs.empty()) throw UsageError(c.input + " holds no adversarial examples");
  std::vector<float> flat;
  std::vector<int> targets;
  for (const auto& r : recs) {
    flat.insert(flat.end(), r.adversarial.begin(), r.adversarial.end());
    targets.push_back(r.target);
  }
  const ModelConfig& g = model->config();
  const Tensor adv = Tensor::from({recs.size(), g.channels, g.height, g.width}, std::move(flat));
  const auto thetas = theta_grid(cfg.theta_max, cfg.theta_step);
  SweepCurve curve = sweep(caps, clean_set(cfg, test_set), adv, targets, thetas, cfg.detectors);
  const fs::path out = out_dir(c);
  curve.save_csv((out / "curve.csv").string());
  const double theta = reference_theta(curve, cfg.max_fpr);
  const auto& p = curve.at(theta);
  std::printf("reference_theta = %.6g\nfpr = %.6g\nundetected_rate = %.6g\n", theta, p.fpr, p.undetected_rate);
  return 0;
}

int cmd_eval(const Common& c, bool alpha_sweep) {
  ExperimentConfig cfg = load_config(c);
  if (c.seed) cfg.seed = *c.seed;
  if (!c.checkpoint.empty()) cfg.target_checkpoint = c.checkpoint;
  if (alpha_sweep) cfg.protocol = Protocol::AlphaSweep;
  cfg.validate();
  const auto art = run_experiment(cfg, out_dir(c).string());
  std::fputs(art.report.to_text().c_str(), stdout);
  return 0;
}

// Adversarial images from an attack directory, plus their winning-class
// reconstructions when a capsule checkpoint is given.
int cmd_export(const Common& c) {
  if (c.input.empty()) throw UsageError("export-images needs --input ATTACK_DIR");
  ExperimentConfig cfg = load_config(c);
  std::unique_ptr<Classifier> model;
  if (!c.checkpoint.empty()) model = load_model(c);
  const ModelConfig g = model ? model->config() : cfg.model;
  const auto recs = read_attack_dir(c.input, g.image_size());
  const fs::path out = out_dir(c);
  const auto* caps = dynamic_cast<const CapsNet*>(model.get());
  for (const auto& r : recs) {
    char name[64];
    std::snprintf(name, sizeof(name), "%06zu_adv.ppm", r.index);
    export_ppm(r.adversarial, g.channels, g.height, g.width, (out / name).string());
    if (caps) {
      const Tensor x = Tensor::from({1, g.channels, g.height, g.width}, r.adversarial);
      const auto out_caps = caps->classify(x);
      const int k = out_caps.prediction[0];
      const Tensor rec = caps->reconstruct_from(out_caps.poses, std::span<const int>(&k, 1));
      std::vector<float> px(rec.data().begin(), rec.data().end());
      for (float& v : px) v = std::clamp(v, 0.0f, 1.0f);
      std::snprintf(name, sizeof(name), "%06zu_recon.ppm", r.index);
      export_ppm(px, g.channels, g.height, g.width, (out / name).string());
    }
  }
  std::printf("exported %zu images to %s\n", recs.size(), out.string().c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"capsule-network detection and deflection toolkit"};
  app.require_subcommand(1);
  Common c;
  auto* train = app.add_subcommand("train", "train a capsule network");
  auto* train_base = app.add_subcommand("train-baseline", "train the baseline CNN");
  auto* synth = app.add_subcommand("synth-data", "write the toy dataset as IDX files");
  auto* attack = app.add_subcommand("attack", "attack correctly classified test inputs");
  auto* detect = app.add_subcommand("detect", "run the detectors on clean or adversarial inputs");
  auto* sweep_cmd = app.add_subcommand("sweep", "FPR / undetected-rate sweep over the threshold grid");
  auto* eval = app.add_subcommand("eval", "run a full experiment and write its report");
  auto* export_cmd = app.add_subcommand("export-images", "write PPM images from an attack directory");
  auto* sweep_alpha = app.add_subcommand("sweep-alpha", "experiment over a list of loss weights");
  for (auto* cmd : {train, train_base, synth, attack, detect, sweep_cmd, eval, export_cmd, sweep_alpha})
    add_common(cmd, c);
  for (auto* cmd : {detect, sweep_cmd, export_cmd})
    cmd->add_option("--input", c.input, "attack directory");
  for (auto* cmd : {attack, detect}) cmd->add_option("--theta", c.theta, "detector threshold");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*train) return cmd_train(c, false);
    if (*train_base) return cmd_train(c, true);
    if (*synth) return cmd_synth(c);
    if (*attack) return cmd_attack(c);
    if (*detect) return cmd_detect(c);
    if (*sweep_cmd) return cmd_sweep(c);
    if (*eval) return cmd_eval(c, false);
    if (*sweep_alpha) return cmd_eval(c, true);
    if (*export_cmd) return cmd_export(c);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 1;
  } catch (const UsageError& e) {
    std::fprintf(stderr, "usage error: %s\n", e.what());
    return 1;
  } catch (const FormatError& e) {
    std::fprintf(stderr, "format error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "runtime failure: %s\n", e.what());
    return 2;
  }
  return 1;
}
