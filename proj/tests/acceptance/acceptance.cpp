// Acceptance run at toy scale: trains the models it needs, replays every
// primary criterion and prints one PASS/FAIL line per criterion. Two
// supplementary lines (memorization, deflection proxy) are printed but not
// counted. Exit status is 0 only when every criterion passes.

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <numeric>
#include <random>
#include <string>

#include <unistd.h>

#include "capsdefl/checkpoint.hpp"
#include "capsdefl/cnn.hpp"
#include "capsdefl/error.hpp"
#include "capsdefl/eval.hpp"
#include "capsdefl/gradcheck.hpp"
#include "capsdefl/keyvalue.hpp"
#include "capsdefl/ops.hpp"

namespace fs = std::filesystem;
using namespace capsdefl;

namespace {

using Clock = std::chrono::steady_clock;

double since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, double a) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), f, a);
  return buf;
}

struct Line {
  std::string name;
  bool pass = false;
  std::string detail;
  bool counted = true;
};

std::vector<Line> lines;

void report(Line line) {
  std::printf("%-44s %s  %s\n", line.name.c_str(), line.pass ? "PASS" : "FAIL", line.detail.c_str());
  std::fflush(stdout);
  lines.push_back(std::move(line));
}

void note(const std::string& text) {
  std::printf("  .. %s\n", text.c_str());
  std::fflush(stdout);
}

// Harder toy glyphs: dimmer ink on a grey, noisy canvas with two
// distractor strokes. Plain glyphs reconstruct too well for any detector
// to separate the training variants.
ToyOptions toy_options() {
  ToyOptions o;
  o.ink = 0.4;
  o.background = 0.1;
  o.noise = 0.05;
  o.thickness_jitter = 0.3;
  o.clutter = 2;
  o.clutter_ink = 0.5;
  return o;
}

std::vector<std::size_t> first_n(std::size_t n) {
  std::vector<std::size_t> v(n);
  std::iota(v.begin(), v.end(), 0);
  return v;
}

double rate(std::size_t k, std::size_t n) { return n ? double(k) / double(n) : 0.0; }

// --- criterion 1 --------------------------------------------------------

struct GradCase {
  std::string name;
  ScalarFn64 fn;
  std::vector<Shape> shapes;
  GradCheckOptions options = {};
};

std::vector<GradCase> op_cases() {
  const std::vector<int> t4 = {1, 0, 5, 3}, t3 = {2, 7, 0};
  std::vector<GradCase> c;
  c.push_back({"conv2d", [](const auto& in) { return random_projection(conv2d(in[0], in[1], in[2], 1, 1), 1); },
               {{2, 3, 7, 7}, {4, 3, 3, 3}, {4}}});
  c.push_back({"conv2d/stride2",
               [](const auto& in) { return random_projection(conv2d(in[0], in[1], in[2], 2, 0), 2); },
               {{1, 2, 9, 9}, {3, 2, 3, 3}, {3}}});
  c.push_back({"deconv2d",
               [](const auto& in) { return random_projection(deconv2d(in[0], in[1], in[2], 2, 1), 3); },
               {{2, 3, 4, 4}, {3, 2, 4, 4}, {2}}});
  c.push_back({"avg_pool2d", [](const auto& in) { return random_projection(avg_pool2d(in[0], 2, 2), 4); },
               {{2, 3, 6, 6}}});
  c.push_back({"dense", [](const auto& in) { return random_projection(dense(in[0], in[1], in[2]), 5); },
               {{3, 5}, {4, 5}, {4}}});
  c.push_back({"leaky_relu", [](const auto& in) { return random_projection(leaky_relu(in[0]), 6); }, {{4, 9}}});
  c.push_back({"sigmoid", [](const auto& in) { return random_projection(sigmoid(in[0]), 7); }, {{4, 9}}});
  c.push_back({"softmax_cross_entropy",
               [t4](const auto& in) { return softmax_cross_entropy(scale(in[0], 3.0), t4); }, {{4, 6}}});
  c.push_back({"l2_distance", [](const auto& in) { return l2_distance(in[0], in[1]); }, {{3, 5}, {3, 5}}});
  c.push_back({"row_l2_distance",
               [](const auto& in) { return random_projection(row_l2_distance(in[0], in[1]), 8); },
               {{3, 5}, {3, 5}}});
  c.push_back({"squared_error", [](const auto& in) { return squared_error(in[0], in[1]); }, {{2, 7}, {2, 7}}});
  c.push_back({"margin_loss", [t3](const auto& in) { return margin_loss(mul(in[0], in[0]), t3); }, {{3, 10}}});
  c.push_back({"target_margin",
               [t3](const auto& in) { return random_projection(target_margin(in[0], t3, 0.0), 9); }, {{3, 10}}});
  c.push_back({"sum/mean",
               [](const auto& in) { return add(sum(mul(in[0], in[0])), add(mean(in[0]), random_projection(in[0], 10))); },
               {{3, 4}}});
  c.push_back({"add/sub/mul/scale",
               [](const auto& in) { return random_projection(scale(mul(add(in[0], in[1]), sub(in[0], in[1])), 1.5), 11); },
               {{3, 4}, {3, 4}}});
  c.push_back({"reshape/repeat_rows",
               [](const auto& in) { return random_projection(repeat_rows(reshape(in[0], {2, 6}), 3), 12); },
               {{3, 4}}});
  c.push_back({"capsule routing",
               [](const auto& in) {
                 const auto u = caps_predict(in[0], in[1]);
                 const auto v = squash(caps_combine(u, softmax_lastdim(in[2])));
                 return add(random_projection(caps_agreement(u, v), 13), random_projection(caps_lengths(v, 2), 14));
               },
               {{2, 4, 3}, {4, 3, 2, 3}, {2, 4, 3}}});
  c.push_back({"squash", [](const auto& in) { return random_projection(squash(in[0]), 17); }, {{2, 5, 4}}});
  c.push_back({"softmax_lastdim", [](const auto& in) { return random_projection(softmax_lastdim(in[0]), 16); },
               {{3, 6}}});
  c.push_back({"mask_capsules",
               [](const auto& in) {
                 const int keep[] = {0, 2, 1, 1};
                 return random_projection(mask_capsules(in[0], 3, keep), 19);
               },
               {{2, 4, 3}}});
  c[5].options.kink_inputs = {0};  // leaky relu kink at 0
  return c;
}

Line gradient_integrity() {
  const auto t0 = Clock::now();
  const std::uint64_t seeds[] = {1, 2, 3, 4, 5};
  double worst_op = 0;
  std::string worst_op_name;
  for (const auto& c : op_cases()) {
    for (auto seed : seeds) {
      const auto r = grad_check(c.fn, c.shapes, seed, c.options);
      if (r.checked == 0) return {"1 gradient integrity", false, c.name + ": no coordinate checked"};
      if (r.max_rel_error > worst_op) {
        worst_op = r.max_rel_error;
        worst_op_name = c.name;
      }
    }
  }
  const ModelConfig cfg = ModelConfig::toy();
  double worst_comp = 0;
  std::string worst_comp_name;
  for (auto seed : seeds) {
    const auto params = CapsNet::initialized(cfg, seed).parameters().cast<double>();
    std::mt19937_64 rng(seed + 100);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<double> data(2 * cfg.image_size());
    for (auto& v : data) v = u(rng);
    const auto x = Tensor64::from({2, cfg.channels, cfg.height, cfg.width}, data, true);
    const int labels[] = {int(seed % 10), int((seed + 4) % 10)};
    const std::pair<const char*, ScalarFn64> comps[] = {
        {"margin", [&](const auto& in) { return margin_loss(caps_classify(cfg, params, in[0]).lengths, labels); }},
        {"cycle", [&](const auto& in) { return cycle_loss(cfg, params, in[0]); }},
        {"attack", [&](const auto& in) { return recon_attack_loss(cfg, params, in[0], 1.0, 0.5, 20.0); }},
        {"total", [&](const auto& in) { return training_objective(cfg, params, in[0], labels).total; }},
    };
    for (const auto& [name, fn] : comps) {
      const auto r = grad_check_at(fn, {x}, seed);
      if (r.checked == 0) return {"1 gradient integrity", false, std::string(name) + ": no coordinate checked"};
      if (r.max_rel_error > worst_comp) {
        worst_comp = r.max_rel_error;
        worst_comp_name = name;
      }
    }
  }
  const double t = since(t0);
  const bool pass = worst_op < 1e-3 && worst_comp < 1e-2 && t < 120;
  return {"1 gradient integrity", pass,
          "ops max rel " + fmt("%.2e", worst_op) + " (" + worst_op_name + "), composites max rel " +
              fmt("%.2e", worst_comp) + " (" + worst_comp_name + "), " + fmt("%.1fs", t)};
}

// --- criterion 2 --------------------------------------------------------

struct OracleFlags {
  std::vector<int> prediction;
  std::vector<double> winning;
  std::vector<bool> lbd, ccd;
};

OracleFlags brute_force(const CapsNet& net, const Tensor& x) {
  const auto& c = net.config();
  const std::size_t n = x.shape()[0], md = c.n_capsules * c.atoms, img = c.image_size();
  const auto out = net.classify(x);
  OracleFlags o;
  o.prediction = out.prediction;
  std::vector<std::vector<double>> err(n, std::vector<double>(c.n_classes));
  std::vector<float> winning(n * img);
  for (std::size_t j = 0; j < c.n_classes; ++j) {
    std::vector<float> masked(out.poses.data().begin(), out.poses.data().end());
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t k = 0; k < c.n_classes; ++k)
        if (k != j) std::fill_n(masked.begin() + long(i * md + k * c.atoms), c.atoms, 0.0f);
    const auto r = net.reconstruct(Tensor::from({n, md}, masked));
    for (std::size_t i = 0; i < n; ++i) {
      double s = 0;
      for (std::size_t p = 0; p < img; ++p) {
        const double d = double(r.data()[i * img + p]) - x.data()[i * img + p];
        s += d * d;
      }
      err[i][j] = std::sqrt(s);
      if (int(j) == o.prediction[i]) std::copy_n(r.data().begin() + long(i * img), img, winning.begin() + long(i * img));
    }
  }
  const auto again = net.predict(Tensor::from(x.shape(), winning));
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < c.n_classes; ++j)
      if (err[i][j] < err[i][best]) best = j;
    o.winning.push_back(err[i][std::size_t(o.prediction[i])]);
    o.lbd.push_back(int(best) != o.prediction[i]);
    o.ccd.push_back(again[i] != o.prediction[i]);
  }
  return o;
}

Line oracle_equivalence(const CapsNet& net, const Dataset& test) {
  const auto t0 = Clock::now();
  const auto idx = first_n(100);
  const auto x = test.batch(idx);
  const auto o = brute_force(net, x);
  const auto verdict_grid = theta_grid(4.0, 0.25);
  std::size_t mismatches = 0, flagged = 0;
  for (double theta : verdict_grid) {
    const auto v = detect_all(x, net, theta);
    for (std::size_t i = 0; i < 100; ++i) {
      const bool g = o.winning[i] > theta;
      const bool ok = v[i].prediction == o.prediction[i] && v[i].gtd_flag == g && v[i].lbd_flag == o.lbd[i] &&
                      v[i].ccd_flag == o.ccd[i] && v[i].combined == (g || o.lbd[i] || o.ccd[i]);
      mismatches += !ok;
      flagged += v[i].combined;
    }
  }
  const double t = since(t0);
  return {"2 detector oracle equivalence", mismatches == 0 && t < 60,
          std::to_string(mismatches) + " mismatches over 100 inputs x " + std::to_string(verdict_grid.size()) +
              " thetas (" + std::to_string(flagged) + " flagged), " + fmt("%.1fs", t)};
}

// --- attack helpers -------------------------------------------------------

struct AttackSet {
  Tensor x;
  std::vector<int> labels, targets;
};

struct Evaluated {
  std::vector<AttackResult> results;
  std::vector<DetectionEvidence> evidence;
  double success = 0;
};

Evaluated evaluate(const CapsNet& net, const AttackSet& s, const AttackConfig& cfg) {
  Evaluated e;
  e.results = run_attack(s.x, s.labels, s.targets, net, cfg);
  e.evidence = gather_evidence(net, stack_adversarial(e.results, net.config()));
  e.success = success_rate(e.results);
  return e;
}

SweepCurve curve_of(const std::vector<DetectionEvidence>& clean, const Evaluated& e, const AttackSet& s,
                    const std::vector<double>& grid, const DetectorSet& d = DetectorSet::all()) {
  return sweep(clean, e.evidence, s.targets, grid, d);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Toy-scale acceptance run"};
  std::size_t samples = 128;
  std::string out;
  double beta = 0.6;
  app.add_option("--samples", samples, "attacked inputs per family");
  app.add_option("--beta", beta, "CC-PGD stage balance");
  app.add_option("--out", out, "directory for curves and checkpoints");
  CLI11_PARSE(app, argc, argv);

  const auto t_all = Clock::now();
  try {
    if (!out.empty()) fs::create_directories(out);
    auto save_curve = [&](const SweepCurve& c, const std::string& name) {
      if (!out.empty()) c.save_csv((fs::path(out) / (name + ".csv")).string());
    };

    report(gradient_integrity());

    // Data and the deflecting model.
    const auto opts = toy_options();
    const Dataset train_set = synth_toy(1, 500, 20, ToySplit::Train, opts);
    const Dataset test_set = synth_toy(1, 100, 20, ToySplit::Test, opts);
    ModelConfig cfg = ModelConfig::toy();
    TrainSchedule sched;
    sched.log_every = 0;
    note("training the deflecting toy model");
    auto t0 = Clock::now();
    const Checkpoint target_ck = train(train_set, cfg, sched);
    const double t_train = since(t0);
    const CapsNet target = target_ck.to_capsnet();
    const double acc = accuracy(target, test_set);
    if (!out.empty()) target_ck.save((fs::path(out) / "target.ckpt").string());

    report(oracle_equivalence(target, test_set));
    report({"3 toy training", acc >= 0.95 && t_train < 600,
            "test accuracy " + fmt("%.4f", acc) + " in " + fmt("%.0fs", t_train) + " (5000 train, 1000 test)"});

    // Attack pool and clean reference.
    const auto clean_idx = first_n(test_set.size());
    const auto clean_evidence = gather_evidence(target, test_set.batch(clean_idx));
    const auto pool = evaluation_indices(target, test_set, samples, 1);
    AttackSet s{test_set.batch(pool), test_set.batch_labels(pool), {}};
    s.targets = choose_targets(s.labels, cfg.n_classes, TargetPolicy::UniformRandom, 1);
    const auto grid = theta_grid(4.0, 0.05);
    note("attacking " + std::to_string(pool.size()) + " inputs");

    // Criterion 4.
    {
      t0 = Clock::now();
      AttackConfig a;
      a.family = AttackFamily::Pgd;
      a.epsilon = 0.5;
      a.iterations = 200;
      const double unbounded = success_rate(run_attack(s.x, s.labels, s.targets, target, a));
      a.epsilon = 16.0 / 255.0;
      a.iterations = 400;
      const auto long_run = run_attack(s.x, s.labels, s.targets, target, a);
      std::size_t at200 = 0;
      for (const auto& r : long_run) at200 += success_after(r, 200);
      const double s200 = rate(at200, long_run.size()), s400 = success_rate(long_run);
      std::string eps_text;
      bool monotone = true;
      double prev = -1;
      a.iterations = 200;
      for (int e : {4, 8, 16, 32, 64, 128}) {
        a.epsilon = e / 255.0;
        const double sr = success_rate(run_attack(s.x, s.labels, s.targets, target, a));
        if (sr < prev - 0.02) monotone = false;
        prev = std::max(prev, sr);
        eps_text += (eps_text.empty() ? "" : " ") + std::to_string(e) + ":" + fmt("%.3f", sr);
      }
      const bool pass = unbounded >= 0.99 && std::abs(s200 - s400) <= 0.02 && monotone;
      report({"4 attack sanity", pass,
              "eps 0.5 success " + fmt("%.3f", unbounded) + "; 200 vs 400 iters " + fmt("%.3f", s200) + " vs " +
                  fmt("%.3f", s400) + "; eps/255 " + eps_text + (monotone ? "" : " (not monotone)") + ", " +
                  fmt("%.0fs", since(t0))});
    }

    // Criteria 5, 6 and 10 share these runs.
    AttackConfig base;
    base.epsilon = 16.0 / 255.0;
    base.beta = beta;
    auto with = [&](AttackFamily f) {
      AttackConfig a = base;
      a.family = f;
      return a;
    };
    t0 = Clock::now();
    const auto pgd_run = evaluate(target, s, with(AttackFamily::Pgd));
    const auto two_run = evaluate(target, s, with(AttackFamily::CcPgd2));
    const auto one_run = evaluate(target, s, with(AttackFamily::CcPgd1));
    const auto pgd_curve = curve_of(clean_evidence, pgd_run, s, grid);
    const auto two_curve = curve_of(clean_evidence, two_run, s, grid);
    const auto one_curve = curve_of(clean_evidence, one_run, s, grid);
    save_curve(pgd_curve, "pgd");
    save_curve(two_curve, "ccpgd2");
    save_curve(one_curve, "ccpgd1");
    const double theta = reference_theta(pgd_curve, 0.05);
    const auto& pgd_ref = pgd_curve.at(theta);
    const auto& two_ref = two_curve.at(theta);
    note("l-inf attacks took " + fmt("%.0fs", since(t0)) + "; reference theta " + fmt("%.2f", theta) +
         " at clean FPR " + fmt("%.3f", pgd_ref.fpr));
    {
      const bool pass = two_run.success <= pgd_run.success && two_ref.undetected_rate >= pgd_ref.undetected_rate;
      report({"5 defense-aware trade-off", pass,
              "success PGD " + fmt("%.3f", pgd_run.success) + " vs CC-PGD " + fmt("%.3f", two_run.success) +
                  "; undetected PGD " + fmt("%.3f", pgd_ref.undetected_rate) + " vs CC-PGD " +
                  fmt("%.3f", two_ref.undetected_rate) + " at theta " + fmt("%.2f", theta)});
    }
    {
      const auto g = curve_of(clean_evidence, pgd_run, s, grid, DetectorSet::gtd_only());
      const auto gl = curve_of(clean_evidence, pgd_run, s, grid, DetectorSet::gtd_lbd());
      save_curve(g, "pgd_gtd");
      save_curve(gl, "pgd_gtd_lbd");
      std::size_t violations = 0;
      for (std::size_t i = 0; i < grid.size(); ++i)
        violations += !(g.points[i].undetected_rate >= gl.points[i].undetected_rate &&
                        gl.points[i].undetected_rate >= pgd_curve.points[i].undetected_rate);
      report({"6 detector ensemble ordering", violations == 0,
              std::to_string(violations) + " violations over " + std::to_string(grid.size()) + " thetas; at theta " +
                  fmt("%.2f", theta) + ": " + fmt("%.3f", g.at(theta).undetected_rate) + " >= " +
                  fmt("%.3f", gl.at(theta).undetected_rate) + " >= " + fmt("%.3f", pgd_ref.undetected_rate)});
    }

    // Criterion 7.
    {
      ModelConfig plain = cfg;
      plain.lambda_cyc = 0.0;
      note("training the lambda_cyc = 0 baseline");
      const CapsNet baseline = train(train_set, plain, sched).to_capsnet();
      const auto base_evidence = gather_evidence(baseline, test_set.batch(clean_idx));
      std::size_t ccd_ours = 0, ccd_base = 0;
      for (const auto& e : clean_evidence) ccd_ours += e.ccd_flag;
      for (const auto& e : base_evidence) ccd_base += e.ccd_flag;
      const double ours = rate(ccd_ours, clean_evidence.size()), theirs = rate(ccd_base, base_evidence.size());
      report({"7 cycle-loss ablation", theirs > 0 && theirs >= 2 * ours,
              "clean CCD FPR lambda_cyc=0 " + fmt("%.4f", theirs) + " vs lambda_cyc=" + fmt("%g", cfg.lambda_cyc) +
                  " " + fmt("%.4f", ours) + " (" + std::to_string(ccd_base) + " vs " + std::to_string(ccd_ours) +
                  " of " + std::to_string(clean_evidence.size()) + ")"});
    }

    // Criterion 8.
    {
      t0 = Clock::now();
      TrainSchedule sub_sched = sched;
      sub_sched.seed = 2;
      note("training the substitute model");
      const CapsNet substitute = train(train_set, cfg, sub_sched).to_capsnet();
      note("substitute accuracy " + fmt("%.4f", accuracy(substitute, test_set)));
      // CW and EAD run on a subset with a shorter inner loop to fit the budget.
      const std::size_t opt_n = std::min<std::size_t>(32, pool.size());
      const auto opt_idx = std::vector<std::size_t>(pool.begin(), pool.begin() + long(opt_n));
      AttackSet small{test_set.batch(opt_idx), test_set.batch_labels(opt_idx),
                      std::vector<int>(s.targets.begin(), s.targets.begin() + long(opt_n))};
      bool pass = true;
      std::string detail;
      for (auto family : {AttackFamily::Pgd, AttackFamily::CcPgd2, AttackFamily::CcPgd1, AttackFamily::Cw,
                          AttackFamily::Ead}) {
        const bool linf = is_linf_family(family);
        const AttackSet& set = linf ? s : small;
        AttackConfig a = with(family);
        a.max_iterations = 200;
        double white = 0;
        double white_undetected = 0;
        if (family == AttackFamily::Pgd) {
          white = pgd_run.success;
        } else if (family == AttackFamily::CcPgd2) {
          white = two_run.success;
          white_undetected = two_ref.undetected_rate;
        } else if (family == AttackFamily::CcPgd1) {
          white = one_run.success;
        } else {
          white = success_rate(run_attack(set.x, set.labels, set.targets, target, a));
        }
        auto crafted = run_attack(set.x, set.labels, set.targets, substitute, a);
        const auto rep = transfer(crafted, substitute, target, theta);
        pass = pass && rep.success_rate < white;
        detail += std::string(detail.empty() ? "" : "; ") + attack_family_name(family) + " " + fmt("%.3f", white) +
                  "->" + fmt("%.3f", rep.success_rate);
        if (family == AttackFamily::CcPgd2) {
          pass = pass && rep.undetected_rate < white_undetected;
          detail += " (undetected " + fmt("%.3f", white_undetected) + "->" + fmt("%.3f", rep.undetected_rate) + ")";
        }
      }
      report({"8 black-box gap", pass, "white->transfer success: " + detail + ", " + fmt("%.0fs", since(t0))});
    }

    // Criterion 9.
    {
      t0 = Clock::now();
      std::vector<std::string> problems;
      const auto tmp = fs::temp_directory_path() / ("capsdefl_acceptance_" + std::to_string(::getpid()));
      fs::create_directories(tmp);
      const Dataset tiny = synth_toy(2, 10, 20, ToySplit::Train, opts);
      TrainSchedule one_epoch = sched;
      one_epoch.epochs = 1;
      train(tiny, cfg, one_epoch).save((tmp / "a.ckpt").string());
      train(tiny, cfg, one_epoch).save((tmp / "b.ckpt").string());
      auto bytes = [](const fs::path& p) {
        std::ifstream in(p, std::ios::binary);
        return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
      };
      if (bytes(tmp / "a.ckpt") != bytes(tmp / "b.ckpt")) problems.push_back("training not reproducible");
      Checkpoint::load((tmp / "a.ckpt").string()).save((tmp / "c.ckpt").string());
      if (bytes(tmp / "a.ckpt") != bytes(tmp / "c.ckpt")) problems.push_back("checkpoint round trip differs");

      const auto exp_cfg = ExperimentConfig::parse(KeyValueConfig::parse(
          "[experiment]\nname = determinism\nsamples = 4\nclean_samples = 30\nattacks = pgd, ccpgd2\n"
          "[data]\nper_class_train = 10\nper_class_test = 3\n[train]\nepochs = 1\n[attack]\niterations = 5\n"
          "[detect]\ntheta_max = 4\ntheta_step = 0.5\n[judge]\nkind = knn\n"));
      run_experiment(exp_cfg, (tmp / "r1").string());
      run_experiment(exp_cfg, (tmp / "r2").string());
      if (bytes(tmp / "r1" / "report.txt") != bytes(tmp / "r2" / "report.txt") || bytes(tmp / "r1" / "report.txt").empty())
        problems.push_back("reports differ");
      if (bytes(tmp / "r1" / "curves" / "pgd.csv") != bytes(tmp / "r2" / "curves" / "pgd.csv"))
        problems.push_back("curve CSVs differ");

      SweepCurve fixture;
      fixture.points = {{0.0, 1.0, 0.0}, {0.4, 0.123456789, 1.0 / 3.0}};
      if (fixture.to_csv() != "theta,fpr,undetected_rate\n0,1,0\n0.4,0.123457,0.333333\n")
        problems.push_back("CSV fixture");
      const std::vector<float> px = {0.0f, 1.0f, 0.5f, 0.2f};
      const auto ppm = ppm_bytes(px, 1, 2, 2);
      if (std::string(ppm.begin(), ppm.end()) != std::string("P5\n2 2\n255\n\x00\xff\x80\x33", 15))
        problems.push_back("PPM fixture");
      fs::remove_all(tmp);
      std::string detail = problems.empty() ? "checkpoints, reports, CSV and PPM byte-identical" : "";
      for (const auto& p : problems) detail += (detail.empty() ? "" : "; ") + p;
      report({"9 determinism and formats", problems.empty(), detail + ", " + fmt("%.0fs", since(t0))});
    }

    // Criterion 10.
    {
      double worst = -1;
      double at = 0;
      for (std::size_t i = 0; i < grid.size(); ++i) {
        const double gap = one_curve.points[i].undetected_rate - two_curve.points[i].undetected_rate;
        if (gap > worst) {
          worst = gap;
          at = grid[i];
        }
      }
      report({"10 two-stage vs one-stage", worst <= 0.02,
              "largest one-stage lead " + fmt("%.3f", worst) + " at theta " + fmt("%.2f", at) +
                  " (tolerance 0.02); at reference theta two " + fmt("%.3f", two_ref.undetected_rate) + ", one " +
                  fmt("%.3f", one_curve.at(theta).undetected_rate) + "; success two " + fmt("%.3f", two_run.success) +
                  ", one " + fmt("%.3f", one_run.success)});
    }

    // Supplementary: memorization and deflection proxy.
    {
      const auto idx = first_n(1000);
      const auto train_pred = target.predict(train_set.batch(idx));
      std::size_t ok = 0;
      for (std::size_t i = 0; i < idx.size(); ++i) ok += train_pred[i] == train_set.labels[i];
      report({"memorized training samples", rate(ok, idx.size()) >= 0.99,
              fmt("%.4f", rate(ok, idx.size())) + " of 1000 training samples predicted correctly", false});
    }
    {
      t0 = Clock::now();
      note("training the baseline CNN for the deflection comparison");
      const auto cnn_ck = train_baseline(train_set, cfg, sched);
      const auto cnn = cnn_ck.to_model();
      const KnnJudge judge(train_set, 5);
      const Judge j = [&](const Tensor& x) { return judge(x); };
      const auto cnn_pool = evaluation_indices(*cnn, test_set, samples, 1);
      const auto cnn_x = test_set.batch(cnn_pool);
      const std::vector<int> cnn_labels = test_set.batch_labels(cnn_pool);
      const auto cnn_targets = choose_targets(cnn_labels, cfg.n_classes, TargetPolicy::UniformRandom, 1);
      auto show = [](const std::optional<double>& v) { return v ? fmt("%.3f", *v) : std::string("undefined"); };
      // The capsule side uses the defense-aware attack (it equals PGD on a
      // model without detectors). At 16/255 the glyphs barely change for
      // either model, so the comparison is decided at 64/255.
      std::string detail;
      bool pass = false;
      for (int e : {16, 64}) {
        AttackConfig caps_cfg = with(AttackFamily::CcPgd2), cnn_cfg = with(AttackFamily::Pgd);
        caps_cfg.epsilon = cnn_cfg.epsilon = e / 255.0;
        auto caps_results = e == 16 ? two_run.results : run_attack(s.x, s.labels, s.targets, target, caps_cfg);
        attach_verdicts(caps_results, target, theta);
        const auto cnn_results = run_attack(cnn_x, cnn_labels, cnn_targets, *cnn, cnn_cfg);
        const auto caps_proxy = deflection_proxy(caps_results, j, cfg);
        const auto cnn_proxy = deflection_proxy(cnn_results, j, cfg);
        if (e == 64) pass = caps_proxy && cnn_proxy && *caps_proxy > *cnn_proxy;
        detail += "eps " + std::to_string(e) + "/255: capsule " + show(caps_proxy) + " vs CNN " + show(cnn_proxy) + "; ";
      }
      report({"deflection proxy (capsule > CNN)", pass,
              "share of undetected successes the kNN judge labels as the target, " + detail + "CNN accuracy " +
                  fmt("%.4f", accuracy(*cnn, test_set)) + ", " + fmt("%.0fs", since(t0)),
              false});
    }
  } catch (const std::exception& e) {
    std::printf("acceptance run aborted: %s\n", e.what());
    return 2;
  }

  std::size_t failed = 0, counted = 0;
  for (const auto& l : lines) {
    if (!l.counted) continue;
    ++counted;
    failed += !l.pass;
  }
  std::printf("\n%zu of %zu criteria passed in %.0fs\n", counted - failed, counted, since(t_all));
  return failed == 0 ? 0 : 1;
}
