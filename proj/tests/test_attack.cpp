#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <random>

#include "capsdefl/attack.hpp"
#include "capsdefl/checkpoint.hpp"
#include "capsdefl/cnn.hpp"
#include "capsdefl/error.hpp"
#include "capsdefl/gradcheck.hpp"
#include "capsdefl/train.hpp"
#include "test_util.hpp"

using namespace capsdefl;

namespace {

constexpr std::uint64_t kSeeds[] = {1, 2, 3, 4, 5};

const CapsNet& model() {
  static const CapsNet net = [] {
    TrainSchedule s;
    s.epochs = 1;
    s.batch_size = 16;
    s.log_every = 0;
    return train(synth_toy(3, 30, 20), ModelConfig::toy(), s).to_capsnet();
  }();
  return net;
}

struct Inputs {
  Tensor x;
  std::vector<int> labels, targets;
};

Inputs inputs(std::size_t n, std::uint64_t seed = 6) {
  const auto test = synth_toy(seed, 1, 20, ToySplit::Test);
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i % test.size();
  Inputs in{test.batch(idx), test.batch_labels(idx), {}};
  in.targets = choose_targets(in.labels, 10, TargetPolicy::UniformRandom, seed);
  return in;
}

AttackConfig short_linf(AttackFamily family) {
  AttackConfig c;
  c.family = family;
  c.iterations = 12;
  c.step_size = 0.01;
  c.epsilon = 16.0 / 255.0;
  c.beta = 0.75;
  return c;
}

double linf_distance(std::span<const float> a, std::span<const float> b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(double(a[i]) - b[i]));
  return m;
}

}  // namespace

TEST_CASE("l-infinity families stay inside the ball and the pixel range") {
  const auto in = inputs(6);
  for (auto family : {AttackFamily::Pgd, AttackFamily::CcPgd2, AttackFamily::CcPgd1}) {
    for (bool random_start : {false, true}) {
      auto cfg = short_linf(family);
      cfg.random_start = random_start;
      const auto res = run_attack(in.x, in.labels, in.targets, model(), cfg);
      REQUIRE(res.size() == 6);
      const std::size_t img = model().config().image_size();
      for (std::size_t i = 0; i < res.size(); ++i) {
        const auto x0 = in.x.data().subspan(i * img, img);
        CHECK(linf_distance(res[i].adversarial, x0) <= cfg.epsilon + 1e-6);
        CHECK(res[i].linf == doctest::Approx(linf_distance(res[i].adversarial, x0)));
        CHECK(std::all_of(res[i].adversarial.begin(), res[i].adversarial.end(),
                          [](float v) { return v >= 0.0f && v <= 1.0f; }));
        CHECK(res[i].trace.size() == cfg.iterations + 1);
      }
    }
  }
}

TEST_CASE("success flags equal an independent prediction of the adversarial image") {
  const auto in = inputs(8);
  for (auto family : {AttackFamily::Pgd, AttackFamily::CcPgd2}) {
    const auto res = run_attack(in.x, in.labels, in.targets, model(), short_linf(family));
    const auto pred = model().predict(stack_adversarial(res, model().config()));
    for (std::size_t i = 0; i < res.size(); ++i) {
      CHECK(res[i].prediction == pred[i]);
      CHECK(res[i].success == (pred[i] == in.targets[i]));
      CHECK(res[i].label == in.labels[i]);
      CHECK(res[i].target == in.targets[i]);
      CHECK(success_after(res[i], 1000) == res[i].success);
    }
  }
}

TEST_CASE("degenerate stage weighting reproduces plain pgd exactly") {
  const auto in = inputs(5);
  auto cfg = short_linf(AttackFamily::Pgd);
  const auto base = run_attack(in.x, in.labels, in.targets, model(), cfg);
  cfg.beta = 1.0;
  const auto two = ccpgd_two_stage(in.x, in.labels, in.targets, model(), cfg);
  cfg.alpha1 = cfg.alpha2 = cfg.alpha3 = 0.0;
  const auto one = ccpgd_one_stage(in.x, in.labels, in.targets, model(), cfg);
  for (std::size_t i = 0; i < base.size(); ++i) {
    CHECK(two[i].adversarial == base[i].adversarial);
    CHECK(one[i].adversarial == base[i].adversarial);
    REQUIRE(two[i].trace.size() == base[i].trace.size());
    for (std::size_t t = 0; t < base[i].trace.size(); ++t) {
      CHECK(two[i].trace[t].ce == base[i].trace[t].ce);
      CHECK(two[i].trace[t].prediction == base[i].trace[t].prediction);
    }
  }
}

TEST_CASE("attacks are deterministic") {
  const auto in = inputs(4);
  for (auto family : {AttackFamily::Pgd, AttackFamily::CcPgd2, AttackFamily::CcPgd1}) {
    auto cfg = short_linf(family);
    cfg.random_start = true;
    const auto a = run_attack(in.x, in.labels, in.targets, model(), cfg);
    const auto b = run_attack(in.x, in.labels, in.targets, model(), cfg);
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i].adversarial == b[i].adversarial);
  }
}

TEST_CASE("a constant model leaves the perturbation at zero") {
  auto cnn = BaselineCnn::initialized(ModelConfig::toy(), 1);
  for (auto& t : cnn.parameters().tensors()) {
    auto d = t.mutable_data();
    std::fill(d.begin(), d.end(), 0.0f);
  }
  const auto in = inputs(3);
  const auto res = pgd(in.x, in.labels, in.targets, cnn, short_linf(AttackFamily::Pgd));
  const std::size_t img = cnn.config().image_size();
  for (std::size_t i = 0; i < res.size(); ++i) {
    const auto x0 = in.x.data().subspan(i * img, img);
    CHECK(std::equal(res[i].adversarial.begin(), res[i].adversarial.end(), x0.begin()));
  }
}

TEST_CASE("bad requests are usage errors") {
  auto in = inputs(2);
  in.targets[1] = in.labels[1];
  CHECK_THROWS_AS(pgd(in.x, in.labels, in.targets, model(), short_linf(AttackFamily::Pgd)), UsageError);
  auto ok = inputs(2);
  const auto cnn = BaselineCnn::initialized(ModelConfig::toy(), 1);
  CHECK_THROWS_AS(ccpgd_two_stage(ok.x, ok.labels, ok.targets, cnn, short_linf(AttackFamily::CcPgd2)),
                  UsageError);
  CHECK_NOTHROW(pgd(ok.x, ok.labels, ok.targets, cnn, short_linf(AttackFamily::Pgd)));
}

TEST_CASE("detector-evasion loss: weighted sum of its components") {
  CHECK(combine_recon_terms({2.0, 0.0, 0.1}, 1, 0, 20) == doctest::Approx(4.0));
  CHECK(combine_recon_terms({2.0, 3.0, 0.1}, 1, 0.5, 20) == doctest::Approx(2.5));
  const auto in = inputs(4);
  std::vector<ReconLossTerms> terms;
  const auto& c = model().config();
  const auto total = recon_attack_loss(c, model().parameters(), in.x, 1.0, 0.5, 20.0, &terms);
  REQUIRE(terms.size() == 4);
  double sum = 0;
  for (const auto& t : terms) {
    CHECK(t.winning >= 0);
    CHECK(t.losing >= 0);
    CHECK(t.cycle >= 0);
    sum += combine_recon_terms(t, 1.0, 0.5, 20.0);
  }
  CHECK(total.item() == doctest::Approx(sum).epsilon(1e-4));
  // Winning term is the GTD distance.
  const auto ev = gather_evidence(model(), in.x);
  for (std::size_t i = 0; i < 4; ++i) CHECK(terms[i].winning == doctest::Approx(ev[i].winning_error).epsilon(1e-4));
}

TEST_CASE("detector-evasion loss gradient matches finite differences") {
  const ModelConfig c = ModelConfig::toy();
  for (auto seed : kSeeds) {
    const auto params = CapsNet::initialized(c, seed).parameters().cast<double>();
    std::mt19937_64 rng(seed + 90);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<double> data(2 * c.image_size());
    for (auto& v : data) v = u(rng);
    const auto x = Tensor64::from({2, 1, 20, 20}, data);
    const auto r = grad_check_at(
        [&](const std::vector<Tensor64>& v) { return recon_attack_loss(c, params, v[0], 1.0, 0.5, 20.0); },
        {x}, seed);
    CHECK(r.max_rel_error < 1e-2);
    CHECK(r.checked >= 24);
  }
}

TEST_CASE("target selection") {
  std::vector<int> labels;
  for (int i = 0; i < 2000; ++i) labels.push_back(i % 10);
  const auto t = choose_targets(labels, 10, TargetPolicy::UniformRandom, 4);
  CHECK(t == choose_targets(labels, 10, TargetPolicy::UniformRandom, 4));
  CHECK(t != choose_targets(labels, 10, TargetPolicy::UniformRandom, 5));
  std::map<int, int> offsets;
  for (std::size_t i = 0; i < t.size(); ++i) {
    CHECK(t[i] != labels[i]);
    CHECK(t[i] >= 0);
    CHECK(t[i] < 10);
    ++offsets[(t[i] - labels[i] + 10) % 10];
  }
  // Nine offsets, each near 2000 / 9.
  CHECK(offsets.size() == 9);
  for (const auto& [off, count] : offsets) CHECK(std::abs(count - 222) < 60);
  const auto next = choose_targets(labels, 10, TargetPolicy::Next, 1);
  for (std::size_t i = 0; i < next.size(); ++i) CHECK(next[i] == (labels[i] + 1) % 10);
  CHECK_THROWS_AS(choose_targets(labels, 1, TargetPolicy::Next, 1), UsageError);
}

TEST_CASE("soft threshold") {
  std::vector<float> z = {0.50f, 0.52f, 0.40f, 0.95f, 0.02f, 0.5f};
  const std::vector<float> x0 = {0.5f, 0.5f, 0.5f, 0.5f, 0.5f, 0.48f};
  soft_threshold(z, x0, 0.05f);
  CHECK(z[0] == 0.5f);  // |d| = 0
  CHECK(z[1] == 0.5f);  // |d| <= beta snaps to x0
  CHECK(z[2] == doctest::Approx(0.45f));
  CHECK(z[3] == doctest::Approx(0.90f));
  CHECK(z[4] == doctest::Approx(0.07f));
  CHECK(z[5] == 0.48f);
  std::vector<float> w = {1.3f, -0.2f, 0.7f};
  const std::vector<float> w0 = {0.9f, 0.1f, 0.7f};
  soft_threshold(w, w0, 0.0f);  // beta 0: clipping only
  CHECK(w == std::vector<float>{1.0f, 0.0f, 0.7f});
}

TEST_CASE("cw and ead return images in range and stop short on an easy target") {
  const auto in = inputs(3);
  // Aim at the current prediction: no distortion is needed.
  const auto pred = model().predict(in.x);
  std::vector<int> labels;
  for (int p : pred) labels.push_back((p + 1) % 10);
  for (auto family : {AttackFamily::Cw, AttackFamily::Ead}) {
    AttackConfig cfg;
    cfg.family = family;
    cfg.binary_search_steps = 2;
    cfg.max_iterations = 20;
    const auto res = run_attack(in.x, labels, pred, model(), cfg);
    for (const auto& r : res) {
      CHECK(r.success);
      CHECK(r.l2 < 0.05);
      CHECK(std::all_of(r.adversarial.begin(), r.adversarial.end(), [](float v) { return v >= 0.0f && v <= 1.0f; }));
    }
  }
}

TEST_CASE("transfer between identical models equals the white-box outcome") {
  const auto in = inputs(6);
  auto res = run_attack(in.x, in.labels, in.targets, model(), short_linf(AttackFamily::Pgd));
  attach_verdicts(res, model(), 1.5);
  const auto rep = transfer(res, model(), model(), 1.5);
  std::size_t ok = 0, undetected = 0;
  for (std::size_t i = 0; i < res.size(); ++i) {
    CHECK(rep.success[i] == res[i].success);
    CHECK(rep.verdicts[i].combined == res[i].verdict->combined);
    ok += res[i].success;
    undetected += res[i].success && !res[i].verdict->combined;
  }
  CHECK(rep.success_rate == double(ok) / 6.0);
  CHECK(rep.undetected_rate == double(undetected) / 6.0);
  const auto cnn = BaselineCnn::initialized(ModelConfig::toy(), 1);
  CHECK_THROWS_AS(transfer(res, cnn, model(), 1.5), UsageError);
}

TEST_CASE("attack directory round-trips and its CSV is byte-exact") {
  testutil::TempDir dir("attackdir");
  std::vector<AttackResult> res(2);
  res[0].adversarial = {0.0f, 0.25f, 1.0f, 0.5f};
  res[0].label = 3;
  res[0].target = 7;
  res[0].success = true;
  res[0].linf = 0.0627451;
  res[0].l2 = 1.0 / 3.0;
  res[0].l1 = 2.5;
  res[1].adversarial = {0.125f, 0.75f, 0.0f, 1.0f};
  res[1].label = 0;
  res[1].target = 9;
  DetectionVerdict v;
  v.gtd_flag = true;
  v.combined = true;
  res[1].verdict = v;
  write_attack_dir(dir.file("a"), res);
  CHECK(testutil::read_text(dir.file("a/attack_meta.csv")) ==
        "index,true_label,target,success,linf,l2,l1,gtd,lbd,ccd,combined\n"
        "0,3,7,1,0.0627451,0.333333,2.5,,,,\n"
        "1,0,9,0,0,0,0,1,0,0,1\n");
  CHECK(testutil::read_bytes(dir.file("a/adv_000001.bin")) ==
        std::vector<std::uint8_t>{0x00, 0x00, 0x00, 0x3e, 0x00, 0x00, 0x40, 0x3f, 0x00, 0x00, 0x00, 0x00,
                                  0x00, 0x00, 0x80, 0x3f});
  const auto back = read_attack_dir(dir.file("a"), 4);
  REQUIRE(back.size() == 2);
  CHECK(back[0].adversarial == res[0].adversarial);
  CHECK(back[1].adversarial == res[1].adversarial);
  CHECK(back[0].success);
  CHECK_FALSE(back[0].combined);
  CHECK(back[1].gtd);
  CHECK(back[1].combined);
  CHECK(back[0].target == 7);
  CHECK_THROWS_AS(read_attack_dir(dir.file("missing"), 4), UsageError);
  CHECK_THROWS_AS(read_attack_dir(dir.file("a"), 5), FormatError);
}

TEST_CASE("attack config validation and names") {
  AttackConfig c;
  CHECK_NOTHROW(c.validate());
  c.beta = 1.5;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = AttackConfig{};
  c.epsilon = -1;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  for (auto f : {AttackFamily::Pgd, AttackFamily::CcPgd2, AttackFamily::CcPgd1, AttackFamily::Cw, AttackFamily::Ead})
    CHECK(parse_attack_family(attack_family_name(f)) == f);
  CHECK_THROWS_AS(parse_attack_family("fgsm"), ConfigError);
  CHECK(is_linf_family(AttackFamily::CcPgd1));
  CHECK_FALSE(is_linf_family(AttackFamily::Ead));
}
