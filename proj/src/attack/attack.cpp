#include "capsdefl/attack.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

#include "capsdefl/adam.hpp"
#include "capsdefl/error.hpp"
#include "capsdefl/graph.hpp"
#include "capsdefl/ops.hpp"

namespace capsdefl {
namespace {

struct Batch {
  std::size_t n = 0, img = 0;
  Shape shape;
  std::vector<float> x;
};

Batch check_batch(const Tensor& x, std::span<const int> labels, std::span<const int> targets,
                  const Classifier& model) {
  const ModelConfig& c = model.config();
  if (x.rank() != 4 || x.dim(1) != c.channels || x.dim(2) != c.height || x.dim(3) != c.width) {
    throw UsageError("attack input " + shape_str(x.shape()) + " does not match the model");
  }
  const std::size_t n = x.dim(0);
  if (labels.size() != n || targets.size() != n) {
    throw UsageError("attack: need one label and one target per input");
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= c.n_classes)
      throw UsageError("attack: target " + std::to_string(targets[i]) + " out of range");
    if (targets[i] == labels[i])
      throw UsageError("attack: target equals the true label for input " + std::to_string(i));
  }
  return {n, c.image_size(), x.shape(), std::vector<float>(x.data().begin(), x.data().end())};
}

std::vector<double> row_cross_entropy(const Tensor& logits, std::span<const int> targets) {
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  std::vector<double> out(n);
  for (std::size_t b = 0; b < n; ++b) {
    const float* z = logits.data().data() + b * k;
    const double mx = *std::max_element(z, z + k);
    double s = 0;
    for (std::size_t j = 0; j < k; ++j) s += std::exp(static_cast<double>(z[j]) - mx);
    out[b] = mx + std::log(s) - static_cast<double>(z[targets[b]]);
  }
  return out;
}

// Gradient of the summed targeted cross-entropy at xp; also reports the
// per-row loss and prediction of this forward pass.
std::vector<float> ce_gradient(const Classifier& model, const Batch& b, const std::vector<float>& xp,
                               std::span<const int> targets, std::vector<double>& ce,
                               std::vector<int>& pred) {
  Tensor leaf = Tensor::from(b.shape, xp, true);
  const Tensor logits = model.logits(leaf);
  ce = row_cross_entropy(logits, targets);
  pred = argmax_rows(logits);
  backward(softmax_cross_entropy(logits, targets, Reduction::Sum));
  return std::vector<float>(leaf.grad().begin(), leaf.grad().end());
}

std::vector<float> recon_gradient(const CapsNet& model, const Batch& b, const std::vector<float>& xp,
                                  const AttackConfig& cfg, std::vector<ReconLossTerms>& terms) {
  Tensor leaf = Tensor::from(b.shape, xp, true);
  backward(recon_attack_loss(model.config(), model.parameters(), leaf, cfg.alpha1, cfg.alpha2,
                             cfg.alpha3, &terms));
  return std::vector<float>(leaf.grad().begin(), leaf.grad().end());
}

void signed_step(std::vector<float>& xp, const std::vector<float>& x, const std::vector<float>& g,
                 double step, double eps) {
  const float s = static_cast<float>(step), e = static_cast<float>(eps);
  for (std::size_t i = 0; i < xp.size(); ++i) {
    const float dir = g[i] > 0 ? 1.0f : (g[i] < 0 ? -1.0f : 0.0f);
    float v = xp[i] - s * dir;
    v = std::clamp(v, x[i] - e, x[i] + e);
    xp[i] = std::clamp(v, 0.0f, 1.0f);
  }
}

void check_linf(const std::vector<float>& xp, const std::vector<float>& x, double eps, std::size_t it) {
  for (std::size_t i = 0; i < xp.size(); ++i) {
    if (std::abs(static_cast<double>(xp[i]) - x[i]) > eps + 1e-6 || xp[i] < 0.0f || xp[i] > 1.0f) {
      throw RuntimeFailure("attack left the l-infinity ball or pixel range at iteration " +
                           std::to_string(it));
    }
  }
}

void fill_distortion(AttackResult& r, std::span<const float> x) {
  r.linf = r.l2 = r.l1 = 0;
  double sq = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double d = std::abs(static_cast<double>(r.adversarial[i]) - x[i]);
    r.linf = std::max(r.linf, d);
    r.l1 += d;
    sq += d * d;
  }
  r.l2 = std::sqrt(sq);
}

std::vector<AttackResult> make_results(const Batch& b, std::span<const int> labels,
                                       std::span<const int> targets) {
  std::vector<AttackResult> out(b.n);
  for (std::size_t i = 0; i < b.n; ++i) {
    out[i].label = labels[i];
    out[i].target = targets[i];
  }
  return out;
}

void finish(std::vector<AttackResult>& results, const Batch& b, const std::vector<float>& xp,
            const std::vector<int>& pred) {
  for (std::size_t i = 0; i < b.n; ++i) {
    auto& r = results[i];
    r.adversarial.assign(xp.begin() + static_cast<std::ptrdiff_t>(i * b.img),
                         xp.begin() + static_cast<std::ptrdiff_t>((i + 1) * b.img));
    r.prediction = pred[i];
    r.success = pred[i] == r.target;
    fill_distortion(r, std::span<const float>(b.x).subspan(i * b.img, b.img));
  }
}

enum class LinfMode { Pgd, TwoStage, OneStage };

std::vector<AttackResult> run_linf(const Tensor& x, std::span<const int> labels,
                                   std::span<const int> targets, const Classifier& model,
                                   const AttackConfig& cfg, LinfMode mode) {
  cfg.validate();
  const Batch b = check_batch(x, labels, targets, model);
  const CapsNet* caps = mode == LinfMode::Pgd ? nullptr : &require_capsnet(model);
  auto results = make_results(b, labels, targets);

  std::vector<float> xp = b.x;
  if (cfg.random_start) {
    std::mt19937_64 rng(cfg.seed);
    std::uniform_real_distribution<double> u(-cfg.epsilon, cfg.epsilon);
    for (std::size_t i = 0; i < xp.size(); ++i)
      xp[i] = std::clamp(static_cast<float>(b.x[i] + u(rng)), 0.0f, 1.0f);
  }

  const double stage1 = mode == LinfMode::TwoStage ? cfg.beta * cfg.step_size : cfg.step_size;
  const double stage2 = (1.0 - cfg.beta) * cfg.step_size;
  const bool use_recon = mode != LinfMode::Pgd && stage2 > 0;
  std::vector<double> ce;
  std::vector<int> pred;
  std::vector<ReconLossTerms> terms;

  for (std::size_t it = 0; it < cfg.iterations; ++it) {
    if (mode == LinfMode::OneStage && use_recon) {
      Tensor leaf = Tensor::from(b.shape, xp, true);
      const Tensor logits = model.logits(leaf);
      ce = row_cross_entropy(logits, targets);
      pred = argmax_rows(logits);
      const Tensor lr = recon_attack_loss(caps->config(), caps->parameters(), leaf, cfg.alpha1,
                                          cfg.alpha2, cfg.alpha3, &terms);
      const Tensor ce_sum = softmax_cross_entropy(logits, targets, Reduction::Sum);
      backward(add(scale(ce_sum, static_cast<float>(cfg.beta)), scale(lr, static_cast<float>(1.0 - cfg.beta))));
      const std::vector<float> g(leaf.grad().begin(), leaf.grad().end());
      for (std::size_t i = 0; i < b.n; ++i)
        results[i].trace.push_back(
            {ce[i], combine_recon_terms(terms[i], cfg.alpha1, cfg.alpha2, cfg.alpha3), pred[i]});
      signed_step(xp, b.x, g, cfg.step_size, cfg.epsilon);
      check_linf(xp, b.x, cfg.epsilon, it);
      continue;
    }

    const auto g1 = ce_gradient(model, b, xp, targets, ce, pred);
    signed_step(xp, b.x, g1, stage1, cfg.epsilon);
    check_linf(xp, b.x, cfg.epsilon, it);
    std::optional<std::vector<float>> g2;
    if (mode == LinfMode::TwoStage && use_recon) {
      g2 = recon_gradient(*caps, b, xp, cfg, terms);
      signed_step(xp, b.x, *g2, stage2, cfg.epsilon);
      check_linf(xp, b.x, cfg.epsilon, it);
    }
    for (std::size_t i = 0; i < b.n; ++i) {
      TraceStep t{ce[i], std::nullopt, pred[i]};
      if (g2) t.recon = combine_recon_terms(terms[i], cfg.alpha1, cfg.alpha2, cfg.alpha3);
      results[i].trace.push_back(t);
    }
  }

  const Tensor logits = model.logits(Tensor::from(b.shape, xp));
  ce = row_cross_entropy(logits, targets);
  pred = argmax_rows(logits);
  for (std::size_t i = 0; i < b.n; ++i) results[i].trace.push_back({ce[i], std::nullopt, pred[i]});
  finish(results, b, xp, pred);
  return results;
}

// Shared CW / EAD driver. `ead` selects the elastic-net variant.
std::vector<AttackResult> run_optimization(const Tensor& x, std::span<const int> labels,
                                           std::span<const int> targets, const Classifier& model,
                                           const AttackConfig& cfg, bool ead) {
  cfg.validate();
  const Batch b = check_batch(x, labels, targets, model);
  auto results = make_results(b, labels, targets);
  const float kappa = static_cast<float>(cfg.confidence);
  const Tensor x_const = Tensor::from(b.shape, b.x);

  std::vector<double> cst(b.n, cfg.initial_const), lower(b.n, 0.0), upper(b.n, 1e10);
  std::vector<double> best_dist(b.n, std::numeric_limits<double>::infinity());
  std::vector<double> best_fail(b.n, std::numeric_limits<double>::infinity());
  std::vector<float> best = b.x;
  std::vector<char> best_is_success(b.n, 0);

  // Records xp for sample i if it is the best seen so far.
  auto consider = [&](std::size_t i, const float* xp, bool success, double hinge) {
    double dist = 0;
    for (std::size_t p = 0; p < b.img; ++p) {
      const double d = static_cast<double>(xp[p]) - b.x[i * b.img + p];
      dist += ead ? std::abs(d) : d * d;
    }
    bool take = false;
    if (success) {
      take = !best_is_success[i] || dist < best_dist[i];
    } else if (!best_is_success[i] && hinge < best_fail[i]) {
      best_fail[i] = hinge;
      take = true;
    }
    if (!take) return;
    if (success) {
      best_dist[i] = dist;
      best_is_success[i] = 1;
    }
    std::copy(xp, xp + b.img, best.begin() + static_cast<std::ptrdiff_t>(i * b.img));
  };

  auto loss_at = [&](Tensor& leaf, std::vector<int>& pred, std::vector<float>& hinge) {
    const Tensor scores = model.scores(leaf);
    pred = argmax_rows(scores);
    const Tensor h = target_margin(scores, targets, kappa);
    hinge.assign(h.data().begin(), h.data().end());
    std::vector<float> w(cst.begin(), cst.end());
    return add(squared_error(leaf, x_const), weighted_sum(h, std::span<const float>(w)));
  };

  std::vector<float> w0(b.x.size());
  for (std::size_t i = 0; i < w0.size(); ++i)
    w0[i] = std::atanh((2.0f * b.x[i] - 1.0f) * 0.999999f);

  std::vector<int> pred;
  std::vector<float> hinge;
  for (std::size_t step = 0; step < cfg.binary_search_steps; ++step) {
    std::vector<char> found(b.n, 0);
    std::vector<float> xp(b.x.size());
    if (!ead) {
      Tensor w = Tensor::from(b.shape, w0);
      std::vector<Tensor> vars{w};
      AdamState adam;
      adam.learning_rate = cfg.learning_rate;
      for (std::size_t it = 0; it < cfg.max_iterations; ++it) {
        const auto wd = w.data();
        for (std::size_t i = 0; i < xp.size(); ++i) xp[i] = (std::tanh(wd[i]) + 1.0f) * 0.5f;
        Tensor leaf = Tensor::from(b.shape, xp, true);
        backward(loss_at(leaf, pred, hinge));
        for (std::size_t i = 0; i < b.n; ++i) {
          const bool ok = pred[i] == targets[i];
          found[i] |= ok;
          consider(i, xp.data() + i * b.img, ok, hinge[i]);
        }
        const auto g = leaf.grad();
        auto& wg = w.node()->grad;
        wg.resize(g.size());
        for (std::size_t i = 0; i < g.size(); ++i) wg[i] = g[i] * (1.0f - (2.0f * xp[i] - 1.0f) * (2.0f * xp[i] - 1.0f)) * 0.5f;
        adam_step(vars, adam);
      }
    } else {
      std::vector<float> xk = b.x, y = b.x, z(b.x.size());
      for (std::size_t it = 0; it < cfg.max_iterations; ++it) {
        Tensor leaf = Tensor::from(b.shape, y, true);
        backward(loss_at(leaf, pred, hinge));
        const auto g = leaf.grad();
        const double lr = cfg.learning_rate *
                          std::sqrt(1.0 - static_cast<double>(it) / static_cast<double>(cfg.max_iterations));
        for (std::size_t i = 0; i < z.size(); ++i) z[i] = y[i] - static_cast<float>(lr) * g[i];
        soft_threshold(z, b.x, static_cast<float>(cfg.ead_beta));
        const float momentum = static_cast<float>(it) / static_cast<float>(it + 3);
        for (std::size_t i = 0; i < z.size(); ++i) {
          y[i] = z[i] + momentum * (z[i] - xk[i]);
          xk[i] = z[i];
        }
        Tensor probe = Tensor::from(b.shape, xk);
        const Tensor scores = model.scores(probe);
        const auto p = argmax_rows(scores);
        const Tensor h = target_margin(scores, targets, kappa);
        for (std::size_t i = 0; i < b.n; ++i) {
          const bool ok = p[i] == targets[i];
          found[i] |= ok;
          consider(i, xk.data() + i * b.img, ok, h.data()[i]);
        }
      }
      xp = xk;
    }

    const Tensor logits = model.logits(Tensor::from(b.shape, xp));
    const auto ce = row_cross_entropy(logits, targets);
    const auto last = argmax_rows(logits);
    for (std::size_t i = 0; i < b.n; ++i) {
      results[i].trace.push_back({ce[i], std::nullopt, last[i]});
      if (found[i]) {
        upper[i] = std::min(upper[i], cst[i]);
        if (upper[i] < 1e9) cst[i] = (lower[i] + upper[i]) / 2;
      } else {
        lower[i] = std::max(lower[i], cst[i]);
        cst[i] = upper[i] < 1e9 ? (lower[i] + upper[i]) / 2 : cst[i] * 10;
      }
    }
  }

  const auto final_pred = model.predict(Tensor::from(b.shape, best));
  finish(results, b, best, final_pred);
  return results;
}

}  // namespace

const char* attack_family_name(AttackFamily f) {
  switch (f) {
    case AttackFamily::Pgd: return "pgd";
    case AttackFamily::CcPgd2: return "ccpgd2";
    case AttackFamily::CcPgd1: return "ccpgd1";
    case AttackFamily::Cw: return "cw";
    case AttackFamily::Ead: return "ead";
  }
  return "?";
}

AttackFamily parse_attack_family(const std::string& text) {
  for (auto f : {AttackFamily::Pgd, AttackFamily::CcPgd2, AttackFamily::CcPgd1, AttackFamily::Cw,
                 AttackFamily::Ead})
    if (text == attack_family_name(f)) return f;
  throw ConfigError("unknown attack family `" + text + "` (pgd, ccpgd2, ccpgd1, cw, ead)");
}

const char* target_policy_name(TargetPolicy p) {
  return p == TargetPolicy::UniformRandom ? "uniform" : "next";
}

TargetPolicy parse_target_policy(const std::string& text) {
  if (text == "uniform") return TargetPolicy::UniformRandom;
  if (text == "next") return TargetPolicy::Next;
  throw ConfigError("unknown target policy `" + text + "` (uniform, next)");
}

bool is_linf_family(AttackFamily f) {
  return f == AttackFamily::Pgd || f == AttackFamily::CcPgd2 || f == AttackFamily::CcPgd1;
}

void AttackConfig::validate() const {
  if (!(epsilon > 0 && epsilon <= 1)) throw ConfigError("attack.epsilon must lie in (0, 1]");
  if (!(step_size > 0)) throw ConfigError("attack.step_size must be positive");
  if (!(beta >= 0 && beta <= 1)) throw ConfigError("attack.beta must lie in [0, 1]");
  if (!(alpha1 >= 0 && alpha2 >= 0 && alpha3 >= 0)) throw ConfigError("attack.alpha1..3 must be non-negative");
  if (binary_search_steps == 0 || max_iterations == 0)
    throw ConfigError("attack.binary_search_steps and attack.max_iterations must be positive");
  if (!(learning_rate > 0) || !(initial_const > 0))
    throw ConfigError("attack.learning_rate and attack.initial_const must be positive");
  if (!(confidence >= 0) || !(ead_beta >= 0))
    throw ConfigError("attack.confidence and attack.ead_beta must be non-negative");
}

void AttackConfig::write(KeyValueWriter& out) const {
  out.put("family", std::string(attack_family_name(family)));
  out.put("epsilon", epsilon);
  out.put("step_size", step_size);
  out.put("iterations", iterations);
  out.put("alpha1", alpha1);
  out.put("alpha2", alpha2);
  out.put("alpha3", alpha3);
  out.put("beta", beta);
  out.put("target_policy", std::string(target_policy_name(target_policy)));
  out.put("seed", static_cast<long long>(seed));
  out.put("random_start", std::string(random_start ? "true" : "false"));
  out.put("binary_search_steps", binary_search_steps);
  out.put("max_iterations", max_iterations);
  out.put("learning_rate", learning_rate);
  out.put("initial_const", initial_const);
  out.put("confidence", confidence);
  out.put("ead_beta", ead_beta);
}

AttackConfig AttackConfig::read(const KeyValueConfig& in, const AttackConfig& base, const std::string& s) {
  AttackConfig c = base;
  auto count = [&](const char* key, std::size_t fallback) {
    const long long v = in.get_int(s, key, static_cast<long long>(fallback));
    if (v < 0) throw ConfigError(s + "." + key + " must be non-negative");
    return static_cast<std::size_t>(v);
  };
  c.family = parse_attack_family(in.get_string(s, "family", attack_family_name(c.family)));
  c.epsilon = in.get_double(s, "epsilon", c.epsilon);
  c.step_size = in.get_double(s, "step_size", c.step_size);
  c.iterations = count("iterations", c.iterations);
  c.alpha1 = in.get_double(s, "alpha1", c.alpha1);
  c.alpha2 = in.get_double(s, "alpha2", c.alpha2);
  c.alpha3 = in.get_double(s, "alpha3", c.alpha3);
  c.beta = in.get_double(s, "beta", c.beta);
  c.target_policy = parse_target_policy(in.get_string(s, "target_policy", target_policy_name(c.target_policy)));
  c.seed = static_cast<std::uint64_t>(in.get_int(s, "seed", static_cast<long long>(c.seed)));
  c.random_start = in.get_bool(s, "random_start", c.random_start);
  c.binary_search_steps = count("binary_search_steps", c.binary_search_steps);
  c.max_iterations = count("max_iterations", c.max_iterations);
  c.learning_rate = in.get_double(s, "learning_rate", c.learning_rate);
  c.initial_const = in.get_double(s, "initial_const", c.initial_const);
  c.confidence = in.get_double(s, "confidence", c.confidence);
  c.ead_beta = in.get_double(s, "ead_beta", c.ead_beta);
  c.validate();
  return c;
}

std::vector<int> choose_targets(std::span<const int> labels, std::size_t n_classes, TargetPolicy policy,
                                std::uint64_t seed) {
  if (n_classes < 2) throw UsageError("targeted attacks need at least two classes");
  std::mt19937_64 rng(seed);
  std::vector<int> out;
  out.reserve(labels.size());
  const auto n = static_cast<std::uint64_t>(n_classes);
  for (int label : labels) {
    const std::uint64_t offset = policy == TargetPolicy::Next ? 1 : 1 + rng() % (n - 1);
    out.push_back(static_cast<int>((static_cast<std::uint64_t>(label) + offset) % n));
  }
  return out;
}

double combine_recon_terms(const ReconLossTerms& t, double a1, double a2, double a3) {
  return a1 * t.winning - a2 * t.losing + a3 * t.cycle;
}

template <typename T>
BasicTensor<T> recon_attack_loss(const ModelConfig& c, const ParameterStore<T>& p, const BasicTensor<T>& x,
                                 double a1, double a2, double a3, std::vector<ReconLossTerms>* terms) {
  const CapsOutput<T> out = caps_classify(c, p, x);
  const std::size_t n = x.dim(0), k = c.n_classes;
  const std::span<const int> pred(out.prediction);
  const BasicTensor<T> recon_win = reconstruct_from(c, p, out.poses, pred);
  const BasicTensor<T> win_dist = row_l2_distance(recon_win, x);
  BasicTensor<T> loss = scale(sum(win_dist), static_cast<T>(a1));

  std::vector<double> losing(n, 0.0);
  if (a2 > 0 || terms) {
    std::vector<int> every(n * k);
    for (std::size_t i = 0; i < n * k; ++i) every[i] = static_cast<int>(i % k);
    const BasicTensor<T> recon_all = reconstruct_from(c, p, out.poses, std::span<const int>(every));
    const BasicTensor<T> dist = row_l2_distance(recon_all, repeat_rows(x, k));
    std::vector<T> w(n * k, T(0));
    for (std::size_t b = 0; b < n; ++b) {
      for (std::size_t j = 0; j < k; ++j) {
        if (static_cast<int>(j) == pred[b]) continue;
        w[b * k + j] = T(1) / static_cast<T>(k - 1);
        losing[b] += static_cast<double>(dist.data()[b * k + j]) / static_cast<double>(k - 1);
      }
    }
    if (a2 > 0) loss = sub(loss, scale(weighted_sum(dist, std::span<const T>(w)), static_cast<T>(a2)));
  }

  const CapsOutput<T> again = caps_classify(c, p, recon_win);
  const BasicTensor<T> logits = caps_logits(c, again.lengths);
  loss = add(loss, scale(softmax_cross_entropy(logits, pred, Reduction::Sum), static_cast<T>(a3)));

  if (terms) {
    terms->assign(n, {});
    for (std::size_t b = 0; b < n; ++b) {
      const T* z = logits.data().data() + b * k;
      const double mx = static_cast<double>(*std::max_element(z, z + k));
      double s = 0;
      for (std::size_t j = 0; j < k; ++j) s += std::exp(static_cast<double>(z[j]) - mx);
      (*terms)[b] = {static_cast<double>(win_dist.data()[b]), losing[b],
                     mx + std::log(s) - static_cast<double>(z[pred[b]])};
    }
  }
  return loss;
}

template BasicTensor<float> recon_attack_loss(const ModelConfig&, const ParameterStore<float>&,
                                              const BasicTensor<float>&, double, double, double,
                                              std::vector<ReconLossTerms>*);
template BasicTensor<double> recon_attack_loss(const ModelConfig&, const ParameterStore<double>&,
                                               const BasicTensor<double>&, double, double, double,
                                               std::vector<ReconLossTerms>*);

std::vector<AttackResult> pgd(const Tensor& x, std::span<const int> labels, std::span<const int> targets,
                              const Classifier& model, const AttackConfig& config) {
  return run_linf(x, labels, targets, model, config, LinfMode::Pgd);
}

std::vector<AttackResult> ccpgd_two_stage(const Tensor& x, std::span<const int> labels,
                                          std::span<const int> targets, const Classifier& model,
                                          const AttackConfig& config) {
  return run_linf(x, labels, targets, model, config, LinfMode::TwoStage);
}

std::vector<AttackResult> ccpgd_one_stage(const Tensor& x, std::span<const int> labels,
                                          std::span<const int> targets, const Classifier& model,
                                          const AttackConfig& config) {
  return run_linf(x, labels, targets, model, config, LinfMode::OneStage);
}

std::vector<AttackResult> cw(const Tensor& x, std::span<const int> labels, std::span<const int> targets,
                             const Classifier& model, const AttackConfig& config) {
  return run_optimization(x, labels, targets, model, config, false);
}

std::vector<AttackResult> ead(const Tensor& x, std::span<const int> labels, std::span<const int> targets,
                              const Classifier& model, const AttackConfig& config) {
  return run_optimization(x, labels, targets, model, config, true);
}

std::vector<AttackResult> run_attack(const Tensor& x, std::span<const int> labels,
                                     std::span<const int> targets, const Classifier& model,
                                     const AttackConfig& config) {
  switch (config.family) {
    case AttackFamily::Pgd: return pgd(x, labels, targets, model, config);
    case AttackFamily::CcPgd2: return ccpgd_two_stage(x, labels, targets, model, config);
    case AttackFamily::CcPgd1: return ccpgd_one_stage(x, labels, targets, model, config);
    case AttackFamily::Cw: return cw(x, labels, targets, model, config);
    case AttackFamily::Ead: return ead(x, labels, targets, model, config);
  }
  throw UsageError("unknown attack family");
}

void soft_threshold(std::span<float> z, std::span<const float> x0, float beta) {
  for (std::size_t i = 0; i < z.size(); ++i) {
    const float d = z[i] - x0[i];
    float v = x0[i];
    if (d > beta) v = std::min(z[i] - beta, 1.0f);
    else if (d < -beta) v = std::max(z[i] + beta, 0.0f);
    z[i] = v;
  }
}

Tensor stack_adversarial(std::span<const AttackResult> results, const ModelConfig& c) {
  std::vector<float> data;
  data.reserve(results.size() * c.image_size());
  for (const auto& r : results) {
    if (r.adversarial.size() != c.image_size()) throw UsageError("adversarial image size mismatch");
    data.insert(data.end(), r.adversarial.begin(), r.adversarial.end());
  }
  return Tensor::from({results.size(), c.channels, c.height, c.width}, std::move(data));
}

void attach_verdicts(std::span<AttackResult> results, const Classifier& model, double theta,
                     const DetectorSet& detectors) {
  if (results.empty()) return;
  const auto verdicts = detect_all(stack_adversarial(results, model.config()), model, theta, detectors);
  for (std::size_t i = 0; i < results.size(); ++i) results[i].verdict = verdicts[i];
}

bool success_after(const AttackResult& r, std::size_t iterations) {
  if (iterations < r.trace.size()) return r.trace[iterations].prediction == r.target;
  return r.success;
}

TransferReport transfer(std::span<const AttackResult> results, const Classifier& substitute,
                        const Classifier& target, double theta, const DetectorSet& detectors) {
  if (!(substitute.config() == target.config()) || substitute.kind() != target.kind()) {
    throw UsageError("transfer: substitute and target models must share one architecture");
  }
  if (results.empty()) throw UsageError("transfer: no attack results");
  TransferReport rep;
  const Tensor adv = stack_adversarial(results, target.config());
  rep.predictions = target.predict(adv);
  std::size_t ok = 0, undetected = 0;
  const bool has_detectors = target.kind() == ModelKind::CapsNet;
  if (has_detectors) rep.verdicts = detect_all(adv, target, theta, detectors);
  for (std::size_t i = 0; i < results.size(); ++i) {
    const bool s = rep.predictions[i] == results[i].target;
    rep.success.push_back(s);
    ok += s;
    undetected += s && !(has_detectors && rep.verdicts[i].combined);
  }
  rep.success_rate = static_cast<double>(ok) / static_cast<double>(results.size());
  rep.undetected_rate = static_cast<double>(undetected) / static_cast<double>(results.size());
  return rep;
}

}  // namespace capsdefl
