#include "capsdefl/detect.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "capsdefl/error.hpp"

namespace capsdefl {
namespace {

constexpr std::size_t kChunk = 64;

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t") - b + 1);
}

}  // namespace

DetectorSet DetectorSet::parse(const std::string& text) {
  DetectorSet out{false, false, false};
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (item == "gtd") out.gtd = true;
    else if (item == "lbd") out.lbd = true;
    else if (item == "ccd") out.ccd = true;
    else throw ConfigError("unknown detector `" + item + "` (expected gtd, lbd or ccd)");
  }
  if (!out.gtd && !out.lbd && !out.ccd) throw ConfigError("detector set is empty");
  return out;
}

std::string DetectorSet::name() const {
  std::string out;
  auto add = [&](bool on, const char* n) {
    if (!on) return;
    if (!out.empty()) out += ',';
    out += n;
  };
  add(gtd, "gtd");
  add(lbd, "lbd");
  add(ccd, "ccd");
  return out;
}

int lowest_argmin(std::span<const float> values) {
  return static_cast<int>(std::min_element(values.begin(), values.end()) - values.begin());
}

std::vector<DetectionEvidence> gather_evidence(const CapsNet& model, const Tensor& x) {
  const ModelConfig& c = model.config();
  const std::size_t n_total = x.dim(0), img = c.image_size(), k = c.n_classes;
  std::vector<DetectionEvidence> out;
  out.reserve(n_total);
  for (std::size_t start = 0; start < n_total; start += kChunk) {
    const std::size_t n = std::min(kChunk, n_total - start);
    const auto xs = x.data().subspan(start * img, n * img);
    const Tensor chunk = Tensor::from({n, c.channels, c.height, c.width},
                                      std::vector<float>(xs.begin(), xs.end()));
    const CapsOutput<float> caps = model.classify(chunk);

    std::vector<int> every_class(n * k);
    for (std::size_t i = 0; i < n * k; ++i) every_class[i] = static_cast<int>(i % k);
    const Tensor recon = model.reconstruct_from(caps.poses, std::span<const int>(every_class));
    const auto r = recon.data();

    std::vector<float> winners(n * img);
    for (std::size_t b = 0; b < n; ++b) {
      DetectionEvidence ev;
      ev.prediction = caps.prediction[b];
      ev.recon_errors.resize(k);
      for (std::size_t j = 0; j < k; ++j) {
        double acc = 0;
        const float* rj = r.data() + (b * k + j) * img;
        const float* xb = xs.data() + b * img;
        for (std::size_t p = 0; p < img; ++p) {
          const double d = static_cast<double>(rj[p]) - static_cast<double>(xb[p]);
          acc += d * d;
        }
        ev.recon_errors[j] = static_cast<float>(std::sqrt(acc));
      }
      ev.winning_error = ev.recon_errors[static_cast<std::size_t>(ev.prediction)];
      ev.lbd_flag = lowest_argmin(ev.recon_errors) != ev.prediction;
      const float* win = r.data() + (b * k + static_cast<std::size_t>(ev.prediction)) * img;
      std::copy(win, win + img, winners.begin() + static_cast<std::ptrdiff_t>(b * img));
      out.push_back(std::move(ev));
    }
    const auto again = model.predict(Tensor::from({n, c.channels, c.height, c.width}, std::move(winners)));
    for (std::size_t b = 0; b < n; ++b) {
      auto& ev = out[start + b];
      ev.recon_prediction = again[b];
      ev.ccd_flag = ev.recon_prediction != ev.prediction;
    }
  }
  return out;
}

DetectionVerdict make_verdict(const DetectionEvidence& e, double theta, const DetectorSet& d) {
  if (!(theta >= 0)) throw UsageError("detector threshold must be non-negative");
  DetectionVerdict v;
  v.gtd_flag = static_cast<double>(e.winning_error) > theta;
  v.lbd_flag = e.lbd_flag;
  v.ccd_flag = e.ccd_flag;
  v.combined = (d.gtd && v.gtd_flag) || (d.lbd && v.lbd_flag) || (d.ccd && v.ccd_flag);
  v.recon_errors = e.recon_errors;
  v.winning_error = e.winning_error;
  v.prediction = e.prediction;
  v.recon_prediction = e.recon_prediction;
  return v;
}

const CapsNet& require_capsnet(const Classifier& model) {
  const auto* caps = dynamic_cast<const CapsNet*>(&model);
  if (!caps) {
    throw UsageError(std::string("detectors need a reconstruction path; model kind `") +
                     model_kind_name(model.kind()) + "` has none");
  }
  return *caps;
}

std::vector<bool> gtd(const Tensor& x, const Classifier& model, double theta) {
  if (!(theta >= 0)) throw UsageError("detector threshold must be non-negative");
  std::vector<bool> out;
  for (const auto& e : gather_evidence(require_capsnet(model), x))
    out.push_back(static_cast<double>(e.winning_error) > theta);
  return out;
}

std::vector<bool> lbd(const Tensor& x, const Classifier& model) {
  std::vector<bool> out;
  for (const auto& e : gather_evidence(require_capsnet(model), x)) out.push_back(e.lbd_flag);
  return out;
}

std::vector<bool> ccd(const Tensor& x, const Classifier& model) {
  std::vector<bool> out;
  for (const auto& e : gather_evidence(require_capsnet(model), x)) out.push_back(e.ccd_flag);
  return out;
}

std::vector<DetectionVerdict> detect_all(const Tensor& x, const Classifier& model, double theta,
                                         const DetectorSet& detectors) {
  std::vector<DetectionVerdict> out;
  for (const auto& e : gather_evidence(require_capsnet(model), x))
    out.push_back(make_verdict(e, theta, detectors));
  return out;
}

std::string SweepCurve::to_csv() const {
  std::string out = "theta,fpr,undetected_rate\n";
  char line[96];
  for (const auto& p : points) {
    std::snprintf(line, sizeof(line), "%.6g,%.6g,%.6g\n", p.theta, p.fpr, p.undetected_rate);
    out += line;
  }
  return out;
}

void SweepCurve::save_csv(const std::string& path) const {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw RuntimeFailure("cannot write " + path);
  f << to_csv();
  if (!f) throw RuntimeFailure("failed writing " + path);
}

const SweepPoint& SweepCurve::at(double theta) const {
  for (const auto& p : points)
    if (std::abs(p.theta - theta) < 1e-9) return p;
  throw UsageError("theta " + std::to_string(theta) + " is not on the sweep grid");
}

std::vector<double> theta_grid(double max, double step) {
  if (!(step > 0) || !(max >= 0)) throw ConfigError("theta grid needs step > 0 and max >= 0");
  std::vector<double> out;
  const auto count = static_cast<std::size_t>(std::floor(max / step + 1e-9));
  for (std::size_t i = 0; i <= count; ++i) out.push_back(static_cast<double>(i) * step);
  return out;
}

SweepCurve sweep(std::span<const DetectionEvidence> clean, std::span<const DetectionEvidence> adv,
                 std::span<const int> targets, std::span<const double> thetas,
                 const DetectorSet& detectors) {
  if (clean.empty() || adv.empty()) throw UsageError("sweep needs non-empty clean and adversarial sets");
  if (targets.size() != adv.size()) throw UsageError("sweep: one target per adversarial input required");
  for (std::size_t i = 1; i < thetas.size(); ++i)
    if (!(thetas[i] > thetas[i - 1])) throw UsageError("sweep: theta grid must be strictly increasing");
  SweepCurve curve;
  curve.detectors = detectors;
  curve.clean_count = clean.size();
  curve.attack_count = adv.size();
  for (double theta : thetas) {
    std::size_t flagged = 0, undetected = 0;
    for (const auto& e : clean) flagged += make_verdict(e, theta, detectors).combined;
    for (std::size_t i = 0; i < adv.size(); ++i) {
      const bool success = adv[i].prediction == targets[i];
      undetected += success && !make_verdict(adv[i], theta, detectors).combined;
    }
    curve.points.push_back({theta, static_cast<double>(flagged) / static_cast<double>(clean.size()),
                            static_cast<double>(undetected) / static_cast<double>(adv.size())});
  }
  return curve;
}

SweepCurve sweep(const Classifier& model, const Tensor& clean, const Tensor& adversarial,
                 std::span<const int> targets, std::span<const double> thetas,
                 const DetectorSet& detectors) {
  const CapsNet& caps = require_capsnet(model);
  if (clean.dim(0) == 0 || adversarial.dim(0) == 0) throw UsageError("sweep needs non-empty input sets");
  const auto ce = gather_evidence(caps, clean);
  const auto ae = gather_evidence(caps, adversarial);
  return sweep(ce, ae, targets, thetas, detectors);
}

double reference_theta(const SweepCurve& curve, double max_fpr) {
  if (curve.points.empty()) throw UsageError("reference theta of an empty curve");
  for (const auto& p : curve.points)
    if (p.fpr <= max_fpr) return p.theta;
  const auto best = std::min_element(curve.points.begin(), curve.points.end(),
                                     [](const SweepPoint& a, const SweepPoint& b) { return a.fpr < b.fpr; });
  return best->theta;
}

}  // namespace capsdefl
