#pragma once

#include <span>
#include <string>
#include <vector>

#include "capsdefl/capsnet.hpp"

namespace capsdefl {

// Which detectors take part in the OR-combination.
struct DetectorSet {
  bool gtd = true;
  bool lbd = true;
  bool ccd = true;

  static DetectorSet all() { return {}; }
  static DetectorSet gtd_only() { return {true, false, false}; }
  static DetectorSet gtd_lbd() { return {true, true, false}; }
  // Comma-separated subset of "gtd,lbd,ccd".
  static DetectorSet parse(const std::string& text);
  std::string name() const;
  bool operator==(const DetectorSet&) const = default;
};

// Threshold-free facts about one input, from which every verdict follows.
struct DetectionEvidence {
  int prediction = 0;               // f(x)
  std::vector<float> recon_errors;  // |r(v_j) - x|_2 for every class capsule j
  float winning_error = 0;          // recon_errors[prediction]
  int recon_prediction = 0;         // f(r(v_{f(x)}))
  bool lbd_flag = false;
  bool ccd_flag = false;
};

struct DetectionVerdict {
  bool gtd_flag = false;
  bool lbd_flag = false;
  bool ccd_flag = false;
  bool combined = false;  // OR over the enabled detectors
  std::vector<float> recon_errors;
  float winning_error = 0;
  int prediction = 0;
  int recon_prediction = 0;
};

// argmin with ties resolved toward the lowest index.
int lowest_argmin(std::span<const float> values);

// Batched evidence for x (N, C, H, W): n decoder passes and two classifier
// passes per input. The winning reconstruction is shared by GTD and CCD.
std::vector<DetectionEvidence> gather_evidence(const CapsNet& model, const Tensor& x);

DetectionVerdict make_verdict(const DetectionEvidence& evidence, double theta,
                              const DetectorSet& detectors = DetectorSet::all());

// The entry points below accept any classifier and reject models without a
// reconstruction path with a UsageError.
const CapsNet& require_capsnet(const Classifier& model);

std::vector<bool> gtd(const Tensor& x, const Classifier& model, double theta);
std::vector<bool> lbd(const Tensor& x, const Classifier& model);
std::vector<bool> ccd(const Tensor& x, const Classifier& model);
std::vector<DetectionVerdict> detect_all(const Tensor& x, const Classifier& model, double theta,
                                         const DetectorSet& detectors = DetectorSet::all());

struct SweepPoint {
  double theta = 0;
  double fpr = 0;
  double undetected_rate = 0;
};

struct SweepCurve {
  std::string label;
  DetectorSet detectors;
  std::size_t clean_count = 0;
  std::size_t attack_count = 0;
  std::vector<SweepPoint> points;

  // `theta,fpr,undetected_rate` with six significant digits.
  std::string to_csv() const;
  void save_csv(const std::string& path) const;
  // Row at the given grid theta; UsageError if absent.
  const SweepPoint& at(double theta) const;
};

// 0, step, 2*step, ... up to and including `max` (computed by index, not by
// repeated addition).
std::vector<double> theta_grid(double max = 20.0, double step = 0.4);

// Undetected = attack succeeded (f(x') == target) and the combined flag is
// false; the denominator is every attempt.
SweepCurve sweep(std::span<const DetectionEvidence> clean, std::span<const DetectionEvidence> adversarial,
                 std::span<const int> targets, std::span<const double> thetas,
                 const DetectorSet& detectors = DetectorSet::all());
SweepCurve sweep(const Classifier& model, const Tensor& clean, const Tensor& adversarial,
                 std::span<const int> targets, std::span<const double> thetas,
                 const DetectorSet& detectors = DetectorSet::all());

// Smallest grid theta whose clean FPR is at most `max_fpr`. If none
// qualifies, the first theta attaining the lowest FPR.
double reference_theta(const SweepCurve& curve, double max_fpr = 0.05);

}  // namespace capsdefl
