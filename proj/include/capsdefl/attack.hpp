#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "capsdefl/capsnet.hpp"
#include "capsdefl/detect.hpp"

namespace capsdefl {

enum class AttackFamily { Pgd, CcPgd2, CcPgd1, Cw, Ead };
enum class TargetPolicy { UniformRandom, Next };

const char* attack_family_name(AttackFamily family);
AttackFamily parse_attack_family(const std::string& text);
const char* target_policy_name(TargetPolicy policy);
TargetPolicy parse_target_policy(const std::string& text);
bool is_linf_family(AttackFamily family);

struct AttackConfig {
  AttackFamily family = AttackFamily::Pgd;
  double epsilon = 16.0 / 255.0;
  double step_size = 0.01;
  std::size_t iterations = 200;
  double alpha1 = 1.0;
  double alpha2 = 0.0;
  double alpha3 = 20.0;
  double beta = 0.5;  // stage balance: CE share of the step (two-stage) or of the loss (one-stage)
  TargetPolicy target_policy = TargetPolicy::UniformRandom;
  std::uint64_t seed = 1;
  bool random_start = false;

  std::size_t binary_search_steps = 9;
  std::size_t max_iterations = 1000;
  double learning_rate = 0.01;
  double initial_const = 1e-3;
  double confidence = 0.0;
  double ead_beta = 1e-3;

  void validate() const;
  void write(KeyValueWriter& out) const;
  static AttackConfig read(const KeyValueConfig& in, const AttackConfig& base,
                           const std::string& section = "attack");
  bool operator==(const AttackConfig&) const = default;
};

struct TraceStep {
  double ce = 0;                  // cross-entropy toward the target at this iterate
  std::optional<double> recon;    // detector-evasion loss, when it was evaluated
  int prediction = 0;
};

struct AttackResult {
  std::vector<float> adversarial;  // (C, H, W)
  int label = 0;
  int target = 0;
  bool success = false;            // f(x') == target
  int prediction = 0;              // f(x')
  // trace[i] describes the iterate after i updates.
  std::vector<TraceStep> trace;
  double linf = 0, l2 = 0, l1 = 0;
  std::optional<DetectionVerdict> verdict;
};

// Targets distinct from each label, seeded per position.
std::vector<int> choose_targets(std::span<const int> labels, std::size_t n_classes,
                                TargetPolicy policy, std::uint64_t seed);

// Components of the detector-evasion loss for one input.
struct ReconLossTerms {
  double winning = 0;  // |r(v_win) - x'|_2
  double losing = 0;   // mean of |r(v_j) - x'|_2 over losing classes
  double cycle = 0;    // CE(f(r(v_win)), f(x'))
};
double combine_recon_terms(const ReconLossTerms& terms, double alpha1, double alpha2, double alpha3);

// Sum over the batch of alpha1 * winning - alpha2 * losing + alpha3 * cycle,
// differentiable in x through the classifier, the decoder and the second
// classifier pass. Per-input terms are written to `terms` when given.
template <typename T>
BasicTensor<T> recon_attack_loss(const ModelConfig& config, const ParameterStore<T>& params,
                                 const BasicTensor<T>& x, double alpha1, double alpha2,
                                 double alpha3, std::vector<ReconLossTerms>* terms = nullptr);

// Every attack takes a batch x (N, C, H, W), true labels and targets; target
// equal to label is a UsageError. The batch is processed jointly but each
// input's trajectory is independent of the others.
std::vector<AttackResult> pgd(const Tensor& x, std::span<const int> labels, std::span<const int> targets,
                              const Classifier& model, const AttackConfig& config);
std::vector<AttackResult> ccpgd_two_stage(const Tensor& x, std::span<const int> labels,
                                          std::span<const int> targets, const Classifier& model,
                                          const AttackConfig& config);
std::vector<AttackResult> ccpgd_one_stage(const Tensor& x, std::span<const int> labels,
                                          std::span<const int> targets, const Classifier& model,
                                          const AttackConfig& config);
std::vector<AttackResult> cw(const Tensor& x, std::span<const int> labels, std::span<const int> targets,
                             const Classifier& model, const AttackConfig& config);
std::vector<AttackResult> ead(const Tensor& x, std::span<const int> labels, std::span<const int> targets,
                              const Classifier& model, const AttackConfig& config);

// Dispatches on config.family.
std::vector<AttackResult> run_attack(const Tensor& x, std::span<const int> labels,
                                     std::span<const int> targets, const Classifier& model,
                                     const AttackConfig& config);

// Elastic-net shrinkage around the original image, then clipping to [0, 1].
// Coordinates with |z - x0| <= beta land exactly on x0.
void soft_threshold(std::span<float> z, std::span<const float> x0, float beta);

// Stacks adversarial images into (N, C, H, W).
Tensor stack_adversarial(std::span<const AttackResult> results, const ModelConfig& config);

// Fills each result's verdict from the capsule detectors at theta.
void attach_verdicts(std::span<AttackResult> results, const Classifier& model, double theta,
                     const DetectorSet& detectors = DetectorSet::all());

// Success after `iterations` updates, read from the trace (iterations beyond
// the trace use the final outcome).
bool success_after(const AttackResult& result, std::size_t iterations);

struct TransferReport {
  std::vector<int> predictions;
  std::vector<bool> success;
  std::vector<DetectionVerdict> verdicts;  // empty when the target has no detectors
  double success_rate = 0;
  double undetected_rate = 0;
};

// Re-evaluates substitute-model adversarial images on the target model.
TransferReport transfer(std::span<const AttackResult> results, const Classifier& substitute,
                        const Classifier& target, double theta,
                        const DetectorSet& detectors = DetectorSet::all());

// Attack directory: attack_meta.csv plus adv_%06d.bin (little-endian f32).
void write_attack_dir(const std::string& dir, std::span<const AttackResult> results);
struct AttackRecord {
  std::size_t index = 0;
  int true_label = 0;
  int target = 0;
  bool success = false;
  double linf = 0, l2 = 0, l1 = 0;
  bool gtd = false, lbd = false, ccd = false, combined = false;
  std::vector<float> adversarial;
};
std::vector<AttackRecord> read_attack_dir(const std::string& dir, std::size_t image_size);

}  // namespace capsdefl
