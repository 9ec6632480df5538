#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "capsdefl/attack.hpp"
#include "capsdefl/data.hpp"
#include "capsdefl/train.hpp"

namespace capsdefl {

// --- metrics --------------------------------------------------------------

// Fraction of correctly classified samples; UsageError on an empty set.
double accuracy(const Classifier& model, const Dataset& data);
double success_rate(std::span<const AttackResult> results);
double undetected_rate(std::span<const bool> success, std::span<const bool> detected);
// Uses each result's success flag and the combined flag of the aligned verdict.
double undetected_rate(std::span<const AttackResult> results, std::span<const DetectionVerdict> verdicts);

// Maps a batch (N, C, H, W) to class indices.
using Judge = std::function<std::vector<int>(const Tensor&)>;
Judge judge_of(const Classifier& model);

// Plain k-nearest-neighbour vote in pixel space over a labelled reference
// set; ties go to the class of the nearest tied neighbour.
class KnnJudge {
 public:
  KnnJudge(Dataset reference, std::size_t k = 5);
  std::vector<int> operator()(const Tensor& x) const;

 private:
  Dataset ref_;
  std::size_t k_;
};

// Among successful results that the combined detector missed (a result
// without a verdict counts as missed), the fraction the judge labels as the
// attack target. nullopt when there is no such result. `geometry` gives the
// (C, H, W) of the stored images.
std::optional<double> deflection_proxy(std::span<const AttackResult> results, const Judge& judge,
                                       const ModelConfig& geometry);

// --- PPM ------------------------------------------------------------------

// Binary P5 (1 channel) or P6 (3 channels), maxval 255, byte = floor(v*255 + 0.5).
std::vector<std::uint8_t> ppm_bytes(std::span<const float> chw, std::size_t channels, std::size_t height,
                                    std::size_t width);
void export_ppm(std::span<const float> chw, std::size_t channels, std::size_t height, std::size_t width,
                const std::string& path);

struct PpmImage {
  std::size_t channels = 0, height = 0, width = 0;
  std::vector<std::uint8_t> pixels;  // interleaved as stored in the file
  // Planar (C, H, W) floats, byte / 255.
  std::vector<float> to_chw() const;
};
PpmImage read_ppm(const std::string& path);

// --- experiments ----------------------------------------------------------

struct DataSpec {
  std::string source = "toy";  // toy | cifar | idx
  std::uint64_t seed = 1;
  std::size_t per_class_train = 500;
  std::size_t per_class_test = 100;
  std::size_t size = 20;
  ToyOptions toy;
  std::string train_path, test_path;  // cifar
  std::string train_images, train_labels, test_images, test_labels;  // idx
  std::size_t channels = 1;

  void write(KeyValueWriter& out) const;
  static DataSpec read(const KeyValueConfig& in, const std::string& section = "data");
  // Returns {train, test}.
  std::pair<Dataset, Dataset> load() const;
};

enum class Protocol { Standard, Ablation, AlphaSweep };
const char* protocol_name(Protocol p);
Protocol parse_protocol(const std::string& text);

struct ExperimentConfig {
  std::string name = "experiment";
  Protocol protocol = Protocol::Standard;
  DataSpec data;
  ModelConfig model;
  TrainSchedule schedule;
  std::string target_checkpoint;  // trained from schedule.seed when empty

  bool blackbox = true;
  std::uint64_t substitute_seed = 2;
  std::string substitute_checkpoint;

  std::string judge = "cnn";  // cnn | knn | none
  std::uint64_t judge_seed = 3;
  std::string judge_checkpoint;

  std::vector<AttackFamily> families{AttackFamily::Pgd, AttackFamily::CcPgd2};
  AttackConfig attack;
  DetectorSet detectors;
  DetectorSet baseline_detectors = DetectorSet::gtd_lbd();  // ablation protocol
  double theta_max = 20.0;
  double theta_step = 0.4;
  double max_fpr = 0.05;
  std::size_t samples = 256;        // attacked inputs
  std::size_t clean_samples = 0;    // clean inputs for FPR; 0 = whole test split
  std::uint64_t seed = 1;           // evaluation shuffle and targets
  std::string sweep_parameter = "alpha3";
  std::vector<double> sweep_values{0, 5, 10, 20, 40};
  std::size_t export_images = 8;

  void validate() const;
  std::string to_text() const;
  static ExperimentConfig parse(const KeyValueConfig& in);
  static ExperimentConfig load(const std::string& path);
};

struct AttackSummary {
  std::string name;
  std::size_t attempts = 0;
  double success_white = 0;
  double undetected_white = 0;  // at the reference theta
  std::optional<double> success_black;
  std::optional<double> undetected_black;
  std::optional<double> deflection;  // nullopt when undefined or not computed
  double mean_linf = 0, mean_l2 = 0, mean_l1 = 0;
  SweepCurve curve;
  std::optional<SweepCurve> black_curve;
};

struct Report {
  std::string name;
  std::string protocol;
  double accuracy = 0;
  std::optional<double> substitute_accuracy;
  std::optional<double> judge_accuracy;
  double reference_theta = 0;
  double reference_fpr = 0;
  double clean_ccd_fpr = 0;
  std::optional<double> baseline_accuracy;     // ablation
  std::optional<double> baseline_ccd_fpr;      // ablation
  std::size_t attack_pool = 0;                 // correctly classified candidates
  std::vector<AttackSummary> attacks;

  // Deterministic key = value text; every rate printed with %.6g.
  std::string to_text() const;
};

// Holds everything a protocol produced, for callers that want more than the
// report (the acceptance suite, the CLI).
struct ExperimentArtifacts {
  Report report;
  std::vector<std::vector<AttackResult>> white_results;  // aligned with report.attacks
};

// Runs the configured protocol. When `out_dir` is non-empty, writes
// report.txt, config.txt, one CSV per curve, attack directories and PPM
// exports there. A STALE marker exists while the run is incomplete.
ExperimentArtifacts run_experiment(const ExperimentConfig& config, const std::string& out_dir);

// The K first correctly classified test inputs after a seeded shuffle.
std::vector<std::size_t> evaluation_indices(const Classifier& model, const Dataset& test, std::size_t k,
                                            std::uint64_t seed);

}  // namespace capsdefl
