#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "cascade_guard/network.hpp"
#include "cascade_guard/statistics.hpp"

namespace cguard {

// Label convention everywhere in this module: 1 = adversarial (positive), 0 = normal.

/// Linear classifier over standardized features. decision() > 0 leans adversarial.
/// Standardized values are clipped to [-z_clip, z_clip], which keeps features that
/// are nearly constant on the training data from dominating far outside it.
struct LinearSvm {
  std::vector<double> weights;
  double bias = 0.0;
  double c = 0.005;
  std::uint64_t seed = 0;
  std::vector<double> feature_means;
  std::vector<double> feature_stds;
  double z_clip = 3.0;

  double standardized(std::size_t j, double x) const;

  std::size_t dimension() const { return weights.size(); }
  double decision(std::span<const double> features) const;
  void validate() const;
  friend bool operator==(const LinearSvm&, const LinearSvm&) = default;
};

struct SvmOptions {
  double c = 0.005;
  std::size_t iterations = 3000;
  std::uint64_t seed = 1;
  double z_clip = 3.0;
};

/// Minimizes 0.5*|w|^2 + C * sum hinge(y_i (w.z_i + b)) over standardized z by
/// full-batch subgradient steps on w, with b minimized exactly at every step.
/// Throws ArgumentError unless both classes are present.
LinearSvm train_svm(const std::vector<std::vector<double>>& features, const std::vector<int>& labels,
                    const SvmOptions& options = {});

/// Primal objective of `svm` on the given data, in standardized coordinates.
double svm_objective(const LinearSvm& svm, const std::vector<std::vector<double>>& features,
                     const std::vector<int>& labels);

/// Largest tau such that the fraction of positives with score >= tau is at
/// least target_tpr.
double calibrate_threshold(std::span<const double> scores, std::span<const int> labels,
                           double target_tpr);

struct StageRates {
  double fpr = 1.0;
  double tpr = 1.0;
  friend bool operator==(const StageRates&, const StageRates&) = default;
};

struct CascadeStage {
  std::size_t layer = 0;  // deepest conv layer whose statistics feed this stage
  LinearSvm svm;
  double threshold = 0.0;  // decision < threshold exits as normal
  StageRates training_rates;
  friend bool operator==(const CascadeStage&, const CascadeStage&) = default;
};

struct CascadeModel {
  std::vector<CascadeStage> stages;
  std::vector<PcaBank> banks;  // banks[m] belongs to conv layer m
  double target_tpr = 0.97;
  std::uint64_t seed = 0;
  std::string network_fingerprint;
  std::size_t normal_count = 0;
  std::size_t adversarial_count = 0;

  void validate() const;
  friend bool operator==(const CascadeModel&, const CascadeModel&) = default;
};

struct CascadeConfig {
  double target_tpr = 0.97;
  double c = 0.005;
  std::uint64_t seed = 1;
  std::size_t svm_iterations = 3000;
  double z_clip = 3.0;
  std::size_t max_stages = 0;       // 0 = one stage per conv layer
  std::size_t bank_images = 500;    // normals used to fit each PCA bank
  std::size_t threads = 1;
};

/// Per-layer LayerStatVectors of one image, concatenated in layer order.
using ImageFeatures = std::vector<std::vector<double>>;

ImageFeatures image_features(const Network& net, const Tensor& image,
                             const std::vector<PcaBank>& banks);
std::vector<ImageFeatures> batch_features(const Network& net, const std::vector<Tensor>& images,
                                          const std::vector<PcaBank>& banks, std::size_t threads = 1);

/// Layers 0..stage of `f` concatenated, the input of stage `stage`.
std::vector<double> stage_input(const ImageFeatures& f, std::size_t stage);

std::vector<PcaBank> fit_banks(const Network& net, const std::vector<Tensor>& normals,
                               std::size_t max_images, std::uint64_t seed, std::size_t threads = 1);

/// Trains stage after stage: balanced normals drawn from the shrinking pool,
/// threshold calibrated on the surviving training adversarials, pool normals
/// below threshold eliminated. Stops when layers run out or the pool empties.
CascadeModel train_cascade(const Network& net, const std::vector<Tensor>& normal_pool,
                           const std::vector<Tensor>& adversarials, const CascadeConfig& config);

/// Same, from precomputed features and banks.
CascadeModel train_cascade(const std::vector<ImageFeatures>& normal_pool,
                           const std::vector<ImageFeatures>& adversarials,
                           std::vector<PcaBank> banks, const CascadeConfig& config);

struct CascadeDecision {
  bool adversarial = false;
  std::size_t exit_stage = 0;      // stage that declared normal; stage count when adversarial
  std::vector<double> decisions;   // raw SVM decision value of every evaluated stage
};

CascadeDecision cascade_predict(const CascadeModel& model, const ImageFeatures& features);
CascadeDecision cascade_predict(const CascadeModel& model, const Network& net, const Tensor& image);

/// Adversarialness: decision - threshold at the exit stage (negative) for
/// normals, decision - threshold + 1 at the last stage for survivors.
double detector_score(const CascadeModel& model, const CascadeDecision& decision);
double detector_score(const CascadeModel& model, const Network& net, const Tensor& image);

struct RocPoint {
  double threshold = 0.0;
  double fpr = 0.0;
  double tpr = 0.0;
};

struct RocCurve {
  std::vector<RocPoint> points;  // from (inf, 0, 0) to (min score, 1, 1)
  double auc = 0.0;
};

/// Sweep over every distinct score (flag iff score >= threshold) with
/// trapezoidal area, so ties count one half as in the Mann-Whitney statistic.
RocCurve roc_auc(std::span<const double> scores, std::span<const int> labels);

StageRates compose_rates(std::span<const StageRates> stages);

struct StageCount {
  std::size_t normals_in = 0;
  std::size_t normals_passed = 0;
  std::size_t adversarials_in = 0;
  std::size_t adversarials_passed = 0;
  StageRates rates() const;
};

struct DetectorEvaluation {
  RocCurve roc;
  std::vector<double> scores;
  std::vector<int> labels;
  std::vector<StageCount> stages;
  StageRates overall;      // counted end to end
  StageRates composed;     // product of per-stage conditional rates
  double accuracy = 0.0;   // at the calibrated thresholds
  double best_accuracy = 0.0;
  double best_threshold = 0.0;
};

DetectorEvaluation evaluate_detector(const CascadeModel& model,
                                     const std::vector<ImageFeatures>& normals,
                                     const std::vector<ImageFeatures>& adversarials);
DetectorEvaluation evaluate_detector(const CascadeModel& model, const Network& net,
                                     const std::vector<Tensor>& normals,
                                     const std::vector<Tensor>& adversarials, std::size_t threads = 1);

/// threshold,fpr,tpr rows followed by a "# auc=...,accuracy=..." summary line.
void write_roc_csv(const std::filesystem::path& path, const DetectorEvaluation& eval);

}  // namespace cguard
