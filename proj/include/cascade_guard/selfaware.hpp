#pragma once

#include <filesystem>
#include <span>
#include <vector>

#include "cascade_guard/network.hpp"

namespace cguard {

/// P(normal | detector score) = sigmoid(intercept + slope * score), slope <= 0.
struct OmegaCalibration {
  double intercept = 0.0;
  double slope = 0.0;

  double probability_normal(double score) const;
  friend bool operator==(const OmegaCalibration&, const OmegaCalibration&) = default;
};

/// Maximum-likelihood logistic fit (labels: 1 adversarial, 0 normal) with a
/// tiny ridge so separable data stays finite. A positive slope is clamped to
/// zero and the intercept refit.
OmegaCalibration calibrate_omega(std::span<const double> scores, std::span<const int> labels);

/// Bernoulli log-likelihood of the normal/adversarial labels under `cal`.
double omega_log_likelihood(const OmegaCalibration& cal, std::span<const double> scores,
                            std::span<const int> labels);

enum class Action { predict, abstain };

/// Predict iff p_normal * p_err + (1 - p_normal) * e_q < e_a.
Action abstain_decide(double p_normal, double p_err, double e_q, double e_a);

/// P(y != f(x) | normal) by predicted class.
struct ErrorTable {
  std::vector<double> per_class;
  double global = 0.0;

  double rate(int predicted) const;

  /// Validation error per predicted class; classes predicted fewer than
  /// `min_count` times fall back to the global rate.
  static ErrorTable from_validation(const Network& net, const std::vector<Tensor>& images,
                                    const std::vector<int>& labels, std::size_t min_count = 30);
  /// (C - 1) / C for every class.
  static ErrorTable random_guess(std::size_t classes);
};

struct MixtureExample {
  double score = 0.0;      // detector score
  int predicted = 0;       // victim's label
  int truth = -1;          // true label, -1 when the image has none
  bool adversarial = false;
};

struct SweepPoint {
  double e_a = 0.0;
  double abstain_fraction = 0.0;
  double retained_accuracy = 0.0;  // NaN when nothing is retained
  double expected_loss = 0.0;
  double normal_retained = 0.0;
  double adversarial_abstained = 0.0;
};

/// Losses: abstain costs e_a, predicting on an adversarial costs e_q,
/// predicting on a normal costs 1 when wrong.
std::vector<SweepPoint> selfaware_sweep(const std::vector<MixtureExample>& mixture,
                                        const OmegaCalibration& cal, const ErrorTable& errors,
                                        double e_q, std::span<const double> e_a_values);

/// `count` evenly spaced values from lo to hi inclusive.
std::vector<double> linspace(double lo, double hi, std::size_t count);

void write_sweep_csv(const std::filesystem::path& path, const std::vector<SweepPoint>& points);

}  // namespace cguard
