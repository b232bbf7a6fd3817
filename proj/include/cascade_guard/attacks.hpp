#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "cascade_guard/network.hpp"

namespace cguard {

enum class AttackKind { gradient_box, gradient_sign, evolutionary };
enum class TargetPolicy { fixed, least_likely, random_other };

std::string to_string(AttackKind kind);
AttackKind parse_attack_kind(const std::string& name);
std::string to_string(TargetPolicy policy);
TargetPolicy parse_target_policy(const std::string& name);

struct GaParams {
  std::size_t population = 50;
  double mutation_rate = 0.1;
  double mutation_stddev = 0.1;
  std::size_t generations = 500;
};

struct AttackConfig {
  AttackKind kind = AttackKind::gradient_box;
  TargetPolicy target_policy = TargetPolicy::random_other;
  int fixed_target = 0;
  // Weight of the L1 proximity term in c*|r|_1 + CE(f(x0 + r), y).
  double c = 0.01;
  // gradient-box: largest per-pixel move per iteration. gradient-sign: epsilon.
  double step = 0.02;
  std::size_t max_iterations = 300;
  // Optional bound on |r|_inf intersected with the [0,1] box (1.0 leaves only the box).
  double max_linf = 0.2;
  double confidence_goal = 0.9;
  std::uint64_t seed = 1;
  // Outer bisection over c (5 rounds) keeping the minimal-L1 success.
  bool bisect_c = false;
  // Stop iterating once the current iterate is a success.
  bool stop_on_success = true;
  GaParams ga;

  void validate() const;
};

struct AdversarialRecord {
  std::optional<std::size_t> source_id;  // empty for images evolved from noise
  Tensor image;
  int original_label = -1;  // -1 when there is no source image
  int target_label = 0;
  AttackKind kind = AttackKind::gradient_box;
  double confidence = 0.0;  // softmax probability of target_label at `image`
  double l1 = 0.0;
  double linf = 0.0;
  std::size_t iterations = 0;
  bool success = false;
};

/// Objective value of every accepted best-so-far iterate, for inspection.
struct AttackTrace {
  std::vector<double> objective;
  std::vector<double> best_objective;
};

int choose_target(const PredictionRecord& original, std::size_t classes, const AttackConfig& cfg,
                  std::mt19937_64& rng);

/// Minimizes c*|r|_1 + CE(f(x0 + r), y) subject to x0 + r in [0,1]^d by proximal
/// projected gradient descent and returns the best iterate by objective.
AdversarialRecord gradient_box_attack(const Network& net, const Tensor& x0, int target,
                                      const AttackConfig& cfg, AttackTrace* trace = nullptr);

/// x <- clip(x - step * sign(grad_x CE(f(x), y))), repeated up to max_iterations.
AdversarialRecord gradient_sign_attack(const Network& net, const Tensor& x0, int target,
                                       const AttackConfig& cfg);

/// Probability vector for an image. Black-box access only.
using ProbabilityOracle = std::function<std::vector<double>(const Tensor&)>;

/// Genetic algorithm over raw pixel encodings, starting from uniform noise.
/// Fitness is the softmax probability of `target`.
AdversarialRecord evolutionary_attack(const ProbabilityOracle& oracle, Shape3 image_shape,
                                      int target, const AttackConfig& cfg);
AdversarialRecord evolutionary_attack(const Network& net, int target, const AttackConfig& cfg);

/// Attacks images[i] for every i in `ids` (ignored for evolutionary attacks,
/// which produce `count` records instead). Images the victim already
/// misclassifies are skipped. Per-item seeds derive from cfg.seed and the
/// item position, so results do not depend on `threads`.
std::vector<AdversarialRecord> run_attacks(const Network& net, const std::vector<Tensor>& images,
                                           const std::vector<int>& labels,
                                           const std::vector<std::size_t>& ids,
                                           const AttackConfig& cfg, std::size_t threads = 1);
std::vector<AdversarialRecord> run_evolutionary(const Network& net, std::size_t count,
                                                const AttackConfig& cfg, std::size_t threads = 1);

std::uint64_t derive_seed(std::uint64_t base, std::uint64_t index);

}  // namespace cguard
