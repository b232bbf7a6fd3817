#include "cascade_guard/attacks.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "cascade_guard/error.hpp"
#include "cascade_guard/parallel.hpp"

namespace cguard {

namespace {

std::size_t argmax_of(std::span<const double> v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

void fill_norms(AdversarialRecord& rec, const Tensor& x0) {
  rec.l1 = 0.0;
  rec.linf = 0.0;
  for (std::size_t i = 0; i < x0.size(); ++i) {
    const double d = std::abs(rec.image[i] - x0[i]);
    rec.l1 += d;
    rec.linf = std::max(rec.linf, d);
  }
}

void check_target(const Network& net, int target) {
  if (target < 0 || static_cast<std::size_t>(target) >= net.spec.classes) {
    throw ArgumentError("attack target " + std::to_string(target) + " out of range");
  }
}

void check_box(const Tensor& x0) {
  for (double v : x0.data()) {
    if (!(v >= 0.0 && v <= 1.0)) throw ArgumentError("attack source image has pixels outside [0,1]");
  }
}

AdversarialRecord box_attack_fixed_c(const Network& net, const Tensor& x0, int target, double c,
                                     const AttackConfig& cfg, AttackTrace* trace) {
  AdversarialRecord best;
  best.kind = AttackKind::gradient_box;
  best.target_label = target;
  double best_obj = std::numeric_limits<double>::infinity();

  Tensor x = x0;
  double l1 = 0.0;
  // Feasible interval per pixel: the [0,1] box intersected with the L-inf ball.
  std::vector<double> lower(x0.size()), upper(x0.size());
  for (std::size_t i = 0; i < x0.size(); ++i) {
    lower[i] = std::max(0.0, x0[i] - cfg.max_linf);
    upper[i] = std::min(1.0, x0[i] + cfg.max_linf);
    // Rounding in x0 +/- max_linf must not leak past the radius.
    while (x0[i] - lower[i] > cfg.max_linf) lower[i] = std::nextafter(lower[i], 1.0);
    while (upper[i] - x0[i] > cfg.max_linf) upper[i] = std::nextafter(upper[i], 0.0);
  }
  ForwardTape tape;
  Gradients grads;
  std::size_t steps = 0;
  for (std::size_t it = 0;; ++it) {
    const auto raw = forward(net, x, &tape);
    const auto lg = softmax_cross_entropy(raw, static_cast<std::size_t>(target));
    const double objective = c * l1 + lg.loss;
    const double conf = softmax(raw)[static_cast<std::size_t>(target)];
    const bool success = conf >= cfg.confidence_goal && argmax_of(raw) == static_cast<std::size_t>(target);
    if (objective < best_obj) {
      best_obj = objective;
      best.image = x;
      best.confidence = conf;
      best.success = success;
      best.iterations = steps;
    }
    if (trace != nullptr) {
      trace->objective.push_back(objective);
      trace->best_objective.push_back(best_obj);
    }
    if ((cfg.stop_on_success && success) || it >= cfg.max_iterations) break;

    backward(net, tape, lg.grad, grads, {.params = false, .input = true});
    const auto g = grads.input.data();
    double gmax = 0.0;
    for (double v : g) gmax = std::max(gmax, std::abs(v));
    if (gmax == 0.0) break;
    const double alpha = cfg.step / gmax;
    const double shrink = alpha * c;
    l1 = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double v = (x[i] - x0[i]) - alpha * g[i];
      const double soft = v > shrink ? v - shrink : (v < -shrink ? v + shrink : 0.0);
      x[i] = std::clamp(x0[i] + soft, lower[i], upper[i]);
      l1 += std::abs(x[i] - x0[i]);
    }
    ++steps;
  }
  fill_norms(best, x0);
  return best;
}

}  // namespace

std::string to_string(AttackKind kind) {
  switch (kind) {
    case AttackKind::gradient_box: return "gradient-box";
    case AttackKind::gradient_sign: return "gradient-sign";
    case AttackKind::evolutionary: return "evolutionary";
  }
  return "gradient-box";
}

AttackKind parse_attack_kind(const std::string& name) {
  if (name == "gradient-box") return AttackKind::gradient_box;
  if (name == "gradient-sign") return AttackKind::gradient_sign;
  if (name == "evolutionary") return AttackKind::evolutionary;
  throw ArgumentError("unknown attack kind '" + name + "'");
}

std::string to_string(TargetPolicy policy) {
  switch (policy) {
    case TargetPolicy::fixed: return "fixed";
    case TargetPolicy::least_likely: return "least-likely";
    case TargetPolicy::random_other: return "random-other";
  }
  return "random-other";
}

TargetPolicy parse_target_policy(const std::string& name) {
  if (name == "fixed") return TargetPolicy::fixed;
  if (name == "least-likely") return TargetPolicy::least_likely;
  if (name == "random-other") return TargetPolicy::random_other;
  throw ArgumentError("unknown target policy '" + name + "'");
}

void AttackConfig::validate() const {
  if (kind == AttackKind::gradient_box && !(c > 0.0)) {
    throw ArgumentError("gradient-box attack needs c > 0");
  }
  if (!(confidence_goal > 0.0 && confidence_goal < 1.0)) {
    throw ArgumentError("confidence goal must lie in (0,1)");
  }
  if (!(step >= 0.0) || !std::isfinite(step)) throw ArgumentError("step size must be finite and >= 0");
  if (!(max_linf > 0.0)) throw ArgumentError("max_linf must be positive");
  if (kind == AttackKind::evolutionary) {
    if (ga.population < 2) throw ArgumentError("GA population must be at least 2");
    if (!(ga.mutation_rate >= 0.0 && ga.mutation_rate <= 1.0)) {
      throw ArgumentError("GA mutation rate must lie in [0,1]");
    }
    if (!(ga.mutation_stddev >= 0.0)) throw ArgumentError("GA mutation stddev must be >= 0");
  }
}

std::uint64_t derive_seed(std::uint64_t base, std::uint64_t index) {
  auto mix = [](std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
  };
  return mix(base ^ mix(index));
}

int choose_target(const PredictionRecord& original, std::size_t classes, const AttackConfig& cfg,
                  std::mt19937_64& rng) {
  switch (cfg.target_policy) {
    case TargetPolicy::fixed:
      return cfg.fixed_target;
    case TargetPolicy::least_likely:
      return static_cast<int>(std::min_element(original.raw.begin(), original.raw.end()) -
                              original.raw.begin());
    case TargetPolicy::random_other: {
      if (classes <= 1) return 0;
      const bool has_original = original.label >= 0;
      std::uniform_int_distribution<int> pick(0, static_cast<int>(classes) - (has_original ? 2 : 1));
      int t = pick(rng);
      if (has_original && t >= original.label) ++t;
      return t;
    }
  }
  return 0;
}

AdversarialRecord gradient_box_attack(const Network& net, const Tensor& x0, int target,
                                      const AttackConfig& cfg, AttackTrace* trace) {
  cfg.validate();
  check_target(net, target);
  check_box(x0);
  if (!cfg.bisect_c) return box_attack_fixed_c(net, x0, target, cfg.c, cfg, trace);

  // Larger c favours proximity; look for the largest c that still succeeds.
  double lo = 0.0;
  double hi = std::numeric_limits<double>::infinity();
  double c = cfg.c;
  std::optional<AdversarialRecord> best;
  AdversarialRecord last;
  for (int round = 0; round < 5; ++round) {
    last = box_attack_fixed_c(net, x0, target, c, cfg, round == 0 ? trace : nullptr);
    if (last.success) {
      if (!best || last.l1 < best->l1) best = last;
      lo = c;
      c = std::isinf(hi) ? 2.0 * c : 0.5 * (lo + hi);
    } else {
      hi = c;
      c = 0.5 * (lo + hi);
    }
  }
  return best ? *best : last;
}

AdversarialRecord gradient_sign_attack(const Network& net, const Tensor& x0, int target,
                                       const AttackConfig& cfg) {
  cfg.validate();
  check_target(net, target);
  check_box(x0);
  AdversarialRecord rec;
  rec.kind = AttackKind::gradient_sign;
  rec.target_label = target;
  Tensor x = x0;
  ForwardTape tape;
  Gradients grads;
  std::size_t steps = 0;
  for (;;) {
    const auto raw = forward(net, x, &tape);
    rec.confidence = softmax(raw)[static_cast<std::size_t>(target)];
    rec.success = rec.confidence >= cfg.confidence_goal && argmax_of(raw) == static_cast<std::size_t>(target);
    if ((cfg.stop_on_success && rec.success) || steps >= cfg.max_iterations) break;
    const auto lg = softmax_cross_entropy(raw, static_cast<std::size_t>(target));
    backward(net, tape, lg.grad, grads, {.params = false, .input = true});
    const auto g = grads.input.data();
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double s = g[i] > 0.0 ? 1.0 : (g[i] < 0.0 ? -1.0 : 0.0);
      x[i] = std::clamp(x[i] - cfg.step * s, 0.0, 1.0);
    }
    ++steps;
  }
  rec.image = x;
  rec.iterations = steps;
  fill_norms(rec, x0);
  return rec;
}

AdversarialRecord evolutionary_attack(const ProbabilityOracle& oracle, Shape3 image_shape,
                                      int target, const AttackConfig& cfg) {
  cfg.validate();
  const GaParams& ga = cfg.ga;
  std::mt19937_64 rng(cfg.seed);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, ga.mutation_stddev);

  struct Member {
    Tensor image;
    double fitness = 0.0;
    bool on_target = false;
  };
  auto evaluate = [&](Member& m) {
    const auto p = oracle(m.image);
    if (target < 0 || static_cast<std::size_t>(target) >= p.size()) {
      throw ArgumentError("evolutionary attack target out of range");
    }
    m.fitness = p[static_cast<std::size_t>(target)];
    m.on_target = argmax_of(p) == static_cast<std::size_t>(target);
  };

  std::vector<Member> pop(ga.population);
  for (auto& m : pop) {
    m.image = Tensor(image_shape);
    for (double& v : m.image.data()) v = u01(rng);
    evaluate(m);
  }
  auto best_index = [&] {
    std::size_t b = 0;
    for (std::size_t i = 1; i < pop.size(); ++i) {
      if (pop[i].fitness > pop[b].fitness) b = i;
    }
    return b;
  };
  auto tournament = [&]() -> const Member& {
    std::uniform_int_distribution<std::size_t> pick(0, pop.size() - 1);
    const Member& a = pop[pick(rng)];
    const Member& b = pop[pick(rng)];
    return a.fitness >= b.fitness ? a : b;
  };

  std::size_t gen = 0;
  for (; gen < ga.generations; ++gen) {
    const Member& elite = pop[best_index()];
    if (cfg.stop_on_success && elite.on_target && elite.fitness >= cfg.confidence_goal) break;
    std::vector<Member> next;
    next.reserve(pop.size());
    next.push_back(elite);
    while (next.size() < pop.size()) {
      const Member& a = tournament();
      const Member& b = tournament();
      Member child{Tensor(image_shape)};
      for (std::size_t i = 0; i < child.image.size(); ++i) {
        double v = u01(rng) < 0.5 ? a.image[i] : b.image[i];
        if (u01(rng) < ga.mutation_rate) v = std::clamp(v + noise(rng), 0.0, 1.0);
        child.image[i] = v;
      }
      evaluate(child);
      next.push_back(std::move(child));
    }
    pop = std::move(next);
  }

  const Member& best = pop[best_index()];
  AdversarialRecord rec;
  rec.kind = AttackKind::evolutionary;
  rec.target_label = target;
  rec.image = best.image;
  rec.confidence = best.fitness;
  rec.success = best.on_target && best.fitness >= cfg.confidence_goal;
  rec.iterations = gen;
  return rec;
}

AdversarialRecord evolutionary_attack(const Network& net, int target, const AttackConfig& cfg) {
  check_target(net, target);
  // Only the probability vector crosses this boundary; no gradients are available to the GA.
  ProbabilityOracle oracle = [&net](const Tensor& img) { return predict(net, img).probabilities; };
  return evolutionary_attack(oracle, net.spec.input, target, cfg);
}

std::vector<AdversarialRecord> run_attacks(const Network& net, const std::vector<Tensor>& images,
                                           const std::vector<int>& labels,
                                           const std::vector<std::size_t>& ids,
                                           const AttackConfig& cfg, std::size_t threads) {
  if (cfg.kind == AttackKind::evolutionary) return run_evolutionary(net, ids.size(), cfg, threads);
  cfg.validate();
  std::vector<std::optional<AdversarialRecord>> slots(ids.size());
  parallel_for(ids.size(), threads, [&](std::size_t k) {
    const std::size_t id = ids[k];
    const Tensor& x0 = images.at(id);
    const PredictionRecord pred = predict(net, x0);
    if (pred.label != labels.at(id)) return;
    std::mt19937_64 rng(derive_seed(cfg.seed, id));
    const int target = choose_target(pred, net.spec.classes, cfg, rng);
    AdversarialRecord rec = cfg.kind == AttackKind::gradient_box
                                ? gradient_box_attack(net, x0, target, cfg)
                                : gradient_sign_attack(net, x0, target, cfg);
    rec.source_id = id;
    rec.original_label = labels[id];
    slots[k] = std::move(rec);
  });
  std::vector<AdversarialRecord> out;
  for (auto& s : slots) {
    if (s) out.push_back(std::move(*s));
  }
  return out;
}

std::vector<AdversarialRecord> run_evolutionary(const Network& net, std::size_t count,
                                                const AttackConfig& cfg, std::size_t threads) {
  std::vector<AdversarialRecord> out(count);
  parallel_for(count, threads, [&](std::size_t k) {
    std::mt19937_64 rng(derive_seed(cfg.seed, k));
    PredictionRecord none;
    const int target = choose_target(none, net.spec.classes, cfg, rng);
    AttackConfig item = cfg;
    item.seed = derive_seed(cfg.seed ^ 0x5eedULL, k);
    out[k] = evolutionary_attack(net, target, item);
  });
  return out;
}

}  // namespace cguard
