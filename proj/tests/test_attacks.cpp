#include <cmath>
#include <random>

#include "doctest.h"

#include "cascade_guard/attacks.hpp"
#include "cascade_guard/error.hpp"

using namespace cguard;

namespace {

// Dense-only victim on 1x1xN inputs with the given per-class weights and biases.
Network linear_net(std::vector<std::vector<double>> w, std::vector<double> b) {
  NetworkSpec spec;
  spec.input = {1, 1, w.front().size()};
  spec.classes = w.size();
  spec.layers = {DenseSpec{w.size()}, SoftmaxSpec{}};
  Network net = Network::zeros(spec);
  auto& d = std::get<DenseParams>(net.params[0]);
  for (std::size_t r = 0; r < w.size(); ++r)
    for (std::size_t c = 0; c < w[r].size(); ++c) d.weights(r, c) = w[r][c];
  d.bias = std::move(b);
  return net;
}

Tensor point(std::vector<double> v) {
  const std::size_t n = v.size();
  return Tensor(1, 1, n, std::move(v));
}

void check_box(const Tensor& t) {
  CHECK(t.min() >= 0.0);
  CHECK(t.max() <= 1.0);
}

}  // namespace

TEST_CASE("names round trip") {
  for (auto k : {AttackKind::gradient_box, AttackKind::gradient_sign, AttackKind::evolutionary})
    CHECK(parse_attack_kind(to_string(k)) == k);
  for (auto p : {TargetPolicy::fixed, TargetPolicy::least_likely, TargetPolicy::random_other})
    CHECK(parse_target_policy(to_string(p)) == p);
  CHECK_THROWS_AS(parse_attack_kind("lbfgs"), ArgumentError);
}

TEST_CASE("gradient box: already optimal target barely moves") {
  const Network net = linear_net({{20.0, 20.0}, {0.0, 0.0}}, {10.0, 0.0});
  const Tensor x0 = point({0.5, 0.5});
  AttackConfig cfg;
  cfg.stop_on_success = false;
  const auto rec = gradient_box_attack(net, x0, 0, cfg);
  CHECK(rec.success);
  CHECK(rec.linf < cfg.step);
}

TEST_CASE("gradient box: minimal flip matches the hyperplane distance") {
  // Class 1 minus class 0 logit is w.x + b with w = (10, 0.5), b = -5.25.
  const std::vector<double> w{10.0, 0.5};
  const double b = -5.25;
  const Network net = linear_net({{0.0, 0.0}, w}, {0.0, b});
  const Tensor x0 = point({0.2, 0.5});
  const double distance = std::abs(w[0] * 0.2 + w[1] * 0.5 + b) / std::hypot(w[0], w[1]);

  AttackConfig cfg;
  cfg.max_linf = 1.0;
  cfg.step = 0.002;
  cfg.max_iterations = 2000;
  cfg.confidence_goal = 0.51;
  const auto rec = gradient_box_attack(net, x0, 1, cfg);
  REQUIRE(rec.success);
  const double l2 = std::hypot(rec.image[0] - 0.2, rec.image[1] - 0.5);
  MESSAGE("l2 " << l2 << " vs distance " << distance);
  CHECK(std::abs(l2 - distance) <= 0.05 * distance);
}

TEST_CASE("gradient box: box, linf bound and monotone best objective") {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> g(0.0, 2.0);
  std::vector<std::vector<double>> w(3, std::vector<double>(6));
  for (auto& row : w)
    for (double& v : row) v = g(rng);
  const Network net = linear_net(w, {0.0, 0.0, 0.0});
  const Tensor x0 = point({0.0, 1.0, 0.3, 0.9, 0.5, 0.05});
  for (int target = 0; target < 3; ++target) {
    AttackConfig cfg;
    cfg.stop_on_success = false;
    cfg.max_iterations = 100;
    AttackTrace trace;
    const auto rec = gradient_box_attack(net, x0, target, cfg, &trace);
    check_box(rec.image);
    CHECK(rec.linf <= cfg.max_linf);
    for (std::size_t i = 0; i < x0.size(); ++i) CHECK(std::abs(rec.image[i] - x0[i]) <= cfg.max_linf);
    REQUIRE(!trace.best_objective.empty());
    for (std::size_t i = 1; i < trace.best_objective.size(); ++i)
      CHECK(trace.best_objective[i] <= trace.best_objective[i - 1]);
  }
}

TEST_CASE("gradient box: bisection keeps a successful minimum") {
  const Network net = linear_net({{0.0, 0.0}, {10.0, 0.5}}, {0.0, -5.25});
  AttackConfig cfg;
  cfg.max_linf = 1.0;
  cfg.bisect_c = true;
  const auto rec = gradient_box_attack(net, point({0.2, 0.5}), 1, cfg);
  CHECK(rec.success);
}

TEST_CASE("gradient sign") {
  const std::vector<double> w{1.5, -2.0, 0.25};
  const Network net = linear_net({{0.0, 0.0, 0.0}, w}, {0.0, 0.0});
  const Tensor x0 = point({0.5, 0.4, 0.6});

  AttackConfig zero;
  zero.kind = AttackKind::gradient_sign;
  zero.step = 0.0;
  zero.max_iterations = 5;
  zero.stop_on_success = false;
  CHECK(gradient_sign_attack(net, x0, 1, zero).image == x0);

  AttackConfig one = zero;
  one.step = 0.01;
  one.max_iterations = 1;
  const auto rec = gradient_sign_attack(net, x0, 1, one);
  const double before = w[0] * 0.5 + w[1] * 0.4 + w[2] * 0.6;
  const double after = w[0] * rec.image[0] + w[1] * rec.image[1] + w[2] * rec.image[2];
  CHECK(after - before == doctest::Approx(0.01 * (1.5 + 2.0 + 0.25)).epsilon(1e-12));

  AttackConfig big = zero;
  big.step = 1.0;
  big.max_iterations = 3;
  check_box(gradient_sign_attack(net, x0, 1, big).image);
}

TEST_CASE("evolutionary: zero generations returns the best initial member") {
  double best_seen = -1.0;
  std::size_t calls = 0;
  ProbabilityOracle oracle = [&](const Tensor& img) {
    ++calls;
    const double p = img.values()[0] * img.values()[1];
    best_seen = std::max(best_seen, p);
    return std::vector<double>{1.0 - p, p};
  };
  AttackConfig cfg;
  cfg.kind = AttackKind::evolutionary;
  cfg.ga.generations = 0;
  const auto rec = evolutionary_attack(oracle, {1, 1, 2}, 1, cfg);
  CHECK(calls == cfg.ga.population);
  CHECK(rec.iterations == 0);
  CHECK(rec.confidence == best_seen);
  CHECK(rec.image.values()[0] * rec.image.values()[1] == best_seen);
}

TEST_CASE("evolutionary: one-pixel threshold victim") {
  // Exhaustive scan of the pixel grid: positive iff pixel > 0.5.
  ProbabilityOracle oracle = [](const Tensor& img) {
    return img[0] > 0.5 ? std::vector<double>{0.0, 1.0} : std::vector<double>{1.0, 0.0};
  };
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    AttackConfig cfg;
    cfg.kind = AttackKind::evolutionary;
    cfg.seed = seed;
    cfg.ga.population = 4;
    cfg.ga.generations = 50;
    const auto rec = evolutionary_attack(oracle, {1, 1, 1}, 1, cfg);
    CHECK(rec.image[0] > 0.5);
    CHECK(rec.success);
    check_box(rec.image);
  }
}

TEST_CASE("run_attacks does not depend on the thread count") {
  std::mt19937_64 rng(4);
  std::normal_distribution<double> g(0.0, 2.0);
  std::vector<std::vector<double>> w(3, std::vector<double>(4));
  for (auto& row : w)
    for (double& v : row) v = g(rng);
  const Network net = linear_net(w, {0.0, 0.0, 0.0});
  std::vector<Tensor> images;
  std::vector<int> labels;
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int i = 0; i < 12; ++i) {
    images.push_back(point({u(rng), u(rng), u(rng), u(rng)}));
    labels.push_back(predict(net, images.back()).label);
  }
  std::vector<std::size_t> ids(images.size());
  for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = i;
  AttackConfig cfg;
  cfg.max_iterations = 50;
  const auto a = run_attacks(net, images, labels, ids, cfg, 1);
  const auto b = run_attacks(net, images, labels, ids, cfg, 3);
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].image == b[i].image);
    CHECK(a[i].target_label == b[i].target_label);
    CHECK(a[i].target_label != a[i].original_label);
  }
}

TEST_CASE("invalid configuration is rejected") {
  AttackConfig cfg;
  cfg.c = -1.0;
  CHECK_THROWS_AS(cfg.validate(), ArgumentError);
  cfg = {};
  cfg.confidence_goal = 1.5;
  CHECK_THROWS_AS(cfg.validate(), ArgumentError);
}
