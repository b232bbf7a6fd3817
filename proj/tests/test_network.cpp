#include <cmath>
#include <random>

#include "doctest.h"

#include "cascade_guard/dataset.hpp"
#include "cascade_guard/error.hpp"
#include "cascade_guard/network.hpp"
#include "oracles.hpp"

using namespace cguard;

namespace {

Tensor random_image(Shape3 s, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Tensor t(s);
  for (double& v : t.data()) v = u(rng);
  return t;
}

// Two Gaussian blobs on either side of x0 + x1 = 0, as 1x1x2 "images".
Dataset separable_toy(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, 0.1);
  Dataset d;
  d.classes = 2;
  for (std::size_t i = 0; i < n; ++i) {
    const int label = static_cast<int>(i % 2);
    const double c = label == 0 ? 0.25 : 0.75;
    d.images.emplace_back(1, 1, 2, std::vector<double>{std::clamp(c + g(rng), 0.0, 1.0),
                                                         std::clamp(c + g(rng), 0.0, 1.0)});
    d.labels.push_back(label);
    d.splits.push_back(i % 5 == 4 ? Split::test : Split::train);
  }
  return d;
}

NetworkSpec dense_only(Shape3 input, std::size_t classes) {
  NetworkSpec spec;
  spec.input = input;
  spec.classes = classes;
  spec.layers = {DenseSpec{classes}, SoftmaxSpec{}};
  return spec;
}

}  // namespace

TEST_CASE("backward matches central finite differences on random networks") {
  const auto check = oracle::finite_difference_check(20, 2024);
  MESSAGE("max relative error " << check.max_relative_error << " over " << check.components
                                << " components, " << check.resampled << " draws resampled");
  CHECK(check.max_relative_error < 1e-6);
  CHECK(check.components > 1000);
}

TEST_CASE("zero loss gradient gives zero parameter gradients") {
  const auto spec = NetworkSpec::default_victim();
  const auto net = Network::initialized(spec, 4);
  ForwardTape tape;
  forward(net, random_image(spec.input, 1), &tape);
  const std::vector<double> zero(spec.classes, 0.0);
  const auto g = backward(net, tape, zero);
  for (const auto& p : g.params) {
    if (const auto* c = std::get_if<ConvFilterBank>(&p)) {
      for (double v : c->weights) CHECK(v == 0.0);
      for (double v : c->biases) CHECK(v == 0.0);
    } else if (const auto* d = std::get_if<DenseParams>(&p)) {
      for (double v : d->weights.data) CHECK(v == 0.0);
    }
  }
  for (double v : g.input.data()) CHECK(v == 0.0);
}

TEST_CASE("backward before forward is rejected") {
  const auto net = Network::initialized(NetworkSpec::default_victim(), 1);
  ForwardTape tape;
  const std::vector<double> grad(10, 1.0);
  CHECK_THROWS_AS(backward(net, tape, grad), std::logic_error);
}

TEST_CASE("spec validation") {
  NetworkSpec spec = NetworkSpec::default_victim();
  CHECK_NOTHROW(spec.validate());
  CHECK(spec.conv_layer_count() == 2);
  NetworkSpec no_head = spec;
  no_head.layers.pop_back();
  CHECK_THROWS_AS(no_head.validate(), ShapeError);
  NetworkSpec wrong_classes = spec;
  wrong_classes.classes = 7;
  CHECK_THROWS_AS(wrong_classes.validate(), ShapeError);
  NetworkSpec huge_kernel = spec;
  huge_kernel.layers.insert(huge_kernel.layers.begin(), ConvSpec{1, 40, 1, 0});
  CHECK_THROWS_AS(huge_kernel.validate(), ShapeError);
}

TEST_CASE("predict") {
  const auto spec = NetworkSpec::default_victim();
  const auto zeros = Network::zeros(spec);
  const Tensor x = random_image(spec.input, 5);
  const auto rec = predict(zeros, x);
  for (double p : rec.probabilities) CHECK(p == doctest::Approx(0.1).epsilon(1e-15));

  const auto net = Network::initialized(spec, 8);
  const auto a = predict(net, x);
  const auto b = predict(net, x);
  CHECK(a.raw == b.raw);
  CHECK(a.probabilities == b.probabilities);
  const auto raw_arg = std::max_element(a.raw.begin(), a.raw.end()) - a.raw.begin();
  const auto p_arg = std::max_element(a.probabilities.begin(), a.probabilities.end()) -
                     a.probabilities.begin();
  CHECK(raw_arg == p_arg);
  CHECK(a.label == raw_arg);
  double sum = 0.0;
  for (double p : a.probabilities) sum += p;
  CHECK(std::abs(sum - 1.0) < 1e-12);
  CHECK_THROWS_AS(predict(net, Tensor(27, 28, 1)), ShapeError);
}

TEST_CASE("layer outputs recompute from standalone ops") {
  const auto spec = NetworkSpec::default_victim();
  const auto net = Network::initialized(spec, 12);
  const Tensor x = random_image(spec.input, 6);
  const auto outs = layer_outputs(net, x);
  REQUIRE(outs.size() == 2);
  for (const auto& o : outs)
    for (double v : o.data()) CHECK(v >= 0.0);
  const auto& bank = std::get<ConvFilterBank>(net.params[0]);
  CHECK(outs[0] == relu(oracle::conv2d(x, bank)));
}

TEST_CASE("an inserted identity conv layer leaves predictions unchanged") {
  const auto spec = NetworkSpec::default_victim();
  const auto net = Network::initialized(spec, 3);
  Network wider = net;
  wider.spec.layers.insert(wider.spec.layers.begin(), ConvSpec{1, 1, 1, 0});
  ConvFilterBank id(1, 1, 1, 1);
  id.weights = {1.0};
  wider.params.insert(wider.params.begin(), id);
  REQUIRE_NOTHROW(wider.validate());
  for (std::uint64_t s = 0; s < 5; ++s) {
    const Tensor x = random_image(spec.input, 100 + s);
    const auto a = predict(net, x).raw;
    const auto b = predict(wider, x).raw;
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(std::abs(a[i] - b[i]) < 1e-10);
  }
}

TEST_CASE("prediction census") {
  const auto spec = NetworkSpec::default_victim();
  const auto net = Network::initialized(spec, 2);
  std::vector<Tensor> images;
  for (std::uint64_t s = 0; s < 8; ++s) images.push_back(random_image(spec.input, s));
  const std::vector<double> thresholds{-1e9, -1.0, 0.0, 0.1, 1.0, 1e9};
  const auto table = prediction_census(net, images, thresholds);
  CHECK(table.raw_mean.front() == 10.0);
  CHECK(table.raw_mean.back() == 0.0);
  CHECK(table.softmax_mean.back() == 0.0);
  for (std::size_t i = 1; i < thresholds.size(); ++i) {
    CHECK(table.raw_mean[i] <= table.raw_mean[i - 1]);
    CHECK(table.softmax_mean[i] <= table.softmax_mean[i - 1]);
  }
  // independent count for t = 0
  double count = 0.0;
  for (const auto& img : images)
    for (double r : forward(net, img)) count += r > 0.0 ? 1.0 : 0.0;
  CHECK(table.raw_mean[2] == doctest::Approx(count / 8.0));
}

TEST_CASE("training a separable toy reaches full train accuracy") {
  const Dataset d = separable_toy(200, 4);
  TrainHyper hyper;
  hyper.epochs = 30;
  hyper.learning_rate = 0.5;
  hyper.batch_size = 8;
  const auto net = train_victim(d, dense_only({1, 1, 2}, 2), hyper);
  CHECK(net.training.train_accuracy == 1.0);
}

TEST_CASE("single-class data is trivially perfect") {
  Dataset d;
  d.classes = 1;
  for (int i = 0; i < 10; ++i) {
    d.images.emplace_back(1, 1, 2, 0.1 * i);
    d.labels.push_back(0);
    d.splits.push_back(i < 8 ? Split::train : Split::test);
  }
  const auto net = train_victim(d, dense_only({1, 1, 2}, 1), TrainHyper{});
  CHECK(net.training.train_accuracy == 1.0);
  CHECK(net.training.test_accuracy == 1.0);
}

TEST_CASE("training is deterministic per seed") {
  const Dataset d = synth_dataset(3, 8);
  TrainHyper hyper;
  hyper.epochs = 1;
  const auto a = train_victim(d, NetworkSpec::default_victim(), hyper);
  const auto b = train_victim(d, NetworkSpec::default_victim(), hyper);
  CHECK(a == b);
  hyper.seed = 2;
  const auto c = train_victim(d, NetworkSpec::default_victim(), hyper);
  CHECK_FALSE(a == c);
}

TEST_CASE("divergent training reports the epoch") {
  const Dataset d = separable_toy(40, 1);
  TrainHyper hyper;
  hyper.learning_rate = 1e308;
  hyper.epochs = 3;
  try {
    train_victim(d, dense_only({1, 1, 2}, 2), hyper);
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("epoch") != std::string::npos);
  }
}
