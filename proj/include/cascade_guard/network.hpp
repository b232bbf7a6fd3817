#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <variant>
#include <vector>

#include "cascade_guard/dataset.hpp"
#include "cascade_guard/tensor.hpp"

namespace cguard {

struct ConvSpec {
  std::size_t filters = 1;
  std::size_t kernel = 3;
  std::size_t stride = 1;
  std::size_t padding = 0;
  friend bool operator==(const ConvSpec&, const ConvSpec&) = default;
};
struct ReluSpec {
  friend bool operator==(const ReluSpec&, const ReluSpec&) = default;
};
struct MaxPoolSpec {
  std::size_t window = 2;
  std::size_t stride = 2;
  friend bool operator==(const MaxPoolSpec&, const MaxPoolSpec&) = default;
};
struct DenseSpec {
  std::size_t outputs = 1;
  friend bool operator==(const DenseSpec&, const DenseSpec&) = default;
};
struct SoftmaxSpec {
  friend bool operator==(const SoftmaxSpec&, const SoftmaxSpec&) = default;
};

using LayerSpec = std::variant<ConvSpec, ReluSpec, MaxPoolSpec, DenseSpec, SoftmaxSpec>;

/// Ordered layer list ending in exactly one softmax head.
struct NetworkSpec {
  Shape3 input;
  std::size_t classes = 0;
  std::vector<LayerSpec> layers;

  /// 28x28x1 -> conv8(3x3) -> relu -> pool2 -> conv16(3x3) -> relu -> pool2 -> dense -> softmax.
  static NetworkSpec default_victim();

  /// Throws ShapeError when adjacent layers are incompatible or the head is malformed.
  void validate() const;
  /// Output shape of every layer (dense outputs are 1x1xN).
  std::vector<Shape3> layer_shapes() const;
  std::vector<std::size_t> conv_layer_indices() const;
  std::size_t conv_layer_count() const { return conv_layer_indices().size(); }

  friend bool operator==(const NetworkSpec&, const NetworkSpec&) = default;
};

struct DenseParams {
  Matrix weights;
  std::vector<double> bias;
  friend bool operator==(const DenseParams&, const DenseParams&) = default;
};

using LayerParams = std::variant<std::monostate, ConvFilterBank, DenseParams>;

struct TrainingInfo {
  std::uint64_t seed = 0;
  std::size_t epochs = 0;
  double learning_rate = 0.0;
  std::size_t batch_size = 0;
  double train_accuracy = 0.0;
  double test_accuracy = 0.0;
  friend bool operator==(const TrainingInfo&, const TrainingInfo&) = default;
};

struct Network {
  NetworkSpec spec;
  std::vector<LayerParams> params;  // one slot per layer; monostate for parameter-free layers
  TrainingInfo training;

  /// All-zero parameters shaped for `spec`.
  static Network zeros(const NetworkSpec& spec);
  /// He-normal weights, zero biases.
  static Network initialized(const NetworkSpec& spec, std::uint64_t seed);

  std::size_t parameter_count() const;
  void validate() const;

  friend bool operator==(const Network&, const Network&) = default;
};

/// Activations recorded by a forward pass, consumed by backward().
struct ForwardTape {
  std::vector<Tensor> inputs;                     // input to each layer
  std::vector<std::vector<std::size_t>> argmax;   // maxpool routing, per layer
  std::vector<double> raw;                        // pre-softmax scores
  bool recorded = false;
};

/// Raw class scores f_i(x). Records activations in `tape` when non-null.
std::vector<double> forward(const Network& net, const Tensor& image, ForwardTape* tape = nullptr);

struct Gradients {
  std::vector<LayerParams> params;  // same layout as Network::params
  Tensor input;

  static Gradients zeros_like(const Network& net);
  void scale(double factor);
};

struct BackwardTargets {
  bool params = true;
  bool input = true;
};

/// Reverse-mode pass for d loss / d raw scores = `raw_grad`. Accumulates parameter
/// gradients into `out.params` and overwrites `out.input`. Throws std::logic_error
/// when the tape was never recorded.
void backward(const Network& net, const ForwardTape& tape, std::span<const double> raw_grad,
              Gradients& out, BackwardTargets targets = {});
Gradients backward(const Network& net, const ForwardTape& tape, std::span<const double> raw_grad,
                   BackwardTargets targets = {});

struct TrainHyper {
  std::size_t epochs = 6;
  double learning_rate = 0.01;
  std::size_t batch_size = 32;
  double momentum = 0.9;
  std::uint64_t seed = 1;
};

/// SGD with momentum on softmax cross-entropy over the train split; accuracies
/// on the train and test splits are stored in the returned network.
/// Throws NumericError naming the epoch if the loss becomes non-finite.
Network train_victim(const Dataset& data, const NetworkSpec& spec, const TrainHyper& hyper);

double accuracy(const Network& net, const std::vector<Tensor>& images, const std::vector<int>& labels);

struct PredictionRecord {
  std::vector<double> raw;
  std::vector<double> probabilities;
  int label = -1;
};

PredictionRecord predict(const Network& net, const Tensor& image);

/// Output of every conv layer after its trailing ReLU (when one follows), in depth order.
std::vector<Tensor> layer_outputs(const Network& net, const Tensor& image);

/// Flattened input of the last dense layer; the feature space used by the spectral report.
std::vector<double> penultimate_features(const Network& net, const Tensor& image);

struct CensusTable {
  std::vector<double> thresholds;
  std::vector<double> raw_mean;      // mean |{i : f_i(x) > t}|
  std::vector<double> softmax_mean;  // mean |{i : p_i(x) > t}|
};

CensusTable prediction_census(const Network& net, const std::vector<Tensor>& images,
                              std::span<const double> thresholds);
CensusTable prediction_census(const std::vector<PredictionRecord>& predictions,
                              std::span<const double> thresholds);

}  // namespace cguard
