#include "cascade_guard/network.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>

#include "cascade_guard/error.hpp"

namespace cguard {

namespace {

template <class... Ts>
struct overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
overloaded(Ts...) -> overloaded<Ts...>;

// Visits every parameter array of one layer slot.
template <class Params, class Fn>
void for_each_array(Params& p, Fn&& fn) {
  if (auto* bank = std::get_if<ConvFilterBank>(&p)) {
    fn(std::span(bank->weights));
    fn(std::span(bank->biases));
  } else if (auto* d = std::get_if<DenseParams>(&p)) {
    fn(std::span(d->weights.data));
    fn(std::span(d->bias));
  }
}

template <class Params, class Fn>
void for_each_array_pair(Params& a, const Params& b, Fn&& fn) {
  if (auto* bank = std::get_if<ConvFilterBank>(&a)) {
    const auto& other = std::get<ConvFilterBank>(b);
    fn(std::span(bank->weights), std::span(other.weights));
    fn(std::span(bank->biases), std::span(other.biases));
  } else if (auto* d = std::get_if<DenseParams>(&a)) {
    const auto& other = std::get<DenseParams>(b);
    fn(std::span(d->weights.data), std::span(other.weights.data));
    fn(std::span(d->bias), std::span(other.bias));
  }
}

std::size_t argmax_of(std::span<const double> v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

}  // namespace

NetworkSpec NetworkSpec::default_victim() {
  NetworkSpec spec;
  spec.input = {28, 28, 1};
  spec.classes = 10;
  spec.layers = {ConvSpec{8, 3, 1, 0}, ReluSpec{}, MaxPoolSpec{2, 2},
                 ConvSpec{16, 3, 1, 0}, ReluSpec{}, MaxPoolSpec{2, 2},
                 DenseSpec{10}, SoftmaxSpec{}};
  return spec;
}

std::vector<Shape3> NetworkSpec::layer_shapes() const {
  if (input.size() == 0) throw ShapeError("network input dims must be positive");
  std::vector<Shape3> shapes;
  shapes.reserve(layers.size());
  Shape3 cur = input;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& layer = layers[i];
    try {
      cur = std::visit(
          overloaded{
              [&](const ConvSpec& c) {
                ConvFilterBank probe;
                probe.count = c.filters;
                probe.kernel_h = probe.kernel_w = c.kernel;
                probe.in_channels = cur.channels;
                probe.stride = c.stride;
                probe.padding = c.padding;
                if (c.filters == 0 || c.kernel == 0 || c.stride == 0) {
                  throw ShapeError("conv layer needs positive filters, kernel and stride");
                }
                return probe.output_shape(cur);
              },
              [&](const ReluSpec&) { return cur; },
              [&](const MaxPoolSpec& p) { return maxpool_shape(cur, p.window, p.stride); },
              [&](const DenseSpec& d) {
                if (d.outputs == 0) throw ShapeError("dense layer needs at least one output");
                return Shape3{1, 1, d.outputs};
              },
              [&](const SoftmaxSpec&) { return cur; }},
          layer);
    } catch (const ShapeError& e) {
      throw ShapeError("layer " + std::to_string(i) + ": " + e.what());
    }
    shapes.push_back(cur);
  }
  return shapes;
}

void NetworkSpec::validate() const {
  if (classes == 0) throw ShapeError("network needs at least one class");
  if (layers.empty() || !std::holds_alternative<SoftmaxSpec>(layers.back())) {
    throw ShapeError("network must end in a softmax head");
  }
  const auto heads = std::count_if(layers.begin(), layers.end(), [](const LayerSpec& l) {
    return std::holds_alternative<SoftmaxSpec>(l);
  });
  if (heads != 1) throw ShapeError("network must contain exactly one softmax head");
  const auto shapes = layer_shapes();
  if (shapes.back().size() != classes) {
    throw ShapeError("softmax head receives " + std::to_string(shapes.back().size()) +
                     " scores but the network declares " + std::to_string(classes) + " classes");
  }
}

std::vector<std::size_t> NetworkSpec::conv_layer_indices() const {
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (std::holds_alternative<ConvSpec>(layers[i])) idx.push_back(i);
  }
  return idx;
}

Network Network::zeros(const NetworkSpec& spec) {
  spec.validate();
  Network net;
  net.spec = spec;
  Shape3 cur = spec.input;
  const auto shapes = spec.layer_shapes();
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const auto& layer = spec.layers[i];
    if (const auto* c = std::get_if<ConvSpec>(&layer)) {
      net.params.emplace_back(
          ConvFilterBank(c->filters, c->kernel, c->kernel, cur.channels, c->stride, c->padding));
    } else if (const auto* d = std::get_if<DenseSpec>(&layer)) {
      net.params.emplace_back(DenseParams{Matrix(d->outputs, cur.size()),
                                          std::vector<double>(d->outputs, 0.0)});
    } else {
      net.params.emplace_back(std::monostate{});
    }
    cur = shapes[i];
  }
  return net;
}

Network Network::initialized(const NetworkSpec& spec, std::uint64_t seed) {
  Network net = zeros(spec);
  std::mt19937_64 rng(seed);
  for (auto& p : net.params) {
    if (auto* bank = std::get_if<ConvFilterBank>(&p)) {
      std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(bank->kernel_size())));
      for (double& w : bank->weights) w = dist(rng);
    } else if (auto* d = std::get_if<DenseParams>(&p)) {
      std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(d->weights.cols)));
      for (double& w : d->weights.data) w = dist(rng);
    }
  }
  net.training.seed = seed;
  return net;
}

std::size_t Network::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params) for_each_array(p, [&](auto s) { n += s.size(); });
  return n;
}

void Network::validate() const {
  spec.validate();
  if (params.size() != spec.layers.size()) {
    throw ShapeError("network holds " + std::to_string(params.size()) + " parameter slots for " +
                     std::to_string(spec.layers.size()) + " layers");
  }
  const Network ref = zeros(spec);
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].index() != ref.params[i].index()) {
      throw ShapeError("layer " + std::to_string(i) + ": parameter kind does not match spec");
    }
    if (const auto* bank = std::get_if<ConvFilterBank>(&params[i])) {
      const auto& r = std::get<ConvFilterBank>(ref.params[i]);
      bank->validate();
      if (bank->count != r.count || bank->kernel_h != r.kernel_h || bank->kernel_w != r.kernel_w ||
          bank->in_channels != r.in_channels || bank->stride != r.stride ||
          bank->padding != r.padding) {
        throw ShapeError("layer " + std::to_string(i) + ": filter bank dims do not match spec");
      }
    } else if (const auto* d = std::get_if<DenseParams>(&params[i])) {
      const auto& r = std::get<DenseParams>(ref.params[i]);
      if (d->weights.rows != r.weights.rows || d->weights.cols != r.weights.cols ||
          d->weights.data.size() != r.weights.data.size() || d->bias.size() != r.bias.size()) {
        throw ShapeError("layer " + std::to_string(i) + ": dense dims do not match spec");
      }
    }
  }
}

std::vector<double> forward(const Network& net, const Tensor& image, ForwardTape* tape) {
  if (image.shape() != net.spec.input) {
    throw ShapeError("image dims " + std::to_string(image.height()) + "x" +
                     std::to_string(image.width()) + "x" + std::to_string(image.channels()) +
                     " do not match network input");
  }
  if (tape != nullptr) {
    tape->inputs.clear();
    tape->argmax.assign(net.spec.layers.size(), {});
    tape->recorded = false;
  }
  Tensor cur = image;
  for (std::size_t i = 0; i < net.spec.layers.size(); ++i) {
    const auto& layer = net.spec.layers[i];
    if (std::holds_alternative<SoftmaxSpec>(layer)) break;
    if (tape != nullptr) tape->inputs.push_back(cur);
    if (std::holds_alternative<ConvSpec>(layer)) {
      cur = conv2d(cur, std::get<ConvFilterBank>(net.params[i]));
    } else if (std::holds_alternative<ReluSpec>(layer)) {
      cur = relu(cur);
    } else if (const auto* p = std::get_if<MaxPoolSpec>(&layer)) {
      cur = maxpool(cur, p->window, p->stride, tape != nullptr ? &tape->argmax[i] : nullptr);
    } else if (std::holds_alternative<DenseSpec>(layer)) {
      const auto& d = std::get<DenseParams>(net.params[i]);
      auto out = dense(cur.data(), d.weights, d.bias);
      const std::size_t n = out.size();
      cur = Tensor(1, 1, n, std::move(out));
    }
  }
  std::vector<double> raw(cur.data().begin(), cur.data().end());
  if (!std::all_of(raw.begin(), raw.end(), [](double v) { return std::isfinite(v); })) {
    throw NumericError("forward pass produced non-finite scores");
  }
  if (tape != nullptr) {
    tape->raw = raw;
    tape->recorded = true;
  }
  return raw;
}

Gradients Gradients::zeros_like(const Network& net) {
  Gradients g;
  g.params = net.params;
  for (auto& p : g.params) for_each_array(p, [](auto s) { std::fill(s.begin(), s.end(), 0.0); });
  return g;
}

void Gradients::scale(double factor) {
  for (auto& p : params) for_each_array(p, [&](auto s) { for (double& v : s) v *= factor; });
  for (double& v : input.data()) v *= factor;
}

void backward(const Network& net, const ForwardTape& tape, std::span<const double> raw_grad,
              Gradients& out, BackwardTargets targets) {
  if (!tape.recorded) throw std::logic_error("backward called before a recorded forward pass");
  if (raw_grad.size() != tape.raw.size()) {
    throw ShapeError("loss gradient has " + std::to_string(raw_grad.size()) + " entries, expected " +
                     std::to_string(tape.raw.size()));
  }
  if (targets.params && out.params.size() != net.params.size()) {
    out.params = Gradients::zeros_like(net).params;
  }
  const std::size_t n_layers = tape.inputs.size();
  Tensor grad = [&] {
    const Shape3 last = n_layers == 0 ? net.spec.input : net.spec.layer_shapes()[n_layers - 1];
    return Tensor(last.height, last.width, last.channels,
                  std::vector<double>(raw_grad.begin(), raw_grad.end()));
  }();
  // Earliest layer whose input gradient is needed; below it only parameter grads matter.
  std::size_t first_param_layer = n_layers;
  for (std::size_t i = 0; i < n_layers; ++i) {
    if (!std::holds_alternative<std::monostate>(net.params[i])) {
      first_param_layer = i;
      break;
    }
  }
  for (std::size_t li = n_layers; li-- > 0;) {
    const auto& layer = net.spec.layers[li];
    const Tensor& in = tape.inputs[li];
    const bool need_input_grad = targets.input || li > first_param_layer;
    if (std::holds_alternative<ConvSpec>(layer)) {
      const auto& bank = std::get<ConvFilterBank>(net.params[li]);
      Tensor gin;
      ConvFilterBank* gb = targets.params ? &std::get<ConvFilterBank>(out.params[li]) : nullptr;
      conv2d_backward(in, bank, grad, need_input_grad ? &gin : nullptr,
                      gb ? &gb->weights : nullptr, gb ? &gb->biases : nullptr);
      if (!need_input_grad) return;
      grad = std::move(gin);
    } else if (std::holds_alternative<ReluSpec>(layer)) {
      grad = relu_backward(in, grad);
    } else if (std::holds_alternative<MaxPoolSpec>(layer)) {
      grad = maxpool_backward(in.shape(), tape.argmax[li], grad);
    } else if (std::holds_alternative<DenseSpec>(layer)) {
      const auto& d = std::get<DenseParams>(net.params[li]);
      Tensor gin(in.shape());
      DenseParams* gd = targets.params ? &std::get<DenseParams>(out.params[li]) : nullptr;
      dense_backward(in.data(), d.weights, grad.data(),
                     need_input_grad ? gin.data() : std::span<double>{},
                     gd ? &gd->weights : nullptr, gd ? std::span<double>(gd->bias) : std::span<double>{});
      if (!need_input_grad) return;
      grad = std::move(gin);
    }
  }
  if (targets.input) out.input = std::move(grad);
}

Gradients backward(const Network& net, const ForwardTape& tape, std::span<const double> raw_grad,
                   BackwardTargets targets) {
  Gradients g;
  if (targets.params) g = Gradients::zeros_like(net);
  backward(net, tape, raw_grad, g, targets);
  return g;
}

double accuracy(const Network& net, const std::vector<Tensor>& images,
                const std::vector<int>& labels) {
  if (images.empty()) return 0.0;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < images.size(); ++i) {
    const auto raw = forward(net, images[i]);
    if (static_cast<int>(argmax_of(raw)) == labels[i]) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(images.size());
}

Network train_victim(const Dataset& data, const NetworkSpec& spec, const TrainHyper& hyper) {
  spec.validate();
  const Dataset train = data.subset(Split::train);
  if (train.size() == 0) throw ArgumentError("train_victim: no training samples");
  for (int label : train.labels) {
    if (label < 0 || static_cast<std::size_t>(label) >= spec.classes) {
      throw ArgumentError("train_victim: label " + std::to_string(label) + " out of range");
    }
  }
  if (hyper.batch_size == 0) throw ArgumentError("train_victim: batch size must be positive");

  Network net = Network::initialized(spec, hyper.seed);
  Gradients velocity = Gradients::zeros_like(net);
  Gradients grad = Gradients::zeros_like(net);
  std::mt19937_64 rng(hyper.seed ^ 0x9e3779b97f4a7c15ULL);
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  ForwardTape tape;

  for (std::size_t epoch = 0; epoch < hyper.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += hyper.batch_size) {
      const std::size_t end = std::min(order.size(), start + hyper.batch_size);
      for (auto& p : grad.params) for_each_array(p, [](auto s) { std::fill(s.begin(), s.end(), 0.0); });
      for (std::size_t k = start; k < end; ++k) {
        const std::size_t idx = order[k];
        std::vector<double> raw;
        try {
          raw = forward(net, train.images[idx], &tape);
        } catch (const NumericError&) {
          throw NumericError("training diverged (non-finite scores) in epoch " +
                             std::to_string(epoch + 1));
        }
        const auto lg = softmax_cross_entropy(raw, static_cast<std::size_t>(train.labels[idx]));
        epoch_loss += lg.loss;
        backward(net, tape, lg.grad, grad, {.params = true, .input = false});
      }
      const double inv = 1.0 / static_cast<double>(end - start);
      for (std::size_t li = 0; li < net.params.size(); ++li) {
        for_each_array_pair(velocity.params[li], grad.params[li], [&](auto v, auto g) {
          for (std::size_t t = 0; t < v.size(); ++t) {
            v[t] = hyper.momentum * v[t] - hyper.learning_rate * g[t] * inv;
          }
        });
        for_each_array_pair(net.params[li], velocity.params[li], [](auto w, auto v) {
          for (std::size_t t = 0; t < w.size(); ++t) w[t] += v[t];
        });
      }
      if (!std::isfinite(epoch_loss)) {
        throw NumericError("training diverged (non-finite loss) in epoch " + std::to_string(epoch + 1));
      }
    }
  }

  net.training.seed = hyper.seed;
  net.training.epochs = hyper.epochs;
  net.training.learning_rate = hyper.learning_rate;
  net.training.batch_size = hyper.batch_size;
  net.training.train_accuracy = accuracy(net, train.images, train.labels);
  const Dataset test = data.subset(Split::test);
  net.training.test_accuracy = test.size() > 0 ? accuracy(net, test.images, test.labels) : 0.0;
  return net;
}

PredictionRecord predict(const Network& net, const Tensor& image) {
  PredictionRecord rec;
  rec.raw = forward(net, image);
  rec.probabilities = softmax(rec.raw);
  rec.label = static_cast<int>(argmax_of(rec.raw));
  return rec;
}

std::vector<Tensor> layer_outputs(const Network& net, const Tensor& image) {
  if (image.shape() != net.spec.input) throw ShapeError("image dims do not match network input");
  std::vector<Tensor> outs;
  const auto& layers = net.spec.layers;
  const auto convs = net.spec.conv_layer_indices();
  if (convs.empty()) return outs;
  const std::size_t last_needed = convs.back() + 1;
  Tensor cur = image;
  for (std::size_t i = 0; i <= last_needed && i < layers.size(); ++i) {
    const auto& layer = layers[i];
    if (std::holds_alternative<ConvSpec>(layer)) {
      cur = conv2d(cur, std::get<ConvFilterBank>(net.params[i]));
      const bool relu_follows = i + 1 < layers.size() && std::holds_alternative<ReluSpec>(layers[i + 1]);
      if (!relu_follows) outs.push_back(cur);
    } else if (std::holds_alternative<ReluSpec>(layer)) {
      cur = relu(cur);
      if (i > 0 && std::holds_alternative<ConvSpec>(layers[i - 1])) outs.push_back(cur);
    } else if (const auto* p = std::get_if<MaxPoolSpec>(&layer)) {
      cur = maxpool(cur, p->window, p->stride);
    } else if (std::holds_alternative<DenseSpec>(layer)) {
      const auto& d = std::get<DenseParams>(net.params[i]);
      auto out = dense(cur.data(), d.weights, d.bias);
      const std::size_t n = out.size();
      cur = Tensor(1, 1, n, std::move(out));
    } else {
      break;
    }
  }
  return outs;
}

std::vector<double> penultimate_features(const Network& net, const Tensor& image) {
  ForwardTape tape;
  forward(net, image, &tape);
  for (std::size_t i = tape.inputs.size(); i-- > 0;) {
    if (std::holds_alternative<DenseSpec>(net.spec.layers[i])) {
      const auto d = tape.inputs[i].data();
      return {d.begin(), d.end()};
    }
  }
  throw ShapeError("network has no dense layer");
}

CensusTable prediction_census(const std::vector<PredictionRecord>& predictions,
                              std::span<const double> thresholds) {
  if (predictions.empty()) throw ArgumentError("prediction_census needs at least one image");
  CensusTable table;
  table.thresholds.assign(thresholds.begin(), thresholds.end());
  table.raw_mean.assign(thresholds.size(), 0.0);
  table.softmax_mean.assign(thresholds.size(), 0.0);
  for (const auto& rec : predictions) {
    for (std::size_t t = 0; t < thresholds.size(); ++t) {
      table.raw_mean[t] += static_cast<double>(std::count_if(
          rec.raw.begin(), rec.raw.end(), [&](double v) { return v > thresholds[t]; }));
      table.softmax_mean[t] += static_cast<double>(std::count_if(
          rec.probabilities.begin(), rec.probabilities.end(),
          [&](double v) { return v > thresholds[t]; }));
    }
  }
  const double n = static_cast<double>(predictions.size());
  for (auto& v : table.raw_mean) v /= n;
  for (auto& v : table.softmax_mean) v /= n;
  return table;
}

CensusTable prediction_census(const Network& net, const std::vector<Tensor>& images,
                              std::span<const double> thresholds) {
  std::vector<PredictionRecord> preds;
  preds.reserve(images.size());
  for (const auto& img : images) preds.push_back(predict(net, img));
  return prediction_census(preds, thresholds);
}

}  // namespace cguard
