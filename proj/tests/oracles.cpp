#include "oracles.hpp"

#include "cascade_guard/error.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <functional>
#include <random>

#include "json.hpp"

namespace oracle {

using cguard::Tensor;

Tensor conv2d(const Tensor& in, const cguard::ConvFilterBank& bank) {
  const long ph = static_cast<long>(in.height() + 2 * bank.padding);
  const long pw = static_cast<long>(in.width() + 2 * bank.padding);
  const std::size_t oh = (ph - bank.kernel_h) / bank.stride + 1;
  const std::size_t ow = (pw - bank.kernel_w) / bank.stride + 1;
  Tensor out(oh, ow, bank.count);
  for (std::size_t k = 0; k < bank.count; ++k)
    for (std::size_t y = 0; y < oh; ++y)
      for (std::size_t x = 0; x < ow; ++x) {
        double acc = bank.biases[k];
        for (std::size_t i = 0; i < bank.kernel_h; ++i)
          for (std::size_t j = 0; j < bank.kernel_w; ++j)
            for (std::size_t c = 0; c < bank.in_channels; ++c) {
              const long yy = static_cast<long>(y * bank.stride + i) - static_cast<long>(bank.padding);
              const long xx = static_cast<long>(x * bank.stride + j) - static_cast<long>(bank.padding);
              if (yy < 0 || xx < 0 || yy >= static_cast<long>(in.height()) ||
                  xx >= static_cast<long>(in.width()))
                continue;
              const double w = bank.weights[((k * bank.kernel_h + i) * bank.kernel_w + j) *
                                                bank.in_channels + c];
              acc += w * in(yy, xx, c);
            }
        out(y, x, k) = acc;
      }
  return out;
}

double percentile(std::vector<double> values, double p) {
  std::sort(values.begin(), values.end());
  const double rank = p / 100.0 * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(rank));
  const auto hi = static_cast<std::size_t>(std::ceil(rank));
  return values[lo] + (rank - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

double pair_auc(std::span<const double> scores, std::span<const int> labels) {
  double wins = 0.0;
  double pairs = 0.0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (labels[i] != 1) continue;
    for (std::size_t j = 0; j < scores.size(); ++j) {
      if (labels[j] == 1) continue;
      pairs += 1.0;
      if (scores[i] > scores[j]) wins += 1.0;
      else if (scores[i] == scores[j]) wins += 0.5;
    }
  }
  return wins / pairs;
}

cguard::NetworkSpec random_small_spec(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto pick = [&](std::size_t lo, std::size_t hi) {
    return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
  };
  for (;;) {
    cguard::NetworkSpec spec;
    spec.input = {pick(5, 8), pick(5, 8), pick(1, 2)};
    spec.classes = pick(2, 4);
    spec.layers.push_back(cguard::ConvSpec{pick(2, 3), pick(2, 3), pick(1, 2), pick(0, 1)});
    spec.layers.push_back(cguard::ReluSpec{});
    if (pick(0, 1)) spec.layers.push_back(cguard::MaxPoolSpec{2, pick(1, 2)});
    if (pick(0, 1)) {
      spec.layers.push_back(cguard::ConvSpec{pick(2, 3), 2, 1, pick(0, 1)});
      spec.layers.push_back(cguard::ReluSpec{});
    }
    if (pick(0, 1)) {
      spec.layers.push_back(cguard::DenseSpec{pick(3, 5)});
      spec.layers.push_back(cguard::ReluSpec{});
    }
    spec.layers.push_back(cguard::DenseSpec{spec.classes});
    spec.layers.push_back(cguard::SoftmaxSpec{});
    try {
      spec.validate();
      return spec;
    } catch (const cguard::ShapeError&) {
    }
  }
}

namespace {

std::vector<double*> parameter_slots(cguard::Network& net) {
  std::vector<double*> slots;
  for (auto& p : net.params) {
    if (auto* conv = std::get_if<cguard::ConvFilterBank>(&p)) {
      for (double& v : conv->weights) slots.push_back(&v);
      for (double& v : conv->biases) slots.push_back(&v);
    } else if (auto* d = std::get_if<cguard::DenseParams>(&p)) {
      for (double& v : d->weights.data) slots.push_back(&v);
      for (double& v : d->bias) slots.push_back(&v);
    }
  }
  return slots;
}

// ReLU signs and pool winners along the forward pass.
std::vector<std::size_t> kink_pattern(const cguard::Network& net, const Tensor& x) {
  cguard::ForwardTape tape;
  cguard::forward(net, x, &tape);
  std::vector<std::size_t> pattern;
  for (std::size_t i = 0; i < net.spec.layers.size(); ++i) {
    if (std::holds_alternative<cguard::ReluSpec>(net.spec.layers[i]))
      for (double v : tape.inputs[i].data()) pattern.push_back(v > 0.0 ? 1 : 0);
    for (std::size_t a : tape.argmax[i]) pattern.push_back(a);
  }
  return pattern;
}

double loss(const cguard::Network& net, const Tensor& x, std::size_t label) {
  const auto raw = cguard::forward(net, x);
  return cguard::softmax_cross_entropy(raw, label).loss;
}

}  // namespace

GradientCheck finite_difference_check(std::size_t count, std::uint64_t seed, double h,
                                      double floor) {
  GradientCheck result;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 0.5);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::size_t accepted = 0;
  while (accepted < count) {
    const std::uint64_t draw = rng();
    const auto spec = random_small_spec(draw);
    auto net = cguard::Network::initialized(spec, draw);
    auto slots = parameter_slots(net);
    for (double* s : slots) *s += 0.1 * normal(rng);
    Tensor x(spec.input.height, spec.input.width, spec.input.channels);
    for (double& v : x.data()) v = unit(rng);
    const std::size_t label = rng() % spec.classes;

    cguard::ForwardTape tape;
    const auto raw = cguard::forward(net, x, &tape);
    const auto ce = cguard::softmax_cross_entropy(raw, label);
    const auto grads = cguard::backward(net, tape, ce.grad);
    auto grad_copy = cguard::Network{spec, grads.params, {}};
    const auto analytic_params = parameter_slots(grad_copy);

    const auto base = kink_pattern(net, x);
    std::vector<std::pair<double, double>> pairs;  // analytic, numeric
    bool smooth = true;
    auto probe = [&](double* slot, double analytic) {
      const double keep = *slot;
      *slot = keep + h;
      const double up = loss(net, x, label);
      smooth = smooth && kink_pattern(net, x) == base;
      *slot = keep - h;
      const double down = loss(net, x, label);
      smooth = smooth && kink_pattern(net, x) == base;
      *slot = keep;
      pairs.emplace_back(analytic, (up - down) / (2.0 * h));
    };
    for (std::size_t i = 0; i < slots.size() && smooth; ++i) probe(slots[i], *analytic_params[i]);
    for (std::size_t i = 0; i < x.size() && smooth; ++i) probe(&x[i], grads.input[i]);
    if (!smooth) {
      ++result.resampled;
      continue;
    }
    ++accepted;
    for (const auto& [a, n] : pairs) {
      const double rel = std::abs(a - n) / std::max({std::abs(a), std::abs(n), floor});
      result.max_relative_error = std::max(result.max_relative_error, rel);
      ++result.components;
    }
  }
  return result;
}

}  // namespace oracle

namespace oracle {

std::vector<double> decode_float64_base64(const std::string& text) {
  static const std::string alphabet =
      "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
  std::vector<unsigned char> bytes;
  unsigned bits = 0;
  int nbits = 0;
  for (char ch : text) {
    if (ch == '=') break;
    bits = (bits << 6) | static_cast<unsigned>(alphabet.find(ch));
    nbits += 6;
    if (nbits >= 8) {
      nbits -= 8;
      bytes.push_back(static_cast<unsigned char>((bits >> nbits) & 0xFF));
    }
  }
  std::vector<double> out(bytes.size() / 8);
  for (std::size_t i = 0; i < out.size(); ++i) {
    std::uint64_t v = 0;
    for (int b = 7; b >= 0; --b) v = (v << 8) | bytes[i * 8 + b];
    out[i] = std::bit_cast<double>(v);
  }
  return out;
}

ReferenceDecision reference_cascade(const std::string& detector_json,
                                    const std::vector<std::vector<double>>& per_layer) {
  const auto doc = nlohmann::json::parse(detector_json);
  const auto& stages = doc.at("stages");
  std::vector<double> input;
  std::size_t used_layers = 0;
  for (std::size_t k = 0; k < stages.size(); ++k) {
    const auto& st = stages[k];
    const std::size_t layer = st.at("layer").get<std::size_t>();
    for (; used_layers <= layer; ++used_layers)
      input.insert(input.end(), per_layer[used_layers].begin(), per_layer[used_layers].end());
    const auto w = decode_float64_base64(st.at("w").get<std::string>());
    const auto mean = decode_float64_base64(st.at("feature_means").get<std::string>());
    const auto sd = decode_float64_base64(st.at("feature_stds").get<std::string>());
    const double clip = st.at("z_clip").get<double>();
    double d = st.at("b").get<double>();
    for (std::size_t j = 0; j < w.size(); ++j) {
      double z = (input[j] - mean[j]) / sd[j];
      z = std::min(clip, std::max(-clip, z));
      d += w[j] * z;
    }
    if (d < st.at("tau").get<double>()) return {false, k};
  }
  return {true, stages.size()};
}

std::vector<std::vector<double>> reference_statistics(const std::string& detector_json,
                                                      const std::vector<Tensor>& outputs) {
  const auto doc = nlohmann::json::parse(detector_json);
  std::vector<std::vector<double>> result;
  for (const auto& bank : doc.at("pca_banks")) {
    const Tensor& out = outputs[bank.at("layer").get<std::size_t>()];
    const auto e = decode_float64_base64(bank.at("e").get<std::string>());
    const auto W = decode_float64_base64(bank.at("W").get<std::string>());
    const auto s = decode_float64_base64(bank.at("s").get<std::string>());
    const std::size_t K = e.size();
    const std::size_t pixels = out.height() * out.width();
    std::vector<double> pca(K, 0.0);
    std::vector<std::vector<double>> channels(K);
    for (std::size_t p = 0; p < pixels; ++p) {
      for (std::size_t d = 0; d < K; ++d) {
        double c = 0.0;
        for (std::size_t k = 0; k < K; ++k) c += W[k * K + d] * (out[p * K + k] - e[k]);
        pca[d] += std::abs(c / s[d]);
      }
      for (std::size_t k = 0; k < K; ++k) channels[k].push_back(out[p * K + k]);
    }
    std::vector<double> row;
    for (double v : pca) row.push_back(v / static_cast<double>(pixels));
    for (auto& ch : channels) std::sort(ch.begin(), ch.end());
    for (const auto& ch : channels) row.push_back(ch.front());
    for (const auto& ch : channels) row.push_back(ch.back());
    for (double q : {25.0, 50.0, 75.0})
      for (const auto& ch : channels) row.push_back(percentile(ch, q));
    result.push_back(std::move(row));
  }
  return result;
}

}  // namespace oracle
