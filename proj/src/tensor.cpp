#include "cascade_guard/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "cascade_guard/error.hpp"

namespace cguard {

namespace {

std::string dims_str(Shape3 s) {
  return std::to_string(s.height) + "x" + std::to_string(s.width) + "x" +
         std::to_string(s.channels);
}

void require_positive(std::size_t h, std::size_t w, std::size_t c) {
  if (h == 0 || w == 0 || c == 0) {
    throw ShapeError("tensor dims must be positive, got " + dims_str({h, w, c}));
  }
}

// Gathers the (zero padded) receptive field of output pixel (oy, ox) into `patch`.
void gather_patch(const Tensor& in, const ConvFilterBank& bank, std::size_t oy, std::size_t ox,
                  std::vector<double>& patch) {
  const auto pad = static_cast<std::ptrdiff_t>(bank.padding);
  const auto y0 = static_cast<std::ptrdiff_t>(oy * bank.stride) - pad;
  const auto x0 = static_cast<std::ptrdiff_t>(ox * bank.stride) - pad;
  const auto H = static_cast<std::ptrdiff_t>(in.height());
  const auto W = static_cast<std::ptrdiff_t>(in.width());
  const std::size_t C = in.channels();
  const double* src = in.data().data();
  double* dst = patch.data();
  for (std::size_t i = 0; i < bank.kernel_h; ++i) {
    const auto y = y0 + static_cast<std::ptrdiff_t>(i);
    for (std::size_t j = 0; j < bank.kernel_w; ++j) {
      const auto x = x0 + static_cast<std::ptrdiff_t>(j);
      if (y < 0 || y >= H || x < 0 || x >= W) {
        std::fill(dst, dst + C, 0.0);
      } else {
        const double* p = src + (static_cast<std::size_t>(y) * in.width() + static_cast<std::size_t>(x)) * C;
        std::copy(p, p + C, dst);
      }
      dst += C;
    }
  }
}

void scatter_patch(Tensor& grad_in, const ConvFilterBank& bank, std::size_t oy, std::size_t ox,
                   const std::vector<double>& patch) {
  const auto pad = static_cast<std::ptrdiff_t>(bank.padding);
  const auto y0 = static_cast<std::ptrdiff_t>(oy * bank.stride) - pad;
  const auto x0 = static_cast<std::ptrdiff_t>(ox * bank.stride) - pad;
  const auto H = static_cast<std::ptrdiff_t>(grad_in.height());
  const auto W = static_cast<std::ptrdiff_t>(grad_in.width());
  const std::size_t C = grad_in.channels();
  double* dst = grad_in.data().data();
  const double* src = patch.data();
  for (std::size_t i = 0; i < bank.kernel_h; ++i) {
    const auto y = y0 + static_cast<std::ptrdiff_t>(i);
    for (std::size_t j = 0; j < bank.kernel_w; ++j) {
      const auto x = x0 + static_cast<std::ptrdiff_t>(j);
      if (y >= 0 && y < H && x >= 0 && x < W) {
        double* p = dst + (static_cast<std::size_t>(y) * grad_in.width() + static_cast<std::size_t>(x)) * C;
        for (std::size_t c = 0; c < C; ++c) p[c] += src[c];
      }
      src += C;
    }
  }
}

}  // namespace

Tensor::Tensor(std::size_t height, std::size_t width, std::size_t channels, double fill)
    : height_(height), width_(width), channels_(channels) {
  require_positive(height, width, channels);
  data_.assign(height * width * channels, fill);
}

Tensor::Tensor(std::size_t height, std::size_t width, std::size_t channels,
               std::vector<double> data)
    : height_(height), width_(width), channels_(channels), data_(std::move(data)) {
  require_positive(height, width, channels);
  if (data_.size() != height * width * channels) {
    throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                     " does not match dims " + dims_str(shape()));
  }
}

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

double Tensor::min() const {
  if (data_.empty()) return std::numeric_limits<double>::quiet_NaN();
  return *std::min_element(data_.begin(), data_.end());
}

double Tensor::max() const {
  if (data_.empty()) return std::numeric_limits<double>::quiet_NaN();
  return *std::max_element(data_.begin(), data_.end());
}

Matrix::Matrix(std::size_t r, std::size_t c, std::vector<double> values)
    : rows(r), cols(c), data(std::move(values)) {
  if (data.size() != r * c) {
    throw ShapeError("matrix data length " + std::to_string(data.size()) + " does not match " +
                     std::to_string(r) + "x" + std::to_string(c));
  }
}

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

ConvFilterBank::ConvFilterBank(std::size_t count_, std::size_t kernel_h_, std::size_t kernel_w_,
                               std::size_t in_channels_, std::size_t stride_, std::size_t padding_)
    : count(count_),
      kernel_h(kernel_h_),
      kernel_w(kernel_w_),
      in_channels(in_channels_),
      stride(stride_),
      padding(padding_),
      weights(count_ * kernel_h_ * kernel_w_ * in_channels_, 0.0),
      biases(count_, 0.0) {
  validate();
}

void ConvFilterBank::validate() const {
  if (count == 0) throw ShapeError("filter bank needs at least one kernel");
  if (kernel_h == 0 || kernel_w == 0 || in_channels == 0) {
    throw ShapeError("kernel dims must be positive");
  }
  if (stride == 0) throw ShapeError("stride must be positive");
  if (weights.size() != count * kernel_size()) {
    throw ShapeError("filter bank holds " + std::to_string(weights.size()) + " weights, expected " +
                     std::to_string(count * kernel_size()));
  }
  if (biases.size() != count) {
    throw ShapeError("filter bank holds " + std::to_string(biases.size()) + " biases, expected " +
                     std::to_string(count));
  }
}

Shape3 ConvFilterBank::output_shape(Shape3 input) const {
  if (input.channels != in_channels) {
    throw ShapeError("conv2d: input has " + std::to_string(input.channels) +
                     " channels but kernels expect " + std::to_string(in_channels));
  }
  const std::size_t ph = input.height + 2 * padding;
  const std::size_t pw = input.width + 2 * padding;
  if (ph < kernel_h || pw < kernel_w) {
    throw ShapeError("conv2d: padded input " + std::to_string(ph) + "x" + std::to_string(pw) +
                     " is smaller than kernel " + std::to_string(kernel_h) + "x" +
                     std::to_string(kernel_w));
  }
  return {(ph - kernel_h) / stride + 1, (pw - kernel_w) / stride + 1, count};
}

Tensor conv2d(const Tensor& input, const ConvFilterBank& bank) {
  bank.validate();
  const Shape3 out_shape = bank.output_shape(input.shape());
  Tensor out(out_shape);
  const std::size_t ks = bank.kernel_size();
  std::vector<double> patch(ks);
  double* o = out.data().data();
  for (std::size_t oy = 0; oy < out_shape.height; ++oy) {
    for (std::size_t ox = 0; ox < out_shape.width; ++ox) {
      gather_patch(input, bank, oy, ox, patch);
      for (std::size_t k = 0; k < bank.count; ++k) {
        const double* w = bank.weights.data() + k * ks;
        double acc = bank.biases[k];
        for (std::size_t t = 0; t < ks; ++t) acc += w[t] * patch[t];
        *o++ = acc;
      }
    }
  }
  return out;
}

void conv2d_backward(const Tensor& input, const ConvFilterBank& bank, const Tensor& grad_output,
                     Tensor* grad_input, std::vector<double>* grad_weights,
                     std::vector<double>* grad_biases) {
  const Shape3 out_shape = bank.output_shape(input.shape());
  if (grad_output.shape() != out_shape) {
    throw ShapeError("conv2d_backward: gradient dims " + dims_str(grad_output.shape()) +
                     " do not match output dims " + dims_str(out_shape));
  }
  const std::size_t ks = bank.kernel_size();
  if (grad_input != nullptr) *grad_input = Tensor(input.shape());
  std::vector<double> patch(ks);
  std::vector<double> dpatch(ks);
  const double* g = grad_output.data().data();
  for (std::size_t oy = 0; oy < out_shape.height; ++oy) {
    for (std::size_t ox = 0; ox < out_shape.width; ++ox) {
      const double* go = g + (oy * out_shape.width + ox) * bank.count;
      if (grad_weights != nullptr) {
        gather_patch(input, bank, oy, ox, patch);
        for (std::size_t k = 0; k < bank.count; ++k) {
          double* gw = grad_weights->data() + k * ks;
          for (std::size_t t = 0; t < ks; ++t) gw[t] += go[k] * patch[t];
        }
      }
      if (grad_biases != nullptr) {
        for (std::size_t k = 0; k < bank.count; ++k) (*grad_biases)[k] += go[k];
      }
      if (grad_input != nullptr) {
        std::fill(dpatch.begin(), dpatch.end(), 0.0);
        for (std::size_t k = 0; k < bank.count; ++k) {
          const double* w = bank.weights.data() + k * ks;
          const double gk = go[k];
          if (gk == 0.0) continue;
          for (std::size_t t = 0; t < ks; ++t) dpatch[t] += gk * w[t];
        }
        scatter_patch(*grad_input, bank, oy, ox, dpatch);
      }
    }
  }
}

Tensor relu(const Tensor& input) {
  Tensor out = input;
  for (double& v : out.data()) v = v > 0.0 ? v : 0.0;
  return out;
}

Tensor relu_backward(const Tensor& pre_activation, const Tensor& grad_output) {
  if (pre_activation.shape() != grad_output.shape()) {
    throw ShapeError("relu_backward: gradient dims do not match activation dims");
  }
  Tensor out(pre_activation.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = pre_activation[i] > 0.0 ? grad_output[i] : 0.0;
  }
  return out;
}

Shape3 maxpool_shape(Shape3 input, std::size_t window, std::size_t stride) {
  if (window == 0 || stride == 0) throw ShapeError("maxpool: window and stride must be positive");
  if (input.height < window || input.width < window) {
    throw ShapeError("maxpool: window " + std::to_string(window) + " exceeds spatial extent " +
                     std::to_string(input.height) + "x" + std::to_string(input.width));
  }
  return {(input.height - window) / stride + 1, (input.width - window) / stride + 1,
          input.channels};
}

Tensor maxpool(const Tensor& input, std::size_t window, std::size_t stride,
               std::vector<std::size_t>* argmax) {
  const Shape3 os = maxpool_shape(input.shape(), window, stride);
  Tensor out(os);
  if (argmax != nullptr) argmax->assign(os.size(), 0);
  for (std::size_t oy = 0; oy < os.height; ++oy) {
    for (std::size_t ox = 0; ox < os.width; ++ox) {
      for (std::size_t c = 0; c < os.channels; ++c) {
        std::size_t best = input.index(oy * stride, ox * stride, c);
        double best_v = input[best];
        for (std::size_t i = 0; i < window; ++i) {
          for (std::size_t j = 0; j < window; ++j) {
            const std::size_t idx = input.index(oy * stride + i, ox * stride + j, c);
            if (input[idx] > best_v) {
              best_v = input[idx];
              best = idx;
            }
          }
        }
        const std::size_t o = out.index(oy, ox, c);
        out[o] = best_v;
        if (argmax != nullptr) (*argmax)[o] = best;
      }
    }
  }
  return out;
}

Tensor maxpool_backward(Shape3 input_shape, std::span<const std::size_t> argmax,
                        const Tensor& grad_output) {
  if (argmax.size() != grad_output.size()) {
    throw ShapeError("maxpool_backward: argmax table does not match gradient size");
  }
  Tensor grad(input_shape);
  for (std::size_t o = 0; o < argmax.size(); ++o) grad[argmax[o]] += grad_output[o];
  return grad;
}

std::vector<double> dense(std::span<const double> input, const Matrix& weights,
                          std::span<const double> bias) {
  if (input.size() != weights.cols) {
    throw ShapeError("dense: input length " + std::to_string(input.size()) +
                     " does not match weight row length " + std::to_string(weights.cols));
  }
  if (bias.size() != weights.rows) {
    throw ShapeError("dense: bias length " + std::to_string(bias.size()) +
                     " does not match weight rows " + std::to_string(weights.rows));
  }
  std::vector<double> out(weights.rows);
  for (std::size_t r = 0; r < weights.rows; ++r) {
    const double* w = weights.data.data() + r * weights.cols;
    double acc = bias[r];
    for (std::size_t c = 0; c < weights.cols; ++c) acc += w[c] * input[c];
    out[r] = acc;
  }
  return out;
}

void dense_backward(std::span<const double> input, const Matrix& weights,
                    std::span<const double> grad_output, std::span<double> grad_input,
                    Matrix* grad_weights, std::span<double> grad_bias) {
  if (input.size() != weights.cols || grad_output.size() != weights.rows) {
    throw ShapeError("dense_backward: dimension mismatch");
  }
  if (!grad_input.empty()) {
    if (grad_input.size() != weights.cols) throw ShapeError("dense_backward: bad grad_input size");
    std::fill(grad_input.begin(), grad_input.end(), 0.0);
  }
  for (std::size_t r = 0; r < weights.rows; ++r) {
    const double g = grad_output[r];
    const double* w = weights.data.data() + r * weights.cols;
    if (!grad_input.empty()) {
      for (std::size_t c = 0; c < weights.cols; ++c) grad_input[c] += g * w[c];
    }
    if (grad_weights != nullptr) {
      double* gw = grad_weights->data.data() + r * weights.cols;
      for (std::size_t c = 0; c < weights.cols; ++c) gw[c] += g * input[c];
    }
    if (!grad_bias.empty()) grad_bias[r] += g;
  }
}

std::vector<double> softmax(std::span<const double> raw) {
  std::vector<double> p(raw.size());
  if (raw.empty()) return p;
  const double m = *std::max_element(raw.begin(), raw.end());
  double z = 0.0;
  for (std::size_t i = 0; i < raw.size(); ++i) {
    p[i] = std::exp(raw[i] - m);
    z += p[i];
  }
  for (double& v : p) v /= z;
  return p;
}

LossAndGradient softmax_cross_entropy(std::span<const double> raw, std::size_t label) {
  if (label >= raw.size()) {
    throw ArgumentError("label " + std::to_string(label) + " out of range for " +
                        std::to_string(raw.size()) + " classes");
  }
  const double m = *std::max_element(raw.begin(), raw.end());
  double z = 0.0;
  for (double v : raw) z += std::exp(v - m);
  const double log_z = m + std::log(z);
  LossAndGradient out;
  out.loss = log_z - raw[label];
  out.grad.resize(raw.size());
  for (std::size_t i = 0; i < raw.size(); ++i) out.grad[i] = std::exp(raw[i] - log_z);
  out.grad[label] -= 1.0;
  return out;
}

}  // namespace cguard
