#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace cguard {

struct Shape3 {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 0;

  std::size_t size() const { return height * width * channels; }
  friend bool operator==(const Shape3&, const Shape3&) = default;
};

/// Dense H x W x C array of doubles, row-major with channels innermost.
///
/// A default-constructed tensor is empty (all dims zero) and acts as a
/// placeholder; every other constructor requires strictly positive dims.
class Tensor {
 public:
  Tensor() = default;
  Tensor(std::size_t height, std::size_t width, std::size_t channels, double fill = 0.0);
  Tensor(std::size_t height, std::size_t width, std::size_t channels, std::vector<double> data);
  explicit Tensor(Shape3 shape, double fill = 0.0)
      : Tensor(shape.height, shape.width, shape.channels, fill) {}

  std::size_t height() const { return height_; }
  std::size_t width() const { return width_; }
  std::size_t channels() const { return channels_; }
  std::size_t size() const { return data_.size(); }
  Shape3 shape() const { return {height_, width_, channels_}; }
  bool empty() const { return data_.empty(); }

  std::size_t index(std::size_t y, std::size_t x, std::size_t c) const {
    return (y * width_ + x) * channels_ + c;
  }
  double& operator()(std::size_t y, std::size_t x, std::size_t c) { return data_[index(y, x, c)]; }
  double operator()(std::size_t y, std::size_t x, std::size_t c) const {
    return data_[index(y, x, c)];
  }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  const std::vector<double>& values() const { return data_; }

  bool all_finite() const;
  double min() const;
  double max() const;

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  std::size_t height_ = 0;
  std::size_t width_ = 0;
  std::size_t channels_ = 0;
  std::vector<double> data_;
};

/// Row-major dense matrix. Each row holds the weights of one output unit.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}
  Matrix(std::size_t r, std::size_t c, std::vector<double> values);

  double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
  std::span<const double> row(std::size_t r) const { return {data.data() + r * cols, cols}; }
  std::span<double> row(std::size_t r) { return {data.data() + r * cols, cols}; }

  static Matrix identity(std::size_t n);
  friend bool operator==(const Matrix&, const Matrix&) = default;
};

/// K convolution kernels of identical kernel_h x kernel_w x in_channels size.
/// Kernel k's weight (i, j, c) lives at ((k * kernel_h + i) * kernel_w + j) * in_channels + c.
struct ConvFilterBank {
  std::size_t count = 0;
  std::size_t kernel_h = 0;
  std::size_t kernel_w = 0;
  std::size_t in_channels = 0;
  std::size_t stride = 1;
  std::size_t padding = 0;
  std::vector<double> weights;
  std::vector<double> biases;

  ConvFilterBank() = default;
  ConvFilterBank(std::size_t count, std::size_t kernel_h, std::size_t kernel_w,
                 std::size_t in_channels, std::size_t stride = 1, std::size_t padding = 0);

  std::size_t kernel_size() const { return kernel_h * kernel_w * in_channels; }
  std::span<const double> kernel(std::size_t k) const {
    return {weights.data() + k * kernel_size(), kernel_size()};
  }
  // Output dims for a given input, or throws ShapeError.
  Shape3 output_shape(Shape3 input) const;
  void validate() const;

  friend bool operator==(const ConvFilterBank&, const ConvFilterBank&) = default;
};

Tensor conv2d(const Tensor& input, const ConvFilterBank& bank);

// Accumulates (+=) into grad_weights/grad_biases when non-null; writes grad_input when non-null.
void conv2d_backward(const Tensor& input, const ConvFilterBank& bank, const Tensor& grad_output,
                     Tensor* grad_input, std::vector<double>* grad_weights,
                     std::vector<double>* grad_biases);

Tensor relu(const Tensor& input);
// Subgradient at exactly zero is zero.
Tensor relu_backward(const Tensor& pre_activation, const Tensor& grad_output);

Shape3 maxpool_shape(Shape3 input, std::size_t window, std::size_t stride);
/// Sliding-window maximum per channel. When `argmax` is given it receives, for
/// each output element, the flat input index that won; ties go to the first
/// element in row-major scan order.
Tensor maxpool(const Tensor& input, std::size_t window, std::size_t stride,
               std::vector<std::size_t>* argmax = nullptr);
Tensor maxpool_backward(Shape3 input_shape, std::span<const std::size_t> argmax,
                        const Tensor& grad_output);

std::vector<double> dense(std::span<const double> input, const Matrix& weights,
                          std::span<const double> bias);
void dense_backward(std::span<const double> input, const Matrix& weights,
                    std::span<const double> grad_output, std::span<double> grad_input,
                    Matrix* grad_weights, std::span<double> grad_bias);

std::vector<double> softmax(std::span<const double> raw);

struct LossAndGradient {
  double loss = 0.0;
  std::vector<double> grad;  // d loss / d raw scores
};
// Cross-entropy of softmax(raw) against `label`, with its gradient p - onehot.
LossAndGradient softmax_cross_entropy(std::span<const double> raw, std::size_t label);

}  // namespace cguard
