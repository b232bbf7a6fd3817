#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "cascade_guard/network.hpp"
#include "cascade_guard/tensor.hpp"

namespace cguard {

struct SymmetricEigen {
  std::vector<double> values;  // descending
  Matrix vectors;              // column j pairs with values[j]
};

/// Cyclic Jacobi eigendecomposition of a symmetric matrix. Each eigenvector's
/// largest-magnitude component is made positive so results are reproducible.
SymmetricEigen symmetric_eigen(const Matrix& a);

/// Per-layer PCA model fit on normal-image pixel features: every pixel of a
/// layer output is one K-dimensional sample.
struct PcaBank {
  std::size_t layer = 0;
  std::vector<double> mean;    // e, length K
  Matrix projection;           // W, K x K, columns are eigenvectors
  std::vector<double> stds;    // s, length K, floored at epsilon
  double epsilon = 1e-8;

  std::size_t channels() const { return mean.size(); }
  void validate() const;
  friend bool operator==(const PcaBank&, const PcaBank&) = default;
};

/// Throws ArgumentError when the pooled pixel count is below K.
PcaBank fit_pca_bank(std::size_t layer, const std::vector<Tensor>& outputs, double epsilon = 1e-8);

/// Normalized coefficients W^T (v - e) / s of one pixel feature.
std::vector<double> project_normalized(const PcaBank& bank, std::span<const double> pixel);

/// Per PCA dimension, the mean absolute normalized coefficient over all pixels.
std::vector<double> pca_statistic(const Tensor& output, const PcaBank& bank);

/// [min_0..min_{K-1} | max_0..max_{K-1}] over the pixels of each channel.
std::vector<double> extremal_stats(const Tensor& output);

/// Linear interpolation at rank p/100 * (n - 1) of an ascending sample.
double percentile_sorted(std::span<const double> sorted, double p);

/// {25, 50, 75}.
std::span<const double> default_percentiles();

/// [p_0 for every channel | p_1 for every channel | ...].
std::vector<double> percentile_stats(const Tensor& output,
                                     std::span<const double> ps = default_percentiles());

struct LayerStatVector {
  std::size_t layer = 0;
  std::size_t channels = 0;
  std::vector<double> pca;          // K
  std::vector<double> extremal;     // 2K: min then max
  std::vector<double> percentiles;  // 3K: p25, p50, p75

  /// [pca | min | max | p25 | p50 | p75], length 6K.
  std::vector<double> concatenated() const;
};

LayerStatVector layer_feature_vector(const Tensor& output, const PcaBank& bank);
LayerStatVector layer_feature_vector(const Network& net, const Tensor& image, std::size_t layer,
                                     const PcaBank& bank);

/// Column names matching LayerStatVector::concatenated(), e.g. "min_3".
std::vector<std::string> feature_names(std::size_t channels);

/// One row per vector: layer index followed by the concatenated statistics.
void write_feature_csv(const std::filesystem::path& path, const std::vector<LayerStatVector>& rows);

struct SpectralRow {
  std::size_t direction = 0;  // eigenvector rank, 0 = largest eigenvalue
  double eigenvalue = 0.0;
  double normal_extremal = 0.0;       // max |projection| / normal std
  double adversarial_extremal = 0.0;
  double normal_std = 0.0;            // 1 by construction
  double adversarial_std = 0.0;       // std of projection / normal std
};

/// PCA of the normal feature vectors, then per eigenvector the normalized
/// extremal value and std of both sets. Directions whose normal std is below
/// `epsilon` carry no scale and are omitted.
std::vector<SpectralRow> spectral_report(const std::vector<std::vector<double>>& normal,
                                         const std::vector<std::vector<double>>& adversarial,
                                         double epsilon = 1e-8);

void write_spectral_csv(const std::filesystem::path& path, const std::vector<SpectralRow>& rows);

}  // namespace cguard
