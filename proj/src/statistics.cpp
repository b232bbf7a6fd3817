#include "cascade_guard/statistics.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <numeric>

#include "cascade_guard/error.hpp"

namespace cguard {

namespace {

double off_diagonal_norm(const Matrix& a) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.rows; ++i)
    for (std::size_t j = 0; j < a.cols; ++j)
      if (i != j) s += a(i, j) * a(i, j);
  return std::sqrt(s);
}

double population_std(std::span<const double> v) {
  const double n = static_cast<double>(v.size());
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= n;
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  return std::sqrt(ss / n);
}

}  // namespace

SymmetricEigen symmetric_eigen(const Matrix& input) {
  if (input.rows != input.cols) throw ShapeError("eigendecomposition needs a square matrix");
  const std::size_t n = input.rows;
  Matrix a = input;
  Matrix v = Matrix::identity(n);
  double scale = 0.0;
  for (double x : a.data) scale = std::max(scale, std::abs(x));
  const double tol = 1e-15 * std::max(scale, 1e-300) * static_cast<double>(n);

  for (int sweep = 0; sweep < 100 && off_diagonal_norm(a) > tol; ++sweep) {
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = a(p, q);
        if (std::abs(apq) <= 1e-300) continue;
        const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
        const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a(k, p);
          const double akq = a(k, q);
          a(k, p) = c * akp - s * akq;
          a(k, q) = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a(p, k);
          const double aqk = a(q, k);
          a(p, k) = c * apk - s * aqk;
          a(q, k) = s * apk + c * aqk;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double vkp = v(k, p);
          const double vkq = v(k, q);
          v(k, p) = c * vkp - s * vkq;
          v(k, q) = s * vkp + c * vkq;
        }
      }
    }
  }

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t i, std::size_t j) { return a(i, i) > a(j, j); });
  SymmetricEigen out{std::vector<double>(n), Matrix(n, n)};
  for (std::size_t j = 0; j < n; ++j) {
    const std::size_t src = order[j];
    out.values[j] = a(src, src);
    std::size_t arg = 0;
    for (std::size_t k = 1; k < n; ++k)
      if (std::abs(v(k, src)) > std::abs(v(arg, src))) arg = k;
    const double sign = v(arg, src) < 0 ? -1.0 : 1.0;
    for (std::size_t k = 0; k < n; ++k) out.vectors(k, j) = sign * v(k, src);
  }
  return out;
}

void PcaBank::validate() const {
  const std::size_t k = mean.size();
  if (k == 0) throw ShapeError("PCA bank has no channels");
  if (projection.rows != k || projection.cols != k || projection.data.size() != k * k)
    throw ShapeError("PCA projection must be " + std::to_string(k) + "x" + std::to_string(k));
  if (stds.size() != k) throw ShapeError("PCA std vector length mismatch");
  if (!(epsilon > 0.0)) throw ArgumentError("PCA epsilon floor must be positive");
  for (double s : stds)
    if (!(s >= epsilon) || !std::isfinite(s)) throw NumericError("PCA std below epsilon floor");
}

PcaBank fit_pca_bank(std::size_t layer, const std::vector<Tensor>& outputs, double epsilon) {
  if (outputs.empty()) throw ArgumentError("PCA bank needs at least one layer output");
  if (!(epsilon > 0.0)) throw ArgumentError("PCA epsilon floor must be positive");
  const Shape3 shape = outputs.front().shape();
  const std::size_t k = shape.channels;
  const std::size_t pixels = shape.height * shape.width;
  for (const Tensor& t : outputs)
    if (t.shape() != shape) throw ShapeError("layer outputs for a PCA bank must share dims");
  const std::size_t n = pixels * outputs.size();
  if (n < k)
    throw ArgumentError("PCA bank needs at least " + std::to_string(k) + " pixel samples, got " +
                        std::to_string(n));

  PcaBank bank;
  bank.layer = layer;
  bank.epsilon = epsilon;
  bank.mean.assign(k, 0.0);
  for (const Tensor& t : outputs)
    for (std::size_t p = 0; p < pixels; ++p)
      for (std::size_t c = 0; c < k; ++c) bank.mean[c] += t[p * k + c];
  for (double& m : bank.mean) m /= static_cast<double>(n);

  Matrix cov(k, k);
  std::vector<double> centered(k);
  for (const Tensor& t : outputs) {
    for (std::size_t p = 0; p < pixels; ++p) {
      for (std::size_t c = 0; c < k; ++c) centered[c] = t[p * k + c] - bank.mean[c];
      for (std::size_t i = 0; i < k; ++i)
        for (std::size_t j = i; j < k; ++j) cov(i, j) += centered[i] * centered[j];
    }
  }
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = i; j < k; ++j) {
      cov(i, j) /= static_cast<double>(n);
      cov(j, i) = cov(i, j);
    }
  bank.projection = symmetric_eigen(cov).vectors;

  // Stds come from the projected training data itself so that normalized
  // coefficients have unit std exactly up to rounding.
  std::vector<std::vector<double>> coeffs(k, std::vector<double>(n));
  std::size_t row = 0;
  for (const Tensor& t : outputs) {
    for (std::size_t p = 0; p < pixels; ++p, ++row) {
      for (std::size_t c = 0; c < k; ++c) centered[c] = t[p * k + c] - bank.mean[c];
      for (std::size_t d = 0; d < k; ++d) {
        double z = 0.0;
        for (std::size_t c = 0; c < k; ++c) z += bank.projection(c, d) * centered[c];
        coeffs[d][row] = z;
      }
    }
  }
  bank.stds.resize(k);
  for (std::size_t d = 0; d < k; ++d) bank.stds[d] = std::max(population_std(coeffs[d]), epsilon);
  return bank;
}

std::vector<double> project_normalized(const PcaBank& bank, std::span<const double> pixel) {
  const std::size_t k = bank.channels();
  if (pixel.size() != k)
    throw ShapeError("pixel has " + std::to_string(pixel.size()) + " channels, bank expects " +
                     std::to_string(k));
  std::vector<double> centered(k);
  for (std::size_t c = 0; c < k; ++c) centered[c] = pixel[c] - bank.mean[c];
  std::vector<double> z(k, 0.0);
  for (std::size_t d = 0; d < k; ++d) {
    double s = 0.0;
    for (std::size_t c = 0; c < k; ++c) s += bank.projection(c, d) * centered[c];
    z[d] = s / bank.stds[d];
  }
  return z;
}

std::vector<double> pca_statistic(const Tensor& output, const PcaBank& bank) {
  const std::size_t k = bank.channels();
  if (output.channels() != k)
    throw ShapeError("layer output has " + std::to_string(output.channels()) +
                     " channels, bank for layer " + std::to_string(bank.layer) + " expects " +
                     std::to_string(k));
  const std::size_t pixels = output.height() * output.width();
  std::vector<double> stat(k, 0.0);
  for (std::size_t p = 0; p < pixels; ++p) {
    const auto z = project_normalized(bank, output.data().subspan(p * k, k));
    for (std::size_t d = 0; d < k; ++d) stat[d] += std::abs(z[d]);
  }
  for (double& s : stat) s /= static_cast<double>(pixels);
  return stat;
}

std::vector<double> extremal_stats(const Tensor& output) {
  if (output.empty()) throw ShapeError("extremal statistics need at least one pixel");
  const std::size_t k = output.channels();
  std::vector<double> out(2 * k);
  for (std::size_t c = 0; c < k; ++c) {
    out[c] = output[c];
    out[k + c] = output[c];
  }
  for (std::size_t p = 1; p < output.height() * output.width(); ++p) {
    for (std::size_t c = 0; c < k; ++c) {
      const double v = output[p * k + c];
      out[c] = std::min(out[c], v);
      out[k + c] = std::max(out[k + c], v);
    }
  }
  return out;
}

double percentile_sorted(std::span<const double> sorted, double p) {
  if (sorted.empty()) throw ArgumentError("percentile of an empty sample");
  if (!(p >= 0.0 && p <= 100.0)) throw ArgumentError("percentile must lie in [0, 100]");
  const double rank = p / 100.0 * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(rank));
  const double frac = rank - static_cast<double>(lo);
  if (lo + 1 >= sorted.size()) return sorted[lo];
  return sorted[lo] + frac * (sorted[lo + 1] - sorted[lo]);
}

std::span<const double> default_percentiles() {
  static constexpr std::array<double, 3> ps{25.0, 50.0, 75.0};
  return ps;
}

std::vector<double> percentile_stats(const Tensor& output, std::span<const double> ps) {
  if (output.empty()) throw ShapeError("percentile statistics need at least one pixel");
  const std::size_t k = output.channels();
  const std::size_t pixels = output.height() * output.width();
  std::vector<double> out(ps.size() * k);
  std::vector<double> channel(pixels);
  for (std::size_t c = 0; c < k; ++c) {
    for (std::size_t p = 0; p < pixels; ++p) channel[p] = output[p * k + c];
    std::sort(channel.begin(), channel.end());
    for (std::size_t i = 0; i < ps.size(); ++i) out[i * k + c] = percentile_sorted(channel, ps[i]);
  }
  return out;
}

std::vector<double> LayerStatVector::concatenated() const {
  std::vector<double> v;
  v.reserve(pca.size() + extremal.size() + percentiles.size());
  v.insert(v.end(), pca.begin(), pca.end());
  v.insert(v.end(), extremal.begin(), extremal.end());
  v.insert(v.end(), percentiles.begin(), percentiles.end());
  return v;
}

LayerStatVector layer_feature_vector(const Tensor& output, const PcaBank& bank) {
  LayerStatVector v;
  v.layer = bank.layer;
  v.channels = bank.channels();
  v.pca = pca_statistic(output, bank);
  v.extremal = extremal_stats(output);
  v.percentiles = percentile_stats(output);
  return v;
}

LayerStatVector layer_feature_vector(const Network& net, const Tensor& image, std::size_t layer,
                                     const PcaBank& bank) {
  auto outputs = layer_outputs(net, image);
  if (layer >= outputs.size())
    throw ArgumentError("network has " + std::to_string(outputs.size()) + " conv layers, asked for " +
                        std::to_string(layer));
  return layer_feature_vector(outputs[layer], bank);
}

std::vector<std::string> feature_names(std::size_t channels) {
  std::vector<std::string> names;
  for (const char* prefix : {"pca", "min", "max", "p25", "p50", "p75"})
    for (std::size_t c = 0; c < channels; ++c) names.push_back(std::string(prefix) + "_" + std::to_string(c));
  return names;
}

namespace {

std::ofstream open_csv(const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write " + path.string());
  out.precision(17);
  return out;
}

}  // namespace

void write_feature_csv(const std::filesystem::path& path, const std::vector<LayerStatVector>& rows) {
  auto out = open_csv(path);
  std::size_t width = 0;
  for (const auto& r : rows) width = std::max(width, r.channels);
  out << "layer";
  for (const auto& name : feature_names(width)) out << ',' << name;
  out << '\n';
  for (const auto& r : rows) {
    if (r.channels != width) throw ShapeError("feature CSV rows must share a channel count");
    out << r.layer;
    for (double v : r.concatenated()) out << ',' << v;
    out << '\n';
  }
}

std::vector<SpectralRow> spectral_report(const std::vector<std::vector<double>>& normal,
                                         const std::vector<std::vector<double>>& adversarial,
                                         double epsilon) {
  if (normal.empty() || adversarial.empty())
    throw ArgumentError("spectral report needs nonempty normal and adversarial sets");
  const std::size_t d = normal.front().size();
  for (const auto* set : {&normal, &adversarial})
    for (const auto& v : *set)
      if (v.size() != d) throw ShapeError("spectral report feature vectors must share a length");

  std::vector<double> mean(d, 0.0);
  for (const auto& v : normal)
    for (std::size_t i = 0; i < d; ++i) mean[i] += v[i];
  for (double& m : mean) m /= static_cast<double>(normal.size());
  Matrix cov(d, d);
  std::vector<double> centered(d);
  for (const auto& v : normal) {
    for (std::size_t i = 0; i < d; ++i) centered[i] = v[i] - mean[i];
    for (std::size_t i = 0; i < d; ++i) {
      if (centered[i] == 0.0) continue;
      for (std::size_t j = i; j < d; ++j) cov(i, j) += centered[i] * centered[j];
    }
  }
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = i; j < d; ++j) {
      cov(i, j) /= static_cast<double>(normal.size());
      cov(j, i) = cov(i, j);
    }
  const SymmetricEigen eig = symmetric_eigen(cov);

  auto project = [&](const std::vector<std::vector<double>>& set, std::size_t dir) {
    std::vector<double> z(set.size());
    for (std::size_t s = 0; s < set.size(); ++s) {
      double acc = 0.0;
      for (std::size_t i = 0; i < d; ++i) acc += eig.vectors(i, dir) * (set[s][i] - mean[i]);
      z[s] = acc;
    }
    return z;
  };
  auto max_abs = [](const std::vector<double>& z) {
    double m = 0.0;
    for (double x : z) m = std::max(m, std::abs(x));
    return m;
  };

  std::vector<SpectralRow> rows;
  for (std::size_t dir = 0; dir < d; ++dir) {
    const auto zn = project(normal, dir);
    const double sn = population_std(zn);
    if (!(sn >= epsilon)) continue;
    const auto za = project(adversarial, dir);
    SpectralRow r;
    r.direction = dir;
    r.eigenvalue = eig.values[dir];
    r.normal_extremal = max_abs(zn) / sn;
    r.adversarial_extremal = max_abs(za) / sn;
    r.normal_std = sn / sn;
    r.adversarial_std = population_std(za) / sn;
    rows.push_back(r);
  }
  return rows;
}

void write_spectral_csv(const std::filesystem::path& path, const std::vector<SpectralRow>& rows) {
  auto out = open_csv(path);
  out << "direction,eigenvalue,normal_extremal,adversarial_extremal,normal_std,adversarial_std\n";
  for (const auto& r : rows)
    out << r.direction << ',' << r.eigenvalue << ',' << r.normal_extremal << ','
        << r.adversarial_extremal << ',' << r.normal_std << ',' << r.adversarial_std << '\n';
}

}  // namespace cguard
