#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "cascade_guard/tensor.hpp"

namespace cguard {

enum class Split : std::uint8_t { train, val, test };

std::string to_string(Split split);
Split parse_split(const std::string& name);

/// Images in [0,1] with integer labels and a split tag per sample.
struct Dataset {
  std::vector<Tensor> images;
  std::vector<int> labels;
  std::vector<Split> splits;
  std::size_t classes = 0;
  std::string provenance;  // free-form JSON text describing where the data came from

  std::size_t size() const { return images.size(); }
  Shape3 image_shape() const;
  /// Samples tagged with `split`, in original order.
  Dataset subset(Split split) const;
  /// Throws FormatError when any invariant (uniform dims, range, labels) is broken.
  void validate() const;
};

// IDX element type codes. 0x08 is the classic unsigned-byte encoding; 0x0E
// (float64, big-endian) is used for adversarial batches so perturbations survive
// storage bit-exactly.
inline constexpr std::uint32_t kIdxUbyteImages = 0x00000803;
inline constexpr std::uint32_t kIdxUbyteLabels = 0x00000801;
inline constexpr std::uint32_t kIdxDoubleImages = 0x00000E03;

/// Parses an IDX image file and matching label file. Unsigned-byte pixels are
/// scaled by 1/255; float64 pixels are taken verbatim and must lie in [0,1].
/// All samples are tagged `split`.
Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels,
                 Split split = Split::train);

std::vector<Tensor> read_idx_images(const std::filesystem::path& path);
std::vector<int> read_idx_labels(const std::filesystem::path& path);

enum class IdxPixelType { ubyte, float64 };
/// Single-channel images only. `ubyte` requires every pixel to be an exact multiple of 1/255.
void write_idx_images(const std::filesystem::path& path, const std::vector<Tensor>& images,
                      IdxPixelType type);
void write_idx_labels(const std::filesystem::path& path, const std::vector<int>& labels);

struct SynthOptions {
  double train_fraction = 0.7;
  double val_fraction = 0.1;
  double noise_sigma = 0.05;
};

/// Procedural 28x28 grayscale ten-class shape task. Deterministic per seed and
/// balanced per class. Pixels are quantized to multiples of 1/255 so the
/// dataset survives an IDX round trip exactly.
Dataset synth_dataset(std::uint64_t seed, std::size_t per_class, const SynthOptions& opts = {});

inline constexpr int kSynthClasses = 10;
const char* synth_class_name(int label);

// A dataset directory holds {train,val,test}-{images,labels}.idx and manifest.json.
void save_dataset_dir(const std::filesystem::path& dir, const Dataset& data);
Dataset load_dataset_dir(const std::filesystem::path& dir);

}  // namespace cguard
