#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "cascade_guard/attacks.hpp"

namespace cguard {

enum class FilterBorder {
  replicate,  // same dims, edge pixels repeated outward
  valid,      // interior windows only, dims shrink by k - 1
};

/// Per-channel k x k box mean. Throws ArgumentError for even or zero k and
/// ShapeError when k exceeds a spatial dim.
Tensor average_filter(const Tensor& image, std::size_t k, FilterBorder border = FilterBorder::replicate);

struct RecoveryReport {
  std::string kind;
  std::size_t k = 0;
  std::size_t n = 0;
  double pre_accuracy = 0.0;   // victim label == original label before filtering
  double post_accuracy = 0.0;  // same after filtering
};

/// Top-1 accuracy against the original labels before and after filtering.
/// Records without an original label are skipped and not counted in n.
RecoveryReport recovery_eval(const Network& net, const std::vector<AdversarialRecord>& records,
                             std::size_t k, std::size_t threads = 1);

void write_recovery_csv(const std::filesystem::path& path, const std::vector<RecoveryReport>& rows);

}  // namespace cguard
