#pragma once

#include <cstddef>
#include <span>
#include <string>

#include "dfuse/core.hpp"

namespace dfuse {

/// Error statistics over ground-truth-valid pixels. Distances in mm, inverse
/// distances in 1/km.
struct MetricsReport {
  double rmse_mm = 0.0;
  double mae_mm = 0.0;
  double irmse_per_km = 0.0;
  double imae_per_km = 0.0;
  double rel = 0.0;
  double delta1 = 0.0;
  double delta2 = 0.0;
  double delta3 = 0.0;
  std::size_t n_valid = 0;
  /// Pixels that entered the inverse-depth metrics (both depths > 0).
  std::size_t n_inverse = 0;

  /// Aligned table for people.
  std::string to_table() const;
  /// One key=value per line.
  std::string to_key_values() const;
};

/// Throws InvalidInput when gt has no valid pixel and ShapeError on a size
/// mismatch. Predicted zeros count as 0 m, not as missing.
MetricsReport compute_metrics(const DepthMap& pred, const DepthMap& gt);

/// Valid-pixel-weighted mean of per-image reports (inverse metrics weighted
/// by their own pixel counts). Order of `reports` does not matter beyond
/// floating-point summation, which runs front to back.
MetricsReport aggregate_metrics(std::span<const MetricsReport> reports);

}  // namespace dfuse
