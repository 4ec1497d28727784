#pragma once

#include <span>
#include <vector>

#include "dfuse/autodiff.hpp"
#include "dfuse/core.hpp"

namespace dfuse {

struct LossWeights {
  double alpha = 1.0;
  double beta = 0.01;
  double gamma = 0.001;

  void validate() const;
  bool operator==(const LossWeights&) const = default;
};

enum class PrimaryNorm { L2, L1 };

/// Depth values in meters plus a presence flag per pixel, laid out like an
/// (N, 1, H, W) prediction.
struct MaskedTarget {
  ad::Shape shape;
  std::vector<double> values;
  std::vector<std::uint8_t> mask;

  std::size_t count() const;

  /// Valid pixels of each map.
  static MaskedTarget from_maps(std::span<const DepthMap> maps);
  /// Depth where the matching mask is set.
  static MaskedTarget from_masked(std::span<const DepthMap> maps,
                                  std::span<const ValidMask> masks);
};

/// Mean squared (or absolute) error over target-valid pixels. Throws
/// InvalidInput when the target has no valid pixel.
template <typename T>
ad::Tensor<T> primary_loss(const ad::Tensor<T>& pred, const MaskedTarget& gt,
                           PrimaryNorm norm = PrimaryNorm::L2);

template <typename T>
struct StereoLoss {
  ad::Tensor<T> value;
  bool empty = false;  // no usable pixel; value is a constant 0
};

/// Mean squared error against the stereo estimate over its mask. With
/// `exclude` given, pixels valid there are left out as well.
template <typename T>
StereoLoss<T> stereo_loss(const ad::Tensor<T>& pred, const MaskedTarget& stereo,
                          const MaskedTarget* exclude = nullptr);

/// Mean over interior pixels of |d2x| + |d2y| with the [1, -2, 1] stencil.
/// Needs at least 3 rows and 3 columns.
template <typename T>
ad::Tensor<T> smooth_loss(const ad::Tensor<T>& pred);

template <typename T>
struct LossBreakdown {
  ad::Tensor<T> primary;
  ad::Tensor<T> stereo;
  ad::Tensor<T> smooth;
  ad::Tensor<T> total;
  bool stereo_empty = true;
};

/// alpha * primary + beta * stereo + gamma * smooth over scalar tensors.
template <typename T>
ad::Tensor<T> combine_losses(const ad::Tensor<T>& primary,
                             const ad::Tensor<T>& stereo,
                             const ad::Tensor<T>& smooth,
                             const LossWeights& weights);

struct LossOptions {
  PrimaryNorm primary_norm = PrimaryNorm::L2;
  /// Drop stereo pixels that also carry ground truth.
  bool stereo_exclude_gt = false;

  bool operator==(const LossOptions&) const = default;
};

/// All three terms. `stereo` may be null (term contributes 0 and is flagged
/// empty).
template <typename T>
LossBreakdown<T> total_loss(const ad::Tensor<T>& pred, const MaskedTarget& gt,
                            const MaskedTarget* stereo,
                            const LossWeights& weights,
                            const LossOptions& options = {});

}  // namespace dfuse
