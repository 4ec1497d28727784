#pragma once

#include <vector>

#include "dfuse/core.hpp"

namespace dfuse {

enum class KernelShape { Full, Diamond, Cross };

/// Odd-sized flat structuring element centred on the pixel.
struct Kernel {
  int size = 3;
  KernelShape shape = KernelShape::Full;

  int radius() const { return size / 2; }
  bool contains(int dx, int dy) const;
  void validate() const;
  bool operator==(const Kernel&) const = default;
};

struct FillParams {
  Kernel initial{5, KernelShape::Diamond};
  int closing_size = 5;
  int hole_size = 9;
  int hole_iterations = 10;
  int blur_size = 5;
  double blur_sigma = 1.0;

  void validate() const;
  bool operator==(const FillParams&) const = default;
};

/// Missing pixels take the minimum valid depth inside the kernel footprint;
/// valid pixels are left alone.
DepthMap dilate_nearest(const DepthMap& map, const Kernel& kernel);

/// Morphological closing with a full square kernel where nearer depth is the
/// "larger" value and a missing pixel is the smallest. Extensive: valid
/// pixels never become missing.
DepthMap close_nearest(const DepthMap& map, int size);

/// Fills every remaining hole from the nearest valid pixel in the same row,
/// then fills fully empty rows from the nearest non-empty row. Ties prefer
/// the smaller depth.
DepthMap extend_nearest(const DepthMap& map);

/// Densifies a sparse map so no missing pixel remains. Pixels that were
/// valid in the input come back bit-exact.
DepthMap morph_fill(const DepthMap& map, const FillParams& params = {});

/// Dense raster scaled into (0, 1] by the map's depth bound.
struct NormalizedDepth {
  int width = 0;
  int height = 0;
  std::vector<float> values;
};

NormalizedDepth normalize_depth(const DepthMap& map);
DepthMap denormalize_depth(const NormalizedDepth& norm, double max_depth);

}  // namespace dfuse
