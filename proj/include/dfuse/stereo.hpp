#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "dfuse/core.hpp"

namespace dfuse {

/// 8-bit luminance raster.
struct GrayImage {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> pixels;

  GrayImage() = default;
  GrayImage(int w, int h, std::uint8_t fill = 0)
      : width(w), height(h), pixels(static_cast<std::size_t>(w) * h, fill) {}

  std::uint8_t at(int x, int y) const {
    return pixels[static_cast<std::size_t>(y) * width + x];
  }
  void set(int x, int y, std::uint8_t v) {
    pixels[static_cast<std::size_t>(y) * width + x] = v;
  }
};

/// round(255 * (0.299 R + 0.587 G + 0.114 B)).
GrayImage to_grayscale(const IntensityImage& image);

/// Per-pixel census bitstrings. Bit k refers to the k-th window neighbour in
/// row-major order with the centre skipped.
struct CensusImage {
  int width = 0;
  int height = 0;
  int bits = 0;
  std::vector<std::uint64_t> codes;

  std::uint64_t at(int x, int y) const {
    return codes[static_cast<std::size_t>(y) * width + x];
  }
};

/// Bit k is set iff neighbour k is strictly darker than the centre.
/// Out-of-image neighbours contribute a zero bit. Window must be odd, 3..7.
CensusImage census_transform(const GrayImage& image, int window);

struct SgmParams {
  int census_window = 5;
  int dmax = 64;
  std::uint32_t p1 = 10;
  std::uint32_t p2 = 120;
  double lr_tolerance = 1.0;

  void validate() const;
  bool operator==(const SgmParams&) const = default;
};

/// Matching cost per pixel and disparity, stored pixel-major.
class CostVolume {
 public:
  CostVolume() = default;
  CostVolume(int width, int height, int dmax, std::uint32_t fill = 0);

  int width() const { return width_; }
  int height() const { return height_; }
  int dmax() const { return dmax_; }

  std::uint32_t at(int x, int y, int d) const { return costs_[index(x, y, d)]; }
  void set(int x, int y, int d, std::uint32_t c) { costs_[index(x, y, d)] = c; }
  const std::uint32_t* pixel(int x, int y) const {
    return costs_.data() + index(x, y, 0);
  }
  std::uint32_t* pixel(int x, int y) { return costs_.data() + index(x, y, 0); }

  bool operator==(const CostVolume& other) const = default;

 private:
  std::size_t index(int x, int y, int d) const {
    return (static_cast<std::size_t>(y) * width_ + x) * dmax_ + d;
  }

  int width_ = 0;
  int height_ = 0;
  int dmax_ = 0;
  std::vector<std::uint32_t> costs_;
};

/// Which image the disparity is measured from.
enum class Reference { Left, Right };

/// Hamming cost of census codes. Left reference pairs left(x) with right(x-d);
/// right reference pairs right(x) with left(x+d). Shifts leaving the image get
/// the largest representable cost (the census bit count).
CostVolume build_cost_volume(const GrayImage& left, const GrayImage& right,
                             const SgmParams& params,
                             Reference reference = Reference::Left);

/// Scanline step (dx, dy); the previous pixel on the path is p - (dx, dy).
struct PathDirection {
  int dx;
  int dy;
};

/// The eight canonical directions, in the order aggregate() sums them.
inline constexpr std::array<PathDirection, 8> kSgmDirections{{
    {1, 0}, {-1, 0}, {0, 1}, {0, -1}, {1, 1}, {-1, -1}, {1, -1}, {-1, 1}}};

/// One path of the SGM recurrence
///   L(p,d) = C(p,d) + min(L(p-r,d), L(p-r,d±1)+P1, min_k L(p-r,k)+P2)
///            - min_k L(p-r,k).
CostVolume aggregate_path(const CostVolume& volume, PathDirection direction,
                          std::uint32_t p1, std::uint32_t p2);

/// Sum of aggregate_path over kSgmDirections.
CostVolume aggregate(const CostVolume& volume, const SgmParams& params);

struct DisparityMap {
  int width = 0;
  int height = 0;
  std::vector<int> values;

  int at(int x, int y) const {
    return values[static_cast<std::size_t>(y) * width + x];
  }
};

/// Per-pixel argmin over d, ties toward the smaller disparity.
DisparityMap wta_disparity(const CostVolume& volume);

/// Valid iff x - d_left lands inside the image and the right map agrees
/// there within `tolerance` pixels.
ValidMask lr_consistency(const DisparityMap& left, const DisparityMap& right,
                         double tolerance);

struct StereoEstimate {
  DepthMap depth;
  ValidMask mask;
  DisparityMap disparity;
};

/// Full SGM pipeline on a rectified pair. Pixels failing the consistency
/// check, with zero disparity, or beyond max_depth carry the missing value
/// and a false mask bit.
StereoEstimate sgm_stereo_depth(const IntensityImage& left,
                                const IntensityImage& right,
                                const StereoRig& rig, const SgmParams& params,
                                double max_depth = kMaxEncodableDepth);

}  // namespace dfuse
