#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

namespace dfuse {

/// Largest depth a 16-bit KITTI-style PNG can encode (65535 / 256 m).
inline constexpr double kMaxEncodableDepth = 65535.0 / 256.0;

class ValidMask;

/// Single-channel metric depth raster. A value of exactly 0 marks a missing
/// measurement; every other value lies in (0, max_depth] and is finite.
class DepthMap {
 public:
  static constexpr float kMissing = 0.0f;

  DepthMap() = default;
  /// All-missing map.
  DepthMap(int width, int height, double max_depth = kMaxEncodableDepth);
  /// Takes ownership of row-major values; throws InvalidInput if any value
  /// breaks the invariants.
  DepthMap(int width, int height, std::vector<float> values,
           double max_depth = kMaxEncodableDepth);

  int width() const { return width_; }
  int height() const { return height_; }
  std::size_t size() const { return values_.size(); }
  double max_depth() const { return max_depth_; }

  float at(int x, int y) const { return values_[index(x, y)]; }
  bool valid(int x, int y) const { return at(x, y) != kMissing; }
  void set(int x, int y, float depth);
  void clear(int x, int y) { values_[index(x, y)] = kMissing; }

  std::span<const float> values() const { return values_; }

  std::size_t valid_count() const;
  double density() const;
  ValidMask mask() const;

  /// Same raster under a different depth bound. Values above the new bound
  /// throw RangeError unless drop_out_of_range is set, in which case they
  /// become missing.
  DepthMap rebound(double max_depth, bool drop_out_of_range = false) const;

  bool operator==(const DepthMap& other) const = default;

 private:
  std::size_t index(int x, int y) const {
    return static_cast<std::size_t>(y) * static_cast<std::size_t>(width_) +
           static_cast<std::size_t>(x);
  }

  int width_ = 0;
  int height_ = 0;
  double max_depth_ = kMaxEncodableDepth;
  std::vector<float> values_;
};

/// Per-pixel presence flags, row-major.
class ValidMask {
 public:
  ValidMask() = default;
  ValidMask(int width, int height, bool fill = false);

  int width() const { return width_; }
  int height() const { return height_; }
  std::size_t size() const { return flags_.size(); }

  bool at(int x, int y) const {
    return flags_[static_cast<std::size_t>(y) * width_ + x] != 0;
  }
  void set(int x, int y, bool v) {
    flags_[static_cast<std::size_t>(y) * width_ + x] = v ? 1 : 0;
  }
  std::span<const std::uint8_t> flags() const { return flags_; }
  std::size_t count() const;

  bool operator==(const ValidMask& other) const = default;

 private:
  int width_ = 0;
  int height_ = 0;
  std::vector<std::uint8_t> flags_;
};

/// Three-channel color raster with interleaved RGB values in [0, 1].
class IntensityImage {
 public:
  IntensityImage() = default;
  IntensityImage(int width, int height);
  IntensityImage(int width, int height, std::vector<float> rgb);

  int width() const { return width_; }
  int height() const { return height_; }

  float at(int x, int y, int channel) const {
    return rgb_[(static_cast<std::size_t>(y) * width_ + x) * 3 + channel];
  }
  void set(int x, int y, int channel, float v);
  std::span<const float> values() const { return rgb_; }

  bool operator==(const IntensityImage& other) const = default;

 private:
  int width_ = 0;
  int height_ = 0;
  std::vector<float> rgb_;
};

struct CameraIntrinsics {
  double fx = 0.0;
  double fy = 0.0;
  double cx = 0.0;
  double cy = 0.0;

  void validate() const;
  bool operator==(const CameraIntrinsics&) const = default;
};

struct StereoRig {
  CameraIntrinsics intrinsics;
  double baseline_m = 0.0;

  void validate() const;
  bool operator==(const StereoRig&) const = default;
};

struct Point3 {
  double x = 0.0;
  double y = 0.0;
  double z = 0.0;
};

/// Row-major rotation plus translation, p_cam = R * p_sensor + t.
struct RigidTransform {
  std::array<double, 9> rotation{1, 0, 0, 0, 1, 0, 0, 0, 1};
  std::array<double, 3> translation{0, 0, 0};

  Point3 apply(const Point3& p) const;
};

struct PointCloud {
  std::vector<Point3> points;
  std::optional<RigidTransform> sensor_to_camera;
};

/// fx * baseline / d; zero disparity maps to the missing sentinel.
double disparity_to_depth(double disparity_px, const StereoRig& rig);

/// fx * baseline / z for z > 0.
double depth_to_disparity(double depth_m, const StereoRig& rig);

/// Pinhole projection with a z-buffer (nearest point wins). Points behind the
/// camera, outside the raster, or beyond max_depth are dropped.
DepthMap project_pointcloud(const PointCloud& cloud,
                            const CameraIntrinsics& intrinsics, int width,
                            int height, double max_depth = kMaxEncodableDepth);

}  // namespace dfuse
