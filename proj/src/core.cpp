#include "dfuse/core.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "dfuse/error.hpp"

namespace dfuse {

namespace {

void check_dims(int width, int height) {
  if (width <= 0 || height <= 0) {
    throw InvalidInput("raster dimensions must be positive, got " +
                       std::to_string(width) + "x" + std::to_string(height));
  }
}

void check_depth(float v, double max_depth) {
  if (!std::isfinite(v) || v < 0.0f || v > max_depth) {
    throw InvalidInput("depth value " + std::to_string(v) +
                       " outside [0, " + std::to_string(max_depth) + "]");
  }
}

}  // namespace

DepthMap::DepthMap(int width, int height, double max_depth)
    : width_(width), height_(height), max_depth_(max_depth) {
  check_dims(width, height);
  if (!(max_depth > 0.0) || !std::isfinite(max_depth)) {
    throw InvalidInput("max_depth must be positive and finite");
  }
  values_.assign(static_cast<std::size_t>(width) * height, kMissing);
}

DepthMap::DepthMap(int width, int height, std::vector<float> values,
                   double max_depth)
    : DepthMap(width, height, max_depth) {
  if (values.size() != values_.size()) {
    throw InvalidInput("depth buffer has " + std::to_string(values.size()) +
                       " values, expected " + std::to_string(values_.size()));
  }
  for (float v : values) check_depth(v, max_depth);
  values_ = std::move(values);
}

void DepthMap::set(int x, int y, float depth) {
  check_depth(depth, max_depth_);
  values_[index(x, y)] = depth;
}

std::size_t DepthMap::valid_count() const {
  return static_cast<std::size_t>(
      std::count_if(values_.begin(), values_.end(),
                    [](float v) { return v != kMissing; }));
}

double DepthMap::density() const {
  return values_.empty() ? 0.0
                         : static_cast<double>(valid_count()) / values_.size();
}

ValidMask DepthMap::mask() const {
  ValidMask m(width_, height_);
  for (int y = 0; y < height_; ++y)
    for (int x = 0; x < width_; ++x) m.set(x, y, valid(x, y));
  return m;
}

DepthMap DepthMap::rebound(double max_depth, bool drop_out_of_range) const {
  DepthMap out(width_, height_, max_depth);
  for (std::size_t i = 0; i < values_.size(); ++i) {
    float v = values_[i];
    if (v > max_depth) {
      if (!drop_out_of_range) {
        throw RangeError("depth " + std::to_string(v) + " exceeds bound " +
                         std::to_string(max_depth));
      }
      v = kMissing;
    }
    out.values_[i] = v;
  }
  return out;
}

ValidMask::ValidMask(int width, int height, bool fill)
    : width_(width), height_(height) {
  check_dims(width, height);
  flags_.assign(static_cast<std::size_t>(width) * height, fill ? 1 : 0);
}

std::size_t ValidMask::count() const {
  return static_cast<std::size_t>(
      std::count(flags_.begin(), flags_.end(), std::uint8_t{1}));
}

IntensityImage::IntensityImage(int width, int height)
    : width_(width), height_(height) {
  check_dims(width, height);
  rgb_.assign(static_cast<std::size_t>(width) * height * 3, 0.0f);
}

IntensityImage::IntensityImage(int width, int height, std::vector<float> rgb)
    : IntensityImage(width, height) {
  if (rgb.size() != rgb_.size()) {
    throw InvalidInput("color buffer has wrong size");
  }
  for (float v : rgb) {
    if (!std::isfinite(v) || v < 0.0f || v > 1.0f) {
      throw InvalidInput("intensity value outside [0, 1]");
    }
  }
  rgb_ = std::move(rgb);
}

void IntensityImage::set(int x, int y, int channel, float v) {
  if (!std::isfinite(v) || v < 0.0f || v > 1.0f) {
    throw InvalidInput("intensity value outside [0, 1]");
  }
  rgb_[(static_cast<std::size_t>(y) * width_ + x) * 3 + channel] = v;
}

void CameraIntrinsics::validate() const {
  if (!(fx > 0.0) || !(fy > 0.0)) {
    throw InvalidInput("focal lengths must be positive");
  }
}

void StereoRig::validate() const {
  intrinsics.validate();
  if (!(baseline_m > 0.0)) throw InvalidInput("baseline must be positive");
}

Point3 RigidTransform::apply(const Point3& p) const {
  const auto& r = rotation;
  return {r[0] * p.x + r[1] * p.y + r[2] * p.z + translation[0],
          r[3] * p.x + r[4] * p.y + r[5] * p.z + translation[1],
          r[6] * p.x + r[7] * p.y + r[8] * p.z + translation[2]};
}

double disparity_to_depth(double disparity_px, const StereoRig& rig) {
  if (!(disparity_px >= 0.0)) {
    throw InvalidInput("negative disparity " + std::to_string(disparity_px));
  }
  if (disparity_px == 0.0) return DepthMap::kMissing;
  return rig.intrinsics.fx * rig.baseline_m / disparity_px;
}

double depth_to_disparity(double depth_m, const StereoRig& rig) {
  if (!(depth_m > 0.0)) {
    throw InvalidInput("depth must be positive, got " +
                       std::to_string(depth_m));
  }
  return rig.intrinsics.fx * rig.baseline_m / depth_m;
}

DepthMap project_pointcloud(const PointCloud& cloud,
                            const CameraIntrinsics& intrinsics, int width,
                            int height, double max_depth) {
  intrinsics.validate();
  DepthMap out(width, height, max_depth);
  for (Point3 p : cloud.points) {
    if (cloud.sensor_to_camera) p = cloud.sensor_to_camera->apply(p);
    if (!std::isfinite(p.x) || !std::isfinite(p.y) || !std::isfinite(p.z)) {
      throw InvalidInput("point cloud contains non-finite coordinates");
    }
    if (p.z <= 0.0 || p.z > max_depth) continue;
    const double u = std::round(intrinsics.fx * p.x / p.z + intrinsics.cx);
    const double v = std::round(intrinsics.fy * p.y / p.z + intrinsics.cy);
    if (u < 0 || v < 0 || u >= width || v >= height) continue;
    const int px = static_cast<int>(u);
    const int py = static_cast<int>(v);
    const float z = static_cast<float>(p.z);
    if (z == DepthMap::kMissing || z > max_depth) continue;  // float rounding
    if (!out.valid(px, py) || z < out.at(px, py)) out.set(px, py, z);
  }
  return out;
}

}  // namespace dfuse
