#pragma once

#include <filesystem>
#include <optional>
#include <vector>

#include "dfuse/core.hpp"

namespace dfuse {

/// One training/evaluation example as listed in a manifest. Paths are
/// absolute after load_manifest.
struct SampleRecord {
  std::filesystem::path rgb_path;
  std::filesystem::path sparse_depth_path;
  std::optional<std::filesystem::path> gt_depth_path;
  std::optional<std::filesystem::path> right_rgb_path;
};

struct DatasetManifest {
  std::vector<SampleRecord> records;
  double max_depth = 0.0;
};

/// KITTI devkit convention: stored uint16 / 256 = meters, 0 = missing.
DepthMap read_depth_png16(const std::filesystem::path& path,
                          double max_depth = kMaxEncodableDepth);
void write_depth_png16(const DepthMap& map, const std::filesystem::path& path);

/// 8-bit, 3-channel PNG or JPEG; values scaled into [0, 1].
IntensityImage read_rgb8(const std::filesystem::path& path);
/// Quantizes round(v * 255); the encoder follows the file extension.
void write_rgb8(const IntensityImage& image, const std::filesystem::path& path);

/// 8-bit grayscale PNG, 255 = valid.
void write_mask_png8(const ValidMask& mask, const std::filesystem::path& path);
ValidMask read_mask_png8(const std::filesystem::path& path);

/// Text manifest:
///   # comment
///   max_depth=<meters>
///   <rgb>\t<sparse>[\t<gt>[\t<right_rgb>]]
/// An optional field may be written as "-" to leave it out while keeping a
/// later column. Relative paths resolve against the manifest's directory.
DatasetManifest load_manifest(const std::filesystem::path& path);
void save_manifest(const DatasetManifest& manifest,
                   const std::filesystem::path& path);

}  // namespace dfuse
