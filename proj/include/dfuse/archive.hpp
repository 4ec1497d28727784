#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "dfuse/autodiff.hpp"

namespace dfuse {

/// Named flat tensor container used for model and trainer checkpoints.
///
/// Layout (little-endian):
///   8 bytes   magic "DFUSEARC"
///   u32       format version
///   u64, ...  metadata length + UTF-8 bytes (free-form, JSON by convention)
///   u64       tensor count
///   per tensor: u32 name length, name bytes, i32 n c h w, f32 values
struct TensorRecord {
  std::string name;
  ad::Shape shape;
  std::vector<float> values;

  bool operator==(const TensorRecord&) const = default;
};

struct TensorArchive {
  static constexpr std::uint32_t kFormatVersion = 1;

  std::uint32_t version = kFormatVersion;
  std::string metadata;
  std::vector<TensorRecord> tensors;

  /// nullptr when absent.
  const TensorRecord* find(const std::string& name) const;
  void add(std::string name, ad::Shape shape, std::vector<float> values);
};

void save_archive(const TensorArchive& archive,
                  const std::filesystem::path& path);
/// Throws IncompatibleCheckpoint on a bad magic or unknown version and
/// FormatError on truncation.
TensorArchive load_archive(const std::filesystem::path& path);

}  // namespace dfuse
