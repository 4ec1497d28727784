#include "dfuse/imageio.hpp"

#include <cmath>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>
#include <string>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

#include "dfuse/error.hpp"

namespace fs = std::filesystem;

namespace dfuse {

namespace {

const char* depth_name(int cv_depth) {
  switch (cv_depth) {
    case CV_8U: return "8-bit unsigned";
    case CV_8S: return "8-bit signed";
    case CV_16U: return "16-bit unsigned";
    case CV_16S: return "16-bit signed";
    case CV_32S: return "32-bit integer";
    case CV_32F: return "32-bit float";
    case CV_64F: return "64-bit float";
    default: return "unknown";
  }
}

cv::Mat load_raw(const fs::path& path) {
  if (!fs::exists(path)) {
    throw FormatError("missing file: " + path.string());
  }
  cv::Mat img = cv::imread(path.string(), cv::IMREAD_UNCHANGED);
  if (img.empty()) {
    throw FormatError("unreadable image file: " + path.string());
  }
  return img;
}

void store(const cv::Mat& img, const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  bool ok = false;
  try {
    ok = cv::imwrite(path.string(), img);
  } catch (const cv::Exception& e) {
    throw FormatError("cannot write " + path.string() + ": " + e.what());
  }
  if (!ok) throw FormatError("cannot write " + path.string());
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \r\n");
  return s.substr(b, e - b + 1);
}

}  // namespace

DepthMap read_depth_png16(const fs::path& path, double max_depth) {
  const cv::Mat img = load_raw(path);
  if (img.channels() != 1) {
    throw FormatError("wrong channel count in " + path.string() +
                      ": expected 1, got " + std::to_string(img.channels()));
  }
  if (img.depth() != CV_16U) {
    throw FormatError("wrong bit depth in " + path.string() +
                      ": expected 16-bit unsigned, got " +
                      depth_name(img.depth()));
  }
  DepthMap out(img.cols, img.rows, max_depth);
  for (int y = 0; y < img.rows; ++y) {
    const auto* row = img.ptr<std::uint16_t>(y);
    for (int x = 0; x < img.cols; ++x) {
      if (row[x] == 0) continue;
      const double meters = row[x] / 256.0;
      if (meters > max_depth) {
        throw RangeError("depth " + std::to_string(meters) + " m in " +
                         path.string() + " exceeds bound " +
                         std::to_string(max_depth));
      }
      out.set(x, y, static_cast<float>(meters));
    }
  }
  return out;
}

void write_depth_png16(const DepthMap& map, const fs::path& path) {
  cv::Mat img(map.height(), map.width(), CV_16UC1);
  for (int y = 0; y < map.height(); ++y) {
    auto* row = img.ptr<std::uint16_t>(y);
    for (int x = 0; x < map.width(); ++x) {
      // std::round is half-away-from-zero.
      const double stored = std::round(static_cast<double>(map.at(x, y)) * 256.0);
      if (stored > std::numeric_limits<std::uint16_t>::max()) {
        throw RangeError("depth " + std::to_string(map.at(x, y)) +
                         " m exceeds the 16-bit PNG range (" +
                         std::to_string(kMaxEncodableDepth) + " m)");
      }
      row[x] = static_cast<std::uint16_t>(stored);
    }
  }
  store(img, path);
}

IntensityImage read_rgb8(const fs::path& path) {
  const cv::Mat img = load_raw(path);
  if (img.depth() != CV_8U) {
    throw FormatError("wrong bit depth in " + path.string() +
                      ": expected 8-bit, got " + depth_name(img.depth()));
  }
  if (img.channels() != 3) {
    throw FormatError("wrong channel count in " + path.string() +
                      ": expected 3, got " + std::to_string(img.channels()));
  }
  std::vector<float> rgb(static_cast<std::size_t>(img.cols) * img.rows * 3);
  std::size_t i = 0;
  for (int y = 0; y < img.rows; ++y) {
    const auto* row = img.ptr<cv::Vec3b>(y);
    for (int x = 0; x < img.cols; ++x) {
      // OpenCV stores BGR.
      rgb[i++] = static_cast<float>(row[x][2] / 255.0);
      rgb[i++] = static_cast<float>(row[x][1] / 255.0);
      rgb[i++] = static_cast<float>(row[x][0] / 255.0);
    }
  }
  return IntensityImage(img.cols, img.rows, std::move(rgb));
}

void write_rgb8(const IntensityImage& image, const fs::path& path) {
  cv::Mat img(image.height(), image.width(), CV_8UC3);
  for (int y = 0; y < image.height(); ++y) {
    auto* row = img.ptr<cv::Vec3b>(y);
    for (int x = 0; x < image.width(); ++x) {
      for (int c = 0; c < 3; ++c) {
        row[x][2 - c] =
            static_cast<std::uint8_t>(std::lround(image.at(x, y, c) * 255.0));
      }
    }
  }
  store(img, path);
}

void write_mask_png8(const ValidMask& mask, const fs::path& path) {
  cv::Mat img(mask.height(), mask.width(), CV_8UC1);
  for (int y = 0; y < mask.height(); ++y) {
    auto* row = img.ptr<std::uint8_t>(y);
    for (int x = 0; x < mask.width(); ++x) row[x] = mask.at(x, y) ? 255 : 0;
  }
  store(img, path);
}

ValidMask read_mask_png8(const fs::path& path) {
  const cv::Mat img = load_raw(path);
  if (img.channels() != 1 || img.depth() != CV_8U) {
    throw FormatError("mask " + path.string() +
                      " must be a single-channel 8-bit image");
  }
  ValidMask mask(img.cols, img.rows);
  for (int y = 0; y < img.rows; ++y) {
    const auto* row = img.ptr<std::uint8_t>(y);
    for (int x = 0; x < img.cols; ++x) mask.set(x, y, row[x] != 0);
  }
  return mask;
}

DatasetManifest load_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open manifest " + path.string());
  const fs::path base = fs::absolute(path).parent_path();
  auto resolve = [&](const std::string& field) {
    fs::path p(field);
    return p.is_absolute() ? p : (base / p).lexically_normal();
  };

  DatasetManifest manifest;
  bool have_bound = false;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    const std::string where = path.string() + ":" + std::to_string(line_no);
    if (line.rfind("max_depth=", 0) == 0) {
      const std::string value = line.substr(10);
      try {
        std::size_t used = 0;
        manifest.max_depth = std::stod(value, &used);
        if (used != value.size()) throw std::invalid_argument(value);
      } catch (const std::exception&) {
        throw ValidationError(where + ": cannot parse max_depth '" + value +
                              "'");
      }
      if (!(manifest.max_depth > 0.0) || !std::isfinite(manifest.max_depth)) {
        throw ValidationError(where + ": max_depth must be positive");
      }
      have_bound = true;
      continue;
    }

    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string field;
    while (std::getline(ss, field, '\t')) fields.push_back(trim(field));
    if (fields.size() < 2 || fields.size() > 4) {
      throw ValidationError(where + ": expected 2 to 4 tab-separated fields, got " +
                            std::to_string(fields.size()));
    }
    SampleRecord rec;
    rec.rgb_path = resolve(fields[0]);
    rec.sparse_depth_path = resolve(fields[1]);
    if (fields.size() > 2 && !fields[2].empty() && fields[2] != "-") {
      rec.gt_depth_path = resolve(fields[2]);
    }
    if (fields.size() > 3 && !fields[3].empty() && fields[3] != "-") {
      rec.right_rgb_path = resolve(fields[3]);
    }
    for (const fs::path* p : {&rec.rgb_path, &rec.sparse_depth_path}) {
      if (!fs::exists(*p)) {
        throw ValidationError(where + ": dangling path " + p->string());
      }
    }
    manifest.records.push_back(std::move(rec));
  }
  if (!have_bound) {
    throw ValidationError(path.string() + ": missing max_depth=<meters> line");
  }
  if (manifest.records.empty()) {
    throw ValidationError(path.string() + ": manifest lists no samples");
  }
  return manifest;
}

void save_manifest(const DatasetManifest& manifest, const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw ValidationError("cannot write manifest " + path.string());
  out << std::setprecision(17) << "max_depth=" << manifest.max_depth << "\n";
  for (const auto& r : manifest.records) {
    out << r.rgb_path.string() << '\t' << r.sparse_depth_path.string() << '\t'
        << (r.gt_depth_path ? r.gt_depth_path->string() : "-") << '\t'
        << (r.right_rgb_path ? r.right_rgb_path->string() : "-") << "\n";
  }
}

}  // namespace dfuse
