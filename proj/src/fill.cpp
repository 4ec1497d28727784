#include "dfuse/fill.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <limits>
#include <string>

#include "dfuse/error.hpp"

namespace dfuse {

bool Kernel::contains(int dx, int dy) const {
  const int r = radius();
  if (std::abs(dx) > r || std::abs(dy) > r) return false;
  switch (shape) {
    case KernelShape::Full: return true;
    case KernelShape::Diamond: return std::abs(dx) + std::abs(dy) <= r;
    case KernelShape::Cross: return dx == 0 || dy == 0;
  }
  return false;
}

void Kernel::validate() const {
  if (size < 3 || size % 2 == 0) {
    throw ConfigError("kernel size must be odd and >= 3, got " +
                      std::to_string(size));
  }
}

void FillParams::validate() const {
  initial.validate();
  Kernel{closing_size}.validate();
  Kernel{hole_size}.validate();
  Kernel{blur_size}.validate();
  if (hole_iterations < 1) throw ConfigError("hole iteration cap must be >= 1");
  if (!(blur_sigma > 0.0)) throw ConfigError("blur sigma must be positive");
}

DepthMap dilate_nearest(const DepthMap& map, const Kernel& kernel) {
  DepthMap out = map;
  const int r = kernel.radius();
  for (int y = 0; y < map.height(); ++y) {
    for (int x = 0; x < map.width(); ++x) {
      if (map.valid(x, y)) continue;
      float best = std::numeric_limits<float>::infinity();
      for (int dy = -r; dy <= r; ++dy) {
        const int yy = y + dy;
        if (yy < 0 || yy >= map.height()) continue;
        for (int dx = -r; dx <= r; ++dx) {
          const int xx = x + dx;
          if (xx < 0 || xx >= map.width() || !kernel.contains(dx, dy)) continue;
          const float v = map.at(xx, yy);
          if (v != DepthMap::kMissing && v < best) best = v;
        }
      }
      if (std::isfinite(best)) out.set(x, y, best);
    }
  }
  return out;
}

DepthMap close_nearest(const DepthMap& map, int size) {
  const int r = size / 2;
  const int w = map.width();
  const int h = map.height();

  // Dilation: nearest valid depth in the window (valid centres included).
  DepthMap grown(w, h, map.max_depth());
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      float best = std::numeric_limits<float>::infinity();
      for (int yy = std::max(0, y - r); yy <= std::min(h - 1, y + r); ++yy) {
        for (int xx = std::max(0, x - r); xx <= std::min(w - 1, x + r); ++xx) {
          const float v = map.at(xx, yy);
          if (v != DepthMap::kMissing && v < best) best = v;
        }
      }
      if (std::isfinite(best)) grown.set(x, y, best);
    }
  }

  // Erosion: farthest depth in the window, missing if any neighbour is.
  // Out-of-image pixels do not participate.
  DepthMap out(w, h, map.max_depth());
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      float worst = 0.0f;
      bool hole = false;
      for (int yy = std::max(0, y - r); yy <= std::min(h - 1, y + r) && !hole;
           ++yy) {
        for (int xx = std::max(0, x - r); xx <= std::min(w - 1, x + r); ++xx) {
          const float v = grown.at(xx, yy);
          if (v == DepthMap::kMissing) {
            hole = true;
            break;
          }
          worst = std::max(worst, v);
        }
      }
      if (!hole) out.set(x, y, worst);
    }
  }
  return out;
}

DepthMap extend_nearest(const DepthMap& map) {
  const int w = map.width();
  const int h = map.height();
  DepthMap out = map;
  std::vector<bool> row_has_data(h, false);

  for (int y = 0; y < h; ++y) {
    // Distance to and value of the nearest valid pixel to the left/right.
    std::vector<int> left_x(w, -1);
    std::vector<int> right_x(w, -1);
    int last = -1;
    for (int x = 0; x < w; ++x) {
      if (map.valid(x, y)) last = x;
      left_x[x] = last;
    }
    last = -1;
    for (int x = w - 1; x >= 0; --x) {
      if (map.valid(x, y)) last = x;
      right_x[x] = last;
    }
    if (left_x[w - 1] < 0) continue;
    row_has_data[y] = true;
    for (int x = 0; x < w; ++x) {
      if (map.valid(x, y)) continue;
      const int l = left_x[x];
      const int rr = right_x[x];
      float v;
      if (l < 0) {
        v = map.at(rr, y);
      } else if (rr < 0) {
        v = map.at(l, y);
      } else if (x - l < rr - x) {
        v = map.at(l, y);
      } else if (rr - x < x - l) {
        v = map.at(rr, y);
      } else {
        v = std::min(map.at(l, y), map.at(rr, y));
      }
      out.set(x, y, v);
    }
  }

  // Rows without any data copy the nearest populated row.
  const DepthMap rows = out;
  for (int y = 0; y < h; ++y) {
    if (row_has_data[y]) continue;
    int up = -1;
    int down = -1;
    for (int yy = y - 1; yy >= 0; --yy) {
      if (row_has_data[yy]) {
        up = yy;
        break;
      }
    }
    for (int yy = y + 1; yy < h; ++yy) {
      if (row_has_data[yy]) {
        down = yy;
        break;
      }
    }
    if (up < 0 && down < 0) return out;  // nothing to propagate
    for (int x = 0; x < w; ++x) {
      float v;
      if (up < 0) {
        v = rows.at(x, down);
      } else if (down < 0) {
        v = rows.at(x, up);
      } else if (y - up < down - y) {
        v = rows.at(x, up);
      } else if (down - y < y - up) {
        v = rows.at(x, down);
      } else {
        v = std::min(rows.at(x, up), rows.at(x, down));
      }
      out.set(x, y, v);
    }
  }
  return out;
}

namespace {

// Gaussian blur evaluated only where `filled` is set. Written as a weighted
// mean of deviations from the centre so constant neighbourhoods reproduce the
// centre value exactly; clamped to the window range so rounding can never
// leave the convex hull of the inputs.
DepthMap blur_filled(const DepthMap& dense, const std::vector<bool>& filled,
                     int size, double sigma) {
  const int r = size / 2;
  std::vector<double> taps(static_cast<std::size_t>(size));
  for (int i = -r; i <= r; ++i) {
    taps[i + r] = std::exp(-(i * i) / (2.0 * sigma * sigma));
  }
  DepthMap out = dense;
  const int w = dense.width();
  const int h = dense.height();
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      if (!filled[static_cast<std::size_t>(y) * w + x]) continue;
      const double centre = dense.at(x, y);
      double acc = 0.0;
      double norm = 0.0;
      float lo = dense.at(x, y);
      float hi = lo;
      for (int dy = -r; dy <= r; ++dy) {
        const int yy = y + dy;
        if (yy < 0 || yy >= h) continue;
        for (int dx = -r; dx <= r; ++dx) {
          const int xx = x + dx;
          if (xx < 0 || xx >= w) continue;
          const float v = dense.at(xx, yy);
          const double wt = taps[dy + r] * taps[dx + r];
          acc += wt * (v - centre);
          norm += wt;
          lo = std::min(lo, v);
          hi = std::max(hi, v);
        }
      }
      const float blurred = static_cast<float>(centre + acc / norm);
      out.set(x, y, std::clamp(blurred, lo, hi));
    }
  }
  return out;
}

bool is_dense(const DepthMap& map) { return map.valid_count() == map.size(); }

}  // namespace

DepthMap morph_fill(const DepthMap& map, const FillParams& params) {
  params.validate();
  if (map.valid_count() == 0) {
    throw UnfillableInput("unfillable input: depth map has no valid pixels");
  }
  std::vector<bool> filled(map.size());
  for (std::size_t i = 0; i < map.size(); ++i) {
    filled[i] = map.values()[i] == DepthMap::kMissing;
  }

  DepthMap work = dilate_nearest(map, params.initial);
  work = close_nearest(work, params.closing_size);
  const Kernel hole_kernel{params.hole_size, KernelShape::Full};
  for (int i = 0; i < params.hole_iterations && !is_dense(work); ++i) {
    work = dilate_nearest(work, hole_kernel);
  }
  if (!is_dense(work)) work = extend_nearest(work);
  work = blur_filled(work, filled, params.blur_size, params.blur_sigma);

  // Raw measurements come back untouched.
  for (int y = 0; y < map.height(); ++y) {
    for (int x = 0; x < map.width(); ++x) {
      if (map.valid(x, y)) work.set(x, y, map.at(x, y));
    }
  }
  return work;
}

NormalizedDepth normalize_depth(const DepthMap& map) {
  if (!(map.max_depth() > 0.0)) {
    throw ConfigError("max_depth must be positive to normalize");
  }
  NormalizedDepth out{map.width(), map.height(), {}};
  out.values.reserve(map.size());
  for (float v : map.values()) {
    out.values.push_back(static_cast<float>(v / map.max_depth()));
  }
  return out;
}

DepthMap denormalize_depth(const NormalizedDepth& norm, double max_depth) {
  if (!(max_depth > 0.0)) {
    throw ConfigError("max_depth must be positive to denormalize");
  }
  std::vector<float> values;
  values.reserve(norm.values.size());
  for (float v : norm.values) {
    values.push_back(static_cast<float>(
        std::min<double>(static_cast<double>(v) * max_depth, max_depth)));
  }
  return DepthMap(norm.width, norm.height, std::move(values), max_depth);
}

}  // namespace dfuse
