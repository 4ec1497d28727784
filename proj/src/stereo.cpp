#include "dfuse/stereo.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <limits>
#include <string>

#include "dfuse/error.hpp"

namespace dfuse {

GrayImage to_grayscale(const IntensityImage& image) {
  GrayImage out(image.width(), image.height());
  for (int y = 0; y < image.height(); ++y) {
    for (int x = 0; x < image.width(); ++x) {
      const double lum = 0.299 * image.at(x, y, 0) + 0.587 * image.at(x, y, 1) +
                         0.114 * image.at(x, y, 2);
      out.set(x, y,
              static_cast<std::uint8_t>(
                  std::clamp<long>(std::lround(lum * 255.0), 0, 255)));
    }
  }
  return out;
}

CensusImage census_transform(const GrayImage& image, int window) {
  if (window < 3 || window > 7 || window % 2 == 0) {
    throw ConfigError("census window must be odd and in [3, 7], got " +
                      std::to_string(window));
  }
  const int r = window / 2;
  CensusImage out{image.width, image.height, window * window - 1, {}};
  out.codes.assign(image.pixels.size(), 0);
  for (int y = 0; y < image.height; ++y) {
    for (int x = 0; x < image.width; ++x) {
      const std::uint8_t centre = image.at(x, y);
      std::uint64_t code = 0;
      int bit = 0;
      for (int dy = -r; dy <= r; ++dy) {
        for (int dx = -r; dx <= r; ++dx) {
          if (dx == 0 && dy == 0) continue;
          const int xx = x + dx;
          const int yy = y + dy;
          if (xx >= 0 && yy >= 0 && xx < image.width && yy < image.height &&
              image.at(xx, yy) < centre) {
            code |= std::uint64_t{1} << bit;
          }
          ++bit;
        }
      }
      out.codes[static_cast<std::size_t>(y) * image.width + x] = code;
    }
  }
  return out;
}

void SgmParams::validate() const {
  if (census_window < 3 || census_window > 7 || census_window % 2 == 0) {
    throw ConfigError("census window must be odd and in [3, 7]");
  }
  if (dmax < 1) throw ConfigError("dmax must be >= 1");
  if (p1 > p2) throw ConfigError("SGM penalties need P1 <= P2");
  if (!(lr_tolerance >= 0.0)) throw ConfigError("lr tolerance must be >= 0");
}

CostVolume::CostVolume(int width, int height, int dmax, std::uint32_t fill)
    : width_(width), height_(height), dmax_(dmax) {
  if (width <= 0 || height <= 0 || dmax < 1) {
    throw ShapeError("cost volume needs positive dimensions and dmax >= 1");
  }
  costs_.assign(static_cast<std::size_t>(width) * height * dmax, fill);
}

CostVolume build_cost_volume(const GrayImage& left, const GrayImage& right,
                             const SgmParams& params, Reference reference) {
  params.validate();
  if (left.width != right.width || left.height != right.height) {
    throw ShapeError("stereo pair dimension mismatch: " +
                     std::to_string(left.width) + "x" +
                     std::to_string(left.height) + " vs " +
                     std::to_string(right.width) + "x" +
                     std::to_string(right.height));
  }
  const CensusImage cl = census_transform(left, params.census_window);
  const CensusImage cr = census_transform(right, params.census_window);
  const CensusImage& ref = reference == Reference::Left ? cl : cr;
  const CensusImage& other = reference == Reference::Left ? cr : cl;
  const int sign = reference == Reference::Left ? -1 : 1;
  const auto max_cost = static_cast<std::uint32_t>(ref.bits);

  CostVolume vol(left.width, left.height, params.dmax);
  for (int y = 0; y < left.height; ++y) {
    for (int x = 0; x < left.width; ++x) {
      std::uint32_t* c = vol.pixel(x, y);
      const std::uint64_t code = ref.at(x, y);
      for (int d = 0; d < params.dmax; ++d) {
        const int xo = x + sign * d;
        c[d] = (xo < 0 || xo >= left.width)
                   ? max_cost
                   : static_cast<std::uint32_t>(
                         std::popcount(code ^ other.at(xo, y)));
      }
    }
  }
  return vol;
}

CostVolume aggregate_path(const CostVolume& volume, PathDirection dir,
                          std::uint32_t p1, std::uint32_t p2) {
  if (p1 > p2) throw ConfigError("SGM penalties need P1 <= P2");
  const int w = volume.width();
  const int h = volume.height();
  const int nd = volume.dmax();
  CostVolume out(w, h, nd);

  const int y0 = dir.dy >= 0 ? 0 : h - 1;
  const int ystep = dir.dy >= 0 ? 1 : -1;
  const int x0 = dir.dx >= 0 ? 0 : w - 1;
  const int xstep = dir.dx >= 0 ? 1 : -1;

  for (int y = y0; y >= 0 && y < h; y += ystep) {
    for (int x = x0; x >= 0 && x < w; x += xstep) {
      const std::uint32_t* cost = volume.pixel(x, y);
      std::uint32_t* cur = out.pixel(x, y);
      const int px = x - dir.dx;
      const int py = y - dir.dy;
      if (px < 0 || py < 0 || px >= w || py >= h) {
        std::copy(cost, cost + nd, cur);
        continue;
      }
      const std::uint32_t* prev = out.pixel(px, py);
      const std::uint32_t prev_min = *std::min_element(prev, prev + nd);
      for (int d = 0; d < nd; ++d) {
        std::uint32_t best = prev[d];
        if (d > 0) best = std::min(best, prev[d - 1] + p1);
        if (d + 1 < nd) best = std::min(best, prev[d + 1] + p1);
        best = std::min(best, prev_min + p2);
        cur[d] = cost[d] + best - prev_min;
      }
    }
  }
  return out;
}

CostVolume aggregate(const CostVolume& volume, const SgmParams& params) {
  if (params.p1 > params.p2) throw ConfigError("SGM penalties need P1 <= P2");
  CostVolume sum(volume.width(), volume.height(), volume.dmax());
  for (const PathDirection dir : kSgmDirections) {
    const CostVolume path = aggregate_path(volume, dir, params.p1, params.p2);
    for (int y = 0; y < volume.height(); ++y) {
      for (int x = 0; x < volume.width(); ++x) {
        std::uint32_t* acc = sum.pixel(x, y);
        const std::uint32_t* add = path.pixel(x, y);
        for (int d = 0; d < volume.dmax(); ++d) acc[d] += add[d];
      }
    }
  }
  return sum;
}

DisparityMap wta_disparity(const CostVolume& volume) {
  DisparityMap out{volume.width(), volume.height(), {}};
  out.values.resize(static_cast<std::size_t>(volume.width()) * volume.height());
  for (int y = 0; y < volume.height(); ++y) {
    for (int x = 0; x < volume.width(); ++x) {
      const std::uint32_t* c = volume.pixel(x, y);
      // min_element returns the first minimum: ties go to the smaller d.
      out.values[static_cast<std::size_t>(y) * volume.width() + x] =
          static_cast<int>(std::min_element(c, c + volume.dmax()) - c);
    }
  }
  return out;
}

ValidMask lr_consistency(const DisparityMap& left, const DisparityMap& right,
                         double tolerance) {
  if (left.width != right.width || left.height != right.height) {
    throw ShapeError("disparity maps differ in size");
  }
  ValidMask mask(left.width, left.height);
  for (int y = 0; y < left.height; ++y) {
    for (int x = 0; x < left.width; ++x) {
      const int d = left.at(x, y);
      const int xr = x - d;
      if (xr < 0 || xr >= left.width) continue;
      mask.set(x, y, std::abs(d - right.at(xr, y)) <= tolerance);
    }
  }
  return mask;
}

StereoEstimate sgm_stereo_depth(const IntensityImage& left,
                                const IntensityImage& right,
                                const StereoRig& rig, const SgmParams& params,
                                double max_depth) {
  rig.validate();
  params.validate();
  if (left.width() != right.width() || left.height() != right.height()) {
    throw ShapeError("stereo pair dimension mismatch");
  }
  const GrayImage gl = to_grayscale(left);
  const GrayImage gr = to_grayscale(right);

  const DisparityMap disp_left = wta_disparity(
      aggregate(build_cost_volume(gl, gr, params, Reference::Left), params));
  const DisparityMap disp_right = wta_disparity(
      aggregate(build_cost_volume(gl, gr, params, Reference::Right), params));
  ValidMask mask = lr_consistency(disp_left, disp_right, params.lr_tolerance);

  DepthMap depth(left.width(), left.height(), max_depth);
  for (int y = 0; y < left.height(); ++y) {
    for (int x = 0; x < left.width(); ++x) {
      if (!mask.at(x, y)) continue;
      const double z = disparity_to_depth(disp_left.at(x, y), rig);
      const auto zf = static_cast<float>(z);
      if (zf == DepthMap::kMissing || zf > max_depth) {
        mask.set(x, y, false);
        continue;
      }
      depth.set(x, y, zf);
    }
  }
  return {std::move(depth), std::move(mask), disp_left};
}

}  // namespace dfuse
