#include <bit>
#include <random>

#include "doctest.h"
#include "dfuse/error.hpp"
#include "dfuse/stereo.hpp"
#include "support/sgm_oracle.hpp"
#include "support/synthetic.hpp"

using namespace dfuse;

namespace {

CostVolume random_volume(std::mt19937_64& rng, int w, int h, int dm,
                         std::uint32_t max_cost = 24) {
  CostVolume v(w, h, dm);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int d = 0; d < dm; ++d) v.set(x, y, d, static_cast<std::uint32_t>(rng() % (max_cost + 1)));
  return v;
}

DisparityMap argmin_oracle(const CostVolume& v) {
  DisparityMap out{v.width(), v.height(), std::vector<int>(v.width() * v.height())};
  for (int y = 0; y < v.height(); ++y)
    for (int x = 0; x < v.width(); ++x) {
      int best = 0;
      for (int d = 1; d < v.dmax(); ++d)
        if (v.at(x, y, d) < v.at(x, y, best)) best = d;
      out.values[y * v.width() + x] = best;
    }
  return out;
}

StereoRig rig() {
  StereoRig r;
  r.intrinsics = {100.0, 100.0, 32.0, 16.0};
  r.baseline_m = 0.5;
  return r;
}

}  // namespace

TEST_CASE("grayscale conversion uses fixed luma weights") {
  IntensityImage img(2, 1);
  img.set(0, 0, 0, 1.0f);
  img.set(1, 0, 0, 1.0f);
  img.set(1, 0, 1, 1.0f);
  img.set(1, 0, 2, 1.0f);
  const GrayImage g = to_grayscale(img);
  CHECK(g.at(0, 0) == 76);  // round(255 * 0.299) = round(76.245)
  CHECK(g.at(1, 0) == 255);
}

TEST_CASE("census transform") {
  SUBCASE("constant image gives zero codes") {
    const CensusImage c = census_transform(GrayImage(6, 5, 90), 5);
    for (auto code : c.codes) CHECK(code == 0);
    CHECK(c.bits == 24);
  }
  SUBCASE("bright centre: all eight neighbours are darker") {
    GrayImage g(5, 5, 10);
    g.set(2, 2, 200);
    const CensusImage c = census_transform(g, 3);
    CHECK(c.at(2, 2) == 0xFFu);
    for (int y = 1; y <= 3; ++y)
      for (int x = 1; x <= 3; ++x)
        if (x != 2 || y != 2) CHECK(c.at(x, y) == 0);
  }
  SUBCASE("dark centre: each neighbour sets exactly the bit that points at it") {
    GrayImage g(5, 5, 200);
    g.set(2, 2, 10);
    const CensusImage c = census_transform(g, 3);
    CHECK(c.at(2, 2) == 0);
    // Neighbour at offset (dx, dy) from the centre sees the centre at
    // (-dx, -dy); its bit index is the row-major slot of that offset.
    int k = 0;
    for (int oy = -1; oy <= 1; ++oy)
      for (int ox = -1; ox <= 1; ++ox) {
        if (ox == 0 && oy == 0) continue;
        const std::uint64_t code = c.at(2 - ox, 2 - oy);
        CHECK(std::popcount(code) == 1);
        CHECK(code == (std::uint64_t{1} << k));
        ++k;
      }
  }
  SUBCASE("border neighbours contribute zero bits") {
    GrayImage g(3, 3, 100);
    g.set(0, 0, 255);
    CHECK(census_transform(g, 3).at(0, 0) == 0b11010000u);
  }
  SUBCASE("window limits") {
    CHECK_THROWS_AS(census_transform(GrayImage(4, 4), 4), ConfigError);
    CHECK_THROWS_AS(census_transform(GrayImage(4, 4), 9), ConfigError);
  }
}

TEST_CASE("cost volume") {
  SgmParams p;
  p.census_window = 3;
  p.dmax = 6;
  std::mt19937_64 rng(4);
  SUBCASE("identical images match at zero shift") {
    GrayImage g(20, 10);
    for (auto& v : g.pixels) v = static_cast<std::uint8_t>(rng());
    const CostVolume v = build_cost_volume(g, g, p);
    for (int y = 0; y < 10; ++y)
      for (int x = 0; x < 20; ++x) CHECK(v.at(x, y, 0) == 0);
  }
  SUBCASE("shift by two matches at d = 2; off-image shifts cost the maximum") {
    auto [l, r] = testing::shifted_pair(24, 10, 2, 7);
    const CostVolume v = build_cost_volume(to_grayscale(l), to_grayscale(r), p);
    for (int y = 1; y < 9; ++y)
      for (int x = 3; x < 22; ++x) CHECK(v.at(x, y, 2) == 0);
    for (int y = 0; y < 10; ++y)
      for (int x = 0; x < 5; ++x)
        for (int d = x + 1; d < p.dmax; ++d) CHECK(v.at(x, y, d) == 8);
  }
  SUBCASE("dimension mismatch") {
    CHECK_THROWS_AS(build_cost_volume(GrayImage(4, 4), GrayImage(5, 4), p), ShapeError);
  }
}

TEST_CASE("single path aggregation equals the energy definition") {
  SUBCASE("3 pixels x 2 disparities, exhaustive enumeration") {
    CostVolume v(3, 1, 2);
    const std::uint32_t c[3][2] = {{5, 1}, {0, 4}, {3, 3}};
    for (int x = 0; x < 3; ++x)
      for (int d = 0; d < 2; ++d) v.set(x, 0, d, c[x][d]);
    const CostVolume l = aggregate_path(v, {1, 0}, 2, 7);
    std::vector<std::vector<std::uint32_t>> costs{{5, 1}, {0, 4}, {3, 3}};
    const auto ref = testing::normalise(costs, testing::scanline_energy_exhaustive(costs, 2, 7));
    // By hand: L0 = (5, 1); L1 = (0 + min(5, 1+2) - 1, 4 + min(1, 5+2) - 1) = (2, 4);
    // L2 = (3 + min(2, 4+2) - 2, 3 + min(4, 2+2) - 2) = (3, 5).
    const std::uint32_t hand[3][2] = {{5, 1}, {2, 4}, {3, 5}};
    for (int x = 0; x < 3; ++x)
      for (int d = 0; d < 2; ++d) {
        CHECK(l.at(x, 0, d) == hand[x][d]);
        CHECK(l.at(x, 0, d) == ref[x][d]);
      }
  }
  SUBCASE("exhaustive and DP oracles agree on small rows") {
    std::mt19937_64 rng(13);
    for (int t = 0; t < 40; ++t) {
      const int n = 1 + static_cast<int>(rng() % 6);
      const int dm = 1 + static_cast<int>(rng() % 4);
      std::vector<std::vector<std::uint32_t>> costs(n, std::vector<std::uint32_t>(dm));
      for (auto& row : costs)
        for (auto& c : row) c = static_cast<std::uint32_t>(rng() % 20);
      const std::uint32_t p1 = rng() % 6, p2 = p1 + rng() % 20;
      CHECK(testing::scanline_energy(costs, p1, p2) ==
            testing::scanline_energy_exhaustive(costs, p1, p2));
    }
  }
  SUBCASE("random volumes, all eight directions") {
    std::mt19937_64 rng(77);
    for (int t = 0; t < 25; ++t) {
      const int w = 1 + static_cast<int>(rng() % 16);
      const int h = 1 + static_cast<int>(rng() % 16);
      const int dm = 1 + static_cast<int>(rng() % 8);
      const CostVolume v = random_volume(rng, w, h, dm);
      const std::uint32_t p1 = rng() % 8, p2 = p1 + rng() % 40;
      for (const auto dir : kSgmDirections) {
        CHECK(aggregate_path(v, dir, p1, p2) == testing::reference_path(v, dir, p1, p2));
      }
    }
  }
}

TEST_CASE("aggregation properties") {
  std::mt19937_64 rng(31);
  SUBCASE("zero penalties keep the raw winner") {
    SgmParams p;
    p.p1 = p.p2 = 0;
    for (int t = 0; t < 20; ++t) {
      const CostVolume v = random_volume(rng, 12, 9, 7, 1000);
      CHECK(wta_disparity(aggregate(v, p)).values == argmin_oracle(v).values);
    }
  }
  SUBCASE("uniform volume picks disparity zero") {
    const CostVolume v(9, 7, 5, 3);
    for (int d : wta_disparity(aggregate(v, SgmParams{})).values) CHECK(d == 0);
  }
  SUBCASE("sum of the eight directions in fixed order") {
    const CostVolume v = random_volume(rng, 7, 6, 4);
    SgmParams p;
    const CostVolume total = aggregate(v, p);
    CostVolume ref(7, 6, 4);
    for (const auto dir : kSgmDirections) {
      const CostVolume l = aggregate_path(v, dir, p.p1, p.p2);
      for (int y = 0; y < 6; ++y)
        for (int x = 0; x < 7; ++x)
          for (int d = 0; d < 4; ++d) ref.set(x, y, d, ref.at(x, y, d) + l.at(x, y, d));
    }
    CHECK(total == ref);
  }
  SUBCASE("P1 > P2 is rejected") {
    SgmParams p;
    p.p1 = 50;
    p.p2 = 10;
    CHECK_THROWS_AS(p.validate(), ConfigError);
  }
}

TEST_CASE("winner takes all") {
  CostVolume v(3, 1, 6);
  for (int d = 0; d < 6; ++d) {
    v.set(0, 0, d, d == 3 ? 1 : 9);
    v.set(1, 0, d, (d == 2 || d == 5) ? 0 : 4);
    v.set(2, 0, d, 100 - d);
  }
  const DisparityMap m = wta_disparity(v);
  CHECK(m.at(0, 0) == 3);
  CHECK(m.at(1, 0) == 2);
  CHECK(m.at(2, 0) == 5);
}

TEST_CASE("left-right consistency") {
  DisparityMap l{8, 1, {0, 0, 0, 0, 4, 4, 4, 4}};
  DisparityMap r{8, 1, {4, 4, 7, 4, 0, 0, 0, 0}};
  const ValidMask m = lr_consistency(l, r, 1.0);
  CHECK(m.at(4, 0));       // right(0) = 4
  CHECK(m.at(5, 0));       // right(1) = 4
  CHECK_FALSE(m.at(6, 0)); // right(2) = 7, |4 - 7| > 1
  CHECK(m.at(7, 0));
  CHECK_FALSE(m.at(0, 0)); // right(0) = 4, |0 - 4| > 1
}

TEST_CASE("left-right consistency bounds and infinite tolerance") {
  DisparityMap l{4, 1, {2, 0, 0, 0}};
  DisparityMap r{4, 1, {0, 0, 0, 0}};
  CHECK_FALSE(lr_consistency(l, r, 1e9).at(0, 0));  // x - d < 0
  for (int x = 1; x < 4; ++x) CHECK(lr_consistency(l, r, 1e9).at(x, 0));
}

TEST_CASE("full pipeline on synthetic pairs") {
  SgmParams p;
  p.dmax = 16;
  SUBCASE("shifted texture recovers the shift and its depth") {
    for (int k : {1, 3, 6}) {
      auto [l, r] = testing::shifted_pair(64, 32, k, 100 + k);
      const StereoEstimate est = sgm_stereo_depth(l, r, rig(), p);
      int good = 0, total = 0;
      for (int y = 2; y < 30; ++y)
        for (int x = p.dmax; x < 62; ++x) {
          ++total;
          if (est.disparity.at(x, y) == k && est.mask.at(x, y) &&
              est.depth.at(x, y) == static_cast<float>(100.0 * 0.5 / k)) {
            ++good;
          }
        }
      CHECK(good >= 0.95 * total);
    }
  }
  SUBCASE("identical pair gives zero disparity and no depth") {
    auto [l, r] = testing::shifted_pair(48, 24, 0, 5);
    const StereoEstimate est = sgm_stereo_depth(l, r, rig(), p);
    CHECK(est.depth.valid_count() == 0);
    CHECK(est.mask.count() == 0);
  }
  SUBCASE("valid pixels reproject inside the right image with positive disparity") {
    auto [l, r] = testing::shifted_pair(48, 24, 4, 6);
    const StereoEstimate est = sgm_stereo_depth(l, r, rig(), p);
    CHECK(est.mask.count() > 0);
    for (int y = 0; y < 24; ++y)
      for (int x = 0; x < 48; ++x) {
        CHECK(est.mask.at(x, y) == est.depth.valid(x, y));
        if (!est.mask.at(x, y)) continue;
        CHECK(est.disparity.at(x, y) > 0);
        CHECK(x - est.disparity.at(x, y) >= 0);
      }
  }
  SUBCASE("mismatched sizes") {
    CHECK_THROWS_AS(sgm_stereo_depth(IntensityImage(8, 8), IntensityImage(9, 8), rig(), p),
                    ShapeError);
  }
}
