#include <cmath>
#include <random>

#include "doctest.h"
#include "dfuse/error.hpp"
#include "dfuse/sample.hpp"
#include "support/synthetic.hpp"

using namespace dfuse;

namespace {

DepthMap ramp(int w, int h) {
  DepthMap m(w, h, 85.0);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) m.set(x, y, 1.0f + 0.008f * static_cast<float>(y * w + x));
  return m;
}

}  // namespace

TEST_CASE("sample counts") {
  const DepthMap dense = ramp(100, 100);
  CHECK(sparsify(dense, SampleSpec::count(0), 1).valid_count() == 0);
  CHECK(sparsify(dense, SampleSpec::fraction(1.0), 1) == dense);
  CHECK(sparsify(dense, SampleSpec::fraction(0.10), 1).valid_count() == 1000);
  CHECK(sparsify(dense, SampleSpec::count(321), 9).valid_count() == 321);
  CHECK(SampleSpec::fraction(0.5).resolve(3) == 2);  // 1.5 rounds up
  CHECK_THROWS_AS(sparsify(dense, SampleSpec::count(10001), 1), InvalidInput);
  CHECK_THROWS_AS(SampleSpec::fraction(1.5).resolve(10), InvalidInput);
  CHECK_THROWS_AS(SampleSpec::fraction(-0.1).resolve(10), InvalidInput);
}

TEST_CASE("sampling is reproducible and a subset of the input") {
  const auto scene = testing::make_scene(3);
  DepthMap holey = scene.depth;
  for (int x = 0; x < holey.width(); x += 3) holey.clear(x, 10);
  for (std::uint64_t seed : {0ull, 1ull, 12345ull}) {
    const DepthMap a = sparsify(holey, SampleSpec::fraction(0.05), seed);
    const DepthMap b = sparsify(holey, SampleSpec::fraction(0.05), seed);
    CHECK(a == b);
    for (int y = 0; y < a.height(); ++y)
      for (int x = 0; x < a.width(); ++x)
        if (a.valid(x, y)) CHECK(a.at(x, y) == holey.at(x, y));
  }
  CHECK_FALSE(sparsify(holey, SampleSpec::fraction(0.05), 1) ==
              sparsify(holey, SampleSpec::fraction(0.05), 2));
}

TEST_CASE("uniform_index stays in range") {
  std::mt19937_64 rng(5);
  for (std::uint64_t bound : {1ull, 2ull, 7ull, 1000ull, (1ull << 63) + 3}) {
    for (int i = 0; i < 200; ++i) CHECK(uniform_index(rng, bound) < bound);
  }
}

TEST_CASE("every valid pixel is kept with probability n / valid") {
  // 10x10 map with 20 missing pixels; keep 24 of the 80 valid ones.
  DepthMap m = ramp(10, 10);
  for (int i = 0; i < 20; ++i) m.clear((i * 7) % 10, (i * 3) % 10);
  const std::size_t valid = m.valid_count();
  const int trials = 1000;
  const double p = 24.0 / static_cast<double>(valid);
  std::vector<int> hits(100, 0);
  for (int s = 0; s < trials; ++s) {
    const DepthMap d = sparsify(m, SampleSpec::count(24), static_cast<std::uint64_t>(s));
    for (int i = 0; i < 100; ++i)
      if (d.values()[i] != 0.0f) ++hits[i];
  }
  const double mean = trials * p;
  const double sigma = std::sqrt(trials * p * (1.0 - p));
  for (int i = 0; i < 100; ++i) {
    if (m.values()[i] == 0.0f) {
      CHECK(hits[i] == 0);
    } else {
      CHECK(std::abs(hits[i] - mean) <= 5.0 * sigma);
    }
  }
}
