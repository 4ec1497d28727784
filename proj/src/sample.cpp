#include "dfuse/sample.hpp"

#include <cmath>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "dfuse/error.hpp"

namespace dfuse {

std::size_t SampleSpec::resolve(std::size_t valid_count) const {
  if (!by_fraction_) {
    if (count_ > valid_count) {
      throw InvalidInput("requested " + std::to_string(count_) +
                         " samples but only " + std::to_string(valid_count) +
                         " valid pixels exist");
    }
    return count_;
  }
  if (!(fraction_ >= 0.0 && fraction_ <= 1.0)) {
    throw InvalidInput("sample fraction must lie in [0, 1], got " +
                       std::to_string(fraction_));
  }
  return static_cast<std::size_t>(
      std::floor(fraction_ * static_cast<double>(valid_count) + 0.5));
}

std::uint64_t uniform_index(std::mt19937_64& rng, std::uint64_t bound) {
  // Rejection on the top of the range keeps the draw exactly uniform.
  const std::uint64_t limit =
      std::numeric_limits<std::uint64_t>::max() -
      std::numeric_limits<std::uint64_t>::max() % bound;
  std::uint64_t r;
  do {
    r = rng();
  } while (r >= limit);
  return r % bound;
}

DepthMap sparsify(const DepthMap& dense, const SampleSpec& spec,
                  std::uint64_t seed) {
  std::vector<std::size_t> valid;
  valid.reserve(dense.size());
  for (std::size_t i = 0; i < dense.size(); ++i) {
    if (dense.values()[i] != DepthMap::kMissing) valid.push_back(i);
  }
  const std::size_t n = spec.resolve(valid.size());

  std::mt19937_64 rng(seed);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t j = i + uniform_index(rng, valid.size() - i);
    std::swap(valid[i], valid[j]);
  }

  DepthMap out(dense.width(), dense.height(), dense.max_depth());
  for (std::size_t i = 0; i < n; ++i) {
    const auto x = static_cast<int>(valid[i] % dense.width());
    const auto y = static_cast<int>(valid[i] / dense.width());
    out.set(x, y, dense.at(x, y));
  }
  return out;
}

}  // namespace dfuse
