#pragma once

#include <cstddef>
#include <cstdint>
#include <random>

#include "dfuse/core.hpp"

namespace dfuse {

/// How many valid pixels to keep: an exact count or a fraction of the valid
/// set (rounded half-up to a count).
class SampleSpec {
 public:
  static SampleSpec count(std::size_t n) { return SampleSpec(n, 0.0, false); }
  static SampleSpec fraction(double f) { return SampleSpec(0, f, true); }

  /// Resolves against the number of valid pixels available.
  std::size_t resolve(std::size_t valid_count) const;

 private:
  SampleSpec(std::size_t n, double f, bool by_fraction)
      : count_(n), fraction_(f), by_fraction_(by_fraction) {}

  std::size_t count_;
  double fraction_;
  bool by_fraction_;
};

/// Uniform integer in [0, bound) from the raw engine output. Independent of
/// the standard library's distribution implementation.
std::uint64_t uniform_index(std::mt19937_64& rng, std::uint64_t bound);

/// Keeps a seeded uniform subset of the valid pixels (partial Fisher-Yates);
/// everything else becomes missing. Kept values are copied bit-exact.
DepthMap sparsify(const DepthMap& dense, const SampleSpec& spec,
                  std::uint64_t seed);

}  // namespace dfuse
