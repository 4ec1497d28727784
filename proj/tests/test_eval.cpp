#include <cmath>
#include <random>

#include "doctest.h"
#include "dfuse/error.hpp"
#include "dfuse/eval.hpp"

using namespace dfuse;

namespace {

// Per-pixel reference in long double, accumulated in a different order
// (column-major) from the implementation.
MetricsReport naive(const DepthMap& p, const DepthMap& g) {
  long double se = 0, ae = 0, ise = 0, iae = 0, rel = 0;
  std::size_t n = 0, ni = 0, d1 = 0, d2 = 0, d3 = 0;
  for (int x = 0; x < g.width(); ++x)
    for (int y = 0; y < g.height(); ++y) {
      if (!g.valid(x, y)) continue;
      const long double gv = g.at(x, y), pv = p.at(x, y);
      ++n;
      se += (pv - gv) * (pv - gv);
      ae += std::fabs(pv - gv);
      rel += std::fabs(pv - gv) / gv;
      if (pv > 0) {
        ++ni;
        const long double di = 1000.0L / pv - 1000.0L / gv;
        ise += di * di;
        iae += std::fabs(di);
        const long double ratio = std::max(pv / gv, gv / pv);
        if (ratio < 1.25L) ++d1;
        if (ratio < 1.5625L) ++d2;
        if (ratio < 1.953125L) ++d3;
      }
    }
  MetricsReport r;
  r.n_valid = n;
  r.n_inverse = ni;
  r.rmse_mm = static_cast<double>(1000.0L * std::sqrt(se / n));
  r.mae_mm = static_cast<double>(1000.0L * ae / n);
  r.rel = static_cast<double>(rel / n);
  r.irmse_per_km = ni ? static_cast<double>(std::sqrt(ise / ni)) : 0.0;
  r.imae_per_km = ni ? static_cast<double>(iae / ni) : 0.0;
  r.delta1 = static_cast<double>(d1) / n;
  r.delta2 = static_cast<double>(d2) / n;
  r.delta3 = static_cast<double>(d3) / n;
  return r;
}

void check_close(const MetricsReport& a, const MetricsReport& b, double tol) {
  auto close = [tol](double x, double y) {
    return x == y || std::abs(x - y) <= tol * std::max(std::abs(x), std::abs(y));
  };
  CHECK(a.n_valid == b.n_valid);
  CHECK(a.n_inverse == b.n_inverse);
  CHECK(close(a.rmse_mm, b.rmse_mm));
  CHECK(close(a.mae_mm, b.mae_mm));
  CHECK(close(a.irmse_per_km, b.irmse_per_km));
  CHECK(close(a.imae_per_km, b.imae_per_km));
  CHECK(close(a.rel, b.rel));
  CHECK(a.delta1 == b.delta1);
  CHECK(a.delta2 == b.delta2);
  CHECK(a.delta3 == b.delta3);
}

std::pair<DepthMap, DepthMap> random_pair(std::mt19937_64& rng, int w, int h) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  DepthMap g(w, h, 85.0), p(w, h, 85.0);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      if (u(rng) < 0.4) g.set(x, y, static_cast<float>(0.5 + 84 * u(rng)));
      if (u(rng) < 0.95) p.set(x, y, static_cast<float>(0.5 + 84 * u(rng)));
    }
  if (g.valid_count() == 0) g.set(0, 0, 3.0f);
  return {p, g};
}

}  // namespace

TEST_CASE("identity and constant offset") {
  DepthMap g(4, 2, 85.0);
  g.set(0, 0, 2.0f);
  g.set(3, 1, 40.0f);
  g.set(1, 1, 17.5f);
  const MetricsReport same = compute_metrics(g, g);
  CHECK(same.rmse_mm == 0.0);
  CHECK(same.mae_mm == 0.0);
  CHECK(same.rel == 0.0);
  CHECK(same.delta1 == 1.0);
  CHECK(same.delta3 == 1.0);
  CHECK(same.n_valid == 3);

  DepthMap p(4, 2, 85.0);
  p.set(0, 0, 3.0f);
  p.set(3, 1, 41.0f);
  p.set(1, 1, 18.5f);
  const MetricsReport off = compute_metrics(p, g);
  CHECK(off.rmse_mm == doctest::Approx(1000.0).epsilon(1e-12));
  CHECK(off.mae_mm == doctest::Approx(1000.0).epsilon(1e-12));
}

TEST_CASE("three pixel case") {
  const DepthMap g(3, 1, {2.0f, 4.0f, 5.0f}, 85.0);
  const DepthMap p(3, 1, {2.5f, 4.0f, 10.0f}, 85.0);
  const MetricsReport r = compute_metrics(p, g);
  // Errors 0.5, 0, 5 m; ratios 1.25, 1, 2; inverse differences 100, 0, 100 per km.
  CHECK(r.mae_mm == doctest::Approx(5500.0 / 3.0).epsilon(1e-9));
  CHECK(r.rmse_mm == doctest::Approx(1000.0 * std::sqrt(25.25 / 3.0)).epsilon(1e-9));
  CHECK(r.rel == doctest::Approx(1.25 / 3.0).epsilon(1e-9));
  CHECK(r.delta1 == doctest::Approx(1.0 / 3.0).epsilon(1e-12));  // 1.25 is not < 1.25
  CHECK(r.delta2 == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
  CHECK(r.delta3 == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
  CHECK(r.imae_per_km == doctest::Approx(200.0 / 3.0).epsilon(1e-9));
  CHECK(r.irmse_per_km == doctest::Approx(std::sqrt(20000.0 / 3.0)).epsilon(1e-9));
  check_close(r, naive(p, g), 1e-12);
}

TEST_CASE("predicted zeros stay in the distance metrics and leave the inverse ones") {
  const DepthMap g(2, 1, {4.0f, 8.0f}, 85.0);
  const DepthMap p(2, 1, {0.0f, 8.0f}, 85.0);
  const MetricsReport r = compute_metrics(p, g);
  CHECK(r.n_valid == 2);
  CHECK(r.n_inverse == 1);
  CHECK(r.mae_mm == doctest::Approx(2000.0));
  CHECK(r.irmse_per_km == 0.0);
  CHECK(r.delta1 == 0.5);
}

TEST_CASE("errors") {
  CHECK_THROWS_AS(compute_metrics(DepthMap(2, 2), DepthMap(2, 2)), InvalidInput);
  DepthMap g(2, 2);
  g.set(0, 0, 1.0f);
  CHECK_THROWS_AS(compute_metrics(DepthMap(3, 2), g), ShapeError);
  CHECK_THROWS_AS(aggregate_metrics({}), InvalidInput);
}

TEST_CASE("agreement with the per-pixel reference") {
  std::mt19937_64 rng(17);
  for (int t = 0; t < 200; ++t) {
    const auto [p, g] = random_pair(rng, 1 + static_cast<int>(rng() % 40), 1 + static_cast<int>(rng() % 30));
    check_close(compute_metrics(p, g), naive(p, g), 1e-9);
  }
}

TEST_CASE("metric invariants") {
  std::mt19937_64 rng(23);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int t = 0; t < 100; ++t) {
    const auto [p, g] = random_pair(rng, 16, 12);
    const MetricsReport r = compute_metrics(p, g);
    CHECK(r.rmse_mm >= r.mae_mm);
    CHECK(r.mae_mm >= 0.0);
    CHECK(r.delta1 <= r.delta2);
    CHECK(r.delta2 <= r.delta3);

    // Predictions at gt-invalid pixels do not matter.
    DepthMap q = p;
    for (int y = 0; y < 12; ++y)
      for (int x = 0; x < 16; ++x)
        if (!g.valid(x, y)) q.set(x, y, static_cast<float>(84 * u(rng)));
    check_close(compute_metrics(q, g), r, 0.0);

    // Scaling both by a power of two is exact in float.
    DepthMap ps(16, 12, 200.0), gs(16, 12, 200.0);
    for (int y = 0; y < 12; ++y)
      for (int x = 0; x < 16; ++x) {
        if (p.valid(x, y)) ps.set(x, y, 2.0f * p.at(x, y));
        if (g.valid(x, y)) gs.set(x, y, 2.0f * g.at(x, y));
      }
    const MetricsReport s = compute_metrics(ps, gs);
    CHECK(s.rel == doctest::Approx(r.rel).epsilon(1e-12));
    CHECK(s.delta1 == r.delta1);
    CHECK(s.delta3 == r.delta3);
    CHECK(s.rmse_mm == doctest::Approx(2 * r.rmse_mm).epsilon(1e-12));
    CHECK(s.mae_mm == doctest::Approx(2 * r.mae_mm).epsilon(1e-12));
  }
}

TEST_CASE("aggregation weights by valid pixels") {
  const DepthMap g1(2, 1, {10.0f, 10.0f}, 85.0), p1(2, 1, {11.0f, 11.0f}, 85.0);  // 1 m, n=2
  const DepthMap g2(1, 1, {1.0f}, 85.0), p2(1, 1, {5.0f}, 85.0);              // error 4 m, n=1
  const MetricsReport rs[2] = {compute_metrics(p1, g1), compute_metrics(p2, g2)};
  const MetricsReport a = aggregate_metrics(rs);
  CHECK(a.n_valid == 3);
  CHECK(a.mae_mm == doctest::Approx((2 * 1000.0 + 4000.0) / 3));
  CHECK(a.rmse_mm == doctest::Approx((2 * 1000.0 + 4000.0) / 3));
  CHECK(a.delta3 == doctest::Approx(2.0 / 3));
  const MetricsReport one[1] = {rs[0]};
  check_close(aggregate_metrics(one), rs[0], 1e-15);
}

TEST_CASE("report formatting") {
  const DepthMap g(3, 1, {2.0f, 4.0f, 5.0f}, 85.0);
  const DepthMap p(3, 1, {2.5f, 4.0f, 10.0f}, 85.0);
  const MetricsReport r = compute_metrics(p, g);
  const std::string kv = r.to_key_values();
  CHECK(kv.find("rmse_mm=") != std::string::npos);
  CHECK(kv.find("delta1=0.33333333333333331") != std::string::npos);
  CHECK(kv.find("n_valid=3") != std::string::npos);
  CHECK(r.to_table().find("RMSE [mm]") != std::string::npos);
}
