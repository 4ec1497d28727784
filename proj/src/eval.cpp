#include "dfuse/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "dfuse/error.hpp"

namespace dfuse {

MetricsReport compute_metrics(const DepthMap& pred, const DepthMap& gt) {
  if (pred.width() != gt.width() || pred.height() != gt.height()) {
    throw ShapeError("prediction and ground truth differ in size");
  }
  const auto p = pred.values();
  const auto g = gt.values();
  const double t1 = 1.25, t2 = t1 * t1, t3 = t2 * t1;

  double se = 0, ae = 0, ise = 0, iae = 0, rel = 0;
  std::size_t n = 0, ninv = 0, d1 = 0, d2 = 0, d3 = 0;
  for (std::size_t i = 0; i < g.size(); ++i) {
    if (g[i] == DepthMap::kMissing) continue;
    const double gv = g[i];
    const double pv = p[i];
    const double e = pv - gv;
    se += e * e;
    ae += std::abs(e);
    rel += std::abs(e) / gv;
    const double ratio = pv > 0 ? std::max(pv / gv, gv / pv) : INFINITY;
    d1 += ratio < t1;
    d2 += ratio < t2;
    d3 += ratio < t3;
    if (pv > 0) {
      const double ie = 1000.0 / pv - 1000.0 / gv;
      ise += ie * ie;
      iae += std::abs(ie);
      ++ninv;
    }
    ++n;
  }
  if (n == 0) throw InvalidInput("ground truth has no valid pixel");

  MetricsReport r;
  const double dn = static_cast<double>(n);
  r.n_valid = n;
  r.n_inverse = ninv;
  r.rmse_mm = 1000.0 * std::sqrt(se / dn);
  r.mae_mm = 1000.0 * ae / dn;
  r.rel = rel / dn;
  r.delta1 = d1 / dn;
  r.delta2 = d2 / dn;
  r.delta3 = d3 / dn;
  if (ninv > 0) {
    r.irmse_per_km = std::sqrt(ise / ninv);
    r.imae_per_km = iae / ninv;
  }
  return r;
}

MetricsReport aggregate_metrics(std::span<const MetricsReport> reports) {
  if (reports.empty()) throw InvalidInput("no reports to aggregate");
  MetricsReport out;
  for (const auto& r : reports) {
    const double w = static_cast<double>(r.n_valid);
    const double wi = static_cast<double>(r.n_inverse);
    out.rmse_mm += w * r.rmse_mm;
    out.mae_mm += w * r.mae_mm;
    out.rel += w * r.rel;
    out.delta1 += w * r.delta1;
    out.delta2 += w * r.delta2;
    out.delta3 += w * r.delta3;
    out.irmse_per_km += wi * r.irmse_per_km;
    out.imae_per_km += wi * r.imae_per_km;
    out.n_valid += r.n_valid;
    out.n_inverse += r.n_inverse;
  }
  const double n = static_cast<double>(out.n_valid);
  if (n == 0) throw InvalidInput("no valid pixels across reports");
  out.rmse_mm /= n;
  out.mae_mm /= n;
  out.rel /= n;
  out.delta1 /= n;
  out.delta2 /= n;
  out.delta3 /= n;
  if (out.n_inverse > 0) {
    out.irmse_per_km /= static_cast<double>(out.n_inverse);
    out.imae_per_km /= static_cast<double>(out.n_inverse);
  }
  return out;
}

namespace {

struct Row {
  const char* key;
  const char* label;
  double value;
};

}  // namespace

std::string MetricsReport::to_table() const {
  const Row rows[] = {
      {"rmse_mm", "RMSE [mm]", rmse_mm},
      {"mae_mm", "MAE [mm]", mae_mm},
      {"irmse_per_km", "iRMSE [1/km]", irmse_per_km},
      {"imae_per_km", "iMAE [1/km]", imae_per_km},
      {"rel", "REL", rel},
      {"delta1", "delta < 1.25", delta1},
      {"delta2", "delta < 1.25^2", delta2},
      {"delta3", "delta < 1.25^3", delta3},
  };
  std::string out;
  char buf[96];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%-16s %14.4f\n", r.label, r.value);
    out += buf;
  }
  std::snprintf(buf, sizeof buf, "%-16s %14zu\n", "valid pixels", n_valid);
  out += buf;
  return out;
}

std::string MetricsReport::to_key_values() const {
  const Row rows[] = {
      {"rmse_mm", "", rmse_mm},       {"mae_mm", "", mae_mm},
      {"irmse_per_km", "", irmse_per_km}, {"imae_per_km", "", imae_per_km},
      {"rel", "", rel},               {"delta1", "", delta1},
      {"delta2", "", delta2},         {"delta3", "", delta3},
  };
  std::string out;
  char buf[96];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%s=%.17g\n", r.key, r.value);
    out += buf;
  }
  std::snprintf(buf, sizeof buf, "n_valid=%zu\n", n_valid);
  out += buf;
  return out;
}

}  // namespace dfuse
