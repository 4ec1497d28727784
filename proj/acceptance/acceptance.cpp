// Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
// criterion fails.

#include <algorithm>
#include <cfloat>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <map>
#include <memory>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "dfuse/eval.hpp"
#include "dfuse/fill.hpp"
#include "dfuse/imageio.hpp"
#include "dfuse/loss.hpp"
#include "dfuse/network.hpp"
#include "dfuse/sample.hpp"
#include "dfuse/stereo.hpp"
#include "dfuse/train.hpp"
#include "support/fill_oracle.hpp"
#include "support/gradcheck.hpp"
#include "support/sgm_oracle.hpp"
#include "support/synthetic.hpp"

using namespace dfuse;
using ad::Shape;
using testing::TD;
using TF = ad::Tensor<float>;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = true;
  std::string detail;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      if (pass) detail.clear();
      pass = false;
      detail += (detail.empty() ? "" : "; ") + what;
    }
  }
  void note(const std::string& what) {
    if (pass) detail += (detail.empty() ? "" : "; ") + what;
  }
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

constexpr double kMaxDepth = 85.0;

// ---------------------------------------------------------------------------
// 1. Gradient suite

TD away_from_zero(std::mt19937_64& rng, Shape s) {
  TD t = testing::random_tensor(rng, s);
  for (double& v : t.mutable_values()) v = v < 0 ? v - 0.05 : v + 0.05;
  return t;
}

MaskedTarget random_target(std::mt19937_64& rng, Shape s, double density) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  MaskedTarget t{s, std::vector<double>(s.numel(), 0.0), std::vector<std::uint8_t>(s.numel(), 0)};
  for (std::size_t i = 0; i < s.numel(); ++i)
    if (u(rng) < density) {
      t.mask[i] = 1;
      t.values[i] = 1.0 + 80.0 * u(rng);
    }
  t.mask[0] = 1;
  t.values[0] = 5.0;
  return t;
}

using GradCase = std::function<testing::GradCheckResult(std::mt19937_64&)>;

Shape small_shape(std::mt19937_64& rng) {
  return {1 + static_cast<int>(rng() % 2), 1 + static_cast<int>(rng() % 3),
          3 + static_cast<int>(rng() % 4), 3 + static_cast<int>(rng() % 4)};
}

std::vector<std::pair<std::string, GradCase>> gradient_cases() {
  constexpr std::size_t kCoords = 12;
  auto unary = [](std::function<TD(const TD&)> op, bool avoid_zero = false) {
    return [op, avoid_zero](std::mt19937_64& rng) {
      const Shape s = small_shape(rng);
      TD x = avoid_zero ? away_from_zero(rng, s) : testing::random_tensor(rng, s);
      const std::uint64_t seed = rng();
      return testing::gradcheck([&] { return testing::project(op(x), seed); }, {x}, rng, kCoords);
    };
  };
  std::vector<std::pair<std::string, GradCase>> cases;
  cases.emplace_back("conv2d", [](std::mt19937_64& rng) {
    const Shape s = small_shape(rng);
    const int o = 1 + rng() % 3, k = 1 + 2 * (rng() % 2);
    const ad::Conv2dOptions opt{1 + static_cast<int>(rng() % 2), static_cast<int>(rng() % 2)};
    TD x = testing::random_tensor(rng, s);
    TD w = testing::random_tensor(rng, {o, s.c, k, k});
    TD b = testing::random_tensor(rng, {1, o, 1, 1});
    const std::uint64_t seed = rng();
    return testing::gradcheck([&] { return testing::project(ad::conv2d(x, w, b, opt), seed); },
                              {x, w, b}, rng, kCoords);
  });
  cases.emplace_back("conv_transpose2d", [](std::mt19937_64& rng) {
    const Shape s = small_shape(rng);
    const int o = 1 + rng() % 3, k = 2 + rng() % 2;
    const ad::Conv2dOptions opt{1 + static_cast<int>(rng() % 2), 0};
    TD x = testing::random_tensor(rng, s);
    TD w = testing::random_tensor(rng, {s.c, o, k, k});
    TD b = testing::random_tensor(rng, {1, o, 1, 1});
    const std::uint64_t seed = rng();
    return testing::gradcheck(
        [&] { return testing::project(ad::conv_transpose2d(x, w, b, opt), seed); }, {x, w, b}, rng,
        kCoords);
  });
  for (const ad::Mode mode : {ad::Mode::Train, ad::Mode::Eval}) {
    cases.emplace_back(mode == ad::Mode::Train ? "batch_norm/train" : "batch_norm/eval",
                       [mode](std::mt19937_64& rng) {
                         Shape s = small_shape(rng);
                         if (mode == ad::Mode::Train) s.n = 2;
                         TD x = testing::random_tensor(rng, s);
                         TD g = testing::random_tensor(rng, {1, s.c, 1, 1}, 0.5, 1.5);
                         TD b = testing::random_tensor(rng, {1, s.c, 1, 1});
                         ad::RunningStats<double> st(s.c);
                         const std::uint64_t seed = rng();
                         return testing::gradcheck(
                             [&] { return testing::project(ad::batch_norm(x, g, b, st, mode), seed); },
                             {x, g, b}, rng, kCoords);
                       });
  }
  cases.emplace_back("relu", unary([](const TD& x) { return ad::relu(x); }, true));
  cases.emplace_back("sigmoid", unary([](const TD& x) { return ad::sigmoid(x); }));
  for (const ad::PoolKind kind : {ad::PoolKind::Max, ad::PoolKind::Avg}) {
    cases.emplace_back(kind == ad::PoolKind::Max ? "pool/max" : "pool/avg",
                       [kind](std::mt19937_64& rng) {
                         const Shape s = small_shape(rng);
                         const int win = 1 + rng() % 3, stride = 1 + rng() % 2;
                         TD x = testing::random_tensor(rng, s);
                         const std::uint64_t seed = rng();
                         return testing::gradcheck(
                             [&] { return testing::project(ad::pool(x, kind, win, stride), seed); }, {x},
                             rng, kCoords);
                       });
  }
  cases.emplace_back("upsample_bilinear", [](std::mt19937_64& rng) {
    const Shape s = small_shape(rng);
    const int oh = 1 + rng() % 9, ow = 1 + rng() % 9;
    TD x = testing::random_tensor(rng, s);
    const std::uint64_t seed = rng();
    return testing::gradcheck(
        [&] { return testing::project(ad::upsample_bilinear(x, oh, ow), seed); }, {x}, rng, kCoords);
  });
  cases.emplace_back("concat_channels", [](std::mt19937_64& rng) {
    const Shape s = small_shape(rng);
    TD a = testing::random_tensor(rng, s);
    TD b = testing::random_tensor(rng, {s.n, 2, s.h, s.w});
    const std::uint64_t seed = rng();
    return testing::gradcheck(
        [&] { return testing::project(ad::concat_channels<double>({a, b, a}), seed); }, {a, b}, rng,
        kCoords);
  });
  cases.emplace_back("pad_replicate", [](std::mt19937_64& rng) {
    const Shape s = small_shape(rng);
    const int t = rng() % 3, b = rng() % 3, l = rng() % 3, r = rng() % 3;
    TD x = testing::random_tensor(rng, s);
    const std::uint64_t seed = rng();
    return testing::gradcheck(
        [&] { return testing::project(ad::pad_replicate(x, t, b, l, r), seed); }, {x}, rng, kCoords);
  });
  cases.emplace_back("crop", [](std::mt19937_64& rng) {
    const Shape s = small_shape(rng);
    const int y0 = rng() % 2, x0 = rng() % 2;
    TD x = testing::random_tensor(rng, s);
    const std::uint64_t seed = rng();
    return testing::gradcheck(
        [&] { return testing::project(ad::crop(x, y0, x0, s.h - 2, s.w - 2), seed); }, {x}, rng,
        kCoords);
  });
  cases.emplace_back("add", [](std::mt19937_64& rng) {
    const Shape s = small_shape(rng);
    TD a = testing::random_tensor(rng, s), b = testing::random_tensor(rng, s);
    const std::uint64_t seed = rng();
    return testing::gradcheck([&] { return testing::project(ad::add(a, b), seed); }, {a, b}, rng,
                              kCoords);
  });
  cases.emplace_back("mul", [](std::mt19937_64& rng) {
    const Shape s = small_shape(rng);
    TD a = testing::random_tensor(rng, s), b = testing::random_tensor(rng, s);
    const std::uint64_t seed = rng();
    return testing::gradcheck([&] { return testing::project(ad::mul(a, b), seed); }, {a, b}, rng,
                              kCoords);
  });
  cases.emplace_back("scale", [](std::mt19937_64& rng) {
    const Shape s = small_shape(rng);
    const double f = std::uniform_real_distribution<double>(-3, 3)(rng);
    TD x = testing::random_tensor(rng, s);
    const std::uint64_t seed = rng();
    return testing::gradcheck([&] { return testing::project(ad::scale(x, f), seed); }, {x}, rng,
                              kCoords);
  });
  cases.emplace_back("sum", [](std::mt19937_64& rng) {
    TD x = testing::random_tensor(rng, small_shape(rng));
    return testing::gradcheck([&] { return ad::sum(x); }, {x}, rng, kCoords);
  });
  cases.emplace_back("weighted_sum", [](std::mt19937_64& rng) {
    TD a = testing::random_tensor(rng, small_shape(rng));
    TD b = testing::random_tensor(rng, small_shape(rng));
    std::uniform_real_distribution<double> u(-3, 3);
    const std::vector<double> w{u(rng), u(rng)};
    return testing::gradcheck(
        [&] { return ad::weighted_sum<double>({ad::sum(ad::mul(a, a)), ad::sum(b)}, w); }, {a, b}, rng,
        kCoords);
  });

  auto loss_case = [](std::function<TD(const TD&, const MaskedTarget&, const MaskedTarget&)> f) {
    return [f](std::mt19937_64& rng) {
      Shape s = small_shape(rng);
      s.c = 1;
      const MaskedTarget gt = random_target(rng, s, 0.4);
      const MaskedTarget st = random_target(rng, s, 0.7);
      TD pred = testing::random_tensor(rng, s, 1, 80);
      return testing::gradcheck([&] { return f(pred, gt, st); }, {pred}, rng, kCoords);
    };
  };
  cases.emplace_back("loss/primary_l2", loss_case([](const TD& p, const MaskedTarget& g, const MaskedTarget&) {
                       return primary_loss(p, g);
                     }));
  cases.emplace_back("loss/primary_l1", loss_case([](const TD& p, const MaskedTarget& g, const MaskedTarget&) {
                       return primary_loss(p, g, PrimaryNorm::L1);
                     }));
  cases.emplace_back("loss/stereo", loss_case([](const TD& p, const MaskedTarget&, const MaskedTarget& s) {
                       return stereo_loss(p, s).value;
                     }));
  cases.emplace_back("loss/smooth", loss_case([](const TD& p, const MaskedTarget&, const MaskedTarget&) {
                       return smooth_loss(p);
                     }));
  cases.emplace_back("loss/total", loss_case([](const TD& p, const MaskedTarget& g, const MaskedTarget& s) {
                       return total_loss(p, g, &s, LossWeights{1.0, 0.01, 0.001}).total;
                     }));
  return cases;
}

Outcome gradient_suite() {
  Outcome o;
  constexpr int kCases = 100;
  constexpr double kTol = 1e-3;
  std::mt19937_64 rng(20240601);
  double worst = 0.0;
  std::size_t coords = 0;
  const auto cases = gradient_cases();
  for (const auto& [name, run] : cases) {
    double op_worst = 0.0;
    for (int i = 0; i < kCases; ++i) {
      const auto r = run(rng);
      coords += r.checked;
      op_worst = std::max(op_worst, r.max_rel_error);
      if (r.checked == 0) o.require(false, name + ": case without checked coordinates");
    }
    worst = std::max(worst, op_worst);
    o.require(op_worst < kTol, name + " max rel error " + fmt("%.3g", op_worst));
  }
  o.note(std::to_string(cases.size()) + " ops/losses x " + std::to_string(kCases) + " cases, " +
         std::to_string(coords) + " coordinates, max rel error " + fmt("%.3g", worst));
  return o;
}

// ---------------------------------------------------------------------------
// 2. Network connectivity

Outcome connectivity() {
  Outcome o;
  DFuseNet<float> net(DFuseNetConfig::tiny(kMaxDepth), 7);
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  std::vector<float> rgb(2 * 3 * 64 * 64), depth(2 * 64 * 64);
  for (auto& v : rgb) v = u(rng);
  for (auto& v : depth) v = 0.05f + 0.95f * u(rng);
  const TF x_rgb = TF::from({2, 3, 64, 64}, rgb), x_depth = TF::from({2, 1, 64, 64}, depth);
  ad::backward(ad::sum(net.forward(x_rgb, x_depth, ad::Mode::Train)));
  int dead = 0;
  for (const auto& p : net.parameters()) {
    const auto g = p.tensor.grad();
    const bool live = g.size() == p.tensor.numel() &&
                      std::any_of(g.begin(), g.end(), [](float v) { return v != 0.0f; });
    if (!live) {
      ++dead;
      o.require(false, "zero gradient: " + p.name);
    }
  }
  o.note(std::to_string(net.parameters().size()) + " parameter tensors, all with nonzero gradient");
  return o;
}

// ---------------------------------------------------------------------------
// 3, 4, 9. Overfit mini-set

struct MiniSet {
  std::vector<testing::Scene> scenes;
  std::vector<TrainingSample> samples;
  std::unique_ptr<Trainer> trainer;
  double rmse_start = 0.0;
  double rmse_end = 0.0;
  std::int64_t steps = 0;
};

MiniSet& overfit() {
  static std::unique_ptr<MiniSet> set;
  if (set) return *set;
  set = std::make_unique<MiniSet>();
  for (int i = 0; i < 4; ++i) {
    set->scenes.push_back(testing::make_scene(100 + i, 256, 64, kMaxDepth));
    const auto& s = set->scenes.back();
    set->samples.push_back({s.rgb, sparsify(s.depth, SampleSpec::count(1000), i), s.depth, {}});
  }
  TrainConfig tc;
  tc.learning_rate = 1e-3;
  tc.lr_decay_every_epochs = 1000;
  tc.weights.beta = 0.0;
  tc.batch_size = 2;
  tc.crop_height = 64;
  tc.crop_width = 256;
  tc.seed = 1;
  set->trainer = std::make_unique<Trainer>(DFuseNetConfig::tiny(kMaxDepth), tc);
  set->trainer->set_data(set->samples, set->samples);
  set->rmse_start = set->trainer->evaluate()->rmse_mm;
  while (set->trainer->step() < 500) set->trainer->run_epoch();
  set->steps = set->trainer->step();
  set->rmse_end = set->trainer->evaluate()->rmse_mm;
  return *set;
}

Outcome overfit_smoke() {
  Outcome o;
  const MiniSet& m = overfit();
  const double limit_abs = 0.05 * kMaxDepth * 1000.0;
  const double limit_rel = 0.10 * m.rmse_start;
  o.require(m.rmse_end < limit_abs, "final RMSE " + fmt("%.1f", m.rmse_end) + " mm >= 5% of max depth");
  o.require(m.rmse_end < limit_rel, "final RMSE " + fmt("%.1f", m.rmse_end) + " mm >= 10% of step-0 " +
                                        fmt("%.1f", m.rmse_start));
  o.note(std::to_string(m.steps) + " steps, RMSE " + fmt("%.1f", m.rmse_start) + " -> " +
         fmt("%.1f", m.rmse_end) + " mm (limits " + fmt("%.1f", std::min(limit_abs, limit_rel)) + ")");
  return o;
}

Outcome branch_contribution() {
  Outcome o;
  MiniSet& m = overfit();
  auto& net = m.trainer->model();
  double d_rgb = 0.0, d_depth = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < m.scenes.size(); ++i) {
    const NormalizedDepth filled = normalize_depth(morph_fill(m.samples[i].sparse));
    const TF r = rgb_batch<float>(std::span(&m.scenes[i].rgb, 1));
    const TF d = depth_batch<float>(std::span(&filled, 1));
    const TF base = net.forward(r, d, ad::Mode::Eval);
    const TF no_rgb = net.forward(TF::zeros(r.shape()), d, ad::Mode::Eval);
    const TF no_depth = net.forward(r, TF::zeros(d.shape()), ad::Mode::Eval);
    for (std::size_t k = 0; k < base.numel(); ++k) {
      d_rgb += std::abs(base.values()[k] - no_rgb.values()[k]);
      d_depth += std::abs(base.values()[k] - no_depth.values()[k]);
    }
    n += base.numel();
  }
  d_rgb /= n;
  d_depth /= n;
  const double limit = 0.01 * kMaxDepth;
  o.require(d_rgb > limit, "zeroing RGB changes output by only " + fmt("%.3f", d_rgb) + " m");
  o.require(d_depth > limit, "zeroing depth changes output by only " + fmt("%.3f", d_depth) + " m");
  o.note("mean |delta| zero RGB " + fmt("%.2f", d_rgb) + " m, zero depth " + fmt("%.2f", d_depth) +
         " m (limit " + fmt("%.2f", limit) + " m)");
  return o;
}

Outcome sparsity_trend() {
  Outcome o;
  MiniSet& m = overfit();
  std::map<int, double> rmse;
  for (const int count : {100, 1000, 2000}) {
    std::vector<MetricsReport> reports;
    for (int seed = 0; seed < 5; ++seed)
      for (std::size_t i = 0; i < m.scenes.size(); ++i) {
        const DepthMap sparse =
            sparsify(m.scenes[i].depth, SampleSpec::count(count), 1000 + seed * 10 + i);
        reports.push_back(
            compute_metrics(predict_depth(m.trainer->model(), m.scenes[i].rgb, sparse), m.scenes[i].depth));
      }
    rmse[count] = aggregate_metrics(reports).rmse_mm;
  }
  o.require(rmse[1000] <= rmse[100], "RMSE at 1000 samples exceeds RMSE at 100");
  o.require(rmse[1000] - rmse[2000] < rmse[100] - rmse[1000], "gain 1000->2000 not smaller than 100->1000");
  o.note("RMSE 100/1000/2000 samples: " + fmt("%.1f", rmse[100]) + " / " + fmt("%.1f", rmse[1000]) + " / " +
         fmt("%.1f", rmse[2000]) + " mm");
  return o;
}

// ---------------------------------------------------------------------------
// 5. SGM oracle

Outcome sgm_oracle() {
  Outcome o;
  std::mt19937_64 rng(55);
  int paths = 0;
  for (int t = 0; t < 50; ++t) {
    const int w = 1 + rng() % 16, h = 1 + rng() % 16, dm = 1 + rng() % 8;
    CostVolume v(w, h, dm);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        for (int d = 0; d < dm; ++d) v.set(x, y, d, static_cast<std::uint32_t>(rng() % 25));
    const std::uint32_t p1 = rng() % 8, p2 = p1 + rng() % 40;
    for (const auto dir : kSgmDirections) {
      ++paths;
      if (!(aggregate_path(v, dir, p1, p2) == testing::reference_path(v, dir, p1, p2))) {
        o.require(false, "path mismatch on volume " + std::to_string(t));
      }
    }
  }
  StereoRig rig;
  rig.intrinsics = {100.0, 100.0, 32.0, 16.0};
  rig.baseline_m = 0.5;
  SgmParams p;
  p.dmax = 16;
  double worst = 1.0;
  for (int k = 1; k <= 8; ++k) {
    const auto [l, r] = testing::shifted_pair(64, 32, k, 500 + k);
    const StereoEstimate est = sgm_stereo_depth(l, r, rig, p);
    int good = 0, total = 0;
    for (int y = 2; y < 30; ++y)
      for (int x = p.dmax; x < 62; ++x) {
        ++total;
        good += est.disparity.at(x, y) == k && est.mask.at(x, y);
      }
    const double frac = static_cast<double>(good) / total;
    worst = std::min(worst, frac);
    o.require(frac >= 0.95, "k=" + std::to_string(k) + " recovered on " + fmt("%.3f", frac));
  }
  o.note(std::to_string(paths) + " paths exact; shifts 1..8 recovered on >= " + fmt("%.3f", worst) +
         " of interior pixels");
  return o;
}

// ---------------------------------------------------------------------------
// 6. Fill contract

Outcome fill_contract() {
  Outcome o;
  std::mt19937_64 rng(66);
  for (int t = 0; t < 100; ++t) {
    const int w = 8 + rng() % 56, h = 8 + rng() % 40;
    const double density = 0.002 + (rng() % 1000) / 1000.0 * 0.2;
    const DepthMap m = testing::random_sparse(rng, w, h, density);
    const DepthMap f = morph_fill(m);
    const std::string tag = "map " + std::to_string(t);
    o.require(f.valid_count() == f.size(), tag + ": not dense");
    bool exact = true;
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        if (m.valid(x, y) && !(f.at(x, y) == m.at(x, y))) exact = false;
    o.require(exact, tag + ": input pixel altered");
    o.require(morph_fill(f) == f, tag + ": not idempotent");
  }
  DepthMap seed(24, 16);
  seed.set(7, 11, 12.5f);
  const DepthMap f = morph_fill(seed);
  o.require(f == testing::nearest_fill_oracle(seed), "single seed differs from nearest-neighbour oracle");
  o.require(std::all_of(f.values().begin(), f.values().end(), [](float v) { return v == 12.5f; }),
            "single seed output not constant");
  o.note("100 maps dense, bit-exact and idempotent; single seed equals oracle");
  return o;
}

// ---------------------------------------------------------------------------
// 7. Metric oracle

bool close(double a, double b, double tol) {
  return a == b || std::abs(a - b) <= tol * std::max(std::abs(a), std::abs(b));
}

Outcome metric_oracle() {
  Outcome o;
  constexpr double kTol = 1e-9;
  const DepthMap g(3, 1, {2.0f, 4.0f, 5.0f}, kMaxDepth);
  const DepthMap p(3, 1, {2.5f, 4.0f, 10.0f}, kMaxDepth);
  const MetricsReport r = compute_metrics(p, g);
  const std::vector<std::pair<std::string, std::pair<double, double>>> three{
      {"mae", {r.mae_mm, 5500.0 / 3.0}},
      {"rmse", {r.rmse_mm, 1000.0 * std::sqrt(25.25 / 3.0)}},
      {"rel", {r.rel, 1.25 / 3.0}},
      {"imae", {r.imae_per_km, 200.0 / 3.0}},
      {"irmse", {r.irmse_per_km, std::sqrt(20000.0 / 3.0)}},
      {"delta1", {r.delta1, 1.0 / 3.0}},
      {"delta2", {r.delta2, 2.0 / 3.0}},
      {"delta3", {r.delta3, 2.0 / 3.0}},
  };
  for (const auto& [name, v] : three)
    o.require(close(v.first, v.second, kTol), "3-pixel " + name + " " + fmt("%.17g", v.first));

  const MetricsReport same = compute_metrics(g, g);
  o.require(same.rmse_mm == 0.0 && same.mae_mm == 0.0 && same.rel == 0.0 && same.irmse_per_km == 0.0 &&
                same.delta1 == 1.0,
            "pred = gt not exact");
  const DepthMap q(3, 1, {3.0f, 5.0f, 6.0f}, kMaxDepth);
  const MetricsReport off = compute_metrics(q, g);
  o.require(close(off.rmse_mm, 1000.0, kTol) && close(off.mae_mm, 1000.0, kTol), "+1 m case");

  const TF t = combine_losses(TF::scalar(4), TF::scalar(2), TF::scalar(1), LossWeights{1.0, 0.01, 0.001});
  const float expected = 4.021f;
  o.require(std::abs(t.item() - expected) <= expected * FLT_EPSILON,
            "combination gives " + fmt("%.9g", t.item()));
  o.note("3-pixel, identity and +1 m cases within 1e-9; combination " + fmt("%.9g", t.item()));
  return o;
}

// ---------------------------------------------------------------------------
// 8. Smoothness invariance

Outcome smoothness() {
  Outcome o;
  std::mt19937_64 rng(88);
  std::uniform_real_distribution<double> slope(-5, 5), offset(0, 50);
  double worst = 0.0;
  for (int t = 0; t < 100; ++t) {
    const Shape s{1 + static_cast<int>(rng() % 2), 1, 3 + static_cast<int>(rng() % 30),
                  3 + static_cast<int>(rng() % 30)};
    const double a = slope(rng), b = slope(rng), c = offset(rng);
    std::vector<double> v(s.numel());
    std::size_t i = 0;
    for (int n = 0; n < s.n; ++n)
      for (int y = 0; y < s.h; ++y)
        for (int x = 0; x < s.w; ++x) v[i++] = a * x + b * y + c;
    worst = std::max(worst, std::abs(smooth_loss(TD::from(s, v)).item()));
  }
  o.require(worst <= 1e-7, "plane penalty " + fmt("%.3g", worst));
  const TD stencil = TD::from({1, 1, 3, 5}, {0, 0, 1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0, 0});
  const double st = smooth_loss(stencil).item();
  o.require(close(st, 4.0 / 3.0, 1e-12), "stencil gives " + fmt("%.17g", st));
  o.note("100 planes, max penalty " + fmt("%.3g", worst) + "; stencil " + fmt("%.17g", st));
  return o;
}

// ---------------------------------------------------------------------------
// 10. Determinism and persistence

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() / ("dfuse_accept_" + std::to_string(std::random_device{}()));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

Outcome determinism() {
  Outcome o;
  TempDir tmp;
  std::vector<TrainingSample> data;
  for (int i = 0; i < 4; ++i) {
    const auto s = testing::make_scene(300 + i, 128, 64, kMaxDepth);
    data.push_back({s.rgb, sparsify(s.depth, SampleSpec::count(400), i), s.depth, {}});
  }
  TrainConfig tc;
  tc.learning_rate = 1e-3;
  tc.weights.beta = 0.0;
  tc.crop_height = 32;
  tc.crop_width = 64;
  tc.seed = 42;
  auto make = [&] {
    auto t = std::make_unique<Trainer>(DFuseNetConfig::tiny(kMaxDepth), tc);
    t->set_data(data, {});
    return t;
  };

  auto a = make(), b = make();
  a->run_epoch();
  b->run_epoch();
  a->save_checkpoint(tmp.path / "a1.ckpt");
  b->save_checkpoint(tmp.path / "b1.ckpt");
  o.require(slurp(tmp.path / "a1.ckpt") == slurp(tmp.path / "b1.ckpt"), "same-seed epoch 1 differs");

  const auto a2 = a->run_epoch();
  a->save_checkpoint(tmp.path / "a2.ckpt");
  auto c = make();
  c->load_checkpoint(tmp.path / "b1.ckpt");
  const auto c2 = c->run_epoch();
  c->save_checkpoint(tmp.path / "c2.ckpt");
  bool steps_equal = a2.size() == c2.size();
  for (std::size_t i = 0; steps_equal && i < a2.size(); ++i) steps_equal = a2[i].line() == c2[i].line();
  o.require(steps_equal, "resumed step log differs");
  o.require(slurp(tmp.path / "a2.ckpt") == slurp(tmp.path / "c2.ckpt"), "resumed checkpoint differs");

  std::mt19937_64 rng(10);
  int maps = 0;
  for (int t = 0; t < 20; ++t, ++maps) {
    const int w = 1 + rng() % 60, h = 1 + rng() % 40;
    DepthMap m(w, h);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        if (rng() % 3) m.set(x, y, static_cast<float>(1 + rng() % 65535) / 256.0f);
    write_depth_png16(m, tmp.path / "m.png");
    const DepthMap back = read_depth_png16(tmp.path / "m.png");
    o.require(back == m, "depth PNG round trip " + std::to_string(t));
    write_depth_png16(back, tmp.path / "m2.png");
    o.require(slurp(tmp.path / "m.png") == slurp(tmp.path / "m2.png"), "depth PNG rewrite " + std::to_string(t));
  }
  o.note("epoch-1 checkpoints identical; resume matches over " + std::to_string(a2.size()) + " steps; " +
         std::to_string(maps) + " PNG round trips exact");
  return o;
}

}  // namespace

int main() {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"gradient suite", gradient_suite},
      {"network connectivity", connectivity},
      {"overfit smoke", overfit_smoke},
      {"branch contribution", branch_contribution},
      {"SGM oracle", sgm_oracle},
      {"fill contract", fill_contract},
      {"metric oracle", metric_oracle},
      {"smoothness invariance", smoothness},
      {"sparsity trend", sparsity_trend},
      {"determinism and persistence", determinism},
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o.pass = false;
      o.detail = std::string("exception: ") + e.what();
    }
    const double sec = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    failed += !o.pass;
    std::printf("criterion %-2zu %-28s %s  %s [%.1f s]\n", i + 1, criteria[i].first.c_str(),
                o.pass ? "PASS" : "FAIL", o.detail.c_str(), sec);
    std::fflush(stdout);
  }
  return failed == 0 ? 0 : 1;
}
