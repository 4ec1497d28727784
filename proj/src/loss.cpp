#include "dfuse/loss.hpp"

#include <cmath>
#include <string>

#include "dfuse/error.hpp"

namespace dfuse {

using ad::Node;
using ad::Shape;
using ad::Tensor;

void LossWeights::validate() const {
  for (double w : {alpha, beta, gamma}) {
    if (!(w >= 0.0) || !std::isfinite(w)) {
      throw ConfigError("loss weights must be finite and non-negative");
    }
  }
}

std::size_t MaskedTarget::count() const {
  std::size_t n = 0;
  for (auto m : mask) n += m;
  return n;
}

namespace {

Shape batch_shape(std::span<const DepthMap> maps) {
  if (maps.empty()) throw InvalidInput("empty target batch");
  const int w = maps[0].width();
  const int h = maps[0].height();
  for (const auto& m : maps) {
    if (m.width() != w || m.height() != h) {
      throw ShapeError("target maps differ in size");
    }
  }
  return Shape{static_cast<int>(maps.size()), 1, h, w};
}

template <typename T>
void require_aligned(const Tensor<T>& pred, const MaskedTarget& target,
                     const char* what) {
  if (!(pred.shape() == target.shape)) {
    throw ShapeError(std::string(what) + ": prediction " + pred.shape().str() +
                     " vs target " + target.shape.str());
  }
}

// Mean of f(pred - target) over the selected pixels; df is the derivative.
template <typename T, typename F, typename DF>
Tensor<T> masked_mean(const std::string& op, const Tensor<T>& pred,
                      const MaskedTarget& target,
                      const std::vector<std::uint8_t>& select, std::size_t n,
                      F f, DF df) {
  const auto pv = pred.values();
  double acc = 0.0;
  for (std::size_t i = 0; i < select.size(); ++i) {
    if (select[i]) acc += f(static_cast<double>(pv[i]) - target.values[i]);
  }
  const double inv = 1.0 / static_cast<double>(n);
  auto pn = pred.node();
  auto values = target.values;
  return ad::make_result<T>(
      op, Shape{1, 1, 1, 1}, {static_cast<T>(acc * inv)}, {pred},
      [pn, values, select, inv, df](Node<T>& self) {
        pn->ensure_grad();
        const double g = static_cast<double>(self.grad[0]) * inv;
        for (std::size_t i = 0; i < select.size(); ++i) {
          if (select[i]) {
            pn->grad[i] += static_cast<T>(
                g * df(static_cast<double>(pn->value[i]) - values[i]));
          }
        }
      });
}

double sign(double v) { return (v > 0) - (v < 0); }

}  // namespace

MaskedTarget MaskedTarget::from_maps(std::span<const DepthMap> maps) {
  MaskedTarget t;
  t.shape = batch_shape(maps);
  t.values.reserve(t.shape.numel());
  t.mask.reserve(t.shape.numel());
  for (const auto& m : maps) {
    for (float v : m.values()) {
      t.values.push_back(v);
      t.mask.push_back(v != DepthMap::kMissing);
    }
  }
  return t;
}

MaskedTarget MaskedTarget::from_masked(std::span<const DepthMap> maps,
                                       std::span<const ValidMask> masks) {
  MaskedTarget t;
  t.shape = batch_shape(maps);
  if (masks.size() != maps.size()) {
    throw ShapeError("one mask per stereo depth map required");
  }
  for (std::size_t k = 0; k < maps.size(); ++k) {
    const auto& m = maps[k];
    const auto& mk = masks[k];
    if (mk.width() != m.width() || mk.height() != m.height()) {
      throw ShapeError("stereo mask and depth differ in size");
    }
    const auto vals = m.values();
    const auto flags = mk.flags();
    for (std::size_t i = 0; i < vals.size(); ++i) {
      const bool ok = flags[i] != 0 && vals[i] != DepthMap::kMissing;
      t.values.push_back(ok ? vals[i] : 0.0);
      t.mask.push_back(ok);
    }
  }
  return t;
}

template <typename T>
Tensor<T> primary_loss(const Tensor<T>& pred, const MaskedTarget& gt,
                       PrimaryNorm norm) {
  require_aligned(pred, gt, "primary_loss");
  const std::size_t n = gt.count();
  if (n == 0) {
    throw InvalidInput("primary loss needs at least one ground-truth pixel");
  }
  if (norm == PrimaryNorm::L1) {
    return masked_mean<T>(
        "primary_l1", pred, gt, gt.mask, n, [](double d) { return std::abs(d); },
        [](double d) { return sign(d); });
  }
  return masked_mean<T>(
      "primary_l2", pred, gt, gt.mask, n, [](double d) { return d * d; },
      [](double d) { return 2.0 * d; });
}

template <typename T>
StereoLoss<T> stereo_loss(const Tensor<T>& pred, const MaskedTarget& stereo,
                          const MaskedTarget* exclude) {
  require_aligned(pred, stereo, "stereo_loss");
  std::vector<std::uint8_t> select = stereo.mask;
  if (exclude) {
    require_aligned(pred, *exclude, "stereo_loss exclusion");
    for (std::size_t i = 0; i < select.size(); ++i) {
      if (exclude->mask[i]) select[i] = 0;
    }
  }
  std::size_t n = 0;
  for (auto s : select) n += s;
  if (n == 0) return {Tensor<T>::scalar(T(0)), true};
  return {masked_mean<T>(
              "stereo_l2", pred, stereo, select, n,
              [](double d) { return d * d; }, [](double d) { return 2.0 * d; }),
          false};
}

template <typename T>
Tensor<T> smooth_loss(const Tensor<T>& pred) {
  const Shape s = pred.shape();
  if (s.c != 1) throw ShapeError("smooth_loss expects one channel");
  if (s.h < 3 || s.w < 3) {
    throw ShapeError("smooth_loss needs at least 3x3 pixels, got " + s.str());
  }
  const auto v = pred.values();
  const std::size_t count =
      static_cast<std::size_t>(s.n) * (s.h - 2) * (s.w - 2);
  auto at = [&](int n, int y, int x) {
    return static_cast<double>(
        v[(static_cast<std::size_t>(n) * s.h + y) * s.w + x]);
  };
  double acc = 0.0;
  for (int n = 0; n < s.n; ++n) {
    for (int y = 1; y < s.h - 1; ++y) {
      for (int x = 1; x < s.w - 1; ++x) {
        const double c = at(n, y, x);
        acc += std::abs(at(n, y, x - 1) - 2 * c + at(n, y, x + 1)) +
               std::abs(at(n, y - 1, x) - 2 * c + at(n, y + 1, x));
      }
    }
  }
  const double inv = 1.0 / static_cast<double>(count);
  auto pn = pred.node();
  return ad::make_result<T>(
      "smooth_l1", Shape{1, 1, 1, 1}, {static_cast<T>(acc * inv)}, {pred},
      [pn, s, inv](Node<T>& self) {
        pn->ensure_grad();
        const double g = static_cast<double>(self.grad[0]) * inv;
        auto idx = [&](int n, int y, int x) {
          return (static_cast<std::size_t>(n) * s.h + y) * s.w + x;
        };
        auto val = [&](int n, int y, int x) {
          return static_cast<double>(pn->value[idx(n, y, x)]);
        };
        for (int n = 0; n < s.n; ++n) {
          for (int y = 1; y < s.h - 1; ++y) {
            for (int x = 1; x < s.w - 1; ++x) {
              const double c = val(n, y, x);
              const double gx =
                  g * sign(val(n, y, x - 1) - 2 * c + val(n, y, x + 1));
              const double gy =
                  g * sign(val(n, y - 1, x) - 2 * c + val(n, y + 1, x));
              pn->grad[idx(n, y, x - 1)] += static_cast<T>(gx);
              pn->grad[idx(n, y, x + 1)] += static_cast<T>(gx);
              pn->grad[idx(n, y, x)] += static_cast<T>(-2 * (gx + gy));
              pn->grad[idx(n, y - 1, x)] += static_cast<T>(gy);
              pn->grad[idx(n, y + 1, x)] += static_cast<T>(gy);
            }
          }
        }
      });
}

template <typename T>
Tensor<T> combine_losses(const Tensor<T>& primary, const Tensor<T>& stereo,
                         const Tensor<T>& smooth, const LossWeights& weights) {
  weights.validate();
  return ad::weighted_sum<T>({primary, stereo, smooth},
                             {static_cast<T>(weights.alpha),
                              static_cast<T>(weights.beta),
                              static_cast<T>(weights.gamma)});
}

template <typename T>
LossBreakdown<T> total_loss(const Tensor<T>& pred, const MaskedTarget& gt,
                            const MaskedTarget* stereo,
                            const LossWeights& weights,
                            const LossOptions& options) {
  LossBreakdown<T> out;
  out.primary = primary_loss(pred, gt, options.primary_norm);
  if (stereo) {
    auto s = stereo_loss(pred, *stereo, options.stereo_exclude_gt ? &gt : nullptr);
    out.stereo = s.value;
    out.stereo_empty = s.empty;
  } else {
    out.stereo = Tensor<T>::scalar(T(0));
  }
  out.smooth = smooth_loss(pred);
  out.total = combine_losses(out.primary, out.stereo, out.smooth, weights);
  return out;
}

#define DFUSE_INSTANTIATE(T)                                                  \
  template Tensor<T> primary_loss<T>(const Tensor<T>&, const MaskedTarget&,   \
                                     PrimaryNorm);                            \
  template StereoLoss<T> stereo_loss<T>(const Tensor<T>&, const MaskedTarget&, \
                                        const MaskedTarget*);                 \
  template Tensor<T> smooth_loss<T>(const Tensor<T>&);                        \
  template Tensor<T> combine_losses<T>(const Tensor<T>&, const Tensor<T>&,    \
                                       const Tensor<T>&, const LossWeights&); \
  template LossBreakdown<T> total_loss<T>(const Tensor<T>&,                   \
                                          const MaskedTarget&,                \
                                          const MaskedTarget*,                \
                                          const LossWeights&,                 \
                                          const LossOptions&);

DFUSE_INSTANTIATE(float)
DFUSE_INSTANTIATE(double)

#undef DFUSE_INSTANTIATE

}  // namespace dfuse
