#pragma once

// Central-difference gradient check for scalar-valued graphs in double.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "dfuse/autodiff.hpp"

namespace dfuse::testing {

using TD = ad::Tensor<double>;

inline TD random_tensor(std::mt19937_64& rng, ad::Shape s, double lo = -1.0,
                        double hi = 1.0, bool requires_grad = true) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(s.numel());
  for (auto& x : v) x = u(rng);
  return TD::from(s, std::move(v), requires_grad);
}

struct GradCheckResult {
  double max_abs_error = 0.0;
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  /// Coordinates skipped because two step sizes disagreed (a kink lies
  /// within reach of the perturbation).
  std::size_t non_smooth = 0;
  std::string worst;
};

/// Compares backward() against (f(x+h) - f(x-h)) / 2h for up to
/// `per_input` randomly chosen coordinates of each input. `f` must rebuild
/// the graph from the current input values on every call. With
/// `smooth_tol` > 0 each coordinate is also differenced at h / 4; when the two
/// estimates differ by more than smooth_tol the coordinate is counted in
/// non_smooth instead of being compared.
inline GradCheckResult gradcheck(const std::function<TD()>& f,
                                 std::vector<TD> inputs, std::mt19937_64& rng,
                                 std::size_t per_input = 1000000,
                                 double h = 1e-6, double smooth_tol = 0.0) {
  for (auto& in : inputs) in.zero_grad();
  const TD out = f();
  ad::backward(out);
  GradCheckResult r;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    TD& in = inputs[k];
    std::vector<double> analytic(in.numel(), 0.0);
    if (!in.grad().empty()) std::copy(in.grad().begin(), in.grad().end(), analytic.begin());
    std::vector<std::size_t> idx(in.numel());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(std::min(idx.size(), per_input));
    for (std::size_t i : idx) {
      double& x = in.mutable_values()[i];
      const double saved = x;
      auto diff = [&](double step) {
        x = saved + step;
        const double fp = f().item();
        x = saved - step;
        const double fm = f().item();
        x = saved;
        return (fp - fm) / (2 * step);
      };
      const double numeric = diff(h);
      if (smooth_tol > 0.0) {
        const double fine = diff(h / 4);
        if (std::abs(fine - numeric) > smooth_tol * std::max(1.0, std::abs(numeric))) {
          ++r.non_smooth;
          continue;
        }
      }
      const double err = std::abs(numeric - analytic[i]);
      const double rel = err / std::max(1.0, std::abs(numeric));
      ++r.checked;
      if (rel > r.max_rel_error) {
        r.worst = "input " + std::to_string(k) + " index " + std::to_string(i) +
                  ": analytic " + std::to_string(analytic[i]) + " numeric " +
                  std::to_string(numeric);
      }
      r.max_abs_error = std::max(r.max_abs_error, err);
      r.max_rel_error = std::max(r.max_rel_error, rel);
    }
  }
  return r;
}

/// Random linear functional <w, y> so that every output element contributes
/// a distinct weight to the scalar.
inline TD project(const TD& y, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return ad::sum(ad::mul(y, random_tensor(rng, y.shape(), -1.0, 1.0, false)));
}

}  // namespace dfuse::testing
