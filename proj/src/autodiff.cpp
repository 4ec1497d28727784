#include "dfuse/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <unordered_set>
#include <utility>

#include <Eigen/Core>

#include "dfuse/error.hpp"

namespace dfuse::ad {

std::string Shape::str() const {
  return "(" + std::to_string(n) + ", " + std::to_string(c) + ", " +
         std::to_string(h) + ", " + std::to_string(w) + ")";
}

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

template <typename T>
void check_finite(const std::vector<T>& v, const std::string& op) {
  for (const T x : v) {
    if (!std::isfinite(x)) {
      throw NumericError("non-finite value produced by " + op);
    }
  }
}

void require(bool cond, const std::string& msg) {
  if (!cond) throw ShapeError(msg);
}

// Geometry shared by conv2d and its adjoint: a (C, H, W) image seen through a
// kh x kw window at the given stride/padding yields an oh x ow grid.
struct ConvGeometry {
  int channels, height, width;
  int kh, kw, stride, pad;
  int oh, ow;

  int rows() const { return channels * kh * kw; }
  int cols() const { return oh * ow; }
};

template <typename T>
void im2col(const T* img, const ConvGeometry& g, T* cols) {
  const int ncols = g.cols();
  for (int c = 0; c < g.channels; ++c) {
    const T* plane = img + static_cast<std::size_t>(c) * g.height * g.width;
    for (int i = 0; i < g.kh; ++i) {
      for (int j = 0; j < g.kw; ++j) {
        T* row = cols + static_cast<std::size_t>((c * g.kh + i) * g.kw + j) * ncols;
        for (int oy = 0; oy < g.oh; ++oy) {
          const int y = oy * g.stride - g.pad + i;
          T* out = row + static_cast<std::size_t>(oy) * g.ow;
          if (y < 0 || y >= g.height) {
            std::fill(out, out + g.ow, T(0));
            continue;
          }
          const T* src = plane + static_cast<std::size_t>(y) * g.width;
          for (int ox = 0; ox < g.ow; ++ox) {
            const int x = ox * g.stride - g.pad + j;
            out[ox] = (x < 0 || x >= g.width) ? T(0) : src[x];
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* cols, const ConvGeometry& g, T* img) {
  const int ncols = g.cols();
  for (int c = 0; c < g.channels; ++c) {
    T* plane = img + static_cast<std::size_t>(c) * g.height * g.width;
    for (int i = 0; i < g.kh; ++i) {
      for (int j = 0; j < g.kw; ++j) {
        const T* row =
            cols + static_cast<std::size_t>((c * g.kh + i) * g.kw + j) * ncols;
        for (int oy = 0; oy < g.oh; ++oy) {
          const int y = oy * g.stride - g.pad + i;
          if (y < 0 || y >= g.height) continue;
          T* dst = plane + static_cast<std::size_t>(y) * g.width;
          const T* in = row + static_cast<std::size_t>(oy) * g.ow;
          for (int ox = 0; ox < g.ow; ++ox) {
            const int x = ox * g.stride - g.pad + j;
            if (x >= 0 && x < g.width) dst[x] += in[ox];
          }
        }
      }
    }
  }
}

template <typename T>
bool wants_grad(const std::shared_ptr<Node<T>>& n) {
  return n && n->requires_grad;
}

}  // namespace

// ---------------------------------------------------------------------------
// Tensor

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
  return full(shape, T(0), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value, bool requires_grad) {
  return from(shape, std::vector<T>(shape.numel(), value), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::from(Shape shape, std::vector<T> values,
                          bool requires_grad) {
  require(shape.n >= 0 && shape.c >= 0 && shape.h >= 0 && shape.w >= 0,
          "negative tensor dimension " + shape.str());
  require(values.size() == shape.numel(),
          "tensor data has " + std::to_string(values.size()) +
              " values for shape " + shape.str());
  auto node = std::make_shared<Node<T>>();
  node->shape = shape;
  node->value = std::move(values);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value, bool requires_grad) {
  return from(Shape{1, 1, 1, 1}, {value}, requires_grad);
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) {
    throw UsageError("item() on a tensor of shape " + shape().str());
  }
  return node_->value[0];
}

template <typename T>
void Tensor<T>::zero_grad() {
  std::fill(node_->grad.begin(), node_->grad.end(), T(0));
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  return from(shape(), node_->value, false);
}

template <typename T>
Tensor<T> make_result(const std::string& op, Shape shape, std::vector<T> value,
                      std::vector<Tensor<T>> inputs,
                      std::function<void(Node<T>&)> backward_fn) {
  check_finite(value, op);
  auto node = std::make_shared<Node<T>>();
  node->shape = shape;
  node->value = std::move(value);
  node->op = op;
  node->is_leaf = false;
  for (const auto& in : inputs) {
    if (in.defined() && in.requires_grad()) node->requires_grad = true;
  }
  if (node->requires_grad) {
    for (auto& in : inputs) {
      if (in.defined()) node->inputs.push_back(in.node());
    }
    node->backward = std::move(backward_fn);
  }
  return Tensor<T>(std::move(node));
}

template <typename T>
void backward(const Tensor<T>& output) {
  if (!output.defined() || output.numel() != 1) {
    throw UsageError("backward needs a scalar output, got shape " +
                     (output.defined() ? output.shape().str() : "<undefined>"));
  }
  Node<T>* root = output.node().get();
  if (!root->requires_grad) return;

  // Iterative post-order DFS: every node lands after all of its inputs.
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen{root};
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{root, 0}};
  while (!stack.empty()) {
    Node<T>* n = stack.back().first;
    std::size_t& next = stack.back().second;
    if (next < n->inputs.size()) {
      Node<T>* in = n->inputs[next++].get();
      if (in->requires_grad && seen.insert(in).second) stack.emplace_back(in, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  for (Node<T>* n : order) {
    if (!n->is_leaf) n->grad.assign(n->value.size(), T(0));
  }
  root->ensure_grad();
  root->grad[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if ((*it)->backward) (*it)->backward(**it);
  }
}

// ---------------------------------------------------------------------------
// Convolutions

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight,
                 const Tensor<T>& bias, Conv2dOptions opt) {
  const Shape xs = x.shape();
  const Shape ws = weight.shape();
  require(opt.stride >= 1, "conv2d stride must be positive");
  require(opt.padding >= 0, "conv2d padding must be non-negative");
  require(ws.c == xs.c, "conv2d channel mismatch: input has " +
                            std::to_string(xs.c) + ", weight expects " +
                            std::to_string(ws.c));
  const int oh = (xs.h + 2 * opt.padding - ws.h) / opt.stride + 1;
  const int ow = (xs.w + 2 * opt.padding - ws.w) / opt.stride + 1;
  require(xs.h + 2 * opt.padding >= ws.h && xs.w + 2 * opt.padding >= ws.w,
          "conv2d kernel larger than padded input");
  if (bias.defined()) {
    require(bias.shape() == (Shape{1, ws.n, 1, 1}), "conv2d bias shape");
  }

  const ConvGeometry g{xs.c, xs.h, xs.w, ws.h, ws.w, opt.stride, opt.padding,
                       oh, ow};
  const int cout = ws.n;
  const int k = g.rows();
  const int p = g.cols();
  const Shape out_shape{xs.n, cout, oh, ow};
  std::vector<T> out(out_shape.numel());
  std::vector<T> cols(static_cast<std::size_t>(k) * p);
  const ConstMatMap<T> wmat(weight.values().data(), cout, k);
  for (int n = 0; n < xs.n; ++n) {
    im2col(x.values().data() + n * xs.c * xs.plane(), g, cols.data());
    MatMap<T> y(out.data() + static_cast<std::size_t>(n) * cout * p, cout, p);
    y.noalias() = wmat * ConstMatMap<T>(cols.data(), k, p);
    if (bias.defined()) {
      for (int c = 0; c < cout; ++c) y.row(c).array() += bias.values()[c];
    }
  }

  auto xn = x.node();
  auto wn = weight.node();
  auto bn = bias.defined() ? bias.node() : nullptr;
  return make_result<T>(
      "conv2d", out_shape, std::move(out), {x, weight, bias},
      [xn, wn, bn, g, cout, k, p, xs](Node<T>& self) {
        const bool dx = wants_grad(xn);
        const bool dw = wants_grad(wn);
        std::vector<T> cols(static_cast<std::size_t>(k) * p);
        if (dw) wn->ensure_grad();
        if (dx) xn->ensure_grad();
        const ConstMatMap<T> wmat(wn->value.data(), cout, k);
        for (int n = 0; n < xs.n; ++n) {
          const ConstMatMap<T> gy(
              self.grad.data() + static_cast<std::size_t>(n) * cout * p, cout,
              p);
          if (dw) {
            im2col(xn->value.data() + n * xs.c * xs.plane(), g, cols.data());
            MatMap<T>(wn->grad.data(), cout, k).noalias() +=
                gy * ConstMatMap<T>(cols.data(), k, p).transpose();
          }
          if (dx) {
            MatMap<T>(cols.data(), k, p).noalias() = wmat.transpose() * gy;
            col2im_add(cols.data(), g, xn->grad.data() + n * xs.c * xs.plane());
          }
        }
        if (wants_grad(bn)) {
          bn->ensure_grad();
          for (int n = 0; n < xs.n; ++n) {
            for (int c = 0; c < cout; ++c) {
              const T* gy = self.grad.data() +
                            (static_cast<std::size_t>(n) * cout + c) * p;
              T s = 0;
              for (int i = 0; i < p; ++i) s += gy[i];
              bn->grad[c] += s;
            }
          }
        }
      });
}

template <typename T>
Tensor<T> conv_transpose2d(const Tensor<T>& x, const Tensor<T>& weight,
                           const Tensor<T>& bias, Conv2dOptions opt) {
  const Shape xs = x.shape();
  const Shape ws = weight.shape();
  require(opt.stride >= 1, "conv_transpose2d stride must be positive");
  require(opt.padding >= 0, "conv_transpose2d padding must be non-negative");
  require(ws.n == xs.c, "conv_transpose2d channel mismatch: input has " +
                            std::to_string(xs.c) + ", weight expects " +
                            std::to_string(ws.n));
  const int oh = (xs.h - 1) * opt.stride - 2 * opt.padding + ws.h;
  const int ow = (xs.w - 1) * opt.stride - 2 * opt.padding + ws.w;
  require(oh >= 1 && ow >= 1, "conv_transpose2d output would be empty");
  const int cout = ws.c;
  if (bias.defined()) {
    require(bias.shape() == (Shape{1, cout, 1, 1}), "conv_transpose2d bias shape");
  }

  // The output image, viewed through the kernel, is an xs.h x xs.w grid.
  const ConvGeometry g{cout, oh, ow, ws.h, ws.w, opt.stride, opt.padding,
                       xs.h, xs.w};
  const int k = g.rows();
  const int p = g.cols();
  const Shape out_shape{xs.n, cout, oh, ow};
  const std::size_t out_img = static_cast<std::size_t>(cout) * oh * ow;
  std::vector<T> out(out_shape.numel(), T(0));
  std::vector<T> cols(static_cast<std::size_t>(k) * p);
  const ConstMatMap<T> wmat(weight.values().data(), xs.c, k);
  for (int n = 0; n < xs.n; ++n) {
    const ConstMatMap<T> xin(x.values().data() + n * xs.c * xs.plane(), xs.c, p);
    MatMap<T>(cols.data(), k, p).noalias() = wmat.transpose() * xin;
    col2im_add(cols.data(), g, out.data() + n * out_img);
    if (bias.defined()) {
      for (int c = 0; c < cout; ++c) {
        T* plane = out.data() + n * out_img + static_cast<std::size_t>(c) * oh * ow;
        for (int i = 0; i < oh * ow; ++i) plane[i] += bias.values()[c];
      }
    }
  }

  auto xn = x.node();
  auto wn = weight.node();
  auto bn = bias.defined() ? bias.node() : nullptr;
  return make_result<T>(
      "conv_transpose2d", out_shape, std::move(out), {x, weight, bias},
      [xn, wn, bn, g, k, p, xs, out_img, cout](Node<T>& self) {
        const bool dx = wants_grad(xn);
        const bool dw = wants_grad(wn);
        std::vector<T> gcols(static_cast<std::size_t>(k) * p);
        if (dw) wn->ensure_grad();
        if (dx) xn->ensure_grad();
        const ConstMatMap<T> wmat(wn->value.data(), xs.c, k);
        for (int n = 0; n < xs.n; ++n) {
          if (!dx && !dw) break;
          im2col(self.grad.data() + n * out_img, g, gcols.data());
          const ConstMatMap<T> gc(gcols.data(), k, p);
          if (dx) {
            MatMap<T>(xn->grad.data() + n * xs.c * xs.plane(), xs.c, p)
                .noalias() += wmat * gc;
          }
          if (dw) {
            const ConstMatMap<T> xin(xn->value.data() + n * xs.c * xs.plane(),
                                     xs.c, p);
            MatMap<T>(wn->grad.data(), xs.c, k).noalias() +=
                xin * gc.transpose();
          }
        }
        if (wants_grad(bn)) {
          bn->ensure_grad();
          const std::size_t plane = out_img / cout;
          for (int n = 0; n < xs.n; ++n) {
            for (int c = 0; c < cout; ++c) {
              const T* gy = self.grad.data() + n * out_img + c * plane;
              T s = 0;
              for (std::size_t i = 0; i < plane; ++i) s += gy[i];
              bn->grad[c] += s;
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Batch normalisation

template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gamma,
                     const Tensor<T>& beta, RunningStats<T>& stats, Mode mode,
                     BatchNormOptions opt) {
  const Shape s = x.shape();
  const std::size_t m = static_cast<std::size_t>(s.n) * s.plane();
  require(m > 0, "batch_norm over an empty reduction set " + s.str());
  require(gamma.shape() == (Shape{1, s.c, 1, 1}) &&
              beta.shape() == (Shape{1, s.c, 1, 1}),
          "batch_norm affine parameters must have shape (1, C, 1, 1)");
  require(stats.mean.size() == static_cast<std::size_t>(s.c) &&
              stats.var.size() == static_cast<std::size_t>(s.c),
          "batch_norm running statistics sized for the wrong channel count");

  const std::size_t plane = s.plane();
  auto at = [&](int n, int c) {
    return (static_cast<std::size_t>(n) * s.c + c) * plane;
  };
  const auto& xv = x.values();
  std::vector<T> inv_std(s.c);
  std::vector<T> xhat(s.numel());
  std::vector<T> out(s.numel());

  for (int c = 0; c < s.c; ++c) {
    double mean = 0.0;
    double var = 0.0;
    if (mode == Mode::Train) {
      for (int n = 0; n < s.n; ++n) {
        for (std::size_t i = 0; i < plane; ++i) mean += xv[at(n, c) + i];
      }
      mean /= static_cast<double>(m);
      for (int n = 0; n < s.n; ++n) {
        for (std::size_t i = 0; i < plane; ++i) {
          const double d = xv[at(n, c) + i] - mean;
          var += d * d;
        }
      }
      var /= static_cast<double>(m);
      const double unbiased =
          m > 1 ? var * static_cast<double>(m) / static_cast<double>(m - 1) : var;
      stats.mean[c] = static_cast<T>((1.0 - opt.momentum) * stats.mean[c] +
                                     opt.momentum * mean);
      stats.var[c] = static_cast<T>((1.0 - opt.momentum) * stats.var[c] +
                                    opt.momentum * unbiased);
    } else {
      mean = stats.mean[c];
      var = stats.var[c];
    }
    inv_std[c] = static_cast<T>(1.0 / std::sqrt(var + opt.epsilon));
    const T g = gamma.values()[c];
    const T b = beta.values()[c];
    const T mu = static_cast<T>(mean);
    for (int n = 0; n < s.n; ++n) {
      for (std::size_t i = 0; i < plane; ++i) {
        const std::size_t idx = at(n, c) + i;
        xhat[idx] = (xv[idx] - mu) * inv_std[c];
        out[idx] = g * xhat[idx] + b;
      }
    }
  }

  auto xn = x.node();
  auto gn = gamma.node();
  auto bn = beta.node();
  return make_result<T>(
      "batch_norm", s, std::move(out), {x, gamma, beta},
      [xn, gn, bn, s, m, plane, mode, inv_std = std::move(inv_std),
       xhat = std::move(xhat)](Node<T>& self) {
        auto at = [&](int n, int c) {
          return (static_cast<std::size_t>(n) * s.c + c) * plane;
        };
        const auto& gy = self.grad;
        if (wants_grad(gn)) gn->ensure_grad();
        if (wants_grad(bn)) bn->ensure_grad();
        if (wants_grad(xn)) xn->ensure_grad();
        for (int c = 0; c < s.c; ++c) {
          T sum_dy = 0;
          T sum_dy_xhat = 0;
          for (int n = 0; n < s.n; ++n) {
            for (std::size_t i = 0; i < plane; ++i) {
              sum_dy += gy[at(n, c) + i];
              sum_dy_xhat += gy[at(n, c) + i] * xhat[at(n, c) + i];
            }
          }
          if (wants_grad(gn)) gn->grad[c] += sum_dy_xhat;
          if (wants_grad(bn)) bn->grad[c] += sum_dy;
          if (!wants_grad(xn)) continue;
          const T g = gn->value[c];
          const T mf = static_cast<T>(m);
          for (int n = 0; n < s.n; ++n) {
            for (std::size_t i = 0; i < plane; ++i) {
              const std::size_t idx = at(n, c) + i;
              if (mode == Mode::Train) {
                xn->grad[idx] += g * inv_std[c] / mf *
                                 (mf * gy[idx] - sum_dy - xhat[idx] * sum_dy_xhat);
              } else {
                xn->grad[idx] += g * inv_std[c] * gy[idx];
              }
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Elementwise

template <typename T>
Tensor<T> activation(const Tensor<T>& x, Activation kind) {
  const auto& xv = x.values();
  std::vector<T> out(xv.size());
  if (kind == Activation::Relu) {
    for (std::size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] > T(0) ? xv[i] : T(0);
  } else {
    // Kept one step inside (0, 1) so a rescaled output never touches either
    // end of its range.
    const T lo = std::numeric_limits<T>::min();
    const T hi = T(1) - std::numeric_limits<T>::epsilon() / 2;
    for (std::size_t i = 0; i < xv.size(); ++i) {
      const T v = xv[i];
      const T y = v >= T(0) ? T(1) / (T(1) + std::exp(-v))
                            : std::exp(v) / (T(1) + std::exp(v));
      out[i] = std::clamp(y, lo, hi);
    }
  }
  auto xn = x.node();
  const bool is_relu = kind == Activation::Relu;
  return make_result<T>(
      is_relu ? "relu" : "sigmoid", x.shape(), std::move(out), {x},
      [xn, is_relu](Node<T>& self) {
        xn->ensure_grad();
        for (std::size_t i = 0; i < self.value.size(); ++i) {
          const T y = self.value[i];
          xn->grad[i] += self.grad[i] * (is_relu ? (xn->value[i] > T(0) ? T(1) : T(0))
                                                 : y * (T(1) - y));
        }
      });
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require(a.shape() == b.shape(),
          "add shape mismatch " + a.shape().str() + " vs " + b.shape().str());
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] + b.values()[i];
  auto an = a.node();
  auto bn = b.node();
  return make_result<T>("add", a.shape(), std::move(out), {a, b},
                        [an, bn](Node<T>& self) {
                          for (auto* n : {an.get(), bn.get()}) {
                            if (!n->requires_grad) continue;
                            n->ensure_grad();
                            for (std::size_t i = 0; i < self.grad.size(); ++i)
                              n->grad[i] += self.grad[i];
                          }
                        });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require(a.shape() == b.shape(),
          "mul shape mismatch " + a.shape().str() + " vs " + b.shape().str());
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] * b.values()[i];
  auto an = a.node();
  auto bn = b.node();
  return make_result<T>("mul", a.shape(), std::move(out), {a, b},
                        [an, bn](Node<T>& self) {
                          if (an->requires_grad) {
                            an->ensure_grad();
                            for (std::size_t i = 0; i < self.grad.size(); ++i)
                              an->grad[i] += self.grad[i] * bn->value[i];
                          }
                          if (bn->requires_grad) {
                            bn->ensure_grad();
                            for (std::size_t i = 0; i < self.grad.size(); ++i)
                              bn->grad[i] += self.grad[i] * an->value[i];
                          }
                        });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.values()[i] * factor;
  auto xn = x.node();
  return make_result<T>("scale", x.shape(), std::move(out), {x},
                        [xn, factor](Node<T>& self) {
                          xn->ensure_grad();
                          for (std::size_t i = 0; i < self.grad.size(); ++i)
                            xn->grad[i] += self.grad[i] * factor;
                        });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T s = 0;
  for (const T v : x.values()) s += v;
  auto xn = x.node();
  return make_result<T>("sum", Shape{1, 1, 1, 1}, {s}, {x},
                        [xn](Node<T>& self) {
                          xn->ensure_grad();
                          for (auto& g : xn->grad) g += self.grad[0];
                        });
}

template <typename T>
Tensor<T> weighted_sum(const std::vector<Tensor<T>>& terms,
                       const std::vector<T>& weights) {
  require(!terms.empty() && terms.size() == weights.size(),
          "weighted_sum needs one weight per term");
  T s = 0;
  for (std::size_t i = 0; i < terms.size(); ++i) {
    require(terms[i].numel() == 1, "weighted_sum terms must be scalars");
    s += weights[i] * terms[i].item();
  }
  std::vector<std::shared_ptr<Node<T>>> nodes;
  for (const auto& t : terms) nodes.push_back(t.node());
  return make_result<T>("weighted_sum", Shape{1, 1, 1, 1}, {s}, terms,
                        [nodes, weights](Node<T>& self) {
                          for (std::size_t i = 0; i < nodes.size(); ++i) {
                            if (!nodes[i]->requires_grad) continue;
                            nodes[i]->ensure_grad();
                            nodes[i]->grad[0] += self.grad[0] * weights[i];
                          }
                        });
}

// ---------------------------------------------------------------------------
// Spatial

template <typename T>
Tensor<T> pool(const Tensor<T>& x, PoolKind kind, int window, int stride) {
  const Shape s = x.shape();
  require(window >= 1 && stride >= 1, "pool window and stride must be positive");
  require(window <= s.h && window <= s.w,
          "pool window " + std::to_string(window) + " exceeds input " + s.str());
  const int oh = (s.h - window) / stride + 1;
  const int ow = (s.w - window) / stride + 1;
  const Shape os{s.n, s.c, oh, ow};
  std::vector<T> out(os.numel());
  std::vector<std::size_t> argmax;
  if (kind == PoolKind::Max) argmax.resize(os.numel());
  const auto& xv = x.values();
  const T inv_area = T(1) / static_cast<T>(window * window);

  std::size_t o = 0;
  for (int nc = 0; nc < s.n * s.c; ++nc) {
    const std::size_t base = static_cast<std::size_t>(nc) * s.plane();
    for (int oy = 0; oy < oh; ++oy) {
      for (int ox = 0; ox < ow; ++ox, ++o) {
        T acc = kind == PoolKind::Max ? -std::numeric_limits<T>::infinity() : T(0);
        std::size_t best = 0;
        for (int i = 0; i < window; ++i) {
          for (int j = 0; j < window; ++j) {
            const std::size_t idx =
                base + static_cast<std::size_t>(oy * stride + i) * s.w +
                (ox * stride + j);
            if (kind == PoolKind::Max) {
              if (xv[idx] > acc) {  // strict: first maximum wins
                acc = xv[idx];
                best = idx;
              }
            } else {
              acc += xv[idx];
            }
          }
        }
        if (kind == PoolKind::Max) {
          out[o] = acc;
          argmax[o] = best;
        } else {
          out[o] = acc * inv_area;
        }
      }
    }
  }

  auto xn = x.node();
  return make_result<T>(
      kind == PoolKind::Max ? "max_pool" : "avg_pool", os, std::move(out), {x},
      [xn, kind, argmax = std::move(argmax), s, oh, ow, window, stride,
       inv_area](Node<T>& self) {
        xn->ensure_grad();
        if (kind == PoolKind::Max) {
          for (std::size_t o = 0; o < self.grad.size(); ++o)
            xn->grad[argmax[o]] += self.grad[o];
          return;
        }
        std::size_t o = 0;
        for (int nc = 0; nc < s.n * s.c; ++nc) {
          const std::size_t base = static_cast<std::size_t>(nc) * s.plane();
          for (int oy = 0; oy < oh; ++oy) {
            for (int ox = 0; ox < ow; ++ox, ++o) {
              const T g = self.grad[o] * inv_area;
              for (int i = 0; i < window; ++i)
                for (int j = 0; j < window; ++j)
                  xn->grad[base + static_cast<std::size_t>(oy * stride + i) * s.w +
                           (ox * stride + j)] += g;
            }
          }
        }
      });
}

namespace {

// Corner-aligned sample positions: output index i maps to
// i * (in - 1) / (out - 1), a single output maps to 0.
struct Taps {
  std::vector<int> lo, hi;
  std::vector<double> frac;
};

Taps bilinear_taps(int in, int out) {
  Taps t;
  t.lo.resize(out);
  t.hi.resize(out);
  t.frac.resize(out);
  for (int i = 0; i < out; ++i) {
    const double src =
        out > 1 ? static_cast<double>(i) * (in - 1) / (out - 1) : 0.0;
    int lo = static_cast<int>(std::floor(src));
    lo = std::clamp(lo, 0, in - 1);
    t.lo[i] = lo;
    t.hi[i] = std::min(lo + 1, in - 1);
    t.frac[i] = src - lo;
  }
  return t;
}

}  // namespace

template <typename T>
Tensor<T> upsample_bilinear(const Tensor<T>& x, int out_h, int out_w) {
  const Shape s = x.shape();
  require(out_h >= 1 && out_w >= 1, "upsample target must be at least 1x1");
  const Taps ty = bilinear_taps(s.h, out_h);
  const Taps tx = bilinear_taps(s.w, out_w);
  const Shape os{s.n, s.c, out_h, out_w};
  std::vector<T> out(os.numel());
  const auto& xv = x.values();
  std::size_t o = 0;
  for (int nc = 0; nc < s.n * s.c; ++nc) {
    const T* p = xv.data() + static_cast<std::size_t>(nc) * s.plane();
    for (int i = 0; i < out_h; ++i) {
      const T fy = static_cast<T>(ty.frac[i]);
      const T* r0 = p + static_cast<std::size_t>(ty.lo[i]) * s.w;
      const T* r1 = p + static_cast<std::size_t>(ty.hi[i]) * s.w;
      for (int j = 0; j < out_w; ++j, ++o) {
        const T fx = static_cast<T>(tx.frac[j]);
        const T top = r0[tx.lo[j]] + fx * (r0[tx.hi[j]] - r0[tx.lo[j]]);
        const T bot = r1[tx.lo[j]] + fx * (r1[tx.hi[j]] - r1[tx.lo[j]]);
        out[o] = top + fy * (bot - top);
      }
    }
  }
  auto xn = x.node();
  return make_result<T>(
      "upsample_bilinear", os, std::move(out), {x},
      [xn, s, ty, tx, out_h, out_w](Node<T>& self) {
        xn->ensure_grad();
        std::size_t o = 0;
        for (int nc = 0; nc < s.n * s.c; ++nc) {
          T* p = xn->grad.data() + static_cast<std::size_t>(nc) * s.plane();
          for (int i = 0; i < out_h; ++i) {
            const T fy = static_cast<T>(ty.frac[i]);
            T* r0 = p + static_cast<std::size_t>(ty.lo[i]) * s.w;
            T* r1 = p + static_cast<std::size_t>(ty.hi[i]) * s.w;
            for (int j = 0; j < out_w; ++j, ++o) {
              const T fx = static_cast<T>(tx.frac[j]);
              const T g = self.grad[o];
              r0[tx.lo[j]] += g * (T(1) - fy) * (T(1) - fx);
              r0[tx.hi[j]] += g * (T(1) - fy) * fx;
              r1[tx.lo[j]] += g * fy * (T(1) - fx);
              r1[tx.hi[j]] += g * fy * fx;
            }
          }
        }
      });
}

template <typename T>
Tensor<T> concat_channels(const std::vector<Tensor<T>>& xs) {
  require(!xs.empty(), "concat_channels needs at least one input");
  const Shape first = xs.front().shape();
  int channels = 0;
  for (const auto& t : xs) {
    const Shape s = t.shape();
    require(s.n == first.n && s.h == first.h && s.w == first.w,
            "concat_channels mismatch " + first.str() + " vs " + s.str());
    channels += s.c;
  }
  const Shape os{first.n, channels, first.h, first.w};
  std::vector<T> out(os.numel());
  const std::size_t plane = first.plane();
  std::vector<int> offsets;
  int off = 0;
  for (const auto& t : xs) {
    offsets.push_back(off);
    for (int n = 0; n < first.n; ++n) {
      const std::size_t count = static_cast<std::size_t>(t.shape().c) * plane;
      std::copy_n(t.values().data() + n * count, count,
                  out.data() + (static_cast<std::size_t>(n) * channels + off) * plane);
    }
    off += t.shape().c;
  }
  std::vector<std::shared_ptr<Node<T>>> nodes;
  for (const auto& t : xs) nodes.push_back(t.node());
  return make_result<T>(
      "concat_channels", os, std::move(out), xs,
      [nodes, offsets, first, channels, plane](Node<T>& self) {
        for (std::size_t k = 0; k < nodes.size(); ++k) {
          auto& in = *nodes[k];
          if (!in.requires_grad) continue;
          in.ensure_grad();
          const std::size_t count = static_cast<std::size_t>(in.shape.c) * plane;
          for (int n = 0; n < first.n; ++n) {
            const T* src = self.grad.data() +
                           (static_cast<std::size_t>(n) * channels + offsets[k]) * plane;
            T* dst = in.grad.data() + n * count;
            for (std::size_t i = 0; i < count; ++i) dst[i] += src[i];
          }
        }
      });
}

template <typename T>
Tensor<T> pad_replicate(const Tensor<T>& x, int top, int bottom, int left,
                        int right) {
  require(top >= 0 && bottom >= 0 && left >= 0 && right >= 0,
          "padding must be non-negative");
  const Shape s = x.shape();
  const Shape os{s.n, s.c, s.h + top + bottom, s.w + left + right};
  std::vector<std::size_t> src(os.numel());
  std::vector<T> out(os.numel());
  std::size_t o = 0;
  for (int nc = 0; nc < s.n * s.c; ++nc) {
    for (int y = 0; y < os.h; ++y) {
      const int sy = std::clamp(y - top, 0, s.h - 1);
      for (int xx = 0; xx < os.w; ++xx, ++o) {
        const int sx = std::clamp(xx - left, 0, s.w - 1);
        src[o] = static_cast<std::size_t>(nc) * s.plane() +
                 static_cast<std::size_t>(sy) * s.w + sx;
        out[o] = x.values()[src[o]];
      }
    }
  }
  auto xn = x.node();
  return make_result<T>("pad_replicate", os, std::move(out), {x},
                        [xn, src = std::move(src)](Node<T>& self) {
                          xn->ensure_grad();
                          for (std::size_t o = 0; o < src.size(); ++o)
                            xn->grad[src[o]] += self.grad[o];
                        });
}

template <typename T>
Tensor<T> crop(const Tensor<T>& x, int y0, int x0, int h, int w) {
  const Shape s = x.shape();
  require(y0 >= 0 && x0 >= 0 && h >= 1 && w >= 1 && y0 + h <= s.h &&
              x0 + w <= s.w,
          "crop window outside input " + s.str());
  const Shape os{s.n, s.c, h, w};
  std::vector<T> out(os.numel());
  std::size_t o = 0;
  for (int nc = 0; nc < s.n * s.c; ++nc) {
    for (int y = 0; y < h; ++y) {
      const T* row = x.values().data() + static_cast<std::size_t>(nc) * s.plane() +
                     static_cast<std::size_t>(y + y0) * s.w + x0;
      for (int xx = 0; xx < w; ++xx) out[o++] = row[xx];
    }
  }
  auto xn = x.node();
  return make_result<T>(
      "crop", os, std::move(out), {x}, [xn, s, y0, x0, h, w](Node<T>& self) {
        xn->ensure_grad();
        std::size_t o = 0;
        for (int nc = 0; nc < s.n * s.c; ++nc) {
          for (int y = 0; y < h; ++y) {
            T* row = xn->grad.data() + static_cast<std::size_t>(nc) * s.plane() +
                     static_cast<std::size_t>(y + y0) * s.w + x0;
            for (int xx = 0; xx < w; ++xx) row[xx] += self.grad[o++];
          }
        }
      });
}

#define DFUSE_INSTANTIATE(T)                                                   \
  template class Tensor<T>;                                                    \
  template void backward<T>(const Tensor<T>&);                                 \
  template Tensor<T> make_result<T>(const std::string&, Shape, std::vector<T>, \
                                    std::vector<Tensor<T>>,                    \
                                    std::function<void(Node<T>&)>);            \
  template Tensor<T> conv2d<T>(const Tensor<T>&, const Tensor<T>&,             \
                               const Tensor<T>&, Conv2dOptions);               \
  template Tensor<T> conv_transpose2d<T>(const Tensor<T>&, const Tensor<T>&,   \
                                         const Tensor<T>&, Conv2dOptions);     \
  template Tensor<T> batch_norm<T>(const Tensor<T>&, const Tensor<T>&,         \
                                   const Tensor<T>&, RunningStats<T>&, Mode,   \
                                   BatchNormOptions);                          \
  template Tensor<T> activation<T>(const Tensor<T>&, Activation);              \
  template Tensor<T> pool<T>(const Tensor<T>&, PoolKind, int, int);            \
  template Tensor<T> upsample_bilinear<T>(const Tensor<T>&, int, int);         \
  template Tensor<T> concat_channels<T>(const std::vector<Tensor<T>>&);        \
  template Tensor<T> add<T>(const Tensor<T>&, const Tensor<T>&);               \
  template Tensor<T> mul<T>(const Tensor<T>&, const Tensor<T>&);               \
  template Tensor<T> scale<T>(const Tensor<T>&, T);                            \
  template Tensor<T> sum<T>(const Tensor<T>&);                                 \
  template Tensor<T> weighted_sum<T>(const std::vector<Tensor<T>>&,            \
                                     const std::vector<T>&);                   \
  template Tensor<T> pad_replicate<T>(const Tensor<T>&, int, int, int, int);   \
  template Tensor<T> crop<T>(const Tensor<T>&, int, int, int, int);

DFUSE_INSTANTIATE(float)
DFUSE_INSTANTIATE(double)

#undef DFUSE_INSTANTIATE

}  // namespace dfuse::ad
