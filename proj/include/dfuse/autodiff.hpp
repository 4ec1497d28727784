#pragma once

// Reverse-mode differentiation over NCHW tensors. The graph is recorded
// implicitly: every op returns a Tensor that holds shared references to its
// inputs plus a backward closure. backward() walks the graph reachable from a
// scalar in reverse topological order.
//
// Everything is templated on the scalar type. Training runs in float; double
// exists for finite-difference gradient checks.

#include <cstddef>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace dfuse::ad {

struct Shape {
  int n = 0;
  int c = 0;
  int h = 0;
  int w = 0;

  std::size_t numel() const {
    return static_cast<std::size_t>(n) * c * h * w;
  }
  std::size_t plane() const { return static_cast<std::size_t>(h) * w; }
  bool operator==(const Shape&) const = default;
  std::string str() const;
};

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // empty until something flows into it
  bool requires_grad = false;
  bool is_leaf = true;
  std::string op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), T(0));
  }
};

template <typename T>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, T value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<T> values,
                     bool requires_grad = false);
  static Tensor scalar(T value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t numel() const { return node_->value.size(); }
  bool requires_grad() const { return node_->requires_grad; }

  std::span<const T> values() const { return node_->value; }
  /// Direct write access, for optimizers and initializers. Bypasses the graph.
  std::span<T> mutable_values() { return node_->value; }
  T item() const;

  /// Empty span when no gradient has been accumulated yet.
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  void zero_grad();

  /// Same values, no history.
  Tensor detach() const;

  const std::shared_ptr<Node<T>>& node() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

/// Accumulates d(output)/d(leaf) into every reachable leaf that requires a
/// gradient. `output` must hold exactly one element.
template <typename T>
void backward(const Tensor<T>& output);

/// Builds an op result. `backward_fn` receives the result node and must add
/// into the grads of those inputs that require them. Non-finite forward
/// values raise NumericError naming the op.
template <typename T>
Tensor<T> make_result(const std::string& op, Shape shape, std::vector<T> value,
                      std::vector<Tensor<T>> inputs,
                      std::function<void(Node<T>&)> backward_fn);

struct Conv2dOptions {
  int stride = 1;
  int padding = 0;
};

/// Cross-correlation with zero padding. weight: (out_ch, in_ch, kh, kw);
/// bias: (1, out_ch, 1, 1) or undefined.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight,
                 const Tensor<T>& bias, Conv2dOptions opt = {});

/// Adjoint of conv2d. weight: (in_ch, out_ch, kh, kw), the same memory
/// layout conv2d uses for the reverse mapping. Output size is
/// (H - 1) * stride - 2 * padding + kh.
template <typename T>
Tensor<T> conv_transpose2d(const Tensor<T>& x, const Tensor<T>& weight,
                           const Tensor<T>& bias, Conv2dOptions opt = {});

enum class Mode { Train, Eval };

template <typename T>
struct RunningStats {
  std::vector<T> mean;
  std::vector<T> var;

  explicit RunningStats(int channels = 0)
      : mean(static_cast<std::size_t>(channels), T(0)),
        var(static_cast<std::size_t>(channels), T(1)) {}
};

struct BatchNormOptions {
  double momentum = 0.1;
  double epsilon = 1e-5;
};

/// Per-channel normalisation over (N, H, W). Train mode uses batch
/// statistics and folds them into `stats` (unbiased variance, PyTorch
/// convention); eval mode uses `stats`. gamma/beta: (1, C, 1, 1).
template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gamma,
                     const Tensor<T>& beta, RunningStats<T>& stats, Mode mode,
                     BatchNormOptions opt = {});

enum class Activation { Relu, Sigmoid };

template <typename T>
Tensor<T> activation(const Tensor<T>& x, Activation kind);

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  return activation(x, Activation::Relu);
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return activation(x, Activation::Sigmoid);
}

enum class PoolKind { Max, Avg };

/// Windowed reduction without padding. Max routes the gradient to the first
/// maximum in row-major order.
template <typename T>
Tensor<T> pool(const Tensor<T>& x, PoolKind kind, int window, int stride);

/// Corner-aligned bilinear resampling: output corners sample input corners.
template <typename T>
Tensor<T> upsample_bilinear(const Tensor<T>& x, int out_h, int out_w);

template <typename T>
Tensor<T> concat_channels(const std::vector<Tensor<T>>& xs);

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor);

/// Sum of all elements, shape (1,1,1,1).
template <typename T>
Tensor<T> sum(const Tensor<T>& x);

/// Σ weights[i] * terms[i] over scalar terms.
template <typename T>
Tensor<T> weighted_sum(const std::vector<Tensor<T>>& terms,
                       const std::vector<T>& weights);

/// Edge-replicating spatial padding.
template <typename T>
Tensor<T> pad_replicate(const Tensor<T>& x, int top, int bottom, int left,
                        int right);

/// Spatial window [y0, y0 + h) x [x0, x0 + w).
template <typename T>
Tensor<T> crop(const Tensor<T>& x, int y0, int x0, int h, int w);

template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> tensor;
};

}  // namespace dfuse::ad
