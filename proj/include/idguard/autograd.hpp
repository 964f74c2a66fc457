#pragma once

// Minimal reverse-mode automatic differentiation over Tensor<T>.
//
// Every op returns a Var whose node remembers its parents and a closure that
// propagates the output gradient back into them. Nodes are recorded only when
// gradient mode is on and at least one input requires a gradient, so
// inference under NoGradGuard builds no graph at all.

#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "idguard/tensor.hpp"

namespace idguard::ag {

template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(const Tensor<T>&)> backward;

  Tensor<T>& ensure_grad() {
    if (grad.empty()) grad = Tensor<T>(value.shape());
    return grad;
  }
};

template <typename T>
class Var {
 public:
  Var() = default;
  explicit Var(Tensor<T> value, bool requires_grad = false)
      : node_(std::make_shared<Node<T>>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }
  explicit Var(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  [[nodiscard]] bool defined() const { return node_ != nullptr; }
  [[nodiscard]] const Tensor<T>& value() const { return node_->value; }
  Tensor<T>& mutable_value() { return node_->value; }
  [[nodiscard]] const Tensor<T>& grad() const { return node_->grad; }
  Tensor<T>& grad_mut() { return node_->ensure_grad(); }
  [[nodiscard]] bool requires_grad() const { return node_ && node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  void zero_grad() { node_->grad = Tensor<T>(); }
  [[nodiscard]] const std::vector<int>& shape() const { return node_->value.shape(); }
  [[nodiscard]] int dim(std::size_t i) const { return node_->value.dim(i); }
  [[nodiscard]] T item() const { return node_->value.item(); }
  [[nodiscard]] const std::shared_ptr<Node<T>>& node() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Runs reverse accumulation from a scalar root.
template <typename T>
void backward(const Var<T>& root);

/// Same value, no history: the stop_gradient operator.
template <typename T>
Var<T> stop_gradient(const Var<T>& a);

template <typename T>
Var<T> constant(Tensor<T> value) {
  return Var<T>(std::move(value), false);
}

// Elementwise arithmetic (shapes must match).
template <typename T> Var<T> add(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> sub(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> mul(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> scale(const Var<T>& a, T s);
template <typename T> Var<T> clamp(const Var<T>& a, T lo, T hi);

/// out[n] = ca[n] * a[n] + cb[n] * b[n] with constant per-sample coefficients;
/// `b` may be undefined, in which case only the first term is used.
template <typename T>
Var<T> per_sample_affine(const Var<T>& a, std::span<const T> ca, const Var<T>& b,
                         std::span<const T> cb);

// Activations.
template <typename T> Var<T> silu(const Var<T>& a);
template <typename T> Var<T> relu(const Var<T>& a);
template <typename T> Var<T> tanh(const Var<T>& a);
template <typename T> Var<T> sigmoid(const Var<T>& a);

// Layers.
template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& weight, const Var<T>& bias);
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, int stride, int pad);
template <typename T>
Var<T> group_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, int groups,
                  T eps = T(1e-5));
/// y = x * (1 + scale) + shift, where ss = [scale | shift] has shape [N, 2C].
template <typename T>
Var<T> film(const Var<T>& x, const Var<T>& ss);

// Shape and layout.
template <typename T> Var<T> reshape(const Var<T>& a, std::vector<int> shape);
template <typename T> Var<T> upsample2(const Var<T>& x);
template <typename T> Var<T> avg_pool2(const Var<T>& x);
template <typename T> Var<T> global_avg_pool(const Var<T>& x);
/// Concatenates along axis 1 (channels for images, features for matrices).
template <typename T> Var<T> concat1(const Var<T>& a, const Var<T>& b);
/// [N, K] -> [N, K, H, W] by spatial replication.
template <typename T> Var<T> broadcast_spatial(const Var<T>& m, int h, int w);
/// Integer per-sample translation with zero fill.
template <typename T>
Var<T> translate(const Var<T>& x, std::span<const int> dx, std::span<const int> dy);
/// Row sums of `table` selected by each bag: out[n] = sum_{i in bags[n]} table[i].
template <typename T>
Var<T> embed_bag(const Var<T>& table, const std::vector<std::vector<int>>& bags);

// Reductions and objectives (all return shape {1}).
template <typename T> Var<T> sum(const Var<T>& a);
template <typename T> Var<T> mean(const Var<T>& a);
template <typename T> Var<T> mse(const Var<T>& a, const Var<T>& b);
template <typename T>
Var<T> bce_with_logits(const Var<T>& logits, const Tensor<T>& targets);
template <typename T>
Var<T> softmax_cross_entropy(const Var<T>& logits, std::span<const int> labels);

}  // namespace idguard::ag
