#pragma once

// Minimal N x C x H x W tensor with reverse-mode differentiation.
//
// Every op returns a new tensor. When gradient recording is enabled and at
// least one input requires a gradient, the result keeps references to its
// inputs plus a closure that pushes the result's gradient back into them.
// Calling backward() on a scalar result walks that graph in reverse
// topological order.

#include <cstddef>
#include <functional>
#include <memory>
#include <new>
#include <span>
#include <string>
#include <vector>

#include "mixres/errors.hpp"

namespace mixres::nn {

struct Shape {
  int n = 1;
  int c = 1;
  int h = 1;
  int w = 1;

  std::size_t numel() const { return static_cast<std::size_t>(n) * c * h * w; }
  std::size_t plane() const { return static_cast<std::size_t>(h) * w; }
  bool operator==(const Shape&) const = default;
  std::string str() const;
};

// Vectorized kernels peel leading elements up to the first aligned address,
// which changes rounding. Storage aligned to the widest vector register
// makes every result a function of shapes alone.
template <class T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};

  AlignedAllocator() = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) { ::operator delete(p, kAlign); }
  template <class U>
  bool operator==(const AlignedAllocator<U>&) const { return true; }
};

template <class T>
using Buffer = std::vector<T, AlignedAllocator<T>>;

template <class T>
struct Node {
  Shape shape;
  Buffer<T> value;
  Buffer<T> grad;  // empty until something flows into it
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward_fn;

  T* grad_buffer() {
    if (grad.empty()) grad.assign(value.size(), T(0));
    return grad.data();
  }
};

template <class T>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, T value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<T> values, bool requires_grad = false);

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t numel() const { return node_->value.size(); }

  std::span<T> values() { return node_->value; }
  std::span<const T> values() const { return node_->value; }
  std::span<const T> grad() const { return node_->grad; }
  bool has_grad() const { return !node_->grad.empty(); }
  T item() const;

  bool requires_grad() const { return node_->requires_grad; }
  void zero_grad() { node_->grad.clear(); }

  // Reverse-mode pass from this scalar. Throws StateError when no graph was
  // recorded and ShapeError when called on a non-scalar.
  void backward() const;

  // Same values, no history, no gradient.
  Tensor detach() const;

  std::shared_ptr<Node<T>> node() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

// Disables graph recording on the current thread while alive.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

// Cross-correlation. weight is (Cout, Cin, k, k), bias is (1, Cout, 1, 1)
// or undefined. Output size is (H + 2*pad - k) / stride + 1.
template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, int stride = 1, int pad = 1);

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <class T>
Tensor<T> square(const Tensor<T>& a);
template <class T>
Tensor<T> scale(const Tensor<T>& a, T s);
// Elementwise sum of equally shaped tensors.
template <class T>
Tensor<T> add_n(const std::vector<Tensor<T>>& xs);

// x + v with v of shape (N or 1, C, 1, 1) broadcast over space (and batch).
template <class T>
Tensor<T> add_channel_bias(const Tensor<T>& x, const Tensor<T>& v);
// x * u with u of shape (N, 1, H, W) broadcast over channels.
template <class T>
Tensor<T> mul_pixel(const Tensor<T>& x, const Tensor<T>& u);
// x * keep[c]; keep is a constant per-channel multiplier.
template <class T>
Tensor<T> mask_channels(const Tensor<T>& x, const std::vector<T>& keep);

template <class T>
Tensor<T> silu(const Tensor<T>& x);
template <class T>
Tensor<T> sigmoid(const Tensor<T>& x);
template <class T>
Tensor<T> tanh(const Tensor<T>& x);
// Gradient passes where lo <= x <= hi.
template <class T>
Tensor<T> clamp(const Tensor<T>& x, T lo, T hi);

template <class T>
Tensor<T> avg_pool2(const Tensor<T>& x);
template <class T>
Tensor<T> upsample2(const Tensor<T>& x);
template <class T>
Tensor<T> concat_channels(const std::vector<Tensor<T>>& xs);
// Mean over channels -> (N, 1, H, W).
template <class T>
Tensor<T> channel_mean(const Tensor<T>& x);

// f_in * u + f_out * (1 - u), u of shape (N, 1, H, W).
template <class T>
Tensor<T> modulate(const Tensor<T>& f_in, const Tensor<T>& f_out, const Tensor<T>& u);

// Scalar reductions.
template <class T>
Tensor<T> mean_all(const Tensor<T>& x);
template <class T>
Tensor<T> sum_all(const Tensor<T>& x);
template <class T>
Tensor<T> mse_loss(const Tensor<T>& a, const Tensor<T>& b);
template <class T>
Tensor<T> l1_loss(const Tensor<T>& a, const Tensor<T>& b);

// Throws NumericError if any value is NaN or infinite.
template <class T>
void check_finite(const Tensor<T>& x, const char* where);

}  // namespace mixres::nn
