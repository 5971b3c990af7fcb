#include "mixres/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_set>

#include <Eigen/Core>
#include <unsupported/Eigen/SpecialFunctions>

namespace mixres::nn {

std::string Shape::str() const {
  std::ostringstream os;
  os << '(' << n << ", " << c << ", " << h << ", " << w << ')';
  return os.str();
}

namespace {

thread_local bool g_grad_enabled = true;

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <class T>
std::shared_ptr<Node<T>> make_node(const Shape& shape, std::initializer_list<const Tensor<T>*> inputs) {
  auto node = std::make_shared<Node<T>>();
  node->shape = shape;
  node->value.assign(shape.numel(), T(0));
  if (!g_grad_enabled) return node;
  for (const Tensor<T>* in : inputs) {
    if (in->defined() && in->requires_grad()) node->requires_grad = true;
  }
  if (node->requires_grad) {
    for (const Tensor<T>* in : inputs) node->inputs.push_back(in->defined() ? in->node() : nullptr);
  }
  return node;
}

template <class T>
std::shared_ptr<Node<T>> make_node_n(const Shape& shape, const std::vector<Tensor<T>>& inputs) {
  auto node = std::make_shared<Node<T>>();
  node->shape = shape;
  node->value.assign(shape.numel(), T(0));
  if (!g_grad_enabled) return node;
  for (const auto& in : inputs)
    if (in.requires_grad()) node->requires_grad = true;
  if (node->requires_grad)
    for (const auto& in : inputs) node->inputs.push_back(in.node());
  return node;
}

// Input k of `self` if it wants a gradient, else null.
template <class T>
T* input_grad(Node<T>& self, std::size_t k) {
  auto& in = self.inputs[k];
  return (in && in->requires_grad) ? in->grad_buffer() : nullptr;
}

void require_same(const Shape& a, const Shape& b, const char* op) {
  if (!(a == b)) throw ShapeError(std::string(op) + ": shape mismatch " + a.str() + " vs " + b.str());
}

// Column matrix with K = C*k*k rows and `ld` columns; this item's patches
// occupy columns [col0, col0 + Ho*Wo).
template <class T>
void im2col(const T* x, int C, int H, int W, int k, int stride, int pad, int Ho, int Wo, T* col, std::size_t ld,
            std::size_t col0) {
  for (int ci = 0; ci < C; ++ci)
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) {
        T* row = col + static_cast<std::size_t>((ci * k + ky) * k + kx) * ld + col0;
        const T* xc = x + static_cast<std::size_t>(ci) * H * W;
        // Output columns whose input column is inside the image.
        int lo = 0;
        while (lo < Wo && lo * stride - pad + kx < 0) ++lo;
        int hi = Wo;
        while (hi > lo && (hi - 1) * stride - pad + kx >= W) --hi;
        for (int oy = 0; oy < Ho; ++oy) {
          const int iy = oy * stride - pad + ky;
          T* r = row + static_cast<std::size_t>(oy) * Wo;
          if (iy < 0 || iy >= H) {
            std::fill(r, r + Wo, T(0));
            continue;
          }
          const T* xr = xc + static_cast<std::size_t>(iy) * W;
          std::fill(r, r + lo, T(0));
          if (stride == 1) {
            std::copy(xr + lo - pad + kx, xr + hi - pad + kx, r + lo);
          } else {
            for (int ox = lo; ox < hi; ++ox) r[ox] = xr[ox * stride - pad + kx];
          }
          std::fill(r + hi, r + Wo, T(0));
        }
      }
}

template <class T>
void col2im_add(const T* col, int C, int H, int W, int k, int stride, int pad, int Ho, int Wo, T* dx, std::size_t ld,
                std::size_t col0) {
  for (int ci = 0; ci < C; ++ci)
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) {
        const T* row = col + static_cast<std::size_t>((ci * k + ky) * k + kx) * ld + col0;
        T* dc = dx + static_cast<std::size_t>(ci) * H * W;
        int lo = 0;
        while (lo < Wo && lo * stride - pad + kx < 0) ++lo;
        int hi = Wo;
        while (hi > lo && (hi - 1) * stride - pad + kx >= W) --hi;
        for (int oy = 0; oy < Ho; ++oy) {
          const int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= H) continue;
          const T* r = row + static_cast<std::size_t>(oy) * Wo;
          T* dr = dc + static_cast<std::size_t>(iy) * W;
          for (int ox = lo; ox < hi; ++ox) dr[ox * stride - pad + kx] += r[ox];
        }
      }
}

template <class T>
Tensor<T> unary(const Tensor<T>& x, T (*f)(T), T (*df)(T, T)) {
  auto node = make_node<T>(x.shape(), {&x});
  const auto xv = x.values();
  for (std::size_t i = 0; i < xv.size(); ++i) node->value[i] = f(xv[i]);
  if (node->requires_grad) {
    node->backward_fn = [df](Node<T>& self) {
      T* gx = input_grad(self, 0);
      if (!gx) return;
      const auto& xin = self.inputs[0]->value;
      for (std::size_t i = 0; i < self.grad.size(); ++i) gx[i] += self.grad[i] * df(xin[i], self.value[i]);
    };
  }
  return Tensor<T>(node);
}

}  // namespace

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

template <class T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
  return full(shape, T(0), requires_grad);
}

template <class T>
Tensor<T> Tensor<T>::full(Shape shape, T value, bool requires_grad) {
  auto node = std::make_shared<Node<T>>();
  node->shape = shape;
  node->value.assign(shape.numel(), value);
  node->requires_grad = requires_grad;
  return Tensor(node);
}

template <class T>
Tensor<T> Tensor<T>::from(Shape shape, std::vector<T> values, bool requires_grad) {
  if (values.size() != shape.numel()) throw ShapeError("Tensor::from: value count does not match " + shape.str());
  auto node = std::make_shared<Node<T>>();
  node->shape = shape;
  node->value.assign(values.begin(), values.end());
  node->requires_grad = requires_grad;
  return Tensor(node);
}

template <class T>
T Tensor<T>::item() const {
  if (numel() != 1) throw ShapeError("item() on a non-scalar tensor " + shape().str());
  return node_->value[0];
}

template <class T>
void Tensor<T>::backward() const {
  if (!node_ || !node_->backward_fn)
    throw StateError("backward() called on a tensor without a recorded forward graph");
  if (numel() != 1) throw ShapeError("backward() requires a scalar, got " + shape().str());

  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{node_.get(), 0}};
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, k] = stack.back();
    if (k < n->inputs.size()) {
      Node<T>* child = n->inputs[k++].get();
      if (child && child->requires_grad && child->backward_fn && !seen.count(child)) {
        seen.insert(child);
        stack.emplace_back(child, 0);
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  node_->grad_buffer()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (!n->grad.empty()) n->backward_fn(*n);
  }
}

template <class T>
Tensor<T> Tensor<T>::detach() const {
  return from(shape(), std::vector<T>(node_->value.begin(), node_->value.end()), false);
}

template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, int stride, int pad) {
  const Shape xs = x.shape();
  const Shape ws = weight.shape();
  if (ws.c != xs.c) throw ShapeError("conv2d: weight expects " + std::to_string(ws.c) + " input channels, got " + xs.str());
  if (ws.h != ws.w) throw ShapeError("conv2d: kernel must be square");
  if (bias.defined() && bias.numel() != static_cast<std::size_t>(ws.n)) throw ShapeError("conv2d: bias size");
  const int k = ws.h;
  const int Ho = (xs.h + 2 * pad - k) / stride + 1;
  const int Wo = (xs.w + 2 * pad - k) / stride + 1;
  if (Ho < 1 || Wo < 1) throw ShapeError("conv2d: output would be empty");
  const int Cout = ws.n;
  const int K = xs.c * k * k;
  const std::size_t P = static_cast<std::size_t>(Ho) * Wo;
  const std::size_t NP = P * xs.n;
  const std::size_t in_item = static_cast<std::size_t>(xs.c) * xs.plane();

  // The whole batch goes through one GEMM: columns are (item, pixel).
  auto node = make_node<T>(Shape{xs.n, Cout, Ho, Wo}, {&x, &weight, &bias});
  Buffer<T> col(static_cast<std::size_t>(K) * NP);
  for (int n = 0; n < xs.n; ++n)
    im2col(x.values().data() + n * in_item, xs.c, xs.h, xs.w, k, stride, pad, Ho, Wo, col.data(), NP, n * P);
  Eigen::Map<const RowMat<T>> Wm(weight.values().data(), Cout, K);
  Eigen::Map<const RowMat<T>> Cm(col.data(), K, static_cast<Eigen::Index>(NP));
  RowMat<T> Y = Wm * Cm;
  for (int n = 0; n < xs.n; ++n)
    for (int co = 0; co < Cout; ++co) {
      const T b = bias.defined() ? bias.values()[co] : T(0);
      const T* src = Y.data() + static_cast<std::size_t>(co) * NP + n * P;
      T* dst = node->value.data() + (static_cast<std::size_t>(n) * Cout + co) * P;
      for (std::size_t p = 0; p < P; ++p) dst[p] = src[p] + b;
    }

  if (node->requires_grad) {
    node->backward_fn = [xs, k, stride, pad, Ho, Wo, Cout, K, P, NP, in_item, col = std::move(col)](Node<T>& self) {
      T* gx = input_grad(self, 0);
      T* gw = input_grad(self, 1);
      T* gb = self.inputs[2] ? input_grad(self, 2) : nullptr;
      RowMat<T> dY(Cout, static_cast<Eigen::Index>(NP));
      for (int n = 0; n < xs.n; ++n)
        for (int co = 0; co < Cout; ++co) {
          const T* src = self.grad.data() + (static_cast<std::size_t>(n) * Cout + co) * P;
          std::copy(src, src + P, dY.data() + static_cast<std::size_t>(co) * NP + n * P);
        }
      if (gb)
        for (int co = 0; co < Cout; ++co) gb[co] += dY.row(co).sum();
      Eigen::Map<const RowMat<T>> Cm(col.data(), K, static_cast<Eigen::Index>(NP));
      if (gw) {
        Eigen::Map<RowMat<T>> dW(gw, Cout, K);
        dW.noalias() += dY * Cm.transpose();
      }
      if (gx) {
        Eigen::Map<const RowMat<T>> Wm(self.inputs[1]->value.data(), Cout, K);
        RowMat<T> dC = Wm.transpose() * dY;
        for (int n = 0; n < xs.n; ++n)
          col2im_add(dC.data(), xs.c, xs.h, xs.w, k, stride, pad, Ho, Wo, gx + n * in_item, NP, n * P);
      }
    };
  }
  return Tensor<T>(node);
}

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same(a.shape(), b.shape(), "add");
  auto node = make_node<T>(a.shape(), {&a, &b});
  for (std::size_t i = 0; i < node->value.size(); ++i) node->value[i] = a.values()[i] + b.values()[i];
  if (node->requires_grad) {
    node->backward_fn = [](Node<T>& self) {
      for (std::size_t k = 0; k < 2; ++k)
        if (T* g = input_grad(self, k))
          for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    };
  }
  return Tensor<T>(node);
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  require_same(a.shape(), b.shape(), "sub");
  auto node = make_node<T>(a.shape(), {&a, &b});
  for (std::size_t i = 0; i < node->value.size(); ++i) node->value[i] = a.values()[i] - b.values()[i];
  if (node->requires_grad) {
    node->backward_fn = [](Node<T>& self) {
      if (T* g = input_grad(self, 0))
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
      if (T* g = input_grad(self, 1))
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] -= self.grad[i];
    };
  }
  return Tensor<T>(node);
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require_same(a.shape(), b.shape(), "mul");
  auto node = make_node<T>(a.shape(), {&a, &b});
  for (std::size_t i = 0; i < node->value.size(); ++i) node->value[i] = a.values()[i] * b.values()[i];
  if (node->requires_grad) {
    node->backward_fn = [](Node<T>& self) {
      const auto& av = self.inputs[0]->value;
      const auto& bv = self.inputs[1]->value;
      if (T* g = input_grad(self, 0))
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * bv[i];
      if (T* g = input_grad(self, 1))
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * av[i];
    };
  }
  return Tensor<T>(node);
}

template <class T>
Tensor<T> square(const Tensor<T>& a) {
  return unary<T>(
      a, [](T v) { return v * v; }, [](T v, T) { return T(2) * v; });
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  auto node = make_node<T>(a.shape(), {&a});
  for (std::size_t i = 0; i < node->value.size(); ++i) node->value[i] = a.values()[i] * s;
  if (node->requires_grad) {
    node->backward_fn = [s](Node<T>& self) {
      if (T* g = input_grad(self, 0))
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * s;
    };
  }
  return Tensor<T>(node);
}

template <class T>
Tensor<T> add_n(const std::vector<Tensor<T>>& xs) {
  if (xs.empty()) throw ShapeError("add_n: empty input");
  for (const auto& x : xs) require_same(xs.front().shape(), x.shape(), "add_n");
  auto node = make_node_n<T>(xs.front().shape(), xs);
  for (const auto& x : xs)
    for (std::size_t i = 0; i < node->value.size(); ++i) node->value[i] += x.values()[i];
  if (node->requires_grad) {
    node->backward_fn = [](Node<T>& self) {
      for (std::size_t k = 0; k < self.inputs.size(); ++k)
        if (T* g = input_grad(self, k))
          for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    };
  }
  return Tensor<T>(node);
}

template <class T>
Tensor<T> add_channel_bias(const Tensor<T>& x, const Tensor<T>& v) {
  const Shape xs = x.shape();
  const Shape vs = v.shape();
  if (vs.c != xs.c || vs.h != 1 || vs.w != 1 || !(vs.n == 1 || vs.n == xs.n))
    throw ShapeError("add_channel_bias: bias " + vs.str() + " incompatible with " + xs.str());
  auto node = make_node<T>(xs, {&x, &v});
  const std::size_t P = xs.plane();
  for (int n = 0; n < xs.n; ++n)
    for (int c = 0; c < xs.c; ++c) {
      const T b = v.values()[static_cast<std::size_t>(vs.n == 1 ? 0 : n) * xs.c + c];
      const std::size_t off = (static_cast<std::size_t>(n) * xs.c + c) * P;
      for (std::size_t p = 0; p < P; ++p) node->value[off + p] = x.values()[off + p] + b;
    }
  if (node->requires_grad) {
    node->backward_fn = [xs, vs, P](Node<T>& self) {
      T* gx = input_grad(self, 0);
      T* gv = input_grad(self, 1);
      for (int n = 0; n < xs.n; ++n)
        for (int c = 0; c < xs.c; ++c) {
          const std::size_t off = (static_cast<std::size_t>(n) * xs.c + c) * P;
          T acc = 0;
          for (std::size_t p = 0; p < P; ++p) {
            if (gx) gx[off + p] += self.grad[off + p];
            acc += self.grad[off + p];
          }
          if (gv) gv[static_cast<std::size_t>(vs.n == 1 ? 0 : n) * xs.c + c] += acc;
        }
    };
  }
  return Tensor<T>(node);
}

template <class T>
Tensor<T> mul_pixel(const Tensor<T>& x, const Tensor<T>& u) {
  const Shape xs = x.shape();
  const Shape us = u.shape();
  if (us.n != xs.n || us.c != 1 || us.h != xs.h || us.w != xs.w)
    throw ShapeError("mul_pixel: map " + us.str() + " incompatible with " + xs.str());
  auto node = make_node<T>(xs, {&x, &u});
  const std::size_t P = xs.plane();
  for (int n = 0; n < xs.n; ++n)
    for (int c = 0; c < xs.c; ++c) {
      const std::size_t off = (static_cast<std::size_t>(n) * xs.c + c) * P;
      const std::size_t uo = static_cast<std::size_t>(n) * P;
      for (std::size_t p = 0; p < P; ++p) node->value[off + p] = x.values()[off + p] * u.values()[uo + p];
    }
  if (node->requires_grad) {
    node->backward_fn = [xs, P](Node<T>& self) {
      T* gx = input_grad(self, 0);
      T* gu = input_grad(self, 1);
      const auto& xv = self.inputs[0]->value;
      const auto& uv = self.inputs[1]->value;
      for (int n = 0; n < xs.n; ++n)
        for (int c = 0; c < xs.c; ++c) {
          const std::size_t off = (static_cast<std::size_t>(n) * xs.c + c) * P;
          const std::size_t uo = static_cast<std::size_t>(n) * P;
          for (std::size_t p = 0; p < P; ++p) {
            if (gx) gx[off + p] += self.grad[off + p] * uv[uo + p];
            if (gu) gu[uo + p] += self.grad[off + p] * xv[off + p];
          }
        }
    };
  }
  return Tensor<T>(node);
}

template <class T>
Tensor<T> mask_channels(const Tensor<T>& x, const std::vector<T>& keep) {
  const Shape xs = x.shape();
  if (keep.size() != static_cast<std::size_t>(xs.c)) throw ShapeError("mask_channels: keep vector size");
  auto node = make_node<T>(xs, {&x});
  const std::size_t P = xs.plane();
  for (int n = 0; n < xs.n; ++n)
    for (int c = 0; c < xs.c; ++c) {
      const std::size_t off = (static_cast<std::size_t>(n) * xs.c + c) * P;
      for (std::size_t p = 0; p < P; ++p) node->value[off + p] = x.values()[off + p] * keep[c];
    }
  if (node->requires_grad) {
    node->backward_fn = [xs, P, keep](Node<T>& self) {
      if (T* g = input_grad(self, 0))
        for (int n = 0; n < xs.n; ++n)
          for (int c = 0; c < xs.c; ++c) {
            const std::size_t off = (static_cast<std::size_t>(n) * xs.c + c) * P;
            for (std::size_t p = 0; p < P; ++p) g[off + p] += self.grad[off + p] * keep[c];
          }
    };
  }
  return Tensor<T>(node);
}

namespace {

template <class T>
using ArrMap = Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>>;
template <class T>
using ConstArrMap = Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>>;

// Vectorized elementwise activation; `fwd` fills the output, `bwd`
// accumulates input gradients from (x, y, dy).
template <class T, class Fwd, class Bwd>
Tensor<T> activation(const Tensor<T>& x, Fwd fwd, Bwd bwd) {
  auto node = make_node<T>(x.shape(), {&x});
  const auto n = static_cast<Eigen::Index>(x.numel());
  fwd(ConstArrMap<T>(x.values().data(), n), ArrMap<T>(node->value.data(), n));
  if (node->requires_grad) {
    node->backward_fn = [bwd, n](Node<T>& self) {
      T* gx = input_grad(self, 0);
      if (!gx) return;
      bwd(ConstArrMap<T>(self.inputs[0]->value.data(), n), ConstArrMap<T>(self.value.data(), n),
          ConstArrMap<T>(self.grad.data(), n), ArrMap<T>(gx, n));
    };
  }
  return Tensor<T>(node);
}

}  // namespace

template <class T>
Tensor<T> silu(const Tensor<T>& x) {
  return activation(
      x, [](auto in, auto out) { out = in / (T(1) + (-in).exp()); },
      [](auto in, auto, auto dy, auto dx) {
        const Eigen::Array<T, Eigen::Dynamic, 1> s = T(1) / (T(1) + (-in).exp());
        dx += dy * s * (T(1) + in * (T(1) - s));
      });
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return activation(
      x, [](auto in, auto out) { out = T(1) / (T(1) + (-in).exp()); },
      [](auto, auto y, auto dy, auto dx) { dx += dy * y * (T(1) - y); });
}

template <class T>
Tensor<T> tanh(const Tensor<T>& x) {
  return activation(
      x, [](auto in, auto out) { out = in.tanh(); }, [](auto, auto y, auto dy, auto dx) { dx += dy * (T(1) - y * y); });
}

template <class T>
Tensor<T> clamp(const Tensor<T>& x, T lo, T hi) {
  auto node = make_node<T>(x.shape(), {&x});
  for (std::size_t i = 0; i < node->value.size(); ++i) node->value[i] = std::clamp(x.values()[i], lo, hi);
  if (node->requires_grad) {
    node->backward_fn = [lo, hi](Node<T>& self) {
      if (T* g = input_grad(self, 0)) {
        const auto& xv = self.inputs[0]->value;
        for (std::size_t i = 0; i < self.grad.size(); ++i)
          if (xv[i] >= lo && xv[i] <= hi) g[i] += self.grad[i];
      }
    };
  }
  return Tensor<T>(node);
}

template <class T>
Tensor<T> avg_pool2(const Tensor<T>& x) {
  const Shape xs = x.shape();
  if (xs.h % 2 || xs.w % 2) throw ShapeError("avg_pool2: spatial dims must be even, got " + xs.str());
  const Shape os{xs.n, xs.c, xs.h / 2, xs.w / 2};
  auto node = make_node<T>(os, {&x});
  const std::size_t planes = static_cast<std::size_t>(xs.n) * xs.c;
  for (std::size_t pl = 0; pl < planes; ++pl) {
    const T* in = x.values().data() + pl * xs.plane();
    T* out = node->value.data() + pl * os.plane();
    for (int y = 0; y < os.h; ++y)
      for (int xx = 0; xx < os.w; ++xx) {
        const T* r0 = in + static_cast<std::size_t>(2 * y) * xs.w + 2 * xx;
        out[static_cast<std::size_t>(y) * os.w + xx] = T(0.25) * (r0[0] + r0[1] + r0[xs.w] + r0[xs.w + 1]);
      }
  }
  if (node->requires_grad) {
    node->backward_fn = [xs, os, planes](Node<T>& self) {
      T* g = input_grad(self, 0);
      if (!g) return;
      for (std::size_t pl = 0; pl < planes; ++pl) {
        T* gi = g + pl * xs.plane();
        const T* go = self.grad.data() + pl * os.plane();
        for (int y = 0; y < os.h; ++y)
          for (int xx = 0; xx < os.w; ++xx) {
            const T v = T(0.25) * go[static_cast<std::size_t>(y) * os.w + xx];
            T* r0 = gi + static_cast<std::size_t>(2 * y) * xs.w + 2 * xx;
            r0[0] += v;
            r0[1] += v;
            r0[xs.w] += v;
            r0[xs.w + 1] += v;
          }
      }
    };
  }
  return Tensor<T>(node);
}

template <class T>
Tensor<T> upsample2(const Tensor<T>& x) {
  const Shape xs = x.shape();
  const Shape os{xs.n, xs.c, xs.h * 2, xs.w * 2};
  auto node = make_node<T>(os, {&x});
  const std::size_t planes = static_cast<std::size_t>(xs.n) * xs.c;
  for (std::size_t pl = 0; pl < planes; ++pl) {
    const T* in = x.values().data() + pl * xs.plane();
    T* out = node->value.data() + pl * os.plane();
    for (int y = 0; y < os.h; ++y)
      for (int xx = 0; xx < os.w; ++xx)
        out[static_cast<std::size_t>(y) * os.w + xx] = in[static_cast<std::size_t>(y / 2) * xs.w + xx / 2];
  }
  if (node->requires_grad) {
    node->backward_fn = [xs, os, planes](Node<T>& self) {
      T* g = input_grad(self, 0);
      if (!g) return;
      for (std::size_t pl = 0; pl < planes; ++pl) {
        T* gi = g + pl * xs.plane();
        const T* go = self.grad.data() + pl * os.plane();
        for (int y = 0; y < os.h; ++y)
          for (int xx = 0; xx < os.w; ++xx)
            gi[static_cast<std::size_t>(y / 2) * xs.w + xx / 2] += go[static_cast<std::size_t>(y) * os.w + xx];
      }
    };
  }
  return Tensor<T>(node);
}

template <class T>
Tensor<T> concat_channels(const std::vector<Tensor<T>>& xs) {
  if (xs.empty()) throw ShapeError("concat_channels: empty input");
  Shape os = xs.front().shape();
  os.c = 0;
  for (const auto& x : xs) {
    const Shape s = x.shape();
    if (s.n != os.n || s.h != os.h || s.w != os.w)
      throw ShapeError("concat_channels: incompatible " + s.str() + " vs " + xs.front().shape().str());
    os.c += s.c;
  }
  auto node = make_node_n<T>(os, xs);
  const std::size_t P = os.plane();
  for (int n = 0; n < os.n; ++n) {
    std::size_t c0 = 0;
    for (const auto& x : xs) {
      const std::size_t len = static_cast<std::size_t>(x.shape().c) * P;
      std::copy_n(x.values().data() + n * len, len, node->value.data() + (static_cast<std::size_t>(n) * os.c + c0) * P);
      c0 += x.shape().c;
    }
  }
  if (node->requires_grad) {
    std::vector<int> chans;
    for (const auto& x : xs) chans.push_back(x.shape().c);
    node->backward_fn = [os, P, chans](Node<T>& self) {
      for (int n = 0; n < os.n; ++n) {
        std::size_t c0 = 0;
        for (std::size_t k = 0; k < chans.size(); ++k) {
          const std::size_t len = static_cast<std::size_t>(chans[k]) * P;
          if (T* g = input_grad(self, k)) {
            const T* src = self.grad.data() + (static_cast<std::size_t>(n) * os.c + c0) * P;
            T* dst = g + n * len;
            for (std::size_t i = 0; i < len; ++i) dst[i] += src[i];
          }
          c0 += chans[k];
        }
      }
    };
  }
  return Tensor<T>(node);
}

template <class T>
Tensor<T> channel_mean(const Tensor<T>& x) {
  const Shape xs = x.shape();
  auto node = make_node<T>(Shape{xs.n, 1, xs.h, xs.w}, {&x});
  const std::size_t P = xs.plane();
  const T inv = T(1) / T(xs.c);
  for (int n = 0; n < xs.n; ++n)
    for (int c = 0; c < xs.c; ++c) {
      const T* in = x.values().data() + (static_cast<std::size_t>(n) * xs.c + c) * P;
      T* out = node->value.data() + static_cast<std::size_t>(n) * P;
      for (std::size_t p = 0; p < P; ++p) out[p] += in[p] * inv;
    }
  if (node->requires_grad) {
    node->backward_fn = [xs, P, inv](Node<T>& self) {
      T* g = input_grad(self, 0);
      if (!g) return;
      for (int n = 0; n < xs.n; ++n)
        for (int c = 0; c < xs.c; ++c) {
          T* gi = g + (static_cast<std::size_t>(n) * xs.c + c) * P;
          const T* go = self.grad.data() + static_cast<std::size_t>(n) * P;
          for (std::size_t p = 0; p < P; ++p) gi[p] += go[p] * inv;
        }
    };
  }
  return Tensor<T>(node);
}

template <class T>
Tensor<T> modulate(const Tensor<T>& f_in, const Tensor<T>& f_out, const Tensor<T>& u) {
  const Shape fs = f_in.shape();
  require_same(fs, f_out.shape(), "modulate");
  const Shape us = u.shape();
  if (us.n != fs.n || us.c != 1 || us.h != fs.h || us.w != fs.w)
    throw ShapeError("modulate: uncertainty map " + us.str() + " incompatible with " + fs.str());
  auto node = make_node<T>(fs, {&f_in, &f_out, &u});
  const std::size_t P = fs.plane();
  for (int n = 0; n < fs.n; ++n)
    for (int c = 0; c < fs.c; ++c) {
      const std::size_t off = (static_cast<std::size_t>(n) * fs.c + c) * P;
      const T* uu = u.values().data() + static_cast<std::size_t>(n) * P;
      for (std::size_t p = 0; p < P; ++p)
        node->value[off + p] = f_in.values()[off + p] * uu[p] + f_out.values()[off + p] * (T(1) - uu[p]);
    }
  if (node->requires_grad) {
    node->backward_fn = [fs, P](Node<T>& self) {
      T* gin = input_grad(self, 0);
      T* gout = input_grad(self, 1);
      T* gu = input_grad(self, 2);
      const auto& fin = self.inputs[0]->value;
      const auto& fout = self.inputs[1]->value;
      const auto& uv = self.inputs[2]->value;
      for (int n = 0; n < fs.n; ++n)
        for (int c = 0; c < fs.c; ++c) {
          const std::size_t off = (static_cast<std::size_t>(n) * fs.c + c) * P;
          const std::size_t uo = static_cast<std::size_t>(n) * P;
          for (std::size_t p = 0; p < P; ++p) {
            const T g = self.grad[off + p];
            if (gin) gin[off + p] += g * uv[uo + p];
            if (gout) gout[off + p] += g * (T(1) - uv[uo + p]);
            if (gu) gu[uo + p] += g * (fin[off + p] - fout[off + p]);
          }
        }
    };
  }
  return Tensor<T>(node);
}

template <class T>
Tensor<T> sum_all(const Tensor<T>& x) {
  auto node = make_node<T>(Shape{}, {&x});
  T acc = 0;
  for (T v : x.values()) acc += v;
  node->value[0] = acc;
  if (node->requires_grad) {
    node->backward_fn = [](Node<T>& self) {
      if (T* g = input_grad(self, 0))
        for (std::size_t i = 0; i < self.inputs[0]->value.size(); ++i) g[i] += self.grad[0];
    };
  }
  return Tensor<T>(node);
}

template <class T>
Tensor<T> mean_all(const Tensor<T>& x) {
  return scale(sum_all(x), T(1) / T(x.numel()));
}

template <class T>
Tensor<T> mse_loss(const Tensor<T>& a, const Tensor<T>& b) {
  require_same(a.shape(), b.shape(), "mse_loss");
  auto node = make_node<T>(Shape{}, {&a, &b});
  const std::size_t N = a.numel();
  T acc = 0;
  for (std::size_t i = 0; i < N; ++i) {
    const T d = a.values()[i] - b.values()[i];
    acc += d * d;
  }
  node->value[0] = acc / T(N);
  if (node->requires_grad) {
    node->backward_fn = [N](Node<T>& self) {
      const auto& av = self.inputs[0]->value;
      const auto& bv = self.inputs[1]->value;
      const T s = T(2) * self.grad[0] / T(N);
      T* ga = input_grad(self, 0);
      T* gb = input_grad(self, 1);
      for (std::size_t i = 0; i < N; ++i) {
        const T d = s * (av[i] - bv[i]);
        if (ga) ga[i] += d;
        if (gb) gb[i] -= d;
      }
    };
  }
  return Tensor<T>(node);
}

template <class T>
Tensor<T> l1_loss(const Tensor<T>& a, const Tensor<T>& b) {
  require_same(a.shape(), b.shape(), "l1_loss");
  auto node = make_node<T>(Shape{}, {&a, &b});
  const std::size_t N = a.numel();
  T acc = 0;
  for (std::size_t i = 0; i < N; ++i) acc += std::abs(a.values()[i] - b.values()[i]);
  node->value[0] = acc / T(N);
  if (node->requires_grad) {
    node->backward_fn = [N](Node<T>& self) {
      const auto& av = self.inputs[0]->value;
      const auto& bv = self.inputs[1]->value;
      const T s = self.grad[0] / T(N);
      T* ga = input_grad(self, 0);
      T* gb = input_grad(self, 1);
      for (std::size_t i = 0; i < N; ++i) {
        const T d = av[i] - bv[i];
        const T sg = d > 0 ? s : (d < 0 ? -s : T(0));
        if (ga) ga[i] += sg;
        if (gb) gb[i] -= sg;
      }
    };
  }
  return Tensor<T>(node);
}

template <class T>
void check_finite(const Tensor<T>& x, const char* where) {
  for (T v : x.values())
    if (!std::isfinite(v)) throw NumericError(std::string("non-finite value in ") + where);
}

#define MIXRES_INSTANTIATE_TENSOR(T)                                                                    \
  template class Tensor<T>;                                                                             \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, int, int);            \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                           \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                           \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                           \
  template Tensor<T> square(const Tensor<T>&);                                                          \
  template Tensor<T> scale(const Tensor<T>&, T);                                                        \
  template Tensor<T> add_n(const std::vector<Tensor<T>>&);                                              \
  template Tensor<T> add_channel_bias(const Tensor<T>&, const Tensor<T>&);                              \
  template Tensor<T> mul_pixel(const Tensor<T>&, const Tensor<T>&);                                     \
  template Tensor<T> mask_channels(const Tensor<T>&, const std::vector<T>&);                            \
  template Tensor<T> silu(const Tensor<T>&);                                                            \
  template Tensor<T> sigmoid(const Tensor<T>&);                                                         \
  template Tensor<T> tanh(const Tensor<T>&);                                                            \
  template Tensor<T> clamp(const Tensor<T>&, T, T);                                                     \
  template Tensor<T> avg_pool2(const Tensor<T>&);                                                       \
  template Tensor<T> upsample2(const Tensor<T>&);                                                       \
  template Tensor<T> concat_channels(const std::vector<Tensor<T>>&);                                    \
  template Tensor<T> channel_mean(const Tensor<T>&);                                                    \
  template Tensor<T> modulate(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                    \
  template Tensor<T> mean_all(const Tensor<T>&);                                                        \
  template Tensor<T> sum_all(const Tensor<T>&);                                                         \
  template Tensor<T> mse_loss(const Tensor<T>&, const Tensor<T>&);                                      \
  template Tensor<T> l1_loss(const Tensor<T>&, const Tensor<T>&);                                       \
  template void check_finite(const Tensor<T>&, const char*);

MIXRES_INSTANTIATE_TENSOR(float)
MIXRES_INSTANTIATE_TENSOR(double)

}  // namespace mixres::nn
