#include "mixres/objectives.hpp"

#include <cmath>

namespace mixres::objectives {

void LossWeights::validate() const {
  for (double v : {lambda, alpha_w, beta_w})
    if (!(v >= 0.0) || !std::isfinite(v)) throw ParameterError("loss weights must be finite and >= 0");
}

template <class T>
Tensor<T> diffusion_loss(const Tensor<T>& eps_hat, const Tensor<T>& eps_target) {
  return nn::mse_loss(eps_hat, eps_target);
}

template <class T>
Tensor<T> rec_loss(const Tensor<T>& clean, const Tensor<T>& restored, RecNorm norm) {
  return norm == RecNorm::L1 ? nn::l1_loss(clean, restored) : nn::mse_loss(clean, restored);
}

template <class T>
Tensor<T> au_loss(const Tensor<T>& degraded, const Tensor<T>& mean_prediction, const Tensor<T>& aleatoric,
                  const LossWeights& w) {
  w.validate();
  const nn::Shape s = degraded.shape();
  if (!(s == mean_prediction.shape())) throw ShapeError("au_loss: degraded and mean prediction differ");
  const nn::Shape us = aleatoric.shape();
  if (us.n != s.n || us.c != 1 || us.h != s.h || us.w != s.w)
    throw ShapeError("au_loss: aleatoric map " + us.str() + " incompatible with " + s.str());

  auto node = std::make_shared<nn::Node<T>>();
  node->shape = nn::Shape{};
  node->value.assign(1, T(0));
  if (nn::grad_enabled() &&
      (degraded.requires_grad() || mean_prediction.requires_grad() || aleatoric.requires_grad())) {
    node->requires_grad = true;
    node->inputs = {degraded.node(), mean_prediction.node(), aleatoric.node()};
  }
  const T aw = static_cast<T>(w.alpha_w);
  const T bw = static_cast<T>(w.beta_w);
  const std::size_t P = s.plane();
  const std::size_t N = s.numel();
  T acc = 0;
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c)
      for (std::size_t p = 0; p < P; ++p) {
        const std::size_t i = (static_cast<std::size_t>(n) * s.c + c) * P + p;
        const T u = aleatoric.values()[static_cast<std::size_t>(n) * P + p];
        const T d = degraded.values()[i] - mean_prediction.values()[i];
        acc += aw * std::exp(-u) * d * d + bw * u;
      }
  node->value[0] = acc / T(N);

  if (node->requires_grad) {
    node->backward_fn = [s, P, N, aw, bw](nn::Node<T>& self) {
      auto grad_of = [&](std::size_t k) -> T* {
        auto& in = self.inputs[k];
        return in->requires_grad ? in->grad_buffer() : nullptr;
      };
      T* gI = grad_of(0);
      T* gJ = grad_of(1);
      T* gU = grad_of(2);
      const auto& Iv = self.inputs[0]->value;
      const auto& Jv = self.inputs[1]->value;
      const auto& Uv = self.inputs[2]->value;
      const T g = self.grad[0] / T(N);
      for (int n = 0; n < s.n; ++n)
        for (int c = 0; c < s.c; ++c)
          for (std::size_t p = 0; p < P; ++p) {
            const std::size_t i = (static_cast<std::size_t>(n) * s.c + c) * P + p;
            const std::size_t ui = static_cast<std::size_t>(n) * P + p;
            const T e = std::exp(-Uv[ui]);
            const T d = Iv[i] - Jv[i];
            if (gI) gI[i] += g * aw * e * T(2) * d;
            if (gJ) gJ[i] -= g * aw * e * T(2) * d;
            if (gU) gU[ui] += g * (bw - aw * e * d * d);
          }
    };
  }
  return Tensor<T>(node);
}

template <class T>
Tensor<T> un_loss(const Tensor<T>& clean, const Tensor<T>& mean_prediction, const Tensor<T>& au) {
  return nn::add(nn::l1_loss(clean, mean_prediction), au);
}

template <class T>
Tensor<T> total_loss(const Tensor<T>& rec, const Tensor<T>& un, double lambda) {
  if (!(lambda >= 0.0)) throw ParameterError("lambda must be >= 0");
  if (lambda == 0.0) return rec;
  return nn::add(rec, nn::scale(un, static_cast<T>(lambda)));
}

#define MIXRES_INSTANTIATE_OBJECTIVES(T)                                                                   \
  template Tensor<T> diffusion_loss(const Tensor<T>&, const Tensor<T>&);                                   \
  template Tensor<T> rec_loss(const Tensor<T>&, const Tensor<T>&, RecNorm);                                \
  template Tensor<T> au_loss(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, const LossWeights&);     \
  template Tensor<T> un_loss(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                        \
  template Tensor<T> total_loss(const Tensor<T>&, const Tensor<T>&, double);

MIXRES_INSTANTIATE_OBJECTIVES(float)
MIXRES_INSTANTIATE_OBJECTIVES(double)

}  // namespace mixres::objectives
