#pragma once

// Training objectives for the denoiser and the refinement network.

#include "mixres/tensor.hpp"

namespace mixres::objectives {

using nn::Tensor;

struct LossWeights {
  double lambda = 0.1;   // weight of the uncertainty-aware term
  double alpha_w = 1.0;  // residual weight inside the aleatoric term
  double beta_w = 0.5;   // penalty on predicted aleatoric uncertainty
  void validate() const;
};

// Which reconstruction distance the refiner is trained with. The default is
// mean absolute error; squared error is kept as an option.
enum class RecNorm { L1, MSE };

// Mean squared error between predicted and injected noise.
template <class T>
Tensor<T> diffusion_loss(const Tensor<T>& eps_hat, const Tensor<T>& eps_target);

template <class T>
Tensor<T> rec_loss(const Tensor<T>& clean, const Tensor<T>& restored, RecNorm norm = RecNorm::L1);

// mean_j [ alpha_w * exp(-U_A^j) * (I^j - J_a^j)^2 + beta_w * U_A^j ].
// U_A is (N,1,H,W) and is broadcast over the channels of I and J_a; the mean
// runs over every element of I.
template <class T>
Tensor<T> au_loss(const Tensor<T>& degraded, const Tensor<T>& mean_prediction, const Tensor<T>& aleatoric,
                  const LossWeights& w);

// L1(J, J_a) + au.
template <class T>
Tensor<T> un_loss(const Tensor<T>& clean, const Tensor<T>& mean_prediction, const Tensor<T>& au);

// rec + lambda * un.
template <class T>
Tensor<T> total_loss(const Tensor<T>& rec, const Tensor<T>& un, double lambda);

}  // namespace mixres::objectives
