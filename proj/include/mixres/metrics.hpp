#pragma once

#include "mixres/image.hpp"

namespace mixres::metrics {

inline constexpr double kPsnrCapDb = 100.0;

double mse(const ImageF& a, const ImageF& b);

// 10*log10(1/MSE) on unit range, capped at kPsnrCapDb when MSE < 1e-10.
double psnr(const ImageF& a, const ImageF& b);

struct SsimParams {
  int window = 11;
  double sigma = 1.5;
  double k1 = 0.01;
  double k2 = 0.03;
  double dynamic_range = 1.0;
};

// Gaussian-windowed SSIM averaged over all fully-inside windows, computed
// per channel and then averaged across channels. Images must be at least
// window x window.
double ssim(const ImageF& a, const ImageF& b, const SsimParams& params = {});

}  // namespace mixres::metrics
