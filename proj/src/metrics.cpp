#include "mixres/metrics.hpp"

#include <cmath>
#include <vector>

namespace mixres::metrics {

namespace {

void require_same(const ImageF& a, const ImageF& b, const char* what) {
  if (!a.same_dims(b)) throw ShapeError(std::string(what) + ": image dimensions differ");
}

std::vector<double> gaussian_kernel(int size, double sigma) {
  std::vector<double> k(size);
  const double c = (size - 1) / 2.0;
  double sum = 0.0;
  for (int i = 0; i < size; ++i) {
    k[i] = std::exp(-((i - c) * (i - c)) / (2.0 * sigma * sigma));
    sum += k[i];
  }
  for (double& v : k) v /= sum;
  return k;
}

// Separable "valid" filtering of an H x W plane.
std::vector<double> filter_valid(const std::vector<double>& src, int H, int W, const std::vector<double>& k) {
  const int K = static_cast<int>(k.size());
  const int Ho = H - K + 1;
  const int Wo = W - K + 1;
  std::vector<double> tmp(static_cast<std::size_t>(H) * Wo);
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < Wo; ++x) {
      double acc = 0.0;
      for (int i = 0; i < K; ++i) acc += k[i] * src[static_cast<std::size_t>(y) * W + x + i];
      tmp[static_cast<std::size_t>(y) * Wo + x] = acc;
    }
  std::vector<double> out(static_cast<std::size_t>(Ho) * Wo);
  for (int y = 0; y < Ho; ++y)
    for (int x = 0; x < Wo; ++x) {
      double acc = 0.0;
      for (int i = 0; i < K; ++i) acc += k[i] * tmp[static_cast<std::size_t>(y + i) * Wo + x];
      out[static_cast<std::size_t>(y) * Wo + x] = acc;
    }
  return out;
}

}  // namespace

double mse(const ImageF& a, const ImageF& b) {
  require_same(a, b, "mse");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a.data()[i]) - static_cast<double>(b.data()[i]);
    acc += d * d;
  }
  return acc / static_cast<double>(a.size());
}

double psnr(const ImageF& a, const ImageF& b) {
  const double m = mse(a, b);
  if (m < 1e-10) return kPsnrCapDb;
  return std::min(kPsnrCapDb, 10.0 * std::log10(1.0 / m));
}

double ssim(const ImageF& a, const ImageF& b, const SsimParams& params) {
  require_same(a, b, "ssim");
  const int H = a.height();
  const int W = a.width();
  if (H < params.window || W < params.window) throw ShapeError("ssim: image smaller than the window");
  const auto k = gaussian_kernel(params.window, params.sigma);
  const double C1 = (params.k1 * params.dynamic_range) * (params.k1 * params.dynamic_range);
  const double C2 = (params.k2 * params.dynamic_range) * (params.k2 * params.dynamic_range);
  const int C = a.channels();

  double total = 0.0;
  for (int c = 0; c < C; ++c) {
    std::vector<double> x(static_cast<std::size_t>(H) * W), y(x.size()), xx(x.size()), yy(x.size()), xy(x.size());
    for (std::size_t p = 0; p < x.size(); ++p) {
      x[p] = a.data()[p * C + c];
      y[p] = b.data()[p * C + c];
      xx[p] = x[p] * x[p];
      yy[p] = y[p] * y[p];
      xy[p] = x[p] * y[p];
    }
    const auto mx = filter_valid(x, H, W, k);
    const auto my = filter_valid(y, H, W, k);
    const auto sxx = filter_valid(xx, H, W, k);
    const auto syy = filter_valid(yy, H, W, k);
    const auto sxy = filter_valid(xy, H, W, k);
    double acc = 0.0;
    for (std::size_t i = 0; i < mx.size(); ++i) {
      const double vx = sxx[i] - mx[i] * mx[i];
      const double vy = syy[i] - my[i] * my[i];
      const double cxy = sxy[i] - mx[i] * my[i];
      const double num = (2.0 * mx[i] * my[i] + C1) * (2.0 * cxy + C2);
      const double den = (mx[i] * mx[i] + my[i] * my[i] + C1) * (vx + vy + C2);
      acc += num / den;
    }
    total += acc / static_cast<double>(mx.size());
  }
  return total / C;
}

}  // namespace mixres::metrics
