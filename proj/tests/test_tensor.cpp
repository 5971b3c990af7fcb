#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "test_util.hpp"

using namespace mixres;
using namespace mixres::nn;
using T = Tensor<double>;

namespace {

constexpr double kTol = 1e-4;

// Contracts the op output with fixed random weights so every output entry
// contributes a distinct amount, then compares reverse-mode gradients against
// central differences.
template <class Op>
double fd_error(Op op, std::vector<T> inputs, Rng& rng) {
  for (auto& t : inputs) t.zero_grad();
  const T out = op();
  const T weights = test::random_tensor(out.shape(), rng, -1.0, 1.0, false);
  sum_all(mul(out, weights)).backward();
  const auto f = [&] {
    NoGradGuard g;
    return sum_all(mul(op(), weights)).item();
  };
  const auto r = test::check_gradients(f, inputs, 1e-5, 1e-6);
  CHECK(r.checked > 0);
  return r.max_rel;
}

// Plain nested-loop cross-correlation.
std::vector<double> naive_conv(const T& x, const T& w, const T& b, int stride, int pad) {
  const Shape xs = x.shape(), ws = w.shape();
  const int Ho = (xs.h + 2 * pad - ws.h) / stride + 1, Wo = (xs.w + 2 * pad - ws.w) / stride + 1;
  std::vector<double> out(static_cast<std::size_t>(xs.n) * ws.n * Ho * Wo, 0.0);
  const auto xv = x.values();
  const auto wv = w.values();
  for (int n = 0; n < xs.n; ++n)
    for (int o = 0; o < ws.n; ++o)
      for (int i = 0; i < Ho; ++i)
        for (int j = 0; j < Wo; ++j) {
          double acc = b.defined() ? b.values()[o] : 0.0;
          for (int c = 0; c < xs.c; ++c)
            for (int ki = 0; ki < ws.h; ++ki)
              for (int kj = 0; kj < ws.w; ++kj) {
                const int y = i * stride + ki - pad, z = j * stride + kj - pad;
                if (y < 0 || z < 0 || y >= xs.h || z >= xs.w) continue;
                acc += xv[((n * xs.c + c) * xs.h + y) * xs.w + z] * wv[((o * ws.c + c) * ws.h + ki) * ws.w + kj];
              }
          out[((n * ws.n + o) * Ho + i) * Wo + j] = acc;
        }
  return out;
}

}  // namespace

TEST_CASE("conv2d matches a nested-loop oracle") {
  Rng rng(1);
  struct Cfg {
    int k, stride, pad;
  };
  for (Cfg cfg : {Cfg{3, 1, 1}, Cfg{3, 2, 1}, Cfg{1, 1, 0}, Cfg{4, 2, 1}, Cfg{3, 1, 0}}) {
    const T x = test::random_tensor({2, 3, 6, 5}, rng);
    const T w = test::random_tensor({4, 3, cfg.k, cfg.k}, rng);
    const T b = test::random_tensor({1, 4, 1, 1}, rng);
    const T y = conv2d(x, w, b, cfg.stride, cfg.pad);
    const auto ref = naive_conv(x, w, b, cfg.stride, cfg.pad);
    REQUIRE(y.numel() == ref.size());
    for (std::size_t i = 0; i < ref.size(); ++i) CHECK(std::abs(y.values()[i] - ref[i]) < 1e-12);
    const T y0 = conv2d(x, w, T(), cfg.stride, cfg.pad);
    const auto ref0 = naive_conv(x, w, T(), cfg.stride, cfg.pad);
    for (std::size_t i = 0; i < ref0.size(); ++i) CHECK(std::abs(y0.values()[i] - ref0[i]) < 1e-12);
  }
  CHECK_THROWS_AS(conv2d(test::random_tensor({1, 2, 4, 4}, rng), test::random_tensor({1, 3, 3, 3}, rng), T()),
                  ShapeError);
  CHECK_THROWS_AS(conv2d(test::random_tensor({1, 3, 2, 2}, rng), test::random_tensor({1, 3, 5, 5}, rng), T(), 1, 0),
                  ShapeError);
}

TEST_CASE("forward values of elementwise and structural ops") {
  Rng rng(2);
  const T a = test::random_tensor({2, 3, 4, 4}, rng);
  const T b = test::random_tensor({2, 3, 4, 4}, rng);
  const auto av = a.values(), bv = b.values();
  const T s = add(a, b), d = sub(a, b), m = mul(a, b), q = square(a), k = scale(a, 2.5);
  const T sg = sigmoid(a), th = tanh(a), sl = silu(a), cl = clamp(a, -0.3, 0.4);
  for (std::size_t i = 0; i < a.numel(); ++i) {
    CHECK(s.values()[i] == av[i] + bv[i]);
    CHECK(d.values()[i] == av[i] - bv[i]);
    CHECK(m.values()[i] == av[i] * bv[i]);
    CHECK(q.values()[i] == av[i] * av[i]);
    CHECK(k.values()[i] == 2.5 * av[i]);
    CHECK(sg.values()[i] == doctest::Approx(1.0 / (1.0 + std::exp(-av[i]))).epsilon(1e-14));
    CHECK(th.values()[i] == doctest::Approx(std::tanh(av[i])).epsilon(1e-14));
    CHECK(sl.values()[i] == doctest::Approx(av[i] / (1.0 + std::exp(-av[i]))).epsilon(1e-14));
    CHECK(cl.values()[i] == std::clamp(av[i], -0.3, 0.4));
  }

  const T pooled = avg_pool2(a);
  CHECK(pooled.shape() == Shape{2, 3, 2, 2});
  CHECK(pooled.values()[0] == doctest::Approx((av[0] + av[1] + av[4] + av[5]) / 4));
  const T up = upsample2(pooled);
  CHECK(up.shape() == Shape{2, 3, 4, 4});
  CHECK(up.values()[5] == pooled.values()[0]);
  CHECK(up.values()[2] == pooled.values()[1]);

  const T cat = concat_channels<double>({a, b});
  CHECK(cat.shape() == Shape{2, 6, 4, 4});
  CHECK(cat.values()[3 * 16] == bv[0]);
  CHECK(cat.values()[6 * 16] == av[3 * 16]);

  const T cm = channel_mean(a);
  CHECK(cm.shape() == Shape{2, 1, 4, 4});
  CHECK(cm.values()[7] == doctest::Approx((av[7] + av[16 + 7] + av[32 + 7]) / 3));

  const T u = test::random_tensor({2, 1, 4, 4}, rng, 0.0, 1.0);
  const T mo = modulate(a, b, u);
  const T mp = mul_pixel(a, u);
  for (int n = 0; n < 2; ++n)
    for (int c = 0; c < 3; ++c)
      for (int p = 0; p < 16; ++p) {
        const std::size_t i = (n * 3 + c) * 16 + p;
        const double uu = u.values()[n * 16 + p];
        CHECK(mo.values()[i] == doctest::Approx(av[i] * uu + bv[i] * (1 - uu)).epsilon(1e-14));
        CHECK(mp.values()[i] == av[i] * uu);
      }

  const T mk = mask_channels<double>(a, {1.0, 0.0, 2.0});
  CHECK(mk.values()[16] == 0.0);
  CHECK(mk.values()[32] == 2.0 * av[32]);

  const T bias = test::random_tensor({1, 3, 1, 1}, rng);
  const T ab = add_channel_bias(a, bias);
  CHECK(ab.values()[16 * 4 + 3] == av[16 * 4 + 3] + bias.values()[1]);

  double sum = 0, sq = 0, l1 = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    sum += av[i];
    sq += (av[i] - bv[i]) * (av[i] - bv[i]);
    l1 += std::abs(av[i] - bv[i]);
  }
  const double n = static_cast<double>(a.numel());
  CHECK(sum_all(a).item() == doctest::Approx(sum).epsilon(1e-13));
  CHECK(mean_all(a).item() == doctest::Approx(sum / n).epsilon(1e-13));
  CHECK(mse_loss(a, b).item() == doctest::Approx(sq / n).epsilon(1e-13));
  CHECK(l1_loss(a, b).item() == doctest::Approx(l1 / n).epsilon(1e-13));
  CHECK(add_n<double>({a, b, a}).values()[9] == doctest::Approx(2 * av[9] + bv[9]));

  CHECK_THROWS_AS(add(a, pooled), ShapeError);
  CHECK_THROWS_AS(avg_pool2(test::random_tensor({1, 1, 3, 4}, rng)), ShapeError);
  CHECK_THROWS_AS(mask_channels<double>(a, {1.0}), ShapeError);
  CHECK_THROWS_AS(modulate(a, b, test::random_tensor({2, 1, 2, 2}, rng)), ShapeError);
}

TEST_CASE("finite-difference gradients of every op") {
  Rng rng(3);
  const T a = test::random_tensor({2, 3, 4, 4}, rng);
  const T b = test::random_tensor({2, 3, 4, 4}, rng);
  const T u = test::random_tensor({2, 1, 4, 4}, rng, 0.05, 0.95);

  SUBCASE("conv2d") {
    const T w = test::random_tensor({2, 3, 3, 3}, rng);
    const T bias = test::random_tensor({1, 2, 1, 1}, rng);
    CHECK(fd_error([&] { return conv2d(a, w, bias, 1, 1); }, {a, w, bias}, rng) < kTol);
    CHECK(fd_error([&] { return conv2d(a, w, bias, 2, 1); }, {a, w, bias}, rng) < kTol);
    const T w4 = test::random_tensor({2, 3, 4, 4}, rng);
    CHECK(fd_error([&] { return conv2d(a, w4, T(), 2, 1); }, {a, w4}, rng) < kTol);
  }
  SUBCASE("arithmetic") {
    CHECK(fd_error([&] { return add(a, b); }, {a, b}, rng) < kTol);
    CHECK(fd_error([&] { return sub(a, b); }, {a, b}, rng) < kTol);
    CHECK(fd_error([&] { return mul(a, b); }, {a, b}, rng) < kTol);
    CHECK(fd_error([&] { return square(a); }, {a}, rng) < kTol);
    CHECK(fd_error([&] { return scale(a, -1.7); }, {a}, rng) < kTol);
    CHECK(fd_error([&] { return add_n<double>({a, b, a}); }, {a, b}, rng) < kTol);
  }
  SUBCASE("broadcasts and masks") {
    const T v = test::random_tensor({1, 3, 1, 1}, rng);
    const T vb = test::random_tensor({2, 3, 1, 1}, rng);
    CHECK(fd_error([&] { return add_channel_bias(a, v); }, {a, v}, rng) < kTol);
    CHECK(fd_error([&] { return add_channel_bias(a, vb); }, {a, vb}, rng) < kTol);
    CHECK(fd_error([&] { return mul_pixel(a, u); }, {a, u}, rng) < kTol);
    CHECK(fd_error([&] { return mask_channels<double>(a, {2.0, 0.0, 1.0}); }, {a}, rng) < kTol);
    CHECK(fd_error([&] { return modulate(a, b, u); }, {a, b, u}, rng) < kTol);
  }
  SUBCASE("activations") {
    CHECK(fd_error([&] { return silu(a); }, {a}, rng) < kTol);
    CHECK(fd_error([&] { return sigmoid(a); }, {a}, rng) < kTol);
    CHECK(fd_error([&] { return tanh(a); }, {a}, rng) < kTol);
    // Keep samples away from the clamp kinks.
    T c = test::random_tensor({1, 2, 4, 4}, rng, -2.0, 2.0);
    for (double& x : c.values())
      if (std::abs(x - 0.5) < 1e-3 || std::abs(x + 0.5) < 1e-3) x += 0.01;
    CHECK(fd_error([&] { return clamp(c, -0.5, 0.5); }, {c}, rng) < kTol);
  }
  SUBCASE("resampling and channel ops") {
    CHECK(fd_error([&] { return avg_pool2(a); }, {a}, rng) < kTol);
    CHECK(fd_error([&] { return upsample2(a); }, {a}, rng) < kTol);
    CHECK(fd_error([&] { return concat_channels<double>({a, u, b}); }, {a, u, b}, rng) < kTol);
    CHECK(fd_error([&] { return channel_mean(a); }, {a}, rng) < kTol);
  }
  SUBCASE("reductions and losses") {
    CHECK(fd_error([&] { return mean_all(a); }, {a}, rng) < kTol);
    CHECK(fd_error([&] { return sum_all(a); }, {a}, rng) < kTol);
    CHECK(fd_error([&] { return mse_loss(a, b); }, {a, b}, rng) < kTol);
    CHECK(fd_error([&] { return l1_loss(a, b); }, {a, b}, rng) < kTol);
  }
}

TEST_CASE("graph bookkeeping") {
  Rng rng(4);
  T x = test::random_tensor({1, 1, 2, 2}, rng);

  // A reused input accumulates both contributions.
  sum_all(add(x, x)).backward();
  for (double g : x.grad()) CHECK(g == 2.0);
  x.zero_grad();
  CHECK_FALSE(x.has_grad());

  CHECK_THROWS_AS(add(x, x).backward(), ShapeError);
  const T c = test::random_tensor({1, 1, 2, 2}, rng, -1, 1, false);
  CHECK_THROWS_AS(sum_all(c).backward(), StateError);
  {
    NoGradGuard g;
    CHECK_FALSE(grad_enabled());
    CHECK_THROWS_AS(sum_all(x).backward(), StateError);
  }
  CHECK(grad_enabled());

  const T d = square(x).detach();
  CHECK_FALSE(d.requires_grad());
  CHECK(d.values()[0] == x.values()[0] * x.values()[0]);

  T bad = T::from({1, 1, 1, 2}, {1.0, std::nan("")});
  CHECK_THROWS_AS(check_finite(bad, "test"), NumericError);
  CHECK_THROWS_AS(T::from({1, 1, 2, 2}, {1.0}), ShapeError);
}

TEST_CASE("float and double paths agree") {
  Rng rng(5);
  const T x = test::random_tensor({1, 3, 5, 5}, rng);
  const T w = test::random_tensor({2, 3, 3, 3}, rng);
  const auto tof = [](const T& t) {
    std::vector<float> v(t.values().begin(), t.values().end());
    return Tensor<float>::from(t.shape(), std::move(v));
  };
  const auto yd = silu(conv2d(x, w, T(), 1, 1));
  const auto yf = silu(conv2d(tof(x), tof(w), Tensor<float>(), 1, 1));
  for (std::size_t i = 0; i < yd.numel(); ++i) CHECK(std::abs(yd.values()[i] - yf.values()[i]) < 1e-5);
}
