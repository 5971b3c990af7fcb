#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <queue>

#include "mixres/degradation.hpp"
#include "mixres/rng.hpp"
#include "test_util.hpp"

using namespace mixres;
using namespace mixres::degrade;

namespace {

// Direct scalar evaluation of the two blends, in double.
double blend_mask(double a, double b, double A) { return std::clamp(a * (1 - b) + A * b, 0.0, 1.0); }
double blend_trans(double a, double t, double A) { return std::clamp(a * t + A * (1 - t), 0.0, 1.0); }

int count_components(const DegMask& m) {
  const int H = m.height(), W = m.width();
  std::vector<int> seen(m.size(), 0);
  int comps = 0;
  for (int y0 = 0; y0 < H; ++y0)
    for (int x0 = 0; x0 < W; ++x0) {
      if (m.at(y0, x0) < 0.5f || seen[y0 * W + x0]) continue;
      ++comps;
      std::queue<std::pair<int, int>> q;
      q.push({y0, x0});
      seen[y0 * W + x0] = 1;
      while (!q.empty()) {
        auto [y, x] = q.front();
        q.pop();
        const int nb[4][2] = {{1, 0}, {-1, 0}, {0, 1}, {0, -1}};
        for (auto& d : nb) {
          const int yy = y + d[0], xx = x + d[1];
          if (yy < 0 || xx < 0 || yy >= H || xx >= W || seen[yy * W + xx] || m.at(yy, xx) < 0.5f) continue;
          seen[yy * W + xx] = 1;
          q.push({yy, xx});
        }
      }
    }
  return comps;
}

}  // namespace

TEST_CASE("reflect_g identities and scalar oracle") {
  Rng rng(11);
  const ImageF a = test::random_image(40, 25, 3, rng);
  const AtmosphericLight A(0.8f);
  CHECK(reflect_g(a, DegMask(40, 25, 0.0f), A) == a);
  const ImageF full = reflect_g(a, DegMask(40, 25, 1.0f), A);
  for (float v : full.data()) CHECK(v == 0.8f);

  const ImageF half = reflect_g(ImageF(4, 4, 3, 0.2f), DegMask(4, 4, 0.5f), A);
  for (float v : half.data()) CHECK(v == doctest::Approx(0.5).epsilon(1e-7));

  DegMask b(40, 25);
  for (auto& v : b.data()) v = static_cast<float>(rng.uniform());
  const ImageF out = reflect_g(a, b, A);
  for (int y = 0; y < 40; ++y)
    for (int x = 0; x < 25; ++x)
      for (int c = 0; c < 3; ++c) CHECK(out.at(y, x, c) == doctest::Approx(blend_mask(a.at(y, x, c), b.at(y, x), 0.8)).epsilon(1e-6));
}

TEST_CASE("reflect_t identities, opaque limit and scalar oracle") {
  Rng rng(12);
  const ImageF a = test::random_image(16, 16, 3, rng);
  const AtmosphericLight A(std::array<float, 3>{0.9f, 0.8f, 0.7f});
  CHECK(reflect_t(a, TransmissionMap(16, 16, 1.0f), A) == a);
  const ImageF opaque = reflect_t(a, TransmissionMap(16, 16, 1e-6f), A);
  for (int y = 0; y < 16; ++y)
    for (int x = 0; x < 16; ++x)
      for (int c = 0; c < 3; ++c) CHECK(std::abs(opaque.at(y, x, c) - A[c]) < 1e-5);
  const ImageF v = reflect_t(ImageF(3, 3, 1, 0.4f), TransmissionMap(3, 3, 0.5f), AtmosphericLight(1.0f));
  for (float p : v.data()) CHECK(p == doctest::Approx(0.7).epsilon(1e-7));

  TransmissionMap t(16, 16);
  for (auto& x : t.data()) x = static_cast<float>(rng.uniform(1e-3, 1.0));
  const ImageF out = reflect_t(a, t, A);
  for (int y = 0; y < 16; ++y)
    for (int x = 0; x < 16; ++x)
      for (int c = 0; c < 3; ++c) CHECK(out.at(y, x, c) == doctest::Approx(blend_trans(a.at(y, x, c), t.at(y, x), A[c])).epsilon(1e-6));
}

TEST_CASE("compositors reject mismatched dimensions") {
  const ImageF a(8, 8, 3);
  CHECK_THROWS_AS(reflect_g(a, DegMask(8, 9), AtmosphericLight(0.5f)), ShapeError);
  CHECK_THROWS_AS(reflect_t(a, TransmissionMap(7, 8), AtmosphericLight(0.5f)), ShapeError);
}

TEST_CASE("compositor outputs are convex combinations of input and A") {
  Rng rng(13);
  for (int trial = 0; trial < 20; ++trial) {
    const ImageF a = test::random_image(12, 12, 3, rng);
    const float Av = static_cast<float>(rng.uniform());
    DegMask b(12, 12);
    TransmissionMap t(12, 12);
    for (std::size_t i = 0; i < b.size(); ++i) {
      b[i] = static_cast<float>(rng.uniform());
      t[i] = static_cast<float>(rng.uniform(1e-4, 1.0));
    }
    for (const ImageF& out : {reflect_g(a, b, AtmosphericLight(Av)), reflect_t(a, t, AtmosphericLight(Av))})
      for (std::size_t i = 0; i < out.size(); ++i) {
        const float lo = std::min(a.data()[i], Av), hi = std::max(a.data()[i], Av);
        CHECK(out.data()[i] >= lo - 1e-6f);
        CHECK(out.data()[i] <= hi + 1e-6f);
      }
  }
}

TEST_CASE("the three mask models share one blend") {
  Rng rng(14);
  const ImageF a = test::random_image(10, 10, 3, rng);
  const DegMask m = gen_snow_mask(10, 10, SnowParams{6, 1.0, 2.5}, 5);
  const AtmosphericLight A(0.9f);
  CHECK(rain_streak_model(a, m, A) == reflect_g(a, m, A));
  CHECK(raindrop_model(a, m, A) == reflect_g(a, m, A));
  CHECK(snow_model(a, m, A) == reflect_g(a, m, A));
  const TransmissionMap t = transmission_from_depth(ramp_depth(10, 10), 0.8);
  CHECK(haze_model(a, t, A) == reflect_t(a, t, A));
}

TEST_CASE("transmission from depth") {
  const auto one = transmission_from_depth(DepthMap(4, 4, 0.0f), 1.3);
  for (float v : one.data()) CHECK(v == 1.0f);
  const auto half = transmission_from_depth(DepthMap(4, 4, 1.0f), std::log(2.0));
  for (float v : half.data()) CHECK(v == doctest::Approx(0.5).epsilon(1e-7));
  CHECK_THROWS_AS(transmission_from_depth(DepthMap(2, 2, 1.0f), 0.0), ParameterError);
  CHECK_THROWS_AS(transmission_from_depth(DepthMap(2, 2, 1.0f), -1.0), ParameterError);

  const DepthMap d = ramp_depth(9, 13);
  const auto t1 = transmission_from_depth(d, 0.4);
  const auto t2 = transmission_from_depth(d, 1.6);
  for (std::size_t i = 0; i < d.size(); ++i) {
    CHECK(t1[i] > 0.0f);
    CHECK(t1[i] <= 1.0f);
    CHECK(t2[i] <= t1[i]);
  }
  for (int y = 0; y < 9; ++y)
    for (int x = 1; x < 13; ++x) CHECK(t1.at(y, x) <= t1.at(y, x - 1));
  // Extreme density still yields a strictly positive transmission.
  CHECK(transmission_from_depth(DepthMap(1, 1, 1.0f), 1e6)[0] > 0.0f);
}

TEST_CASE("ramp depth tiers give distinct mean transmissions") {
  const DepthMap d = ramp_depth(64, 64);
  double prev = 1.0;
  for (auto tier : {HazeTier::Light, HazeTier::Moderate, HazeTier::Heavy}) {
    const auto t = transmission_from_depth(d, haze_beta(tier));
    double mean = 0.0;
    for (float v : t.data()) mean += v;
    mean /= static_cast<double>(t.size());
    // The diagonal ramp is the mean of two independent uniforms, so
    // E[exp(-beta u)] = ((1 - exp(-beta/2)) / (beta/2))^2 in the continuum.
    const double h = haze_beta(tier) / 2;
    const double expected = std::pow((1 - std::exp(-h)) / h, 2);
    CHECK(mean == doctest::Approx(expected).epsilon(0.02));
    CHECK(mean < prev);
    prev = mean;
  }
}

TEST_CASE("streak masks: empty, deterministic, binary, expected coverage") {
  StreakParams p;
  p.count = 0;
  CHECK(coverage(gen_streak_mask(32, 32, p, 1)) == 0.0);
  p = StreakParams{};
  CHECK(gen_streak_mask(32, 32, p, 99) == gen_streak_mask(32, 32, p, 99));
  CHECK(is_binary(gen_streak_mask(32, 32, p, 99)));

  const double expected = p.count * p.length_px * p.thickness_px / (32.0 * 32.0);
  double mean = 0.0;
  for (std::uint64_t s = 0; s < 100; ++s) mean += coverage(gen_streak_mask(32, 32, p, s));
  mean /= 100.0;
  CHECK(mean >= 0.5 * expected);
  CHECK(mean <= 2.0 * expected);
}

TEST_CASE("snow masks: every set pixel lies inside a generated flake") {
  SnowParams p{0, 1.0, 2.0};
  CHECK(coverage(gen_snow_mask(24, 24, p, 3)) == 0.0);
  p = SnowParams{14, 0.8, 3.0};
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const DegMask m = gen_snow_mask(24, 24, p, seed);
    CHECK(m == gen_snow_mask(24, 24, p, seed));
    CHECK(is_binary(m));
    const auto disks = snow_layout(24, 24, p, seed);
    for (int y = 0; y < 24; ++y)
      for (int x = 0; x < 24; ++x) {
        bool inside = false;
        for (const auto& d : disks) inside = inside || std::hypot(x + 0.5 - d.cx, y + 0.5 - d.cy) <= d.radius;
        CHECK((m.at(y, x) > 0.5f) == inside);
      }
  }
}

TEST_CASE("raindrop masks follow the metaball level set") {
  RaindropParams p;
  p.drop_count = 0;
  CHECK(coverage(gen_raindrop_mask(32, 32, p, 1)) == 0.0);
  CHECK_THROWS_AS(gen_raindrop_mask(8, 8, RaindropParams{1, 1, 2, 0.0}, 1), ParameterError);

  // One drop at threshold 1: exactly the disk of its radius.
  const std::vector<Disk> one{{15.3, 16.1, 4.2}};
  const DegMask single = render_metaballs(32, 32, one, 1.0);
  for (int y = 0; y < 32; ++y)
    for (int x = 0; x < 32; ++x)
      CHECK((single.at(y, x) > 0.5f) == (std::hypot(x + 0.5 - 15.3, y + 0.5 - 16.1) <= 4.2));

  // Two drops closer than r1 + r2 merge into one blob.
  const std::vector<Disk> two{{10.0, 16.0, 3.5}, {16.5, 16.0, 3.5}};
  CHECK(count_components(render_metaballs(32, 32, two, 1.0)) == 1);
  const std::vector<Disk> apart{{6.0, 16.0, 3.0}, {26.0, 16.0, 3.0}};
  CHECK(count_components(render_metaballs(32, 32, apart, 1.0)) == 2);

  p = RaindropParams{};
  CHECK(gen_raindrop_mask(32, 32, p, 7) == gen_raindrop_mask(32, 32, p, 7));
}

TEST_CASE("compose_mixed") {
  Rng rng(21);
  const ImageF J = test::random_image(32, 32, 3, rng);

  SUBCASE("empty recipe is the identity") {
    DegradationRecipe r;
    const auto out = compose_mixed(J, r);
    CHECK(out.degraded == J);
    CHECK(coverage(out.union_mask) == 0.0);
    CHECK(r.mask_degradation_count() == 0);
  }
  SUBCASE("haze only equals the transmission blend") {
    DegradationRecipe r;
    r.haze = HazeParams{};
    r.atmospheric_light = AtmosphericLight(0.9f);
    const auto out = compose_mixed(J, r);
    const auto t = transmission_from_depth(ramp_depth(32, 32), r.haze->beta);
    CHECK(out.degraded == reflect_t(J, t, r.atmospheric_light));
    REQUIRE(out.transmission.has_value());
    CHECK(*out.transmission == t);
  }
  SUBCASE("pixels under a streak equal A regardless of haze") {
    DegradationRecipe r;
    r.haze = HazeParams{};
    r.streaks = StreakParams{};
    r.atmospheric_light = AtmosphericLight(0.8f);
    r.seed = 5;
    const auto out = compose_mixed(J, r);
    const DegMask& streak = out.masks.front().second;
    int under = 0;
    for (int y = 0; y < 32; ++y)
      for (int x = 0; x < 32; ++x)
        if (streak.at(y, x) > 0.5f) {
          ++under;
          for (int c = 0; c < 3; ++c) CHECK(out.degraded.at(y, x, c) == 0.8f);
        }
    CHECK(under > 0);
  }
  SUBCASE("sequential order and union mask") {
    DegradationRecipe r;
    r.streaks = StreakParams{};
    r.snow = SnowParams{};
    r.raindrops = RaindropParams{};
    r.seed = 17;
    const auto out = compose_mixed(J, r);
    REQUIRE(out.masks.size() == 3);
    CHECK(out.masks[0].first == MaskKind::Streak);
    CHECK(out.masks[1].first == MaskKind::Snow);
    CHECK(out.masks[2].first == MaskKind::Raindrop);
    for (std::size_t i = 0; i < out.union_mask.size(); ++i) {
      float mx = 0.0f;
      for (const auto& [k, m] : out.masks) mx = std::max(mx, m[i]);
      CHECK(out.union_mask[i] == mx);
    }
    // Binary masks give the same image whether applied one by one or as a union.
    auto u = r;
    u.mask_mode = MaskMode::Union;
    CHECK(compose_mixed(J, u).degraded == out.degraded);
    CHECK(compose_mixed(J, r).degraded == out.degraded);
  }
  SUBCASE("invalid recipes are rejected") {
    DegradationRecipe r;
    r.haze = HazeParams{};
    r.haze->beta = 0.0;
    CHECK_THROWS_AS(compose_mixed(J, r), ParameterError);
    DegradationRecipe dup;
    dup.apply_order = {MaskKind::Streak, MaskKind::Streak};
    CHECK_THROWS_AS(compose_mixed(J, dup), ParameterError);
  }
}

TEST_CASE("baseline mask predictor") {
  const AtmosphericLight A(0.9f);
  const ImageF covered = reflect_g(ImageF(16, 16, 3, 0.3f), DegMask(16, 16, 1.0f), A);
  for (double thr : {0.001, 0.1, 0.5}) CHECK(coverage(predict_mask_baseline(covered, A, thr)) == 1.0);

  // Every intensity at most A - 2*threshold: nothing is flagged.
  Rng rng(3);
  ImageF dark(16, 16, 3);
  for (float& v : dark.data()) v = static_cast<float>(rng.uniform(0.0, 0.9 - 2 * 0.05));
  CHECK(coverage(predict_mask_baseline(dark, A, 0.05)) == 0.0);
  CHECK_THROWS_AS(predict_mask_baseline(dark, A, 0.0), ParameterError);
  CHECK_THROWS_AS(predict_mask_baseline(dark, A, 1.0), ParameterError);

  // Seeded streak fixtures on content kept away from A.
  double iou = 0.0;
  for (std::uint64_t s = 0; s < 10; ++s) {
    ImageF J(32, 32, 3);
    for (float& v : J.data()) v = static_cast<float>(rng.uniform(0.05, 0.6));
    DegradationRecipe r;
    r.streaks = StreakParams{};
    r.atmospheric_light = A;
    r.seed = s;
    const auto out = compose_mixed(J, r);
    iou += mask_iou(predict_mask_baseline(out.degraded, A, 0.02), out.union_mask);
  }
  CHECK(iou / 10 >= 0.5);
}

TEST_CASE("recipe JSON round trip") {
  DegradationRecipe r;
  r.haze = HazeParams{};
  r.haze->beta = 1.6;
  r.streaks = StreakParams{7, 5.5, -12.0, 1.5};
  r.raindrops = RaindropParams{};
  r.atmospheric_light = AtmosphericLight(std::array<float, 3>{0.71f, 0.82f, 0.93f});
  r.seed = 0xfeedbeefcafeULL;
  r.apply_order = {MaskKind::Raindrop, MaskKind::Streak, MaskKind::Snow};
  const auto back = recipe_from_json(to_json(r));
  CHECK(to_json(back) == to_json(r));
  Rng rng(1);
  const ImageF J = test::random_image(16, 16, 3, rng);
  CHECK(compose_mixed(J, back).degraded == compose_mixed(J, r).degraded);
}
