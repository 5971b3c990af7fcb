#include <cmath>
#include <numbers>
#include <thread>

#include "mixres/harness.hpp"

namespace mixres::harness {

int case_number(CaseId id) { return static_cast<int>(id); }

CaseId case_from_number(int n) {
  if (n < 1 || n > 6) throw ConfigError("case id must be in 1..6, got " + std::to_string(n));
  return static_cast<CaseId>(n);
}

std::string case_name(CaseId id) {
  switch (id) {
    case CaseId::Streak: return "rain streak";
    case CaseId::StreakSnow: return "rain streak + snow";
    case CaseId::StreakLightHaze: return "rain streak + light haze";
    case CaseId::StreakHeavyHaze: return "rain streak + heavy haze";
    case CaseId::StreakModerateHazeRaindrop: return "rain streak + moderate haze + raindrop";
    case CaseId::StreakSnowModerateHazeRaindrop: return "rain streak + snow + moderate haze + raindrop";
  }
  throw ConfigError("unknown case id");
}

degrade::DegradationRecipe case_recipe(CaseId id, std::uint64_t seed, std::optional<float> atmospheric_light) {
  using degrade::HazeTier;
  degrade::DegradationRecipe r;
  r.seed = seed;
  r.atmospheric_light = atmospheric_light ? AtmosphericLight(*atmospheric_light) : degrade::sample_atmospheric_light(seed);
  r.streaks = degrade::StreakParams{};

  auto haze = [](HazeTier tier) {
    degrade::HazeParams h;
    h.beta = degrade::haze_beta(tier);
    return h;
  };
  switch (id) {
    case CaseId::Streak: break;
    case CaseId::StreakSnow: r.snow = degrade::SnowParams{}; break;
    case CaseId::StreakLightHaze: r.haze = haze(HazeTier::Light); break;
    case CaseId::StreakHeavyHaze: r.haze = haze(HazeTier::Heavy); break;
    case CaseId::StreakModerateHazeRaindrop:
      r.haze = haze(HazeTier::Moderate);
      r.raindrops = degrade::RaindropParams{};
      break;
    case CaseId::StreakSnowModerateHazeRaindrop:
      r.haze = haze(HazeTier::Moderate);
      r.snow = degrade::SnowParams{};
      r.raindrops = degrade::RaindropParams{};
      break;
  }
  r.validate();
  return r;
}

namespace {

std::array<float, 3> random_color(Rng& rng, int channels) {
  std::array<float, 3> c{};
  for (auto& v : c) v = static_cast<float>(rng.uniform(0.05, 0.95));
  if (channels == 1) c[1] = c[2] = c[0];
  return c;
}

void fill_gradient(ImageF& img, Rng& rng, double wave_amp) {
  const int n = img.height();
  const int C = img.channels();
  const auto c0 = random_color(rng, C);
  const auto c1 = random_color(rng, C);
  const double theta = rng.uniform(0.0, 2.0 * std::numbers::pi);
  const double dx = std::cos(theta), dy = std::sin(theta);
  const double fx = rng.uniform(0.5, 2.0), fy = rng.uniform(0.5, 2.0), phase = rng.uniform(0.0, 6.2832);
  const double span = (std::abs(dx) + std::abs(dy)) * (n - 1);
  const double origin = std::min(0.0, dx * (n - 1)) + std::min(0.0, dy * (n - 1));
  for (int y = 0; y < n; ++y)
    for (int x = 0; x < img.width(); ++x) {
      const double s = span > 0 ? (dx * x + dy * y - origin) / span : 0.0;
      const double wave = wave_amp * std::sin(2.0 * std::numbers::pi * (fx * x + fy * y) / n + phase);
      for (int c = 0; c < C; ++c) img.at(y, x, c) = static_cast<float>(c0[c] + (c1[c] - c0[c]) * s + wave);
    }
}

}  // namespace

ImageF procedural_clean(CleanKind kind, int size, int channels, std::uint64_t seed) {
  if (size < 1) throw ParameterError("procedural_clean: size must be >= 1");
  if (channels != 1 && channels != 3) throw ParameterError("procedural_clean: channels must be 1 or 3");
  Rng rng(seed);
  ImageF img(size, size, channels);
  switch (kind) {
    case CleanKind::Gradient: fill_gradient(img, rng, 0.1); break;
    case CleanKind::Shapes: {
      fill_gradient(img, rng, 0.0);
      const int shapes = rng.uniform_int(2, 4);
      for (int k = 0; k < shapes; ++k) {
        const auto col = random_color(rng, channels);
        const bool disk = rng.uniform() < 0.5;
        const double cx = rng.uniform(0.0, size), cy = rng.uniform(0.0, size);
        const double r = rng.uniform(size / 8.0, size / 3.0);
        const double hw = rng.uniform(size / 8.0, size / 3.0), hh = rng.uniform(size / 8.0, size / 3.0);
        for (int y = 0; y < size; ++y)
          for (int x = 0; x < size; ++x) {
            const double px = x + 0.5 - cx, py = y + 0.5 - cy;
            const bool inside = disk ? px * px + py * py <= r * r : std::abs(px) <= hw && std::abs(py) <= hh;
            if (inside)
              for (int c = 0; c < channels; ++c) img.at(y, x, c) = col[c];
          }
      }
      break;
    }
    case CleanKind::Checker: {
      const auto a = random_color(rng, channels);
      const auto b = random_color(rng, channels);
      const int cell = rng.uniform_int(4, 8);
      const int ox = rng.uniform_int(0, cell - 1), oy = rng.uniform_int(0, cell - 1);
      for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
          const bool odd = (((x + ox) / cell) + ((y + oy) / cell)) % 2 == 1;
          for (int c = 0; c < channels; ++c) img.at(y, x, c) = odd ? a[c] : b[c];
        }
      break;
    }
  }
  img.clamp01();
  return img;
}

ImageF procedural_clean(int size, int channels, std::uint64_t seed) {
  Rng rng(derive_seed(seed, 0xC1EA));
  const auto kind = static_cast<CleanKind>(rng.uniform_int(0, 2));
  return procedural_clean(kind, size, channels, derive_seed(seed, 0xC1EB));
}

void parallel_for(int n, int threads, const std::function<void(int)>& fn) {
  if (n <= 0) return;
  const int workers = std::max(1, std::min(threads, n));
  if (workers == 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::exception_ptr> errors(workers);
  std::vector<std::thread> pool;
  for (int w = 0; w < workers; ++w)
    pool.emplace_back([&, w] {
      try {
        for (int i = w; i < n; i += workers) fn(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace mixres::harness
