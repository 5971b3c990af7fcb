#include "mixres/degradation.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "mixres/rng.hpp"

namespace mixres::degrade {

namespace {

void require_congruent(const ImageF& a, int h, int w, const char* what) {
  if (a.height() != h || a.width() != w)
    throw ShapeError(std::string(what) + ": image and map dimensions differ");
}

double point_segment_distance(double px, double py, const Segment& s) {
  const double dx = s.x1 - s.x0;
  const double dy = s.y1 - s.y0;
  const double len2 = dx * dx + dy * dy;
  double u = 0.0;
  if (len2 > 0.0) u = std::clamp(((px - s.x0) * dx + (py - s.y0) * dy) / len2, 0.0, 1.0);
  const double cx = s.x0 + u * dx - px;
  const double cy = s.y0 + u * dy - py;
  return std::sqrt(cx * cx + cy * cy);
}

// Box-filter coverage estimate of a shape edge, then the 0.5 threshold.
float aa_then_threshold(double half_extent, double dist) {
  const double cov = std::clamp(half_extent + 0.5 - dist, 0.0, 1.0);
  return cov >= 0.5 ? 1.0f : 0.0f;
}

}  // namespace

ImageF reflect_g(const ImageF& a, const DegMask& b, const AtmosphericLight& A) {
  require_congruent(a, b.height(), b.width(), "reflect_g");
  ImageF out(a.height(), a.width(), a.channels());
  const int C = a.channels();
  for (std::size_t p = 0; p < a.pixel_count(); ++p) {
    const float m = b[p];
    for (int c = 0; c < C; ++c) {
      const std::size_t i = p * C + c;
      out.data()[i] = std::clamp(a.data()[i] * (1.0f - m) + A[c] * m, 0.0f, 1.0f);
    }
  }
  return out;
}

ImageF reflect_t(const ImageF& a, const TransmissionMap& t, const AtmosphericLight& A) {
  require_congruent(a, t.height(), t.width(), "reflect_t");
  ImageF out(a.height(), a.width(), a.channels());
  const int C = a.channels();
  for (std::size_t p = 0; p < a.pixel_count(); ++p) {
    const float tv = t[p];
    for (int c = 0; c < C; ++c) {
      const std::size_t i = p * C + c;
      out.data()[i] = std::clamp(a.data()[i] * tv + A[c] * (1.0f - tv), 0.0f, 1.0f);
    }
  }
  return out;
}

TransmissionMap transmission_from_depth(const DepthMap& depth, double beta) {
  if (!(beta > 0.0) || !std::isfinite(beta)) throw ParameterError("haze beta must be > 0");
  TransmissionMap t(depth.height(), depth.width());
  for (std::size_t i = 0; i < depth.size(); ++i) {
    const double d = depth[i];
    if (!std::isfinite(d) || d < 0.0) throw ParameterError("depth must be finite and >= 0");
    // Keep t strictly positive even for extreme beta*d.
    t[i] = std::max(static_cast<float>(std::exp(-beta * d)), std::numeric_limits<float>::min());
  }
  return t;
}

DepthMap ramp_depth(int height, int width) {
  DepthMap d(height, width);
  const double span = static_cast<double>((width - 1) + (height - 1));
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) d.at(y, x) = span > 0 ? static_cast<float>((x + y) / span) : 0.0f;
  return d;
}

std::vector<Segment> streak_layout(int height, int width, const StreakParams& params, std::uint64_t seed) {
  if (params.count < 0) throw ParameterError("streak count must be >= 0");
  if (params.length_px < 0 || params.thickness_px <= 0) throw ParameterError("invalid streak geometry");
  Rng rng(seed);
  const double theta = params.angle_deg * std::numbers::pi / 180.0;
  const double dx = std::sin(theta) * params.length_px * 0.5;
  const double dy = std::cos(theta) * params.length_px * 0.5;
  std::vector<Segment> segs;
  segs.reserve(params.count);
  for (int k = 0; k < params.count; ++k) {
    const double cx = rng.uniform(0.0, width);
    const double cy = rng.uniform(0.0, height);
    segs.push_back({cx - dx, cy - dy, cx + dx, cy + dy, params.thickness_px});
  }
  return segs;
}

std::vector<Disk> snow_layout(int height, int width, const SnowParams& params, std::uint64_t seed) {
  if (params.flake_count < 0) throw ParameterError("flake count must be >= 0");
  if (!(params.radius_min_px > 0) || params.radius_max_px < params.radius_min_px)
    throw ParameterError("invalid snow radius range");
  Rng rng(seed);
  std::vector<Disk> disks;
  disks.reserve(params.flake_count);
  for (int k = 0; k < params.flake_count; ++k) {
    const double cx = rng.uniform(0.0, width);
    const double cy = rng.uniform(0.0, height);
    const double r = rng.uniform(params.radius_min_px, params.radius_max_px);
    disks.push_back({cx, cy, r});
  }
  return disks;
}

std::vector<Disk> raindrop_layout(int height, int width, const RaindropParams& params, std::uint64_t seed) {
  if (params.drop_count < 0) throw ParameterError("drop count must be >= 0");
  if (!(params.radius_min_px > 0) || params.radius_max_px < params.radius_min_px)
    throw ParameterError("invalid raindrop radius range");
  return snow_layout(height, width, SnowParams{params.drop_count, params.radius_min_px, params.radius_max_px},
                     seed);
}

DegMask render_streaks(int height, int width, const std::vector<Segment>& segments) {
  DegMask mask(height, width);
  for (const auto& s : segments) {
    const double pad = s.thickness * 0.5 + 1.0;
    const int x0 = std::max(0, static_cast<int>(std::floor(std::min(s.x0, s.x1) - pad)));
    const int x1 = std::min(width - 1, static_cast<int>(std::ceil(std::max(s.x0, s.x1) + pad)));
    const int y0 = std::max(0, static_cast<int>(std::floor(std::min(s.y0, s.y1) - pad)));
    const int y1 = std::min(height - 1, static_cast<int>(std::ceil(std::max(s.y0, s.y1) + pad)));
    for (int y = y0; y <= y1; ++y)
      for (int x = x0; x <= x1; ++x) {
        const float v = aa_then_threshold(s.thickness * 0.5, point_segment_distance(x + 0.5, y + 0.5, s));
        mask.at(y, x) = std::max(mask.at(y, x), v);
      }
  }
  return mask;
}

DegMask render_disks(int height, int width, const std::vector<Disk>& disks) {
  DegMask mask(height, width);
  for (const auto& d : disks) {
    const int x0 = std::max(0, static_cast<int>(std::floor(d.cx - d.radius - 1)));
    const int x1 = std::min(width - 1, static_cast<int>(std::ceil(d.cx + d.radius + 1)));
    const int y0 = std::max(0, static_cast<int>(std::floor(d.cy - d.radius - 1)));
    const int y1 = std::min(height - 1, static_cast<int>(std::ceil(d.cy + d.radius + 1)));
    for (int y = y0; y <= y1; ++y)
      for (int x = x0; x <= x1; ++x) {
        const double dist = std::hypot(x + 0.5 - d.cx, y + 0.5 - d.cy);
        mask.at(y, x) = std::max(mask.at(y, x), aa_then_threshold(d.radius, dist));
      }
  }
  return mask;
}

double metaball_field(const std::vector<Disk>& drops, double x, double y) {
  constexpr double kFieldClip = 1e6;
  double sum = 0.0;
  for (const auto& d : drops) {
    const double r2 = (x - d.cx) * (x - d.cx) + (y - d.cy) * (y - d.cy);
    const double r02 = d.radius * d.radius;
    sum += (r2 * kFieldClip <= r02) ? kFieldClip : r02 / r2;
  }
  return sum;
}

DegMask render_metaballs(int height, int width, const std::vector<Disk>& drops, double threshold) {
  if (!(threshold > 0.0)) throw ParameterError("metaball threshold must be > 0");
  DegMask mask(height, width);
  if (drops.empty()) return mask;
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x)
      mask.at(y, x) = metaball_field(drops, x + 0.5, y + 0.5) >= threshold ? 1.0f : 0.0f;
  return mask;
}

DegMask gen_streak_mask(int height, int width, const StreakParams& params, std::uint64_t seed) {
  return render_streaks(height, width, streak_layout(height, width, params, seed));
}

DegMask gen_snow_mask(int height, int width, const SnowParams& params, std::uint64_t seed) {
  return render_disks(height, width, snow_layout(height, width, params, seed));
}

DegMask gen_raindrop_mask(int height, int width, const RaindropParams& params, std::uint64_t seed) {
  if (!(params.metaball_threshold > 0.0)) throw ParameterError("metaball threshold must be > 0");
  return render_metaballs(height, width, raindrop_layout(height, width, params, seed),
                          params.metaball_threshold);
}

std::string to_string(MaskKind kind) {
  switch (kind) {
    case MaskKind::Streak: return "streak";
    case MaskKind::Snow: return "snow";
    case MaskKind::Raindrop: return "raindrop";
  }
  return "unknown";
}

MaskKind mask_kind_from_string(const std::string& name) {
  if (name == "streak") return MaskKind::Streak;
  if (name == "snow") return MaskKind::Snow;
  if (name == "raindrop") return MaskKind::Raindrop;
  throw ParameterError("unknown mask kind: " + name);
}

double haze_beta(HazeTier tier) {
  switch (tier) {
    case HazeTier::Light: return 0.4;
    case HazeTier::Moderate: return 0.8;
    case HazeTier::Heavy: return 1.6;
  }
  return 0.8;
}

int DegradationRecipe::mask_degradation_count() const {
  return static_cast<int>(streaks.has_value()) + static_cast<int>(snow.has_value()) +
         static_cast<int>(raindrops.has_value());
}

bool DegradationRecipe::enabled(MaskKind kind) const {
  switch (kind) {
    case MaskKind::Streak: return streaks.has_value();
    case MaskKind::Snow: return snow.has_value();
    case MaskKind::Raindrop: return raindrops.has_value();
  }
  return false;
}

void DegradationRecipe::validate() const {
  if (haze) {
    if (!(haze->beta > 0.0) || !std::isfinite(haze->beta)) throw ParameterError("haze beta must be > 0");
    if (haze->depth_source == DepthSource::Constant && !(haze->constant_depth >= 0.0f))
      throw ParameterError("constant depth must be >= 0");
    if (haze->depth_source == DepthSource::Provided && !haze->depth)
      throw ParameterError("haze depth_source=provided but no depth map loaded");
  }
  if (streaks && (streaks->count < 0 || streaks->thickness_px <= 0 || streaks->length_px < 0))
    throw ParameterError("invalid streak parameters");
  if (snow && (snow->flake_count < 0 || !(snow->radius_min_px > 0) || snow->radius_max_px < snow->radius_min_px))
    throw ParameterError("invalid snow parameters");
  if (raindrops && (raindrops->drop_count < 0 || !(raindrops->radius_min_px > 0) ||
                    raindrops->radius_max_px < raindrops->radius_min_px || !(raindrops->metaball_threshold > 0)))
    throw ParameterError("invalid raindrop parameters");
  for (std::size_t i = 0; i < apply_order.size(); ++i)
    for (std::size_t j = i + 1; j < apply_order.size(); ++j)
      if (apply_order[i] == apply_order[j]) throw ParameterError("apply_order lists a degradation twice");
  for (MaskKind k : {MaskKind::Streak, MaskKind::Snow, MaskKind::Raindrop})
    if (enabled(k) && std::find(apply_order.begin(), apply_order.end(), k) == apply_order.end())
      throw ParameterError("enabled degradation missing from apply_order: " + to_string(k));
}

AtmosphericLight sample_atmospheric_light(std::uint64_t seed) {
  Rng rng(derive_seed(seed, 0xA1));
  return AtmosphericLight(static_cast<float>(rng.uniform(0.7, 1.0)));
}

Composite compose_mixed(const ImageF& clean, const DegradationRecipe& recipe) {
  recipe.validate();
  const int H = clean.height();
  const int W = clean.width();
  const AtmosphericLight& A = recipe.atmospheric_light;

  Composite out;
  out.degraded = clean;
  if (recipe.haze) {
    DepthMap depth;
    switch (recipe.haze->depth_source) {
      case DepthSource::Ramp: depth = ramp_depth(H, W); break;
      case DepthSource::Constant: depth = DepthMap(H, W, recipe.haze->constant_depth); break;
      case DepthSource::Provided: depth = *recipe.haze->depth; break;
    }
    if (depth.height() != H || depth.width() != W) throw ShapeError("depth map does not match image");
    out.transmission = transmission_from_depth(depth, recipe.haze->beta);
    out.degraded = reflect_t(out.degraded, *out.transmission, A);
  }

  for (MaskKind kind : recipe.apply_order) {
    if (!recipe.enabled(kind)) continue;
    DegMask m;
    switch (kind) {
      case MaskKind::Streak: m = gen_streak_mask(H, W, *recipe.streaks, derive_seed(recipe.seed, 1)); break;
      case MaskKind::Snow: m = gen_snow_mask(H, W, *recipe.snow, derive_seed(recipe.seed, 2)); break;
      case MaskKind::Raindrop: m = gen_raindrop_mask(H, W, *recipe.raindrops, derive_seed(recipe.seed, 3)); break;
    }
    if (recipe.mask_mode == MaskMode::Sequential) out.degraded = reflect_g(out.degraded, m, A);
    out.masks.emplace_back(kind, std::move(m));
  }

  if (out.masks.empty()) {
    out.union_mask = DegMask(H, W);
  } else {
    std::vector<DegMask> ms;
    for (const auto& [kind, m] : out.masks) ms.push_back(m);
    out.union_mask = mask_union(ms);
    if (recipe.mask_mode == MaskMode::Union) out.degraded = reflect_g(out.degraded, out.union_mask, A);
  }
  return out;
}

DegMask predict_mask_baseline(const ImageF& degraded, const AtmosphericLight& A, double threshold) {
  if (!(threshold > 0.0 && threshold < 1.0)) throw ParameterError("mask threshold must be in (0,1)");
  DegMask m(degraded.height(), degraded.width());
  const int C = degraded.channels();
  for (std::size_t p = 0; p < degraded.pixel_count(); ++p) {
    bool near = true;
    for (int c = 0; c < C && near; ++c)
      near = std::abs(static_cast<double>(degraded.data()[p * C + c]) - A[c]) < threshold;
    m[p] = near ? 1.0f : 0.0f;
  }
  return m;
}

double mask_iou(const DegMask& a, const DegMask& b) {
  if (!a.same_dims(b)) throw ShapeError("mask_iou: dimension mismatch");
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const bool x = a[i] > 0.5f, y = b[i] > 0.5f;
    inter += (x && y);
    uni += (x || y);
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

namespace {

std::string depth_source_name(DepthSource s) {
  switch (s) {
    case DepthSource::Ramp: return "ramp";
    case DepthSource::Constant: return "constant";
    case DepthSource::Provided: return "provided";
  }
  return "ramp";
}

DepthSource depth_source_from(const std::string& s) {
  if (s == "ramp") return DepthSource::Ramp;
  if (s == "constant") return DepthSource::Constant;
  if (s == "provided") return DepthSource::Provided;
  throw ParameterError("unknown depth_source: " + s);
}

}  // namespace

nlohmann::json to_json(const DegradationRecipe& r) {
  nlohmann::json j;
  if (r.haze) {
    j["haze"] = {{"beta", r.haze->beta}, {"depth_source", depth_source_name(r.haze->depth_source)}};
    if (r.haze->depth_source == DepthSource::Constant) j["haze"]["constant_depth"] = r.haze->constant_depth;
    if (!r.haze->depth_path.empty()) j["haze"]["depth_path"] = r.haze->depth_path;
  }
  if (r.streaks)
    j["streaks"] = {{"count", r.streaks->count},
                    {"length_px", r.streaks->length_px},
                    {"angle_deg", r.streaks->angle_deg},
                    {"thickness_px", r.streaks->thickness_px}};
  if (r.snow)
    j["snow"] = {{"flake_count", r.snow->flake_count},
                 {"radius_min_px", r.snow->radius_min_px},
                 {"radius_max_px", r.snow->radius_max_px}};
  if (r.raindrops)
    j["raindrops"] = {{"drop_count", r.raindrops->drop_count},
                      {"radius_min_px", r.raindrops->radius_min_px},
                      {"radius_max_px", r.raindrops->radius_max_px},
                      {"metaball_threshold", r.raindrops->metaball_threshold}};
  if (r.atmospheric_light.per_channel())
    j["atmospheric_light"] = r.atmospheric_light.rgb();
  else
    j["atmospheric_light"] = r.atmospheric_light.scalar();
  j["seed"] = r.seed;
  j["apply_order"] = nlohmann::json::array();
  for (MaskKind k : r.apply_order) j["apply_order"].push_back(to_string(k));
  j["mask_mode"] = r.mask_mode == MaskMode::Union ? "union" : "sequential";
  return j;
}

DegradationRecipe recipe_from_json(const nlohmann::json& j) {
  try {
    DegradationRecipe r;
    if (j.contains("haze") && !j["haze"].is_null()) {
      const auto& h = j["haze"];
      HazeParams hp;
      hp.beta = h.at("beta").get<double>();
      hp.depth_source = depth_source_from(h.value("depth_source", std::string("ramp")));
      hp.constant_depth = h.value("constant_depth", 1.0f);
      hp.depth_path = h.value("depth_path", std::string());
      r.haze = hp;
    }
    if (j.contains("streaks") && !j["streaks"].is_null()) {
      const auto& s = j["streaks"];
      StreakParams p;
      p.count = s.value("count", p.count);
      p.length_px = s.value("length_px", p.length_px);
      p.angle_deg = s.value("angle_deg", p.angle_deg);
      p.thickness_px = s.value("thickness_px", p.thickness_px);
      r.streaks = p;
    }
    if (j.contains("snow") && !j["snow"].is_null()) {
      const auto& s = j["snow"];
      SnowParams p;
      p.flake_count = s.value("flake_count", p.flake_count);
      p.radius_min_px = s.value("radius_min_px", p.radius_min_px);
      p.radius_max_px = s.value("radius_max_px", p.radius_max_px);
      r.snow = p;
    }
    if (j.contains("raindrops") && !j["raindrops"].is_null()) {
      const auto& s = j["raindrops"];
      RaindropParams p;
      p.drop_count = s.value("drop_count", p.drop_count);
      p.radius_min_px = s.value("radius_min_px", p.radius_min_px);
      p.radius_max_px = s.value("radius_max_px", p.radius_max_px);
      p.metaball_threshold = s.value("metaball_threshold", p.metaball_threshold);
      r.raindrops = p;
    }
    if (j.contains("atmospheric_light")) {
      const auto& a = j["atmospheric_light"];
      if (a.is_array()) {
        if (a.size() != 3) throw ParameterError("atmospheric_light array must have 3 entries");
        r.atmospheric_light = AtmosphericLight(std::array<float, 3>{a[0].get<float>(), a[1].get<float>(), a[2].get<float>()});
      } else {
        r.atmospheric_light = AtmosphericLight(a.get<float>());
      }
    }
    r.seed = j.value("seed", std::uint64_t{0});
    if (j.contains("apply_order")) {
      r.apply_order.clear();
      for (const auto& k : j["apply_order"]) r.apply_order.push_back(mask_kind_from_string(k.get<std::string>()));
    }
    const std::string mode = j.value("mask_mode", std::string("sequential"));
    if (mode == "union")
      r.mask_mode = MaskMode::Union;
    else if (mode == "sequential")
      r.mask_mode = MaskMode::Sequential;
    else
      throw ParameterError("unknown mask_mode: " + mode);
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw ParameterError(std::string("malformed recipe JSON: ") + e.what());
  }
}

}  // namespace mixres::degrade
