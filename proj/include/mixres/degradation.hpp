#pragma once

// Physical mixed-weather degradation model: masks for rain streaks, snow
// and raindrops, transmission maps for haze, and the two compositing
// primitives that blend scene content with the atmospheric light.

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "mixres/image.hpp"

namespace mixres::degrade {

// Mask blend: a*(1-b) + A*b, mask broadcast across channels.
ImageF reflect_g(const ImageF& a, const DegMask& b, const AtmosphericLight& A);
// Transmission blend: a*t + A*(1-t).
ImageF reflect_t(const ImageF& a, const TransmissionMap& t, const AtmosphericLight& A);

// Single-degradation models. All three mask models are the same blend.
inline ImageF rain_streak_model(const ImageF& clean, const DegMask& streaks, const AtmosphericLight& A) {
  return reflect_g(clean, streaks, A);
}
inline ImageF raindrop_model(const ImageF& clean, const DegMask& drops, const AtmosphericLight& A) {
  return reflect_g(clean, drops, A);
}
inline ImageF snow_model(const ImageF& clean, const DegMask& snow, const AtmosphericLight& A) {
  return reflect_g(clean, snow, A);
}
inline ImageF haze_model(const ImageF& clean, const TransmissionMap& t, const AtmosphericLight& A) {
  return reflect_t(clean, t, A);
}

TransmissionMap transmission_from_depth(const DepthMap& depth, double beta);

// Diagonal ramp normalized to [0,1]: 0 at the top-left, 1 at the bottom-right.
DepthMap ramp_depth(int height, int width);

struct StreakParams {
  int count = 12;
  double length_px = 8.0;
  double angle_deg = 10.0;  // from vertical, positive leans right
  double thickness_px = 1.0;
};

struct SnowParams {
  int flake_count = 10;
  double radius_min_px = 0.8;
  double radius_max_px = 2.0;
};

struct RaindropParams {
  int drop_count = 3;
  double radius_min_px = 2.0;
  double radius_max_px = 4.0;
  double metaball_threshold = 1.0;
};

struct Segment {
  double x0, y0, x1, y1, thickness;
};

struct Disk {
  double cx, cy, radius;
};

std::vector<Segment> streak_layout(int height, int width, const StreakParams& params, std::uint64_t seed);
std::vector<Disk> snow_layout(int height, int width, const SnowParams& params, std::uint64_t seed);
std::vector<Disk> raindrop_layout(int height, int width, const RaindropParams& params, std::uint64_t seed);

DegMask render_streaks(int height, int width, const std::vector<Segment>& segments);
DegMask render_disks(int height, int width, const std::vector<Disk>& disks);
// Thresholded sum of r^2/|x-c|^2 fields; overlapping blobs merge.
DegMask render_metaballs(int height, int width, const std::vector<Disk>& drops, double threshold);
// Metaball field value at a pixel center; exposed for inspection and tests.
double metaball_field(const std::vector<Disk>& drops, double x, double y);

DegMask gen_streak_mask(int height, int width, const StreakParams& params, std::uint64_t seed);
DegMask gen_snow_mask(int height, int width, const SnowParams& params, std::uint64_t seed);
DegMask gen_raindrop_mask(int height, int width, const RaindropParams& params, std::uint64_t seed);

enum class MaskKind { Streak, Snow, Raindrop };
enum class DepthSource { Ramp, Constant, Provided };
enum class HazeTier { Light, Moderate, Heavy };
// Sequential applies each mask in turn; Union applies their pixelwise max once.
enum class MaskMode { Sequential, Union };

std::string to_string(MaskKind kind);
MaskKind mask_kind_from_string(const std::string& name);

// Scattering density for a named tier, per unit of normalized depth.
double haze_beta(HazeTier tier);

struct HazeParams {
  double beta = 0.8;
  DepthSource depth_source = DepthSource::Ramp;
  float constant_depth = 1.0f;
  std::optional<DepthMap> depth;  // used when depth_source == Provided
  std::string depth_path;         // serialized reference to a provided depth image
};

struct DegradationRecipe {
  std::optional<HazeParams> haze;
  std::optional<StreakParams> streaks;
  std::optional<SnowParams> snow;
  std::optional<RaindropParams> raindrops;
  AtmosphericLight atmospheric_light{0.85f};
  std::uint64_t seed = 0;
  std::vector<MaskKind> apply_order{MaskKind::Streak, MaskKind::Snow, MaskKind::Raindrop};
  MaskMode mask_mode = MaskMode::Sequential;

  // Number of enabled mask degradations (0..3); haze is counted separately.
  int mask_degradation_count() const;
  bool enabled(MaskKind kind) const;
  // Throws ParameterError when the recipe is inconsistent.
  void validate() const;
};

// Sample A uniformly in [0.7, 1.0].
AtmosphericLight sample_atmospheric_light(std::uint64_t seed);

struct Composite {
  ImageF degraded;
  std::vector<std::pair<MaskKind, DegMask>> masks;  // in application order
  std::optional<TransmissionMap> transmission;
  DegMask union_mask;
};

// Haze first, then each enabled mask degradation in recipe.apply_order.
Composite compose_mixed(const ImageF& clean, const DegradationRecipe& recipe);

// Pixels whose intensity lies within `threshold` of A in every channel.
DegMask predict_mask_baseline(const ImageF& degraded, const AtmosphericLight& A, double threshold);

// Intersection over union of two masks binarized at 0.5. Empty vs empty is 1.
double mask_iou(const DegMask& a, const DegMask& b);

nlohmann::json to_json(const DegradationRecipe& recipe);
DegradationRecipe recipe_from_json(const nlohmann::json& j);

}  // namespace mixres::degrade
