#include "mixres/image.hpp"

#include <cmath>

namespace mixres {

ImageF::ImageF(int height, int width, int channels, float fill)
    : height_(height), width_(width), channels_(channels) {
  if (height < 1 || width < 1) throw ShapeError("image dimensions must be >= 1");
  if (channels != 1 && channels != 3) throw ShapeError("image must have 1 or 3 channels");
  data_.assign(static_cast<std::size_t>(height) * width * channels, fill);
}

ImageF ImageF::from_data(int height, int width, int channels, std::vector<float> data) {
  ImageF img(height, width, channels);
  if (data.size() != img.size()) throw ShapeError("image data length does not match H*W*C");
  for (float v : data) {
    if (!std::isfinite(v) || v < 0.0f || v > 1.0f)
      throw ParameterError("image intensity outside [0,1]");
  }
  img.data_ = std::move(data);
  return img;
}

void ImageF::clamp01() {
  for (float& v : data_) v = std::clamp(v, 0.0f, 1.0f);
}

bool is_binary(const DegMask& mask) {
  return std::all_of(mask.data().begin(), mask.data().end(),
                     [](float v) { return v == 0.0f || v == 1.0f; });
}

double coverage(const DegMask& mask) {
  if (mask.size() == 0) return 0.0;
  const auto on = std::count_if(mask.data().begin(), mask.data().end(),
                                [](float v) { return v > 0.5f; });
  return static_cast<double>(on) / static_cast<double>(mask.size());
}

DegMask mask_union(std::span<const DegMask> masks) {
  if (masks.empty()) throw ParameterError("mask_union of an empty list");
  DegMask out = masks.front();
  for (const auto& m : masks.subspan(1)) {
    if (!m.same_dims(out)) throw ShapeError("mask_union: dimension mismatch");
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::max(out[i], m[i]);
  }
  return out;
}

AtmosphericLight::AtmosphericLight(float scalar) : rgb_{scalar, scalar, scalar} {
  if (!(scalar >= 0.0f && scalar <= 1.0f)) throw ParameterError("atmospheric light outside [0,1]");
}

AtmosphericLight::AtmosphericLight(std::array<float, 3> rgb) : rgb_(rgb), per_channel_(true) {
  for (float v : rgb)
    if (!(v >= 0.0f && v <= 1.0f)) throw ParameterError("atmospheric light outside [0,1]");
}

}  // namespace mixres
