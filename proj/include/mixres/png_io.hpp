#pragma once

// 8-bit PNG reading and writing. Intensities are quantized as
// round(255 * v) on write and divided by 255 on read.

#include <filesystem>

#include "mixres/image.hpp"

namespace mixres::io {

// Grayscale and RGB are kept as 1 and 3 channels; alpha is dropped and
// gray+alpha becomes gray. 16-bit inputs are reduced to 8 bits.
ImageF read_png(const std::filesystem::path& path);
void write_png(const std::filesystem::path& path, const ImageF& image);

// Single-channel planes (masks, uncertainty maps), values clamped to [0,1].
DegMask read_mask_png(const std::filesystem::path& path);
void write_mask_png(const std::filesystem::path& path, const DegMask& mask);

// Value as it reads back after an 8-bit round trip.
inline float quantize8(float v) {
  const float c = std::clamp(v, 0.0f, 1.0f);
  return static_cast<float>(static_cast<int>(c * 255.0f + 0.5f)) / 255.0f;
}

}  // namespace mixres::io
