#pragma once

#include <algorithm>
#include <array>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "mixres/errors.hpp"

namespace mixres {

// H x W x C image with interleaved channels, intensities in [0,1].
class ImageF {
 public:
  ImageF() = default;
  ImageF(int height, int width, int channels, float fill = 0.0f);

  // Validates dimensions and that every value is finite and inside [0,1].
  static ImageF from_data(int height, int width, int channels, std::vector<float> data);

  int height() const { return height_; }
  int width() const { return width_; }
  int channels() const { return channels_; }
  std::size_t pixel_count() const { return static_cast<std::size_t>(height_) * width_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  float& at(int y, int x, int c = 0) { return data_[index(y, x, c)]; }
  float at(int y, int x, int c = 0) const { return data_[index(y, x, c)]; }

  std::span<float> data() { return data_; }
  std::span<const float> data() const { return data_; }
  const std::vector<float>& values() const { return data_; }

  void clamp01();
  bool same_dims(const ImageF& other) const {
    return height_ == other.height_ && width_ == other.width_ && channels_ == other.channels_;
  }
  bool operator==(const ImageF& other) const = default;

 private:
  std::size_t index(int y, int x, int c) const {
    return (static_cast<std::size_t>(y) * width_ + x) * channels_ + c;
  }

  int height_ = 0;
  int width_ = 0;
  int channels_ = 0;
  std::vector<float> data_;
};

// Single-channel H x W field. The tag keeps masks, depth and transmission
// from being mixed up at call sites.
template <class Tag>
class Plane {
 public:
  Plane() = default;
  Plane(int height, int width, float fill = 0.0f) : height_(height), width_(width) {
    if (height < 1 || width < 1) throw ShapeError("plane dimensions must be >= 1");
    data_.assign(static_cast<std::size_t>(height) * width, fill);
  }

  int height() const { return height_; }
  int width() const { return width_; }
  std::size_t size() const { return data_.size(); }

  float& at(int y, int x) { return data_[static_cast<std::size_t>(y) * width_ + x]; }
  float at(int y, int x) const { return data_[static_cast<std::size_t>(y) * width_ + x]; }
  float& operator[](std::size_t i) { return data_[i]; }
  float operator[](std::size_t i) const { return data_[i]; }

  std::span<float> data() { return data_; }
  std::span<const float> data() const { return data_; }

  bool same_dims(const ImageF& img) const {
    return height_ == img.height() && width_ == img.width();
  }
  template <class OtherTag>
  bool same_dims(const Plane<OtherTag>& other) const {
    return height_ == other.height() && width_ == other.width();
  }
  bool operator==(const Plane& other) const = default;

 private:
  int height_ = 0;
  int width_ = 0;
  std::vector<float> data_;
};

struct MaskTag {};
struct DepthTag {};
struct TransmissionTag {};

// Per-pixel occupancy in [0,1]; generators produce {0,1} only.
using DegMask = Plane<MaskTag>;
// Non-negative scene depth.
using DepthMap = Plane<DepthTag>;
// exp(-beta * depth), in (0,1].
using TransmissionMap = Plane<TransmissionTag>;

bool is_binary(const DegMask& mask);
// Fraction of pixels with value > 0.5.
double coverage(const DegMask& mask);
DegMask mask_union(std::span<const DegMask> masks);

// Global veiling light, either one scalar for all channels or one value
// per channel (up to three).
class AtmosphericLight {
 public:
  AtmosphericLight() = default;
  explicit AtmosphericLight(float scalar);
  explicit AtmosphericLight(std::array<float, 3> rgb);

  float operator[](int channel) const { return per_channel_ ? rgb_[channel] : rgb_[0]; }
  bool per_channel() const { return per_channel_; }
  std::array<float, 3> rgb() const { return per_channel_ ? rgb_ : std::array{rgb_[0], rgb_[0], rgb_[0]}; }
  float scalar() const { return rgb_[0]; }

  bool operator==(const AtmosphericLight&) const = default;

 private:
  std::array<float, 3> rgb_{1.0f, 1.0f, 1.0f};
  bool per_channel_ = false;
};

}  // namespace mixres
