#pragma once

// The three trainable networks: the conditional noise predictor, the
// uncertainty estimation block (UEB) and the U-shaped refiner that uses a
// UEB at each scale to blend input and extracted features.

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"
#include "mixres/image.hpp"
#include "mixres/params.hpp"
#include "mixres/rng.hpp"
#include "mixres/tensor.hpp"

namespace mixres::nn {

// Interleaved [sin(t f_0), cos(t f_0), sin(t f_1), ...] with
// f_k = 10000^(-k / (dim/2)).
std::vector<double> time_embedding(int t, int dim);

struct DenoiserConfig {
  int image_channels = 3;
  int base_channels = 32;
  int depth = 2;
  int time_embed_dim = 64;

  // Noisy state, degraded image and one mask channel.
  int in_channels() const { return 2 * image_channels + 1; }
  void validate() const;
  nlohmann::json to_json() const;
  static DenoiserConfig from_json(const nlohmann::json& j);
};

// Conditioning is channel concatenation of (J_t, I, m); the timestep enters
// every residual block as a learned per-channel offset. The output
// convolution starts at zero so the initial prediction is exactly zero.
template <class T>
class DenoiserNet {
 public:
  DenoiserNet(DenoiserConfig cfg, std::uint64_t init_seed);
  DenoiserNet(DenoiserConfig cfg, ParamStore<T> params);

  // noisy, degraded: (N, C, H, W); mask: (N, 1, H, W); one timestep per item.
  Tensor<T> forward(const Tensor<T>& noisy, const Tensor<T>& degraded, const Tensor<T>& mask,
                    const std::vector<int>& timesteps) const;

  ParamStore<T>& params() { return params_; }
  const ParamStore<T>& params() const { return params_; }
  const DenoiserConfig& config() const { return cfg_; }

 private:
  void build(Rng& rng);
  Tensor<T> conv(const std::string& name, const Tensor<T>& x, int stride = 1, int pad = 1) const;
  Tensor<T> res_block(const std::string& name, const Tensor<T>& x, const Tensor<T>& temb) const;

  DenoiserConfig cfg_;
  ParamStore<T> params_;
};

struct UEBConfig {
  int samples = 8;  // Monte-Carlo passes S_T
  double q = 0.2;   // fraction of channels zeroed per pass
  void validate() const;
};

template <class T>
struct UncertaintyMaps {
  Tensor<T> aleatoric;        // (N,1,H,W), sigmoid output in (0,1)
  Tensor<T> epistemic;        // (N,1,H,W), variance over passes, >= 0
  Tensor<T> combined;         // clamp(epistemic + aleatoric, 0, 1)
  Tensor<T> mean_prediction;  // (N,C_img,H,W), mean over passes
  std::vector<Tensor<T>> passes;
  std::vector<std::vector<int>> dropped_channels;  // per pass, sorted
};

// Uniform subset of floor(q * channels) channel indices, without replacement.
std::vector<int> sample_dropped_channels(int channels, double q, Rng& rng);

// Parameters live in a caller-owned store under `prefix`.
template <class T>
class UncertaintyBlock {
 public:
  UncertaintyBlock() = default;
  UncertaintyBlock(std::string prefix, int channels, int image_channels);

  void init(ParamStore<T>& store, Rng& rng) const;
  UncertaintyMaps<T> forward(const ParamStore<T>& store, const Tensor<T>& features, const UEBConfig& cfg,
                             Rng& rng) const;

  const std::string& prefix() const { return prefix_; }
  int channels() const { return channels_; }
  int image_channels() const { return image_channels_; }

 private:
  std::string prefix_;
  int channels_ = 0;
  int image_channels_ = 0;
};

template <class T>
UncertaintyMaps<T> ueb_forward(const ParamStore<T>& store, const UncertaintyBlock<T>& block,
                               const Tensor<T>& features, const UEBConfig& cfg, Rng& rng) {
  return block.forward(store, features, cfg, rng);
}

struct RefinerConfig {
  int image_channels = 3;
  int base_channels = 16;
  int depth = 2;
  UEBConfig ueb;
  void validate() const;
  nlohmann::json to_json() const;
  static RefinerConfig from_json(const nlohmann::json& j);
};

// Encoder-decoder over the coarse restoration. At scale i a UEB on the
// input features F_in yields U_i and the features passed on are
// F_in*U_i + F_out*(1-U_i). The head is residual with a zero-initialized
// last convolution, so an untrained refiner returns clamp(J_coarse).
template <class T>
class RefinerNet {
 public:
  struct Output {
    Tensor<T> restored;
    std::vector<UncertaintyMaps<T>> per_scale;
  };

  RefinerNet(RefinerConfig cfg, std::uint64_t init_seed);
  RefinerNet(RefinerConfig cfg, ParamStore<T> params);

  Output forward(const Tensor<T>& coarse, Rng& rng) const;

  ParamStore<T>& params() { return params_; }
  const ParamStore<T>& params() const { return params_; }
  const RefinerConfig& config() const { return cfg_; }

 private:
  void build(Rng& rng);
  Tensor<T> conv(const std::string& name, const Tensor<T>& x) const;

  RefinerConfig cfg_;
  ParamStore<T> params_;
  std::vector<UncertaintyBlock<T>> blocks_;
};

// ImageF (HWC) <-> Tensor (NCHW) helpers.
template <class T>
Tensor<T> images_to_tensor(const std::vector<const ImageF*>& images);
template <class T>
Tensor<T> masks_to_tensor(const std::vector<const DegMask*>& masks);
template <class T>
ImageF tensor_to_image(const Tensor<T>& t, int index);
// One (N,1,H,W) map slice as a plane clamped into [0,1].
template <class T>
DegMask tensor_to_plane(const Tensor<T>& t, int index);

}  // namespace mixres::nn
