#include "mixres/networks.hpp"

#include <algorithm>
#include <cmath>

namespace mixres::nn {

std::vector<double> time_embedding(int t, int dim) {
  if (dim <= 0 || dim % 2 != 0) throw ParameterError("time embedding dimension must be positive and even");
  const int half = dim / 2;
  std::vector<double> e(dim);
  for (int k = 0; k < half; ++k) {
    const double freq = std::pow(10000.0, -static_cast<double>(k) / half);
    e[2 * k] = std::sin(t * freq);
    e[2 * k + 1] = std::cos(t * freq);
  }
  return e;
}

void DenoiserConfig::validate() const {
  if (image_channels != 1 && image_channels != 3) throw ParameterError("image_channels must be 1 or 3");
  if (base_channels < 1 || depth < 1 || depth > 5) throw ParameterError("invalid denoiser width/depth");
  if (time_embed_dim <= 0 || time_embed_dim % 2) throw ParameterError("time_embed_dim must be positive and even");
}

nlohmann::json DenoiserConfig::to_json() const {
  return {{"image_channels", image_channels},
          {"base_channels", base_channels},
          {"depth", depth},
          {"time_embed_dim", time_embed_dim}};
}

DenoiserConfig DenoiserConfig::from_json(const nlohmann::json& j) {
  DenoiserConfig c;
  c.image_channels = j.value("image_channels", c.image_channels);
  c.base_channels = j.value("base_channels", c.base_channels);
  c.depth = j.value("depth", c.depth);
  c.time_embed_dim = j.value("time_embed_dim", c.time_embed_dim);
  c.validate();
  return c;
}

namespace {

template <class T>
void add_conv(ParamStore<T>& p, const std::string& name, int cin, int cout, int k, Rng& rng, double gain = 1.0) {
  p.add_kaiming(name + ".w", Shape{cout, cin, k, k}, cin * k * k, rng, gain);
  p.add_zeros(name + ".b", Shape{1, cout, 1, 1});
}

template <class T>
void add_zero_conv(ParamStore<T>& p, const std::string& name, int cin, int cout, int k) {
  p.add_zeros(name + ".w", Shape{cout, cin, k, k});
  p.add_zeros(name + ".b", Shape{1, cout, 1, 1});
}

template <class T>
Tensor<T> apply_conv(const ParamStore<T>& p, const std::string& name, const Tensor<T>& x, int stride, int pad) {
  return conv2d(x, p.get(name + ".w"), p.get(name + ".b"), stride, pad);
}

void require_divisible(const Shape& s, int depth, const char* who) {
  const int f = 1 << (depth - 1);
  if (s.h % f || s.w % f)
    throw ShapeError(std::string(who) + ": spatial dims must be divisible by " + std::to_string(f) + ", got " + s.str());
}

}  // namespace

template <class T>
DenoiserNet<T>::DenoiserNet(DenoiserConfig cfg, std::uint64_t init_seed) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(init_seed);
  build(rng);
}

template <class T>
DenoiserNet<T>::DenoiserNet(DenoiserConfig cfg, ParamStore<T> params) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(0);
  build(rng);
  for (auto& e : params_.entries()) {
    const auto& src = params.get(e.name);
    if (!(src.shape() == e.param.shape())) throw ShapeError("denoiser parameter shape mismatch: " + e.name);
    std::copy(src.values().begin(), src.values().end(), e.param.values().begin());
  }
  params_.set_step(params.step());
}

template <class T>
void DenoiserNet<T>::build(Rng& rng) {
  const int D = cfg_.time_embed_dim;
  add_conv(params_, "temb.fc1", D, D, 1, rng);
  add_conv(params_, "in", cfg_.in_channels(), cfg_.base_channels, 3, rng);
  auto res = [&](const std::string& name, int ch) {
    add_conv(params_, name + ".conv1", ch, ch, 3, rng);
    add_conv(params_, name + ".temb", D, ch, 1, rng);
    add_conv(params_, name + ".conv2", ch, ch, 3, rng, 0.5);
  };
  for (int l = 0; l < cfg_.depth; ++l) {
    const int ch = cfg_.base_channels << l;
    res("down" + std::to_string(l), ch);
    if (l + 1 < cfg_.depth) add_conv(params_, "down" + std::to_string(l) + ".pool", ch, ch * 2, 3, rng);
  }
  res("mid", cfg_.base_channels << (cfg_.depth - 1));
  for (int l = cfg_.depth - 2; l >= 0; --l) {
    const int ch = cfg_.base_channels << l;
    add_conv(params_, "up" + std::to_string(l) + ".merge", ch * 3, ch, 3, rng);
    res("up" + std::to_string(l), ch);
  }
  add_zero_conv(params_, "out", cfg_.base_channels, cfg_.image_channels, 3);
}

template <class T>
Tensor<T> DenoiserNet<T>::conv(const std::string& name, const Tensor<T>& x, int stride, int pad) const {
  return apply_conv(params_, name, x, stride, pad);
}

template <class T>
Tensor<T> DenoiserNet<T>::res_block(const std::string& name, const Tensor<T>& x, const Tensor<T>& temb) const {
  Tensor<T> h = conv(name + ".conv1", silu(x));
  h = add_channel_bias(h, conv(name + ".temb", temb, 1, 0));
  h = conv(name + ".conv2", silu(h));
  return add(x, h);
}

template <class T>
Tensor<T> DenoiserNet<T>::forward(const Tensor<T>& noisy, const Tensor<T>& degraded, const Tensor<T>& mask,
                                  const std::vector<int>& timesteps) const {
  const Shape s = noisy.shape();
  if (s.c != cfg_.image_channels) throw ShapeError("denoiser: noisy state has wrong channel count " + s.str());
  if (!(degraded.shape() == s)) throw ShapeError("denoiser: degraded image shape differs from state");
  const Shape ms = mask.shape();
  if (ms.n != s.n || ms.c != 1 || ms.h != s.h || ms.w != s.w) throw ShapeError("denoiser: mask shape " + ms.str());
  if (timesteps.size() != static_cast<std::size_t>(s.n)) throw ShapeError("denoiser: one timestep per batch item");
  require_divisible(s, cfg_.depth, "denoiser");

  const int D = cfg_.time_embed_dim;
  std::vector<T> emb;
  emb.reserve(static_cast<std::size_t>(s.n) * D);
  for (int t : timesteps)
    for (double v : time_embedding(t, D)) emb.push_back(static_cast<T>(v));
  const Tensor<T> temb = silu(conv("temb.fc1", Tensor<T>::from(Shape{s.n, D, 1, 1}, std::move(emb)), 1, 0));

  Tensor<T> h = conv("in", concat_channels<T>({noisy, degraded, mask}));
  std::vector<Tensor<T>> skips;
  for (int l = 0; l < cfg_.depth; ++l) {
    const std::string name = "down" + std::to_string(l);
    h = res_block(name, h, temb);
    if (l + 1 < cfg_.depth) {
      skips.push_back(h);
      h = conv(name + ".pool", avg_pool2(h));
    }
  }
  h = res_block("mid", h, temb);
  for (int l = cfg_.depth - 2; l >= 0; --l) {
    const std::string name = "up" + std::to_string(l);
    h = conv(name + ".merge", concat_channels<T>({upsample2(h), skips[l]}));
    h = res_block(name, h, temb);
  }
  return conv("out", silu(h));
}

void UEBConfig::validate() const {
  if (samples < 1) throw ParameterError("UEB sample count must be >= 1");
  if (!(q >= 0.0 && q < 1.0)) throw ParameterError("UEB mask fraction q must be in [0,1)");
}

std::vector<int> sample_dropped_channels(int channels, double q, Rng& rng) {
  const int k = static_cast<int>(std::floor(q * channels));
  std::vector<int> idx(channels);
  for (int i = 0; i < channels; ++i) idx[i] = i;
  for (int i = 0; i < k; ++i) std::swap(idx[i], idx[rng.uniform_int(i, channels - 1)]);
  idx.resize(k);
  std::sort(idx.begin(), idx.end());
  return idx;
}

template <class T>
UncertaintyBlock<T>::UncertaintyBlock(std::string prefix, int channels, int image_channels)
    : prefix_(std::move(prefix)), channels_(channels), image_channels_(image_channels) {}

template <class T>
void UncertaintyBlock<T>::init(ParamStore<T>& store, Rng& rng) const {
  add_conv(store, prefix_ + ".entry", channels_, channels_, 3, rng);
  add_conv(store, prefix_ + ".aleatoric", channels_, 1, 3, rng);
  add_conv(store, prefix_ + ".epistemic", channels_, image_channels_, 3, rng);
}

template <class T>
UncertaintyMaps<T> UncertaintyBlock<T>::forward(const ParamStore<T>& store, const Tensor<T>& features,
                                                const UEBConfig& cfg, Rng& rng) const {
  cfg.validate();
  if (features.shape().c != channels_) throw ShapeError("UEB: feature channel count " + features.shape().str());
  UncertaintyMaps<T> out;
  const Tensor<T> entry = apply_conv(store, prefix_ + ".entry", features, 1, 1);
  out.aleatoric = sigmoid(apply_conv(store, prefix_ + ".aleatoric", entry, 1, 1));

  for (int s = 0; s < cfg.samples; ++s) {
    auto dropped = sample_dropped_channels(channels_, cfg.q, rng);
    std::vector<T> keep(channels_, T(1));
    for (int c : dropped) keep[c] = T(0);
    Tensor<T> masked = dropped.empty() ? entry : mask_channels(entry, keep);
    out.passes.push_back(tanh(apply_conv(store, prefix_ + ".epistemic", masked, 1, 1)));
    out.dropped_channels.push_back(std::move(dropped));
  }

  // Mean and variance are taken relative to the first pass so identical
  // passes give a mean equal to that pass and a variance of exactly zero.
  const Tensor<T>& first = out.passes.front();
  const T inv = T(1) / T(cfg.samples);
  if (cfg.samples == 1) {
    out.mean_prediction = first;
  } else {
    std::vector<Tensor<T>> diffs;
    for (int s = 1; s < cfg.samples; ++s) diffs.push_back(sub(out.passes[s], first));
    out.mean_prediction = add(first, scale(add_n(diffs), inv));
  }
  std::vector<Tensor<T>> sq;
  for (const auto& p : out.passes) sq.push_back(square(sub(p, out.mean_prediction)));
  out.epistemic = channel_mean(scale(add_n(sq), inv));
  out.combined = clamp(add(out.epistemic, out.aleatoric), T(0), T(1));
  return out;
}

void RefinerConfig::validate() const {
  if (image_channels != 1 && image_channels != 3) throw ParameterError("image_channels must be 1 or 3");
  if (base_channels < 1 || depth < 1 || depth > 5) throw ParameterError("invalid refiner width/depth");
  ueb.validate();
}

nlohmann::json RefinerConfig::to_json() const {
  return {{"image_channels", image_channels},
          {"base_channels", base_channels},
          {"depth", depth},
          {"ueb_samples", ueb.samples},
          {"ueb_q", ueb.q}};
}

RefinerConfig RefinerConfig::from_json(const nlohmann::json& j) {
  RefinerConfig c;
  c.image_channels = j.value("image_channels", c.image_channels);
  c.base_channels = j.value("base_channels", c.base_channels);
  c.depth = j.value("depth", c.depth);
  c.ueb.samples = j.value("ueb_samples", c.ueb.samples);
  c.ueb.q = j.value("ueb_q", c.ueb.q);
  c.validate();
  return c;
}

template <class T>
RefinerNet<T>::RefinerNet(RefinerConfig cfg, std::uint64_t init_seed) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(init_seed);
  build(rng);
}

template <class T>
RefinerNet<T>::RefinerNet(RefinerConfig cfg, ParamStore<T> params) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(0);
  build(rng);
  for (auto& e : params_.entries()) {
    const auto& src = params.get(e.name);
    if (!(src.shape() == e.param.shape())) throw ShapeError("refiner parameter shape mismatch: " + e.name);
    std::copy(src.values().begin(), src.values().end(), e.param.values().begin());
  }
  params_.set_step(params.step());
}

template <class T>
void RefinerNet<T>::build(Rng& rng) {
  const int C = cfg_.image_channels;
  add_conv(params_, "head", C, cfg_.base_channels, 3, rng);
  for (int i = 0; i < cfg_.depth; ++i) {
    const int ch = cfg_.base_channels << i;
    const std::string name = "enc" + std::to_string(i);
    add_conv(params_, name + ".conv1", ch, ch, 3, rng);
    add_conv(params_, name + ".conv2", ch, ch, 3, rng);
    blocks_.emplace_back(name + ".ueb", ch, C);
    blocks_.back().init(params_, rng);
    if (i + 1 < cfg_.depth) add_conv(params_, "down" + std::to_string(i), ch, ch * 2, 3, rng);
  }
  for (int i = cfg_.depth - 2; i >= 0; --i) {
    const int ch = cfg_.base_channels << i;
    add_conv(params_, "dec" + std::to_string(i) + ".merge", ch * 3, ch, 3, rng);
  }
  add_zero_conv(params_, "tail", cfg_.base_channels, C, 3);
}

template <class T>
Tensor<T> RefinerNet<T>::conv(const std::string& name, const Tensor<T>& x) const {
  return apply_conv(params_, name, x, 1, 1);
}

template <class T>
typename RefinerNet<T>::Output RefinerNet<T>::forward(const Tensor<T>& coarse, Rng& rng) const {
  const Shape s = coarse.shape();
  if (s.c != cfg_.image_channels) throw ShapeError("refiner: input channel count " + s.str());
  require_divisible(s, cfg_.depth, "refiner");

  Output out;
  Tensor<T> x = silu(conv("head", coarse));
  std::vector<Tensor<T>> skips;
  for (int i = 0; i < cfg_.depth; ++i) {
    const std::string name = "enc" + std::to_string(i);
    const Tensor<T> f_in = x;
    const Tensor<T> f_out = conv(name + ".conv2", silu(conv(name + ".conv1", f_in)));
    auto maps = blocks_[i].forward(params_, f_in, cfg_.ueb, rng);
    const Tensor<T> f_m = modulate(f_in, f_out, maps.combined);
    out.per_scale.push_back(std::move(maps));
    skips.push_back(f_m);
    if (i + 1 < cfg_.depth) x = silu(conv("down" + std::to_string(i), avg_pool2(f_m)));
  }
  Tensor<T> h = skips.back();
  for (int i = cfg_.depth - 2; i >= 0; --i)
    h = silu(conv("dec" + std::to_string(i) + ".merge", concat_channels<T>({upsample2(h), skips[i]})));
  out.restored = clamp(add(coarse, conv("tail", h)), T(0), T(1));
  return out;
}

template <class T>
Tensor<T> images_to_tensor(const std::vector<const ImageF*>& images) {
  if (images.empty()) throw ShapeError("images_to_tensor: empty batch");
  const ImageF& f = *images.front();
  const Shape s{static_cast<int>(images.size()), f.channels(), f.height(), f.width()};
  std::vector<T> v(s.numel());
  for (int n = 0; n < s.n; ++n) {
    const ImageF& img = *images[n];
    if (!img.same_dims(f)) throw ShapeError("images_to_tensor: mixed image sizes");
    for (int c = 0; c < s.c; ++c)
      for (std::size_t p = 0; p < s.plane(); ++p)
        v[(static_cast<std::size_t>(n) * s.c + c) * s.plane() + p] = img.data()[p * s.c + c];
  }
  return Tensor<T>::from(s, std::move(v));
}

template <class T>
Tensor<T> masks_to_tensor(const std::vector<const DegMask*>& masks) {
  if (masks.empty()) throw ShapeError("masks_to_tensor: empty batch");
  const DegMask& f = *masks.front();
  const Shape s{static_cast<int>(masks.size()), 1, f.height(), f.width()};
  std::vector<T> v(s.numel());
  for (int n = 0; n < s.n; ++n) {
    if (!masks[n]->same_dims(f)) throw ShapeError("masks_to_tensor: mixed mask sizes");
    std::copy(masks[n]->data().begin(), masks[n]->data().end(), v.begin() + static_cast<std::ptrdiff_t>(n * s.plane()));
  }
  return Tensor<T>::from(s, std::move(v));
}

template <class T>
ImageF tensor_to_image(const Tensor<T>& t, int index) {
  const Shape s = t.shape();
  if (index < 0 || index >= s.n) throw ShapeError("tensor_to_image: index out of range");
  ImageF img(s.h, s.w, s.c);
  for (int c = 0; c < s.c; ++c)
    for (std::size_t p = 0; p < s.plane(); ++p)
      img.data()[p * s.c + c] = static_cast<float>(
          std::clamp<T>(t.values()[(static_cast<std::size_t>(index) * s.c + c) * s.plane() + p], T(0), T(1)));
  return img;
}

template <class T>
DegMask tensor_to_plane(const Tensor<T>& t, int index) {
  const Shape s = t.shape();
  if (s.c != 1 || index < 0 || index >= s.n) throw ShapeError("tensor_to_plane: expects (N,1,H,W)");
  DegMask m(s.h, s.w);
  for (std::size_t p = 0; p < s.plane(); ++p)
    m[p] = static_cast<float>(std::clamp<T>(t.values()[static_cast<std::size_t>(index) * s.plane() + p], T(0), T(1)));
  return m;
}

#define MIXRES_INSTANTIATE_NETWORKS(T)                                               \
  template class DenoiserNet<T>;                                                     \
  template class UncertaintyBlock<T>;                                                \
  template class RefinerNet<T>;                                                      \
  template Tensor<T> images_to_tensor(const std::vector<const ImageF*>&);            \
  template Tensor<T> masks_to_tensor(const std::vector<const DegMask*>&);            \
  template ImageF tensor_to_image(const Tensor<T>&, int);                            \
  template DegMask tensor_to_plane(const Tensor<T>&, int);

MIXRES_INSTANTIATE_NETWORKS(float)
MIXRES_INSTANTIATE_NETWORKS(double)

}  // namespace mixres::nn
