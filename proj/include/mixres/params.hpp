#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "mixres/rng.hpp"
#include "mixres/tensor.hpp"

namespace mixres::nn {

// Named trainable tensors plus first/second-moment optimizer state.
template <class T>
class ParamStore {
 public:
  struct Entry {
    std::string name;
    Tensor<T> param;
    std::vector<T> m;
    std::vector<T> v;
  };

  Tensor<T> add(const std::string& name, Shape shape, std::vector<T> values);
  Tensor<T> add_zeros(const std::string& name, Shape shape);
  // Uniform(-b, b) with b = sqrt(6 / fan_in) * gain.
  Tensor<T> add_kaiming(const std::string& name, Shape shape, int fan_in, Rng& rng, double gain = 1.0);

  bool contains(const std::string& name) const { return index_.count(name) > 0; }
  const Tensor<T>& get(const std::string& name) const;
  Tensor<T>& get(const std::string& name);

  std::vector<Entry>& entries() { return entries_; }
  const std::vector<Entry>& entries() const { return entries_; }
  std::size_t parameter_count() const;

  void zero_grad();
  double grad_norm() const;

  long step() const { return step_; }
  void advance_step() { ++step_; }
  void set_step(long s) { step_ = s; }

  // Copies values (and resets optimizer state) into a store of another precision.
  template <class U>
  ParamStore<U> cast() const {
    ParamStore<U> out;
    for (const auto& e : entries_) {
      std::vector<U> vals(e.param.values().begin(), e.param.values().end());
      out.add(e.name, e.param.shape(), std::move(vals));
    }
    return out;
  }

 private:
  std::vector<Entry> entries_;
  std::map<std::string, std::size_t> index_;
  long step_ = 0;
};

struct AdamConfig {
  double lr = 3e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Bias-corrected adaptive-moment update of every parameter that holds a
// gradient; gradients are cleared afterwards. Throws StateError when no
// parameter has a gradient.
template <class T>
void adam_step(ParamStore<T>& store, const AdamConfig& cfg = {});

// Flat little-endian float32 blob preceded by a JSON header:
//   "MIXRCKPT" | u64 header length | header JSON | tensor data
// The header maps each tensor name to its shape and byte offset into the
// data block, and carries arbitrary caller metadata under "meta".
template <class T>
void save_checkpoint(const std::filesystem::path& path, const ParamStore<T>& store, const nlohmann::json& meta);

struct Checkpoint {
  nlohmann::json meta;
  ParamStore<float> params;
};

Checkpoint load_checkpoint(const std::filesystem::path& path);

// Overwrites values of `dst` from `src` by name; every name in dst must exist
// in src with the same shape.
template <class T>
void assign_from(ParamStore<T>& dst, const ParamStore<float>& src);

}  // namespace mixres::nn
