#include "mixres/params.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

namespace mixres::nn {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {
constexpr char kMagic[8] = {'M', 'I', 'X', 'R', 'C', 'K', 'P', 'T'};
}

template <class T>
Tensor<T> ParamStore<T>::add(const std::string& name, Shape shape, std::vector<T> values) {
  if (contains(name)) throw ParameterError("duplicate parameter name: " + name);
  auto t = Tensor<T>::from(shape, std::move(values), true);
  index_[name] = entries_.size();
  entries_.push_back({name, t, std::vector<T>(shape.numel(), T(0)), std::vector<T>(shape.numel(), T(0))});
  return t;
}

template <class T>
Tensor<T> ParamStore<T>::add_zeros(const std::string& name, Shape shape) {
  return add(name, shape, std::vector<T>(shape.numel(), T(0)));
}

template <class T>
Tensor<T> ParamStore<T>::add_kaiming(const std::string& name, Shape shape, int fan_in, Rng& rng, double gain) {
  const double bound = gain * std::sqrt(6.0 / std::max(1, fan_in));
  std::vector<T> vals(shape.numel());
  for (T& v : vals) v = static_cast<T>(rng.uniform(-bound, bound));
  return add(name, shape, std::move(vals));
}

template <class T>
const Tensor<T>& ParamStore<T>::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ParameterError("unknown parameter: " + name);
  return entries_[it->second].param;
}

template <class T>
Tensor<T>& ParamStore<T>::get(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw ParameterError("unknown parameter: " + name);
  return entries_[it->second].param;
}

template <class T>
std::size_t ParamStore<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.param.numel();
  return n;
}

template <class T>
void ParamStore<T>::zero_grad() {
  for (auto& e : entries_) e.param.zero_grad();
}

template <class T>
double ParamStore<T>::grad_norm() const {
  double acc = 0.0;
  for (const auto& e : entries_)
    for (T g : e.param.grad()) acc += static_cast<double>(g) * g;
  return std::sqrt(acc);
}

template <class T>
void adam_step(ParamStore<T>& store, const AdamConfig& cfg) {
  bool any = false;
  for (const auto& e : store.entries()) any = any || e.param.has_grad();
  if (!any) throw StateError("adam_step: no parameter has a gradient; run backward() first");

  store.advance_step();
  const double t = static_cast<double>(store.step());
  const double bc1 = 1.0 - std::pow(cfg.beta1, t);
  const double bc2 = 1.0 - std::pow(cfg.beta2, t);
  const T b1 = static_cast<T>(cfg.beta1);
  const T b2 = static_cast<T>(cfg.beta2);
  for (auto& e : store.entries()) {
    if (!e.param.has_grad()) continue;
    auto p = e.param.values();
    auto g = e.param.grad();
    for (std::size_t i = 0; i < p.size(); ++i) {
      e.m[i] = b1 * e.m[i] + (T(1) - b1) * g[i];
      e.v[i] = b2 * e.v[i] + (T(1) - b2) * g[i] * g[i];
      const double mhat = e.m[i] / bc1;
      const double vhat = e.v[i] / bc2;
      p[i] -= static_cast<T>(cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps));
    }
  }
  store.zero_grad();
}

template <class T>
void save_checkpoint(const std::filesystem::path& path, const ParamStore<T>& store, const nlohmann::json& meta) {
  nlohmann::json header;
  header["format"] = "mixres-checkpoint";
  header["version"] = 1;
  header["dtype"] = "float32";
  header["byte_order"] = "little";
  header["step"] = store.step();
  header["meta"] = meta;
  header["tensors"] = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& e : store.entries()) {
    const Shape s = e.param.shape();
    header["tensors"].push_back({{"name", e.name}, {"shape", {s.n, s.c, s.h, s.w}}, {"offset", offset}});
    offset += e.param.numel() * sizeof(float);
  }
  const std::string text = header.dump();
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write checkpoint: " + path.string());
  os.write(kMagic, sizeof kMagic);
  const std::uint64_t len = text.size();
  os.write(reinterpret_cast<const char*>(&len), sizeof len);
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& e : store.entries()) {
    std::vector<float> buf(e.param.values().begin(), e.param.values().end());
    os.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float)));
  }
  if (!os) throw IoError("failed writing checkpoint: " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint: " + path.string());
  char magic[8];
  is.read(magic, sizeof magic);
  if (!is || std::memcmp(magic, kMagic, sizeof kMagic) != 0) throw IoError("not a checkpoint file: " + path.string());
  std::uint64_t len = 0;
  is.read(reinterpret_cast<char*>(&len), sizeof len);
  if (!is || len > (1u << 28)) throw IoError("corrupt checkpoint header: " + path.string());
  std::string text(len, '\0');
  is.read(text.data(), static_cast<std::streamsize>(len));
  if (!is) throw IoError("truncated checkpoint header: " + path.string());
  const std::streampos data_start = is.tellg();

  Checkpoint ck;
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("corrupt checkpoint header JSON: ") + e.what());
  }
  if (header.value("dtype", "") != "float32" || header.value("byte_order", "") != "little")
    throw IoError("unsupported checkpoint encoding");
  ck.meta = header.value("meta", nlohmann::json::object());
  for (const auto& t : header.at("tensors")) {
    const auto dims = t.at("shape").get<std::vector<int>>();
    if (dims.size() != 4) throw IoError("checkpoint tensor shape must have 4 dims");
    const Shape s{dims[0], dims[1], dims[2], dims[3]};
    std::vector<float> vals(s.numel());
    is.seekg(data_start + static_cast<std::streamoff>(t.at("offset").get<std::uint64_t>()));
    is.read(reinterpret_cast<char*>(vals.data()), static_cast<std::streamsize>(vals.size() * sizeof(float)));
    if (!is) throw IoError("truncated checkpoint data for " + t.at("name").get<std::string>());
    ck.params.add(t.at("name").get<std::string>(), s, std::move(vals));
  }
  ck.params.set_step(header.value("step", 0L));
  return ck;
}

template <class T>
void assign_from(ParamStore<T>& dst, const ParamStore<float>& src) {
  for (auto& e : dst.entries()) {
    const auto& s = src.get(e.name);
    if (!(s.shape() == e.param.shape())) throw ShapeError("checkpoint shape mismatch for " + e.name);
    std::copy(s.values().begin(), s.values().end(), e.param.values().begin());
  }
  dst.set_step(src.step());
}

template class ParamStore<float>;
template class ParamStore<double>;
template void adam_step(ParamStore<float>&, const AdamConfig&);
template void adam_step(ParamStore<double>&, const AdamConfig&);
template void save_checkpoint(const std::filesystem::path&, const ParamStore<float>&, const nlohmann::json&);
template void save_checkpoint(const std::filesystem::path&, const ParamStore<double>&, const nlohmann::json&);
template void assign_from(ParamStore<float>&, const ParamStore<float>&);
template void assign_from(ParamStore<double>&, const ParamStore<float>&);

}  // namespace mixres::nn
