#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>

#include "mixres/harness.hpp"
#include "mixres/hashing.hpp"
#include "mixres/png_io.hpp"

namespace mixres::harness {

void check_config_keys(const nlohmann::json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected a JSON object");
  for (const auto& [k, v] : j.items())
    if (!allowed.count(k)) throw ConfigError(where + ": unknown key '" + k + "'");
}

namespace {

std::vector<fs::path> list_pngs(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw IoError("clean_dir is not a directory: " + dir.string());
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(dir)) {
    auto ext = e.path().extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
    if (e.is_regular_file() && ext == ".png") out.push_back(e.path());
  }
  std::sort(out.begin(), out.end());
  if (out.empty()) throw IoError("no PNG files in clean_dir: " + dir.string());
  return out;
}

// Center crop to size x size and convert to the requested channel count.
ImageF prepare_clean(const ImageF& src, int size, int channels, const fs::path& origin) {
  if (src.height() < size || src.width() < size)
    throw IoError("clean image smaller than " + std::to_string(size) + " px: " + origin.string());
  const int oy = (src.height() - size) / 2, ox = (src.width() - size) / 2;
  ImageF out(size, size, channels);
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x)
      for (int c = 0; c < channels; ++c) {
        float v;
        if (src.channels() == channels)
          v = src.at(y + oy, x + ox, c);
        else if (src.channels() == 1)
          v = src.at(y + oy, x + ox, 0);
        else
          v = (src.at(y + oy, x + ox, 0) + src.at(y + oy, x + ox, 1) + src.at(y + oy, x + ox, 2)) / 3.0f;
        out.at(y, x, c) = v;
      }
  return out;
}

std::string sample_id(CaseId c, int i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "c%d_%04d", case_number(c), i);
  return buf;
}

void write_json(const fs::path& path, const nlohmann::json& j) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path.string());
  os << j.dump(2) << "\n";
  if (!os) throw IoError("failed writing " + path.string());
}

}  // namespace

void SynthConfig::validate() const {
  if (cases.empty()) throw ConfigError("synth: at least one case is required");
  if (count_per_case < 1) throw ConfigError("synth: count_per_case must be >= 1");
  if (size < 16 || size > 1024) throw ConfigError("synth: size must be in [16, 1024]");
  if (channels != 1 && channels != 3) throw ConfigError("synth: channels must be 1 or 3");
  if (!(test_fraction >= 0.0 && test_fraction < 1.0)) throw ConfigError("synth: test_fraction must be in [0, 1)");
  if (atmospheric_light && !(*atmospheric_light >= 0.0f && *atmospheric_light <= 1.0f))
    throw ConfigError("synth: atmospheric_light must be in [0, 1]");
}

nlohmann::json SynthConfig::to_json() const {
  nlohmann::json j;
  j["cases"] = nlohmann::json::array();
  for (CaseId c : cases) j["cases"].push_back(case_number(c));
  j["count_per_case"] = count_per_case;
  j["size"] = size;
  j["channels"] = channels;
  j["seed"] = seed;
  j["test_fraction"] = test_fraction;
  j["atmospheric_light"] = atmospheric_light ? nlohmann::json(*atmospheric_light) : nlohmann::json(nullptr);
  j["clean_dir"] = clean_dir.string();
  return j;
}

SynthConfig SynthConfig::from_json(const nlohmann::json& j) {
  check_config_keys(j, {"cases", "count_per_case", "size", "channels", "seed", "test_fraction", "atmospheric_light", "clean_dir"},
             "synth");
  SynthConfig c;
  try {
    if (j.contains("cases")) {
      c.cases.clear();
      for (const auto& v : j["cases"]) c.cases.push_back(case_from_number(v.get<int>()));
    }
    c.count_per_case = j.value("count_per_case", c.count_per_case);
    c.size = j.value("size", c.size);
    c.channels = j.value("channels", c.channels);
    c.seed = j.value("seed", c.seed);
    c.test_fraction = j.value("test_fraction", c.test_fraction);
    if (j.contains("atmospheric_light") && !j["atmospheric_light"].is_null())
      c.atmospheric_light = j["atmospheric_light"].get<float>();
    c.clean_dir = j.value("clean_dir", std::string());
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("synth: ") + e.what());
  }
  c.validate();
  return c;
}

nlohmann::json SampleRecord::to_json() const {
  nlohmann::json j;
  j["id"] = id;
  j["case_id"] = case_number(case_id);
  j["case_name"] = case_name(case_id);
  j["split"] = split;
  j["seed"] = seed;
  j["clean"] = clean;
  j["degraded"] = degraded;
  j["union_mask"] = union_mask;
  j["masks"] = nlohmann::json::array();
  for (const auto& [kind, path] : masks) j["masks"].push_back({{"type", kind}, {"path", path}});
  j["recipe"] = degrade::to_json(recipe);
  j["digests"] = digests;
  return j;
}

SampleRecord SampleRecord::from_json(const nlohmann::json& j) {
  try {
    SampleRecord r;
    r.id = j.at("id").get<std::string>();
    r.case_id = case_from_number(j.at("case_id").get<int>());
    r.split = j.at("split").get<std::string>();
    r.seed = j.at("seed").get<std::uint64_t>();
    r.clean = j.at("clean").get<std::string>();
    r.degraded = j.at("degraded").get<std::string>();
    r.union_mask = j.at("union_mask").get<std::string>();
    for (const auto& m : j.at("masks")) r.masks.emplace_back(m.at("type").get<std::string>(), m.at("path").get<std::string>());
    r.recipe = degrade::recipe_from_json(j.at("recipe"));
    r.digests = j.at("digests").get<std::map<std::string, std::string>>();
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("malformed sample record: ") + e.what());
  }
}

std::vector<const SampleRecord*> DatasetManifest::split(const std::string& name) const {
  std::vector<const SampleRecord*> out;
  for (const auto& s : samples)
    if (s.split == name) out.push_back(&s);
  return out;
}

nlohmann::json DatasetManifest::to_json() const {
  nlohmann::json j;
  j["format"] = "mixres-dataset";
  j["version"] = 1;
  j["config"] = config.to_json();
  j["samples"] = nlohmann::json::array();
  for (const auto& s : samples) j["samples"].push_back(s.to_json());
  return j;
}

DatasetManifest synth_dataset(const SynthConfig& cfg, const fs::path& out_dir, int threads) {
  cfg.validate();
  std::error_code ec;
  for (const char* sub : {"images", "masks", "samples"}) {
    fs::create_directories(out_dir / sub, ec);
    if (ec) throw IoError("cannot create output directory " + (out_dir / sub).string() + ": " + ec.message());
  }
  const std::vector<fs::path> sources = cfg.clean_dir.empty() ? std::vector<fs::path>{} : list_pngs(cfg.clean_dir);

  DatasetManifest m;
  m.root = out_dir;
  m.config = cfg;
  const int per_case = cfg.count_per_case;
  const int n_test = static_cast<int>(std::lround(per_case * cfg.test_fraction));
  m.samples.resize(cfg.cases.size() * per_case);

  parallel_for(static_cast<int>(m.samples.size()), threads, [&](int g) {
    const CaseId case_id = cfg.cases[g / per_case];
    const int i = g % per_case;
    SampleRecord& r = m.samples[g];
    r.id = sample_id(case_id, i);
    r.case_id = case_id;
    r.split = i >= per_case - n_test ? "test" : "train";
    r.seed = derive_seed(cfg.seed, static_cast<std::uint64_t>(g));

    ImageF clean;
    if (sources.empty()) {
      clean = procedural_clean(cfg.size, cfg.channels, derive_seed(r.seed, 0));
    } else {
      const fs::path& src = sources[g % sources.size()];
      clean = prepare_clean(io::read_png(src), cfg.size, cfg.channels, src);
    }
    // Compose from the image exactly as it will read back from disk.
    for (float& v : clean.data()) v = io::quantize8(v);
    r.recipe = case_recipe(case_id, derive_seed(r.seed, 1), cfg.atmospheric_light);
    const auto comp = degrade::compose_mixed(clean, r.recipe);

    auto put = [&](const std::string& rel, auto&& writer) {
      writer(out_dir / rel);
      r.digests[rel] = io::sha256_file(out_dir / rel);
      return rel;
    };
    r.clean = put("images/" + r.id + "_clean.png", [&](const fs::path& p) { io::write_png(p, clean); });
    r.degraded = put("images/" + r.id + "_degraded.png", [&](const fs::path& p) { io::write_png(p, comp.degraded); });
    for (const auto& [kind, mask] : comp.masks) {
      const std::string name = degrade::to_string(kind);
      r.masks.emplace_back(name, put("masks/" + r.id + "_" + name + ".png",
                                     [&](const fs::path& p) { io::write_mask_png(p, mask); }));
    }
    r.union_mask = put("masks/" + r.id + "_union.png", [&](const fs::path& p) { io::write_mask_png(p, comp.union_mask); });
    write_json(out_dir / "samples" / (r.id + ".json"), r.to_json());
  });

  save_manifest(m);
  return m;
}

void save_manifest(const DatasetManifest& m) { write_json(m.root / kManifestName, m.to_json()); }

DatasetManifest load_manifest(const fs::path& path, bool verify) {
  const fs::path file = fs::is_directory(path) ? path / kManifestName : path;
  std::ifstream is(file);
  if (!is) throw IoError("cannot open dataset manifest: " + file.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw IoError("malformed dataset manifest " + file.string() + ": " + e.what());
  }
  if (j.value("format", "") != "mixres-dataset") throw IoError("not a dataset manifest: " + file.string());
  DatasetManifest m;
  m.root = file.parent_path();
  m.config = SynthConfig::from_json(j.at("config"));
  for (const auto& s : j.at("samples")) m.samples.push_back(SampleRecord::from_json(s));
  if (verify)
    for (const auto& s : m.samples)
      for (const auto& [rel, digest] : s.digests) {
        const fs::path p = m.root / rel;
        if (!fs::exists(p)) throw IoError("dataset file missing: " + p.string());
        if (io::sha256_file(p) != digest) throw IoError("dataset file digest mismatch: " + p.string());
      }
  return m;
}

LoadedSample load_sample(const DatasetManifest& m, const SampleRecord& r) {
  LoadedSample s;
  s.record = &r;
  s.index = static_cast<std::size_t>(&r - m.samples.data());
  if (s.index >= m.samples.size()) throw ParameterError("load_sample: record does not belong to this manifest");
  s.clean = io::read_png(m.root / r.clean);
  s.degraded = io::read_png(m.root / r.degraded);
  s.mask = io::read_mask_png(m.root / r.union_mask);
  if (!s.clean.same_dims(s.degraded) || !s.mask.same_dims(s.clean))
    throw ShapeError("sample " + r.id + ": clean, degraded and mask dimensions differ");
  return s;
}

std::vector<LoadedSample> load_samples(const DatasetManifest& m, const std::vector<const SampleRecord*>& records) {
  std::vector<LoadedSample> out;
  out.reserve(records.size());
  for (const auto* r : records) out.push_back(load_sample(m, *r));
  return out;
}

}  // namespace mixres::harness
