#include <fstream>

#include "mixres/harness.hpp"
#include "mixres/hashing.hpp"

namespace mixres::harness {

nlohmann::json ExperimentConfig::to_json() const {
  return {{"threads", threads},
          {"work_dir", work_dir.string()},
          {"synth", synth.to_json()},
          {"diffusion", diffusion.to_json()},
          {"refine", refine.to_json()},
          {"sampling", sampling.to_json()}};
}

ExperimentConfig ExperimentConfig::from_json(const nlohmann::json& j) {
  check_config_keys(j, {"threads", "work_dir", "synth", "diffusion", "refine", "sampling"}, "config");
  ExperimentConfig c;
  try {
    c.threads = j.value("threads", c.threads);
    c.work_dir = j.value("work_dir", c.work_dir.string());
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  if (c.threads < 1) throw ConfigError("config: threads must be >= 1");
  if (j.contains("synth")) c.synth = SynthConfig::from_json(j["synth"]);
  if (j.contains("diffusion")) c.diffusion = DenoiserTrainConfig::from_json(j["diffusion"]);
  if (j.contains("refine")) c.refine = RefinerTrainConfig::from_json(j["refine"]);
  if (j.contains("sampling")) c.sampling = SamplingConfig::from_json(j["sampling"]);
  return c;
}

ExperimentConfig ExperimentConfig::load(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config: " + path.string());
  try {
    return from_json(nlohmann::json::parse(is));
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config " + path.string() + ": " + e.what());
  }
}

nlohmann::json experiment_manifest(const ExperimentConfig& cfg) {
  nlohmann::json j;
  j["format"] = "mixres-experiment";
  j["version"] = 1;
  j["config"] = cfg.to_json();
  j["seeds"] = {{"synth", cfg.synth.seed},
                {"diffusion", cfg.diffusion.seed},
                {"refine", cfg.refine.seed},
                {"sampling", cfg.sampling.seed}};
  j["schedule"] = cfg.diffusion.schedule.to_json();

  const std::pair<const char*, fs::path> artifacts[] = {
      {"dataset_manifest", cfg.dataset_dir() / kManifestName},
      {"denoiser_checkpoint", cfg.denoiser_checkpoint()},
      {"refiner_checkpoint", cfg.refiner_checkpoint()},
      {"metrics_csv", cfg.metrics_csv()},
      {"aggregate_json", cfg.aggregate_json()},
  };
  j["artifacts"] = nlohmann::json::object();
  for (const auto& [name, path] : artifacts) {
    nlohmann::json a{{"path", path.string()}};
    a["sha256"] = fs::exists(path) ? nlohmann::json(io::sha256_file(path)) : nlohmann::json(nullptr);
    j["artifacts"][name] = a;
  }

  // Inputs: the configuration and the synthesized dataset it trains on.
  std::string inputs = cfg.to_json().dump();
  inputs += '\n';
  inputs += j["artifacts"]["dataset_manifest"]["sha256"].dump();
  j["input_hash"] = io::sha256_hex(inputs);
  return j;
}

}  // namespace mixres::harness
