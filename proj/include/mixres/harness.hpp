#pragma once

// End-to-end pipeline: the six weather cases, procedural clean images,
// dataset synthesis, training loops for both networks, restoration and
// evaluation.

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"
#include "mixres/degradation.hpp"
#include "mixres/diffusion.hpp"
#include "mixres/networks.hpp"
#include "mixres/objectives.hpp"
#include "mixres/params.hpp"

namespace mixres::harness {

namespace fs = std::filesystem;

// Malformed or inconsistent configuration (CLI exit code 2).
class ConfigError : public ParameterError {
 public:
  using ParameterError::ParameterError;
};

// Throws ConfigError unless `j` is an object whose keys all lie in `allowed`.
void check_config_keys(const nlohmann::json& j, const std::set<std::string>& allowed, const std::string& where);

enum class CaseId {
  Streak = 1,
  StreakSnow = 2,
  StreakLightHaze = 3,
  StreakHeavyHaze = 4,
  StreakModerateHazeRaindrop = 5,
  StreakSnowModerateHazeRaindrop = 6,
};

inline constexpr std::array<CaseId, 6> kAllCases{
    CaseId::Streak,          CaseId::StreakSnow,
    CaseId::StreakLightHaze, CaseId::StreakHeavyHaze,
    CaseId::StreakModerateHazeRaindrop, CaseId::StreakSnowModerateHazeRaindrop};

int case_number(CaseId id);
CaseId case_from_number(int n);
std::string case_name(CaseId id);

// Recipe with exactly the case's components enabled. A is sampled from the
// seed unless `atmospheric_light` is given.
degrade::DegradationRecipe case_recipe(CaseId id, std::uint64_t seed,
                                       std::optional<float> atmospheric_light = std::nullopt);

enum class CleanKind { Gradient, Shapes, Checker };
ImageF procedural_clean(CleanKind kind, int size, int channels, std::uint64_t seed);
// Kind chosen from the seed.
ImageF procedural_clean(int size, int channels, std::uint64_t seed);

// Runs fn(i) for i in [0, n) on up to `threads` workers. Work is split by
// index, so results never depend on the thread count.
void parallel_for(int n, int threads, const std::function<void(int)>& fn);

// ---------------------------------------------------------------- dataset

struct SynthConfig {
  std::vector<CaseId> cases{kAllCases.begin(), kAllCases.end()};
  int count_per_case = 4;
  int size = 32;
  int channels = 3;
  std::uint64_t seed = 1;
  double test_fraction = 0.1;  // last round(count * fraction) samples of each case
  std::optional<float> atmospheric_light;
  fs::path clean_dir;  // optional directory of PNGs used instead of procedural sources

  void validate() const;
  nlohmann::json to_json() const;
  static SynthConfig from_json(const nlohmann::json& j);
};

struct SampleRecord {
  std::string id;
  CaseId case_id = CaseId::Streak;
  std::string split;  // "train" or "test"
  std::uint64_t seed = 0;
  std::string clean;  // paths relative to the dataset root
  std::string degraded;
  std::string union_mask;
  std::vector<std::pair<std::string, std::string>> masks;  // (kind, path)
  degrade::DegradationRecipe recipe;
  std::map<std::string, std::string> digests;  // path -> sha256

  nlohmann::json to_json() const;
  static SampleRecord from_json(const nlohmann::json& j);
};

struct DatasetManifest {
  fs::path root;
  SynthConfig config;
  std::vector<SampleRecord> samples;

  std::vector<const SampleRecord*> split(const std::string& name) const;
  nlohmann::json to_json() const;
};

inline constexpr const char* kManifestName = "manifest.json";

DatasetManifest synth_dataset(const SynthConfig& cfg, const fs::path& out_dir, int threads = 1);
void save_manifest(const DatasetManifest& m);
// `path` is the manifest file or its directory. With verify set, every
// referenced file must exist and hash to its recorded digest.
DatasetManifest load_manifest(const fs::path& path, bool verify = true);

struct LoadedSample {
  const SampleRecord* record = nullptr;
  std::size_t index = 0;  // position in the manifest; keys per-sample seeds
  ImageF clean;
  ImageF degraded;
  DegMask mask;  // union of all degradation masks
};

LoadedSample load_sample(const DatasetManifest& m, const SampleRecord& r);
std::vector<LoadedSample> load_samples(const DatasetManifest& m, const std::vector<const SampleRecord*>& records);

// --------------------------------------------------------------- training

struct ScheduleConfig {
  int T = 1000;
  double beta_start = 1e-4;
  double beta_end = 0.02;
  diffusion::NoiseSchedule build() const;
  nlohmann::json to_json() const;
  static ScheduleConfig from_json(const nlohmann::json& j);
};

struct DenoiserTrainConfig {
  nn::DenoiserConfig net;
  ScheduleConfig schedule;
  int steps = 5000;
  int batch = 8;
  int patch = 32;
  nn::AdamConfig adam;
  double grad_clip = 0.0;  // global-norm clipping, 0 disables
  std::uint64_t seed = 2;
  int log_every = 50;

  nlohmann::json to_json() const;
  static DenoiserTrainConfig from_json(const nlohmann::json& j);
};

struct LossRow {
  long step = 0;
  double loss = 0.0;
  double rec = 0.0;  // refiner only
  double un = 0.0;   // refiner only
  double grad_norm = 0.0;
};

struct TrainResult {
  std::vector<LossRow> log;  // every step
  fs::path checkpoint;
};

// Loss logger callback invoked for every step; may be empty.
using StepCallback = std::function<void(const LossRow&)>;

// Throws NumericError if a loss or gradient becomes non-finite.
TrainResult train_denoiser(const DatasetManifest& m, const DenoiserTrainConfig& cfg, const fs::path& checkpoint,
                           const StepCallback& on_step = {});

// Mean of the last `window` logged losses.
double smoothed_loss(const std::vector<LossRow>& log, int window = 100);
void write_loss_csv(const fs::path& path, const std::vector<LossRow>& log, bool refiner, int every = 1);

struct LoadedDenoiser {
  nn::DenoiserNet<float> net;
  diffusion::NoiseSchedule schedule;
};
LoadedDenoiser load_denoiser(const fs::path& checkpoint);
nn::RefinerNet<float> load_refiner(const fs::path& checkpoint);

enum class MaskSource { Oracle, Baseline, File };
std::string to_string(MaskSource s);
MaskSource mask_source_from_string(const std::string& s);

struct SamplingConfig {
  int S = 25;
  MaskSource mask_source = MaskSource::Oracle;
  double baseline_threshold = 0.02;
  std::uint64_t seed = 4;

  nlohmann::json to_json() const;
  static SamplingConfig from_json(const nlohmann::json& j);
};

struct RefinerTrainConfig {
  nn::RefinerConfig net;
  int steps = 2000;
  int batch = 8;
  nn::AdamConfig adam;
  double grad_clip = 0.0;
  objectives::LossWeights weights;
  objectives::RecNorm rec_norm = objectives::RecNorm::L1;
  std::uint64_t seed = 3;
  int log_every = 50;

  nlohmann::json to_json() const;
  static RefinerTrainConfig from_json(const nlohmann::json& j);
};

// Coarse restorations come from the frozen denoiser, once per training sample.
TrainResult train_refiner(const DatasetManifest& m, const fs::path& denoiser_checkpoint, const SamplingConfig& sampling,
                          const RefinerTrainConfig& cfg, const fs::path& checkpoint, int threads = 1,
                          const StepCallback& on_step = {});

// ------------------------------------------------------------ restoration

// Per-item adapter: one network evaluation of batch size 1.
diffusion::Denoiser network_denoiser(const nn::DenoiserNet<float>& net);

DegMask select_mask(const LoadedSample& s, MaskSource source, double baseline_threshold, const AtmosphericLight& A,
                    const DegMask* file_mask = nullptr);

// Seeds for sample `index` of a run keyed by `seed`.
std::uint64_t restore_seed(std::uint64_t seed, std::uint64_t index);
std::uint64_t refine_seed(std::uint64_t seed, std::uint64_t index);

struct Refined {
  ImageF restored;
  std::vector<DegMask> uncertainty;  // combined U per scale, upsampled to full size
};

Refined refine_image(const nn::RefinerNet<float>& net, const ImageF& coarse, std::uint64_t seed);

// Restorations for every sample: coarse (diffusion) then refined.
struct RestoreStage {
  std::function<ImageF(const LoadedSample&)> coarse;
  std::function<ImageF(const ImageF& coarse, const LoadedSample&)> refine;
};

RestoreStage network_stage(const LoadedDenoiser& den, const nn::RefinerNet<float>& ref, const SamplingConfig& cfg);

// --------------------------------------------------------------- evaluate

struct MetricRow {
  std::string sample_id;
  int case_id = 0;
  std::string variant;  // degraded | wo_refinement | w_refinement
  double psnr_db = 0.0;
  double ssim = 0.0;
};

struct CaseAggregate {
  int case_id = 0;
  std::string name;
  int count = 0;
  std::map<std::string, std::pair<double, double>> means;  // variant -> (psnr, ssim)
};

struct MetricReport {
  std::vector<MetricRow> rows;
  std::vector<CaseAggregate> aggregates;

  double mean_psnr(const std::string& variant, std::optional<int> case_id = std::nullopt) const;
  nlohmann::json aggregate_json() const;
};

inline constexpr const char* kVariantDegraded = "degraded";
inline constexpr const char* kVariantCoarse = "wo_refinement";
inline constexpr const char* kVariantRefined = "w_refinement";

// The refined row reuses the very coarse image reported in the
// wo_refinement row.
MetricReport evaluate(const std::vector<LoadedSample>& samples, const RestoreStage& stage, int threads = 1);
void write_metrics_csv(const fs::path& path, const MetricReport& report);
void write_aggregate_json(const fs::path& path, const MetricReport& report);

// ------------------------------------------------------------- experiment

struct ExperimentConfig {
  int threads = 1;
  fs::path work_dir = "run";
  SynthConfig synth;
  DenoiserTrainConfig diffusion;
  RefinerTrainConfig refine;
  SamplingConfig sampling;

  fs::path dataset_dir() const { return work_dir / "data"; }
  fs::path denoiser_checkpoint() const { return work_dir / "denoiser.ckpt"; }
  fs::path refiner_checkpoint() const { return work_dir / "refiner.ckpt"; }
  fs::path metrics_csv() const { return work_dir / "metrics.csv"; }
  fs::path aggregate_json() const { return work_dir / "aggregate.json"; }

  nlohmann::json to_json() const;
  // Unknown keys are rejected with ConfigError.
  static ExperimentConfig from_json(const nlohmann::json& j);
  static ExperimentConfig load(const fs::path& path);
};

// Config snapshot plus digests of every input and output artifact that
// exists, and one content hash over the inputs.
nlohmann::json experiment_manifest(const ExperimentConfig& cfg);

}  // namespace mixres::harness
