#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <sys/wait.h>

#include <atomic>
#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>

#include "mixres/harness.hpp"
#include "mixres/hashing.hpp"
#include "mixres/metrics.hpp"
#include "mixres/png_io.hpp"
#include "test_util.hpp"

using namespace mixres;
using namespace mixres::harness;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / ("mixres_" + name)) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(MIXRES_CLI) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

SynthConfig small_synth() {
  SynthConfig c;
  c.cases = {CaseId::Streak, CaseId::StreakHeavyHaze};
  c.count_per_case = 5;
  c.size = 16;
  c.seed = 21;
  c.test_fraction = 0.2;
  return c;
}

}  // namespace

TEST_CASE("case table") {
  for (CaseId id : kAllCases) CHECK(case_from_number(case_number(id)) == id);
  CHECK_THROWS_AS(case_from_number(0), ParameterError);
  CHECK_THROWS_AS(case_from_number(7), ParameterError);

  struct Expect {
    bool snow, raindrops;
    std::optional<double> beta;
  };
  const Expect expect[] = {{false, false, {}},  {true, false, {}},  {false, false, 0.4},
                           {false, false, 1.6}, {false, true, 0.8}, {true, true, 0.8}};
  for (CaseId id : kAllCases) {
    const auto r = case_recipe(id, 99);
    const Expect& e = expect[case_number(id) - 1];
    CHECK(r.streaks.has_value());
    CHECK(r.snow.has_value() == e.snow);
    CHECK(r.raindrops.has_value() == e.raindrops);
    CHECK(r.haze.has_value() == e.beta.has_value());
    if (e.beta) CHECK(r.haze->beta == *e.beta);
    CHECK(r.atmospheric_light[0] >= 0.7f);
    CHECK(r.atmospheric_light[0] <= 1.0f);
    CHECK(case_recipe(id, 5, 0.75f).atmospheric_light[0] == 0.75f);
  }
}

TEST_CASE("procedural clean images") {
  for (CleanKind k : {CleanKind::Gradient, CleanKind::Shapes, CleanKind::Checker}) {
    const ImageF a = procedural_clean(k, 24, 3, 7);
    CHECK(a == procedural_clean(k, 24, 3, 7));
    CHECK_FALSE(a == procedural_clean(k, 24, 3, 8));
    for (float v : a.data()) {
      CHECK(v >= 0.0f);
      CHECK(v <= 1.0f);
    }
  }
  CHECK(procedural_clean(16, 1, 3).channels() == 1);
}

TEST_CASE("parallel_for visits each index once and forwards exceptions") {
  for (int threads : {1, 3}) {
    std::vector<std::atomic<int>> hits(50);
    parallel_for(50, threads, [&](int i) { ++hits[i]; });
    for (auto& h : hits) CHECK(h.load() == 1);
    CHECK_THROWS_AS(parallel_for(10, threads,
                                 [](int i) {
                                   if (i == 7) throw NumericError("boom");
                                 }),
                    NumericError);
  }
}

TEST_CASE("PNG round trips") {
  TempDir dir("png");
  Rng rng(3);
  for (int ch : {1, 3}) {
    ImageF img = test::random_image(9, 7, ch, rng);
    for (float& v : img.data()) v = io::quantize8(v);
    io::write_png(dir.path / "a.png", img);
    CHECK(io::read_png(dir.path / "a.png") == img);
  }
  DegMask m(5, 6);
  m.at(2, 3) = 1.0f;
  io::write_mask_png(dir.path / "m.png", m);
  CHECK(io::read_mask_png(dir.path / "m.png") == m);
  CHECK_THROWS_AS(io::read_png(dir.path / "missing.png"), IoError);
  std::ofstream(dir.path / "junk.png") << "not a png";
  CHECK_THROWS_AS(io::read_png(dir.path / "junk.png"), IoError);
  CHECK(io::quantize8(0.5f) == 128.0f / 255.0f);
  CHECK(io::quantize8(-1.0f) == 0.0f);
  CHECK(io::quantize8(2.0f) == 1.0f);
}

TEST_CASE("hashing") {
  CHECK(io::sha256_hex("abc") == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  CHECK(io::sha256_hex("") == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
}

TEST_CASE("dataset synthesis") {
  TempDir a("synth_a"), b("synth_b");
  const SynthConfig cfg = small_synth();
  const DatasetManifest m = synth_dataset(cfg, a.path, 1);
  REQUIRE(m.samples.size() == 10);
  CHECK(m.split("train").size() == 8);
  CHECK(m.split("test").size() == 2);
  CHECK(m.samples[0].id == "c1_0000");
  CHECK(m.samples[4].split == "test");
  CHECK(m.samples[9].id == "c4_0004");
  std::set<std::string> ids;
  for (const auto& r : m.samples) ids.insert(r.id);
  CHECK(ids.size() == 10);

  SUBCASE("byte-identical across runs and thread counts") {
    const DatasetManifest m2 = synth_dataset(cfg, b.path, 3);
    REQUIRE(m2.samples.size() == m.samples.size());
    for (std::size_t i = 0; i < m.samples.size(); ++i) CHECK(m.samples[i].digests == m2.samples[i].digests);
    CHECK(io::sha256_file(a.path / kManifestName) == io::sha256_file(b.path / kManifestName));
  }
  SUBCASE("manifest reload and tamper detection") {
    const DatasetManifest back = load_manifest(a.path);
    CHECK(back.samples.size() == 10);
    CHECK(back.to_json() == m.to_json());
    std::ofstream(a.path / m.samples[3].degraded, std::ios::app) << "x";
    CHECK_THROWS_AS(load_manifest(a.path), IoError);
    CHECK_NOTHROW(load_manifest(a.path / kManifestName, false));
  }
  SUBCASE("samples follow the compositing model") {
    for (const auto* r : m.split("train")) {
      const LoadedSample s = load_sample(m, *r);
      CHECK(s.index == static_cast<std::size_t>(&*r - &m.samples[0]));
      CHECK(s.clean.height() == 16);
      for (float v : s.mask.data()) CHECK((v == 0.0f || v == 1.0f));
      if (r->case_id != CaseId::Streak) continue;
      // Streak-only samples keep clean pixels outside the mask and show A inside.
      const float A = io::quantize8(r->recipe.atmospheric_light[0]);
      for (int y = 0; y < 16; ++y)
        for (int x = 0; x < 16; ++x)
          for (int c = 0; c < 3; ++c) {
            if (s.mask.at(y, x) == 0.0f)
              CHECK(s.degraded.at(y, x, c) == s.clean.at(y, x, c));
            else
              CHECK(s.degraded.at(y, x, c) == A);
          }
    }
  }
  SUBCASE("configuration validation") {
    auto j = cfg.to_json();
    CHECK(SynthConfig::from_json(j).to_json() == j);
    j["bogus"] = 1;
    CHECK_THROWS_AS(SynthConfig::from_json(j), ConfigError);
    SynthConfig bad = cfg;
    bad.count_per_case = 0;
    CHECK_THROWS_AS(bad.validate(), ParameterError);
    bad = cfg;
    bad.test_fraction = 1.5;
    CHECK_THROWS_AS(bad.validate(), ParameterError);
  }
}

TEST_CASE("evaluation with an identity stage") {
  TempDir dir("eval");
  const DatasetManifest m = synth_dataset(small_synth(), dir.path);
  const auto samples = load_samples(m, m.split("train"));
  const RestoreStage identity{[](const LoadedSample& s) { return s.clean; },
                              [](const ImageF& coarse, const LoadedSample&) { return coarse; }};
  const MetricReport r = evaluate(samples, identity, 1);
  REQUIRE(r.rows.size() == 3 * samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    CHECK(r.rows[3 * i].variant == kVariantDegraded);
    CHECK(r.rows[3 * i].psnr_db == metrics::psnr(samples[i].degraded, samples[i].clean));
    CHECK(r.rows[3 * i].ssim == metrics::ssim(samples[i].degraded, samples[i].clean));
    for (int k : {1, 2}) {
      CHECK(r.rows[3 * i + k].psnr_db == metrics::kPsnrCapDb);
      CHECK(r.rows[3 * i + k].ssim == 1.0);
    }
  }
  REQUIRE(r.aggregates.size() == 2);
  CHECK(r.aggregates[0].case_id == 1);
  CHECK(r.aggregates[0].count == 4);
  CHECK(r.aggregates[1].count == 4);
  CHECK(r.mean_psnr(kVariantRefined) == metrics::kPsnrCapDb);
  CHECK(r.mean_psnr(kVariantDegraded, 4) < r.mean_psnr(kVariantDegraded, 1) + 50);

  const MetricReport r3 = evaluate(samples, identity, 3);
  write_metrics_csv(dir.path / "a.csv", r);
  write_metrics_csv(dir.path / "b.csv", r3);
  CHECK(slurp(dir.path / "a.csv") == slurp(dir.path / "b.csv"));
  const std::string csv = slurp(dir.path / "a.csv");
  CHECK(csv.rfind("sample_id,case_id,variant,psnr_db,ssim\n", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 1 + 24);
  write_aggregate_json(dir.path / "agg.json", r);
  const auto j = nlohmann::json::parse(slurp(dir.path / "agg.json"));
  CHECK(j.dump() == r.aggregate_json().dump());
}

TEST_CASE("mask selection") {
  TempDir dir("mask");
  const DatasetManifest m = synth_dataset(small_synth(), dir.path);
  const LoadedSample s = load_sample(m, m.samples[0]);
  const AtmosphericLight A = s.record->recipe.atmospheric_light;
  CHECK(select_mask(s, MaskSource::Oracle, 0.02, A) == s.mask);
  CHECK(select_mask(s, MaskSource::Baseline, 0.02, A) == degrade::predict_mask_baseline(s.degraded, A, 0.02));
  CHECK_THROWS_AS(select_mask(s, MaskSource::File, 0.02, A), ParameterError);
  const DegMask f(16, 16);
  CHECK(select_mask(s, MaskSource::File, 0.02, A, &f) == f);
  CHECK(mask_source_from_string(to_string(MaskSource::Baseline)) == MaskSource::Baseline);
  CHECK_THROWS_AS(mask_source_from_string("psychic"), ParameterError);
}

TEST_CASE("short training runs are reproducible") {
  TempDir dir("train");
  const DatasetManifest m = synth_dataset(small_synth(), dir.path / "data");

  DenoiserTrainConfig dc;
  dc.net = nn::DenoiserConfig{3, 4, 2, 8};
  dc.steps = 4;
  dc.batch = 2;
  dc.patch = 8;
  dc.adam.lr = 1e-3;
  int calls = 0;
  const auto r1 = train_denoiser(m, dc, dir.path / "d1.ckpt", [&](const LossRow&) { ++calls; });
  const auto r2 = train_denoiser(m, dc, dir.path / "d2.ckpt");
  CHECK(calls == 4);
  REQUIRE(r1.log.size() == 4);
  CHECK(io::sha256_file(dir.path / "d1.ckpt") == io::sha256_file(dir.path / "d2.ckpt"));
  // The zero-initialized output gives an initial loss of E[eps^2] ~ 1.
  CHECK(r1.log[0].loss == doctest::Approx(1.0).epsilon(0.35));
  const LoadedDenoiser den = load_denoiser(dir.path / "d1.ckpt");
  CHECK(den.schedule.steps() == 1000);

  RefinerTrainConfig rc;
  rc.net = nn::RefinerConfig{3, 4, 2, nn::UEBConfig{2, 0.25}};
  rc.steps = 3;
  rc.batch = 2;
  rc.weights.lambda = 0.0;
  SamplingConfig sc;
  sc.S = 2;
  const auto f1 = train_refiner(m, dir.path / "d1.ckpt", sc, rc, dir.path / "r1.ckpt", 1);
  const auto f2 = train_refiner(m, dir.path / "d1.ckpt", sc, rc, dir.path / "r2.ckpt", 2);
  REQUIRE(f1.log.size() == 3);
  for (const auto& row : f1.log) CHECK(row.loss == row.rec);  // lambda = 0 drops the uncertainty term
  CHECK(io::sha256_file(dir.path / "r1.ckpt") == io::sha256_file(dir.path / "r2.ckpt"));

  const auto ref = load_refiner(dir.path / "r1.ckpt");
  const RestoreStage stage = network_stage(den, ref, sc);
  const auto samples = load_samples(m, m.split("test"));
  const auto e1 = evaluate(samples, stage, 1), e2 = evaluate(samples, stage, 2);
  write_metrics_csv(dir.path / "e1.csv", e1);
  write_metrics_csv(dir.path / "e2.csv", e2);
  CHECK(slurp(dir.path / "e1.csv") == slurp(dir.path / "e2.csv"));

  const Refined out = refine_image(ref, samples[0].degraded, 5);
  CHECK(out.uncertainty.size() == 2);
  CHECK(out.uncertainty[1].height() == 16);

  CHECK_THROWS(load_refiner(dir.path / "d1.ckpt"));
  CHECK_THROWS(load_denoiser(dir.path / "r1.ckpt"));

  write_loss_csv(dir.path / "loss.csv", f1.log, true, 1);
  const std::string csv = slurp(dir.path / "loss.csv");
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 4);
  CHECK(smoothed_loss(r1.log, 2) == doctest::Approx((r1.log[2].loss + r1.log[3].loss) / 2));
}

TEST_CASE("experiment configuration and manifest") {
  ExperimentConfig c;
  c.work_dir = fs::temp_directory_path() / "mixres_nonexistent_run";
  const auto j = c.to_json();
  CHECK(ExperimentConfig::from_json(j).to_json() == j);
  auto bad = j;
  bad["diffusion"]["stepz"] = 3;
  CHECK_THROWS_AS(ExperimentConfig::from_json(bad), ConfigError);
  const auto m1 = experiment_manifest(c);
  CHECK(m1["artifacts"]["denoiser_checkpoint"]["sha256"].is_null());
  c.synth.seed = 99;
  CHECK(experiment_manifest(c)["input_hash"] != m1["input_hash"]);
}

TEST_CASE("command-line exit codes") {
  TempDir dir("cli");
  const std::string wd = " --work-dir " + dir.path.string();
  CHECK(run_cli("--help") == 0);
  CHECK(run_cli("synth --no-such-flag") == 2);
  std::ofstream(dir.path / "bad.json") << R"({"synth": {"count_per_case": -3}})";
  CHECK(run_cli("synth --config " + (dir.path / "bad.json").string() + wd) == 2);
  std::ofstream(dir.path / "broken.json") << "{";
  CHECK(run_cli("synth --config " + (dir.path / "broken.json").string() + wd) == 2);
  CHECK(run_cli("synth --cases 1,9" + wd) == 2);
  CHECK(run_cli("synth --cases 1 --count 3 --size 16" + wd) == 0);
  CHECK(fs::exists(dir.path / "data" / kManifestName));
  CHECK(run_cli("train-diffusion --denoiser-missing" + wd) == 2);
  CHECK(run_cli("restore --sample c1_0000 --denoiser " + (dir.path / "none.ckpt").string() + wd) == 1);
  std::ofstream(dir.path / "huge.json")
      << R"({"diffusion": {"net": {"base_channels": 4, "time_embed_dim": 8}, "batch": 1, "patch": 8, "steps": 20, "lr": 1e30}})";
  CHECK(run_cli("train-diffusion --config " + (dir.path / "huge.json").string() + wd) == 3);
}
