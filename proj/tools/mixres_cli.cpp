// Command-line entry point; one verb per pipeline stage.
//
//   mixres synth | train-diffusion | train-refine | restore | eval | report
//
// Every verb reads the optional --config JSON first and then applies flag
// overrides. Exit codes: 0 success, 1 I/O or other failure, 2 configuration
// error, 3 numeric failure.

#include <malloc.h>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "mixres/harness.hpp"
#include "mixres/png_io.hpp"

using namespace mixres;
using namespace mixres::harness;

namespace {

constexpr int kExitIo = 1;
constexpr int kExitConfig = 2;
constexpr int kExitNumeric = 3;

struct Common {
  std::string config;
  std::optional<int> threads;
  std::optional<std::string> work_dir;
};

ExperimentConfig load_config(const Common& c) {
  ExperimentConfig cfg = c.config.empty() ? ExperimentConfig{} : ExperimentConfig::load(c.config);
  if (c.threads) {
    if (*c.threads < 1) throw ConfigError("--threads must be >= 1");
    cfg.threads = *c.threads;
  }
  if (c.work_dir) cfg.work_dir = *c.work_dir;
  return cfg;
}

void add_common(CLI::App* app, Common& c) {
  app->add_option("-c,--config", c.config, "JSON experiment config");
  app->add_option("--threads", c.threads, "Worker threads (1 = bit-exact reproducible mode)");
  app->add_option("--work-dir", c.work_dir, "Directory for all pipeline artifacts");
}

template <class T>
void override(const std::optional<T>& flag, T& field) {
  if (flag) field = *flag;
}

std::vector<CaseId> parse_cases(const std::string& text) {
  std::vector<CaseId> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      out.push_back(case_from_number(std::stoi(item)));
    } catch (const std::logic_error&) {
      throw ConfigError("--cases expects a comma-separated list of 1..6, got '" + text + "'");
    }
  }
  if (out.empty()) throw ConfigError("--cases is empty");
  return out;
}

void print_progress(const char* what, const LossRow& r, int every, bool refiner) {
  if (r.step % every != 0) return;
  std::printf("%s step %ld loss %.6f", what, r.step, r.loss);
  if (refiner) std::printf(" rec %.6f un %.6f", r.rec, r.un);
  std::printf(" grad_norm %.4f\n", r.grad_norm);
  std::fflush(stdout);
}

void print_table(const MetricReport& report) {
  std::printf("%-4s %-46s %5s  %-16s %-16s %-16s\n", "case", "degradation", "n", "degraded", "w/o refinement",
              "w/ refinement");
  for (const auto& a : report.aggregates) {
    std::printf("%-4d %-46s %5d ", a.case_id, a.name.c_str(), a.count);
    for (const char* v : {kVariantDegraded, kVariantCoarse, kVariantRefined}) {
      const auto& m = a.means.at(v);
      std::printf(" %6.2f / %.4f ", m.first, m.second);
    }
    std::printf("\n");
  }
}

}  // namespace

int main(int argc, char** argv) {
  // Training allocates and frees the same large activation buffers every
  // step; keep them on the heap instead of returning them to the OS.
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);

  CLI::App app{"Mixed-weather image restoration with conditional diffusion"};
  app.require_subcommand(1);

  // synth
  Common synth_c;
  std::optional<std::string> synth_out, synth_cases;
  std::optional<int> synth_count, synth_size;
  std::optional<std::uint64_t> synth_seed;
  auto* synth = app.add_subcommand("synth", "Synthesize a degraded dataset with ground-truth masks");
  add_common(synth, synth_c);
  synth->add_option("-o,--out", synth_out, "Dataset directory (default <work-dir>/data)");
  synth->add_option("--cases", synth_cases, "Comma-separated case ids 1..6");
  synth->add_option("--count", synth_count, "Samples per case");
  synth->add_option("--size", synth_size, "Image side length in pixels");
  synth->add_option("--seed", synth_seed, "Dataset seed");

  // train-diffusion
  Common td_c;
  std::optional<std::string> td_data, td_out, td_log;
  std::optional<int> td_steps, td_batch;
  std::optional<double> td_lr;
  std::optional<std::uint64_t> td_seed;
  auto* td = app.add_subcommand("train-diffusion", "Train the conditional noise predictor");
  add_common(td, td_c);
  td->add_option("--data", td_data, "Dataset directory or manifest");
  td->add_option("-o,--out", td_out, "Checkpoint path");
  td->add_option("--log", td_log, "Loss log CSV (default next to the checkpoint)");
  td->add_option("--steps", td_steps, "Optimizer steps");
  td->add_option("--batch", td_batch, "Batch size");
  td->add_option("--lr", td_lr, "Learning rate");
  td->add_option("--seed", td_seed, "Training seed");

  // train-refine
  Common tr_c;
  std::optional<std::string> tr_data, tr_den, tr_out, tr_log, tr_mask;
  std::optional<int> tr_steps, tr_batch, tr_S;
  std::optional<double> tr_lr, tr_lambda;
  std::optional<std::uint64_t> tr_seed;
  auto* tr = app.add_subcommand("train-refine", "Train the uncertainty-guided refiner on coarse restorations");
  add_common(tr, tr_c);
  tr->add_option("--data", tr_data, "Dataset directory or manifest");
  tr->add_option("--denoiser", tr_den, "Denoiser checkpoint");
  tr->add_option("-o,--out", tr_out, "Checkpoint path");
  tr->add_option("--log", tr_log, "Loss log CSV");
  tr->add_option("--steps", tr_steps, "Optimizer steps");
  tr->add_option("--batch", tr_batch, "Batch size");
  tr->add_option("--lr", tr_lr, "Learning rate");
  tr->add_option("--lambda", tr_lambda, "Weight of the uncertainty-aware loss");
  tr->add_option("--S", tr_S, "Sampling steps for the coarse restorations");
  tr->add_option("--mask-source", tr_mask, "oracle | baseline");
  tr->add_option("--seed", tr_seed, "Training seed");

  // restore
  Common rs_c;
  std::optional<std::string> rs_data, rs_sample, rs_input, rs_mask_file, rs_den, rs_ref, rs_mask;
  std::string rs_out = "restored";
  std::optional<int> rs_S;
  std::optional<float> rs_A;
  std::optional<std::uint64_t> rs_seed;
  auto* rs = app.add_subcommand("restore", "Restore one image: diffusion sampling followed by refinement");
  add_common(rs, rs_c);
  rs->add_option("--data", rs_data, "Dataset directory (with --sample)");
  rs->add_option("--sample", rs_sample, "Sample id inside the dataset");
  rs->add_option("--input", rs_input, "Degraded PNG (instead of --sample)");
  rs->add_option("--mask", rs_mask_file, "Mask PNG for --mask-source file");
  rs->add_option("--atmospheric-light", rs_A, "A for the baseline mask predictor with --input");
  rs->add_option("--mask-source", rs_mask, "oracle | baseline | file");
  rs->add_option("--denoiser", rs_den, "Denoiser checkpoint");
  rs->add_option("--refiner", rs_ref, "Refiner checkpoint");
  rs->add_option("--S", rs_S, "Sampling steps");
  rs->add_option("--seed", rs_seed, "Sampling seed");
  rs->add_option("-o,--out-dir", rs_out, "Output directory");

  // eval
  Common ev_c;
  std::optional<std::string> ev_data, ev_den, ev_ref, ev_csv, ev_json, ev_mask;
  std::string ev_split = "test";
  std::optional<int> ev_S;
  std::optional<std::uint64_t> ev_seed;
  auto* ev = app.add_subcommand("eval", "Restore a dataset split and score PSNR/SSIM");
  add_common(ev, ev_c);
  ev->add_option("--data", ev_data, "Dataset directory or manifest");
  ev->add_option("--denoiser", ev_den, "Denoiser checkpoint");
  ev->add_option("--refiner", ev_ref, "Refiner checkpoint");
  ev->add_option("--split", ev_split, "train | test | all");
  ev->add_option("--S", ev_S, "Sampling steps");
  ev->add_option("--seed", ev_seed, "Sampling seed");
  ev->add_option("--mask-source", ev_mask, "oracle | baseline");
  ev->add_option("--csv", ev_csv, "Per-sample metrics CSV");
  ev->add_option("--json", ev_json, "Per-case aggregate JSON");

  // report
  Common rp_c;
  std::optional<std::string> rp_out;
  auto* rp = app.add_subcommand("report", "Write the experiment manifest and print the per-case table");
  add_common(rp, rp_c);
  rp->add_option("-o,--out", rp_out, "Experiment manifest path (default <work-dir>/experiment.json)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  try {
    if (*synth) {
      auto cfg = load_config(synth_c);
      if (synth_cases) cfg.synth.cases = parse_cases(*synth_cases);
      override(synth_count, cfg.synth.count_per_case);
      override(synth_size, cfg.synth.size);
      override(synth_seed, cfg.synth.seed);
      const fs::path out = synth_out ? fs::path(*synth_out) : cfg.dataset_dir();
      const auto m = synth_dataset(cfg.synth, out, cfg.threads);
      std::printf("wrote %zu samples to %s\n", m.samples.size(), (out / kManifestName).c_str());
    } else if (*td) {
      auto cfg = load_config(td_c);
      override(td_steps, cfg.diffusion.steps);
      override(td_batch, cfg.diffusion.batch);
      override(td_lr, cfg.diffusion.adam.lr);
      override(td_seed, cfg.diffusion.seed);
      const auto m = load_manifest(td_data ? fs::path(*td_data) : cfg.dataset_dir());
      const fs::path out = td_out ? fs::path(*td_out) : cfg.denoiser_checkpoint();
      if (out.has_parent_path()) fs::create_directories(out.parent_path());
      const int every = cfg.diffusion.log_every;
      const auto r = train_denoiser(m, cfg.diffusion, out,
                                    [every](const LossRow& row) { print_progress("diffusion", row, every, false); });
      const fs::path log = td_log ? fs::path(*td_log) : fs::path(out.string() + ".loss.csv");
      write_loss_csv(log, r.log, false, every);
      std::printf("saved %s (smoothed loss %.6f)\n", out.c_str(), smoothed_loss(r.log));
    } else if (*tr) {
      auto cfg = load_config(tr_c);
      override(tr_steps, cfg.refine.steps);
      override(tr_batch, cfg.refine.batch);
      override(tr_lr, cfg.refine.adam.lr);
      override(tr_lambda, cfg.refine.weights.lambda);
      override(tr_seed, cfg.refine.seed);
      override(tr_S, cfg.sampling.S);
      if (tr_mask) cfg.sampling.mask_source = mask_source_from_string(*tr_mask);
      cfg.refine.weights.validate();
      const auto m = load_manifest(tr_data ? fs::path(*tr_data) : cfg.dataset_dir());
      const fs::path den = tr_den ? fs::path(*tr_den) : cfg.denoiser_checkpoint();
      const fs::path out = tr_out ? fs::path(*tr_out) : cfg.refiner_checkpoint();
      if (out.has_parent_path()) fs::create_directories(out.parent_path());
      const int every = cfg.refine.log_every;
      const auto r = train_refiner(m, den, cfg.sampling, cfg.refine, out, cfg.threads,
                                   [every](const LossRow& row) { print_progress("refine", row, every, true); });
      const fs::path log = tr_log ? fs::path(*tr_log) : fs::path(out.string() + ".loss.csv");
      write_loss_csv(log, r.log, true, every);
      std::printf("saved %s (smoothed loss %.6f)\n", out.c_str(), smoothed_loss(r.log));
    } else if (*rs) {
      auto cfg = load_config(rs_c);
      override(rs_S, cfg.sampling.S);
      override(rs_seed, cfg.sampling.seed);
      if (rs_mask) cfg.sampling.mask_source = mask_source_from_string(*rs_mask);

      std::optional<DatasetManifest> m;
      LoadedSample sample;
      AtmosphericLight A(rs_A.value_or(1.0f));
      if (rs_sample) {
        m = load_manifest(rs_data ? fs::path(*rs_data) : cfg.dataset_dir());
        const SampleRecord* rec = nullptr;
        for (const auto& s : m->samples)
          if (s.id == *rs_sample) rec = &s;
        if (!rec) throw ConfigError("no sample with id " + *rs_sample);
        sample = load_sample(*m, *rec);
        A = rec->recipe.atmospheric_light;
      } else if (rs_input) {
        sample.degraded = io::read_png(*rs_input);
        if (cfg.sampling.mask_source == MaskSource::Oracle)
          throw ConfigError("oracle masks need --sample; use --mask-source file or baseline with --input");
        if (cfg.sampling.mask_source == MaskSource::Baseline && !rs_A)
          throw ConfigError("--mask-source baseline with --input needs --atmospheric-light");
      } else {
        throw ConfigError("restore needs --sample or --input");
      }
      std::optional<DegMask> file_mask;
      if (rs_mask_file) file_mask = io::read_mask_png(*rs_mask_file);
      const DegMask mask = select_mask(sample, cfg.sampling.mask_source, cfg.sampling.baseline_threshold, A,
                                       file_mask ? &*file_mask : nullptr);

      const auto den = load_denoiser(rs_den ? fs::path(*rs_den) : cfg.denoiser_checkpoint());
      const auto ref = load_refiner(rs_ref ? fs::path(*rs_ref) : cfg.refiner_checkpoint());
      Rng rng(restore_seed(cfg.sampling.seed, sample.index));
      const ImageF coarse =
          diffusion::restore({sample.degraded, mask}, network_denoiser(den.net), den.schedule, cfg.sampling.S, rng);
      const Refined refined = refine_image(ref, coarse, refine_seed(cfg.sampling.seed, sample.index));

      const fs::path out(rs_out);
      fs::create_directories(out);
      io::write_png(out / "coarse.png", coarse);
      io::write_png(out / "restored.png", refined.restored);
      io::write_mask_png(out / "mask.png", mask);
      for (std::size_t i = 0; i < refined.uncertainty.size(); ++i)
        io::write_mask_png(out / ("uncertainty_scale" + std::to_string(i) + ".png"), refined.uncertainty[i]);
      std::printf("wrote %s\n", (out / "restored.png").c_str());
    } else if (*ev) {
      auto cfg = load_config(ev_c);
      override(ev_S, cfg.sampling.S);
      override(ev_seed, cfg.sampling.seed);
      if (ev_mask) cfg.sampling.mask_source = mask_source_from_string(*ev_mask);
      if (cfg.sampling.mask_source == MaskSource::File) throw ConfigError("eval supports oracle or baseline masks");
      const auto m = load_manifest(ev_data ? fs::path(*ev_data) : cfg.dataset_dir());
      std::vector<const SampleRecord*> records;
      if (ev_split == "all") {
        for (const auto& s : m.samples) records.push_back(&s);
      } else if (ev_split == "train" || ev_split == "test") {
        records = m.split(ev_split);
      } else {
        throw ConfigError("--split must be train, test or all");
      }
      if (records.empty()) throw ConfigError("no samples in split " + ev_split);
      const auto samples = load_samples(m, records);
      const auto den = load_denoiser(ev_den ? fs::path(*ev_den) : cfg.denoiser_checkpoint());
      const auto ref = load_refiner(ev_ref ? fs::path(*ev_ref) : cfg.refiner_checkpoint());
      const auto report = evaluate(samples, network_stage(den, ref, cfg.sampling), cfg.threads);
      const fs::path csv = ev_csv ? fs::path(*ev_csv) : cfg.metrics_csv();
      const fs::path json = ev_json ? fs::path(*ev_json) : cfg.aggregate_json();
      for (const auto& p : {csv, json})
        if (p.has_parent_path()) fs::create_directories(p.parent_path());
      write_metrics_csv(csv, report);
      write_aggregate_json(json, report);
      print_table(report);
    } else if (*rp) {
      const auto cfg = load_config(rp_c);
      const auto manifest = experiment_manifest(cfg);
      const fs::path out = rp_out ? fs::path(*rp_out) : cfg.work_dir / "experiment.json";
      if (out.has_parent_path()) fs::create_directories(out.parent_path());
      std::ofstream(out) << manifest.dump(2) << '\n';
      std::printf("experiment manifest: %s\ninput hash: %s\n", out.c_str(),
                  manifest["input_hash"].get<std::string>().c_str());
      if (fs::exists(cfg.aggregate_json())) {
        std::ifstream is(cfg.aggregate_json());
        const auto agg = nlohmann::json::parse(is);
        std::printf("%-4s %-46s %5s  %-16s %-16s %-16s\n", "case", "degradation", "n", "degraded", "w/o refinement",
                    "w/ refinement");
        for (const auto& c : agg.at("cases")) {
          std::printf("%-4d %-46s %5d ", c.at("case_id").get<int>(), c.at("name").get<std::string>().c_str(),
                      c.at("count").get<int>());
          for (const char* v : {kVariantDegraded, kVariantCoarse, kVariantRefined})
            std::printf(" %6.2f / %.4f ", c.at(v).at("psnr_db").get<double>(), c.at(v).at("ssim").get<double>());
          std::printf("\n");
        }
      }
    }
  } catch (const NumericError& e) {
    std::fprintf(stderr, "numeric failure: %s\n", e.what());
    return kExitNumeric;
  } catch (const ParameterError& e) {
    std::fprintf(stderr, "configuration error: %s\n", e.what());
    return kExitConfig;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitIo;
  }
  return 0;
}
