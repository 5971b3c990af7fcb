#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

#include "mixres/harness.hpp"
#include "mixres/metrics.hpp"

namespace mixres::harness {

using nn::Shape;
using nn::Tensor;

namespace {

Tensor<float> fields_to_tensor(const std::vector<const diffusion::Field*>& fields) {
  const auto& f = *fields.front();
  const Shape s{static_cast<int>(fields.size()), f.channels, f.height, f.width};
  std::vector<float> v(s.numel());
  for (int n = 0; n < s.n; ++n) {
    if (!fields[n]->same_shape(f)) throw ShapeError("fields_to_tensor: mixed shapes");
    for (int c = 0; c < s.c; ++c)
      for (std::size_t p = 0; p < s.plane(); ++p)
        v[(static_cast<std::size_t>(n) * s.c + c) * s.plane() + p] = static_cast<float>(fields[n]->data[p * s.c + c]);
  }
  return Tensor<float>::from(s, std::move(v));
}

diffusion::Field tensor_to_field(const Tensor<float>& t, int index) {
  const Shape s = t.shape();
  diffusion::Field f(s.h, s.w, s.c);
  for (int c = 0; c < s.c; ++c)
    for (std::size_t p = 0; p < s.plane(); ++p)
      f.data[p * s.c + c] = t.values()[(static_cast<std::size_t>(index) * s.c + c) * s.plane() + p];
  return f;
}

ImageF crop(const ImageF& img, int oy, int ox, int size) {
  if (oy == 0 && ox == 0 && img.height() == size && img.width() == size) return img;
  ImageF out(size, size, img.channels());
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x)
      for (int c = 0; c < img.channels(); ++c) out.at(y, x, c) = img.at(y + oy, x + ox, c);
  return out;
}

DegMask crop(const DegMask& m, int oy, int ox, int size) {
  DegMask out(size, size);
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) out.at(y, x) = m.at(y + oy, x + ox);
  return out;
}

template <class Store>
double clip_and_norm(Store& store, double clip) {
  const double gn = store.grad_norm();
  if (!std::isfinite(gn)) throw NumericError("gradient norm became non-finite");
  if (clip > 0.0 && gn > clip) {
    const float s = static_cast<float>(clip / gn);
    for (auto& e : store.entries())
      for (float& g : e.param.node()->grad) g *= s;
  }
  return gn;
}

void require_finite(double v, const char* what, long step) {
  if (!std::isfinite(v))
    throw NumericError(std::string(what) + " became non-finite at step " + std::to_string(step));
}

nn::AdamConfig adam_from_json(const nlohmann::json& j, nn::AdamConfig a) {
  a.lr = j.value("lr", a.lr);
  a.beta1 = j.value("beta1", a.beta1);
  a.beta2 = j.value("beta2", a.beta2);
  a.eps = j.value("eps", a.eps);
  if (!(a.lr > 0) || !(a.beta1 >= 0 && a.beta1 < 1) || !(a.beta2 >= 0 && a.beta2 < 1) || !(a.eps > 0))
    throw ConfigError("invalid optimizer settings");
  return a;
}

void adam_to_json(nlohmann::json& j, const nn::AdamConfig& a) {
  j["lr"] = a.lr;
  j["beta1"] = a.beta1;
  j["beta2"] = a.beta2;
  j["eps"] = a.eps;
}

template <class F>
auto config_guard(const char* where, F&& f) {
  try {
    return f();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string(where) + ": " + e.what());
  } catch (const ConfigError&) {
    throw;
  } catch (const ParameterError& e) {
    throw ConfigError(std::string(where) + ": " + e.what());
  }
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

}  // namespace

// ------------------------------------------------------------------ configs

diffusion::NoiseSchedule ScheduleConfig::build() const { return diffusion::linear_schedule(T, beta_start, beta_end); }

nlohmann::json ScheduleConfig::to_json() const {
  return {{"T", T}, {"beta_start", beta_start}, {"beta_end", beta_end}};
}

ScheduleConfig ScheduleConfig::from_json(const nlohmann::json& j) {
  return config_guard("schedule", [&] {
    check_config_keys(j, {"T", "beta_start", "beta_end"}, "schedule");
    ScheduleConfig c;
    c.T = j.value("T", c.T);
    c.beta_start = j.value("beta_start", c.beta_start);
    c.beta_end = j.value("beta_end", c.beta_end);
    c.build();
    return c;
  });
}

nlohmann::json DenoiserTrainConfig::to_json() const {
  nlohmann::json j{{"net", net.to_json()}, {"schedule", schedule.to_json()}, {"steps", steps},
                   {"batch", batch},       {"patch", patch},                 {"grad_clip", grad_clip},
                   {"seed", seed},         {"log_every", log_every}};
  adam_to_json(j, adam);
  return j;
}

DenoiserTrainConfig DenoiserTrainConfig::from_json(const nlohmann::json& j) {
  return config_guard("diffusion", [&] {
    check_config_keys(j, {"net", "schedule", "steps", "batch", "patch", "lr", "beta1", "beta2", "eps", "grad_clip", "seed",
                          "log_every"},
                      "diffusion");
    DenoiserTrainConfig c;
    if (j.contains("net")) {
      check_config_keys(j["net"], {"image_channels", "base_channels", "depth", "time_embed_dim"}, "diffusion.net");
      c.net = nn::DenoiserConfig::from_json(j["net"]);
    }
    if (j.contains("schedule")) c.schedule = ScheduleConfig::from_json(j["schedule"]);
    c.steps = j.value("steps", c.steps);
    c.batch = j.value("batch", c.batch);
    c.patch = j.value("patch", c.patch);
    c.adam = adam_from_json(j, c.adam);
    c.grad_clip = j.value("grad_clip", c.grad_clip);
    c.seed = j.value("seed", c.seed);
    c.log_every = j.value("log_every", c.log_every);
    if (c.steps < 0 || c.batch < 1 || c.patch < 4 || c.grad_clip < 0 || c.log_every < 1)
      throw ConfigError("diffusion: invalid training settings");
    return c;
  });
}

std::string to_string(MaskSource s) {
  switch (s) {
    case MaskSource::Oracle: return "oracle";
    case MaskSource::Baseline: return "baseline";
    case MaskSource::File: return "file";
  }
  return "oracle";
}

MaskSource mask_source_from_string(const std::string& s) {
  if (s == "oracle") return MaskSource::Oracle;
  if (s == "baseline") return MaskSource::Baseline;
  if (s == "file") return MaskSource::File;
  throw ConfigError("unknown mask source: " + s);
}

nlohmann::json SamplingConfig::to_json() const {
  return {{"S", S}, {"mask_source", to_string(mask_source)}, {"baseline_threshold", baseline_threshold}, {"seed", seed}};
}

SamplingConfig SamplingConfig::from_json(const nlohmann::json& j) {
  return config_guard("sampling", [&] {
    check_config_keys(j, {"S", "mask_source", "baseline_threshold", "seed"}, "sampling");
    SamplingConfig c;
    c.S = j.value("S", c.S);
    c.mask_source = mask_source_from_string(j.value("mask_source", to_string(c.mask_source)));
    c.baseline_threshold = j.value("baseline_threshold", c.baseline_threshold);
    c.seed = j.value("seed", c.seed);
    if (c.S < 1) throw ConfigError("sampling: S must be >= 1");
    if (!(c.baseline_threshold > 0 && c.baseline_threshold < 1))
      throw ConfigError("sampling: baseline_threshold must be in (0, 1)");
    return c;
  });
}

nlohmann::json RefinerTrainConfig::to_json() const {
  nlohmann::json j{{"net", net.to_json()},
                   {"steps", steps},
                   {"batch", batch},
                   {"grad_clip", grad_clip},
                   {"lambda", weights.lambda},
                   {"alpha_w", weights.alpha_w},
                   {"beta_w", weights.beta_w},
                   {"rec_norm", rec_norm == objectives::RecNorm::L1 ? "l1" : "mse"},
                   {"seed", seed},
                   {"log_every", log_every}};
  adam_to_json(j, adam);
  return j;
}

RefinerTrainConfig RefinerTrainConfig::from_json(const nlohmann::json& j) {
  return config_guard("refine", [&] {
    check_config_keys(j, {"net", "steps", "batch", "lr", "beta1", "beta2", "eps", "grad_clip", "lambda", "alpha_w", "beta_w",
                          "rec_norm", "seed", "log_every"},
                      "refine");
    RefinerTrainConfig c;
    if (j.contains("net")) {
      check_config_keys(j["net"], {"image_channels", "base_channels", "depth", "ueb_samples", "ueb_q"}, "refine.net");
      c.net = nn::RefinerConfig::from_json(j["net"]);
    }
    c.steps = j.value("steps", c.steps);
    c.batch = j.value("batch", c.batch);
    c.adam = adam_from_json(j, c.adam);
    c.grad_clip = j.value("grad_clip", c.grad_clip);
    c.weights.lambda = j.value("lambda", c.weights.lambda);
    c.weights.alpha_w = j.value("alpha_w", c.weights.alpha_w);
    c.weights.beta_w = j.value("beta_w", c.weights.beta_w);
    c.weights.validate();
    const std::string norm = j.value("rec_norm", std::string("l1"));
    if (norm == "l1")
      c.rec_norm = objectives::RecNorm::L1;
    else if (norm == "mse")
      c.rec_norm = objectives::RecNorm::MSE;
    else
      throw ConfigError("refine: rec_norm must be l1 or mse");
    c.seed = j.value("seed", c.seed);
    c.log_every = j.value("log_every", c.log_every);
    if (c.steps < 0 || c.batch < 1 || c.grad_clip < 0 || c.log_every < 1)
      throw ConfigError("refine: invalid training settings");
    return c;
  });
}

// ----------------------------------------------------------------- training

double smoothed_loss(const std::vector<LossRow>& log, int window) {
  if (log.empty()) return std::nan("");
  const std::size_t n = std::min<std::size_t>(log.size(), static_cast<std::size_t>(std::max(1, window)));
  double acc = 0.0;
  for (std::size_t i = log.size() - n; i < log.size(); ++i) acc += log[i].loss;
  return acc / static_cast<double>(n);
}

void write_loss_csv(const fs::path& path, const std::vector<LossRow>& log, bool refiner, int every) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write loss log: " + path.string());
  os << (refiner ? "step,loss,rec,un,grad_norm\n" : "step,loss,grad_norm\n");
  for (const auto& r : log) {
    if (r.step % std::max(1, every) != 0 && &r != &log.back()) continue;
    os << r.step << ',' << fmt(r.loss);
    if (refiner) os << ',' << fmt(r.rec) << ',' << fmt(r.un);
    os << ',' << fmt(r.grad_norm) << '\n';
  }
}

TrainResult train_denoiser(const DatasetManifest& m, const DenoiserTrainConfig& cfg, const fs::path& checkpoint,
                           const StepCallback& on_step) {
  const auto records = m.split("train");
  if (records.empty()) throw ConfigError("train-diffusion: dataset has no training samples");
  const auto samples = load_samples(m, records);
  const int H = samples.front().clean.height(), W = samples.front().clean.width();
  if (cfg.patch > H || cfg.patch > W) throw ConfigError("train-diffusion: patch larger than the images");

  const auto sched = cfg.schedule.build();
  nn::DenoiserConfig net_cfg = cfg.net;
  net_cfg.image_channels = samples.front().clean.channels();
  nn::DenoiserNet<float> net(net_cfg, derive_seed(cfg.seed, 0));
  Rng rng(derive_seed(cfg.seed, 1));

  TrainResult result;
  result.checkpoint = checkpoint;
  for (long step = 0; step < cfg.steps; ++step) {
    std::vector<diffusion::TrainingExample> batch;
    batch.reserve(cfg.batch);
    for (int b = 0; b < cfg.batch; ++b) {
      const auto& s = samples[rng.uniform_int(0, static_cast<int>(samples.size()) - 1)];
      const int oy = rng.uniform_int(0, H - cfg.patch), ox = rng.uniform_int(0, W - cfg.patch);
      diffusion::Condition cond{crop(s.degraded, oy, ox, cfg.patch), crop(s.mask, oy, ox, cfg.patch)};
      batch.push_back(diffusion::make_training_example(diffusion::Field::from_image(crop(s.clean, oy, ox, cfg.patch)),
                                                       std::move(cond), sched, rng));
    }
    std::vector<const diffusion::Field*> noisy, eps;
    std::vector<const ImageF*> deg;
    std::vector<const DegMask*> masks;
    std::vector<int> ts;
    for (const auto& ex : batch) {
      noisy.push_back(&ex.noisy);
      eps.push_back(&ex.target_noise);
      deg.push_back(&ex.condition.degraded);
      masks.push_back(&ex.condition.mask);
      ts.push_back(ex.timestep);
    }
    const auto pred = net.forward(fields_to_tensor(noisy), nn::images_to_tensor<float>(deg),
                                  nn::masks_to_tensor<float>(masks), ts);
    const auto loss = objectives::diffusion_loss(pred, fields_to_tensor(eps));
    LossRow row;
    row.step = step;
    row.loss = loss.item();
    require_finite(row.loss, "diffusion loss", step);
    loss.backward();
    row.grad_norm = clip_and_norm(net.params(), cfg.grad_clip);
    nn::adam_step(net.params(), cfg.adam);
    result.log.push_back(row);
    if (on_step) on_step(row);
  }

  nlohmann::json meta{{"kind", "denoiser"},
                      {"net", net_cfg.to_json()},
                      {"schedule", cfg.schedule.to_json()},
                      {"train", cfg.to_json()}};
  nn::save_checkpoint(checkpoint, net.params(), meta);
  return result;
}

LoadedDenoiser load_denoiser(const fs::path& checkpoint) {
  auto ck = nn::load_checkpoint(checkpoint);
  if (ck.meta.value("kind", "") != "denoiser") throw IoError("not a denoiser checkpoint: " + checkpoint.string());
  const auto cfg = nn::DenoiserConfig::from_json(ck.meta.at("net"));
  const auto sched = ScheduleConfig::from_json(ck.meta.at("schedule")).build();
  return LoadedDenoiser{nn::DenoiserNet<float>(cfg, std::move(ck.params)), sched};
}

nn::RefinerNet<float> load_refiner(const fs::path& checkpoint) {
  auto ck = nn::load_checkpoint(checkpoint);
  if (ck.meta.value("kind", "") != "refiner") throw IoError("not a refiner checkpoint: " + checkpoint.string());
  return nn::RefinerNet<float>(nn::RefinerConfig::from_json(ck.meta.at("net")), std::move(ck.params));
}

TrainResult train_refiner(const DatasetManifest& m, const fs::path& denoiser_checkpoint, const SamplingConfig& sampling,
                          const RefinerTrainConfig& cfg, const fs::path& checkpoint, int threads,
                          const StepCallback& on_step) {
  if (sampling.mask_source == MaskSource::File)
    throw ConfigError("train-refine: mask source must be oracle or baseline");
  const auto records = m.split("train");
  if (records.empty()) throw ConfigError("train-refine: dataset has no training samples");
  const auto samples = load_samples(m, records);
  const LoadedDenoiser den = load_denoiser(denoiser_checkpoint);

  // Coarse restorations are generated once with the frozen denoiser.
  std::vector<ImageF> coarse(samples.size());
  const auto denoise = network_denoiser(den.net);
  parallel_for(static_cast<int>(samples.size()), threads, [&](int k) {
    const auto& s = samples[k];
    const DegMask mask =
        select_mask(s, sampling.mask_source, sampling.baseline_threshold, s.record->recipe.atmospheric_light);
    Rng rng(restore_seed(sampling.seed, s.index));
    coarse[k] = diffusion::restore({s.degraded, mask}, denoise, den.schedule, sampling.S, rng);
  });

  nn::RefinerConfig net_cfg = cfg.net;
  net_cfg.image_channels = samples.front().clean.channels();
  nn::RefinerNet<float> net(net_cfg, derive_seed(cfg.seed, 0));
  Rng rng(derive_seed(cfg.seed, 1));

  TrainResult result;
  result.checkpoint = checkpoint;
  for (long step = 0; step < cfg.steps; ++step) {
    std::vector<const ImageF*> J, I, Jc;
    for (int b = 0; b < cfg.batch; ++b) {
      const int k = rng.uniform_int(0, static_cast<int>(samples.size()) - 1);
      J.push_back(&samples[k].clean);
      I.push_back(&samples[k].degraded);
      Jc.push_back(&coarse[k]);
    }
    Tensor<float> clean = nn::images_to_tensor<float>(J);
    Tensor<float> degraded = nn::images_to_tensor<float>(I);
    const auto out = net.forward(nn::images_to_tensor<float>(Jc), rng);
    const auto rec = objectives::rec_loss(clean, out.restored, cfg.rec_norm);

    // Uncertainty terms at every scale against pooled targets, averaged.
    std::vector<Tensor<float>> uns;
    for (std::size_t i = 0; i < out.per_scale.size(); ++i) {
      if (i > 0) {
        clean = nn::avg_pool2(clean);
        degraded = nn::avg_pool2(degraded);
      }
      const auto& maps = out.per_scale[i];
      const auto au = objectives::au_loss(degraded, maps.mean_prediction, maps.aleatoric, cfg.weights);
      uns.push_back(objectives::un_loss(clean, maps.mean_prediction, au));
    }
    const auto un = nn::scale(nn::add_n(uns), 1.0f / static_cast<float>(uns.size()));
    const auto total = objectives::total_loss(rec, un, cfg.weights.lambda);

    LossRow row;
    row.step = step;
    row.loss = total.item();
    row.rec = rec.item();
    row.un = un.item();
    require_finite(row.loss, "refiner loss", step);
    total.backward();
    row.grad_norm = clip_and_norm(net.params(), cfg.grad_clip);
    nn::adam_step(net.params(), cfg.adam);
    result.log.push_back(row);
    if (on_step) on_step(row);
  }

  nlohmann::json meta{{"kind", "refiner"}, {"net", net_cfg.to_json()}, {"train", cfg.to_json()},
                      {"sampling", sampling.to_json()}};
  nn::save_checkpoint(checkpoint, net.params(), meta);
  return result;
}

// -------------------------------------------------------------- restoration

diffusion::Denoiser network_denoiser(const nn::DenoiserNet<float>& net) {
  return [&net](const diffusion::Field& state, const diffusion::Condition& cond, int t) {
    nn::NoGradGuard guard;
    const auto out = net.forward(fields_to_tensor({&state}), nn::images_to_tensor<float>({&cond.degraded}),
                                 nn::masks_to_tensor<float>({&cond.mask}), {t});
    return tensor_to_field(out, 0);
  };
}

DegMask select_mask(const LoadedSample& s, MaskSource source, double baseline_threshold, const AtmosphericLight& A,
                    const DegMask* file_mask) {
  switch (source) {
    case MaskSource::Oracle: return s.mask;
    case MaskSource::Baseline: return degrade::predict_mask_baseline(s.degraded, A, baseline_threshold);
    case MaskSource::File:
      if (!file_mask) throw ConfigError("mask source 'file' requires a mask image");
      if (!file_mask->same_dims(s.degraded)) throw ShapeError("mask and image dimensions differ");
      return *file_mask;
  }
  throw ConfigError("unknown mask source");
}

std::uint64_t restore_seed(std::uint64_t seed, std::uint64_t index) { return derive_seed(derive_seed(seed, 0xD1), index); }
std::uint64_t refine_seed(std::uint64_t seed, std::uint64_t index) { return derive_seed(derive_seed(seed, 0xF2), index); }

Refined refine_image(const nn::RefinerNet<float>& net, const ImageF& coarse, std::uint64_t seed) {
  nn::NoGradGuard guard;
  Rng rng(seed);
  const auto out = net.forward(nn::images_to_tensor<float>({&coarse}), rng);
  Refined r;
  r.restored = nn::tensor_to_image(out.restored, 0);
  for (const auto& maps : out.per_scale) {
    const DegMask small = nn::tensor_to_plane(maps.combined, 0);
    const int f = coarse.height() / small.height();
    DegMask full(coarse.height(), coarse.width());
    for (int y = 0; y < full.height(); ++y)
      for (int x = 0; x < full.width(); ++x) full.at(y, x) = small.at(y / f, x / f);
    r.uncertainty.push_back(std::move(full));
  }
  return r;
}

RestoreStage network_stage(const LoadedDenoiser& den, const nn::RefinerNet<float>& ref, const SamplingConfig& cfg) {
  RestoreStage stage;
  stage.coarse = [&den, cfg](const LoadedSample& s) {
    const DegMask mask = select_mask(s, cfg.mask_source, cfg.baseline_threshold, s.record->recipe.atmospheric_light);
    Rng rng(restore_seed(cfg.seed, s.index));
    return diffusion::restore({s.degraded, mask}, network_denoiser(den.net), den.schedule, cfg.S, rng);
  };
  stage.refine = [&ref, cfg](const ImageF& coarse, const LoadedSample& s) {
    return refine_image(ref, coarse, refine_seed(cfg.seed, s.index)).restored;
  };
  return stage;
}

// ----------------------------------------------------------------- evaluate

double MetricReport::mean_psnr(const std::string& variant, std::optional<int> case_id) const {
  double acc = 0.0;
  int n = 0;
  for (const auto& r : rows)
    if (r.variant == variant && (!case_id || r.case_id == *case_id)) {
      acc += r.psnr_db;
      ++n;
    }
  return n ? acc / n : std::nan("");
}

nlohmann::json MetricReport::aggregate_json() const {
  nlohmann::json j;
  j["cases"] = nlohmann::json::array();
  for (const auto& a : aggregates) {
    nlohmann::json c{{"case_id", a.case_id}, {"name", a.name}, {"count", a.count}};
    for (const auto& [variant, m] : a.means) c[variant] = {{"psnr_db", m.first}, {"ssim", m.second}};
    j["cases"].push_back(c);
  }
  return j;
}

MetricReport evaluate(const std::vector<LoadedSample>& samples, const RestoreStage& stage, int threads) {
  struct Slot {
    double psnr[3];
    double ssim[3];
  };
  std::vector<Slot> slots(samples.size());
  parallel_for(static_cast<int>(samples.size()), threads, [&](int k) {
    const auto& s = samples[k];
    const ImageF coarse = stage.coarse(s);
    const ImageF refined = stage.refine(coarse, s);
    const ImageF* outs[3] = {&s.degraded, &coarse, &refined};
    for (int v = 0; v < 3; ++v) {
      slots[k].psnr[v] = metrics::psnr(*outs[v], s.clean);
      slots[k].ssim[v] = metrics::ssim(*outs[v], s.clean);
    }
  });

  static const char* kVariants[3] = {kVariantDegraded, kVariantCoarse, kVariantRefined};
  MetricReport report;
  std::map<int, std::vector<std::size_t>> by_case;
  for (std::size_t k = 0; k < samples.size(); ++k) {
    const int cid = case_number(samples[k].record->case_id);
    by_case[cid].push_back(k);
    for (int v = 0; v < 3; ++v)
      report.rows.push_back({samples[k].record->id, cid, kVariants[v], slots[k].psnr[v], slots[k].ssim[v]});
  }
  for (const auto& [cid, idx] : by_case) {
    CaseAggregate a;
    a.case_id = cid;
    a.name = case_name(case_from_number(cid));
    a.count = static_cast<int>(idx.size());
    for (int v = 0; v < 3; ++v) {
      double p = 0.0, q = 0.0;
      for (std::size_t k : idx) {
        p += slots[k].psnr[v];
        q += slots[k].ssim[v];
      }
      a.means[kVariants[v]] = {p / a.count, q / a.count};
    }
    report.aggregates.push_back(std::move(a));
  }
  return report;
}

void write_metrics_csv(const fs::path& path, const MetricReport& report) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write metrics: " + path.string());
  os << "sample_id,case_id,variant,psnr_db,ssim\n";
  for (const auto& r : report.rows)
    os << r.sample_id << ',' << r.case_id << ',' << r.variant << ',' << fmt(r.psnr_db) << ',' << fmt(r.ssim) << '\n';
  if (!os) throw IoError("failed writing metrics: " + path.string());
}

void write_aggregate_json(const fs::path& path, const MetricReport& report) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write aggregate: " + path.string());
  os << report.aggregate_json().dump(2) << '\n';
}

}  // namespace mixres::harness
