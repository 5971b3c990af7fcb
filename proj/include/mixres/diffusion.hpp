#pragma once

// Noise schedules, the forward noising process, training-example assembly
// and the conditional implicit (DDIM) restoration sampler. The sampler is
// generic over any callable that predicts noise.

#include <functional>
#include <iosfwd>
#include <span>
#include <utility>
#include <vector>

#include "json.hpp"
#include "mixres/image.hpp"
#include "mixres/rng.hpp"

namespace mixres::diffusion {

// Unbounded H x W x C state of the diffusion process (interleaved like ImageF).
struct Field {
  int height = 0;
  int width = 0;
  int channels = 0;
  std::vector<double> data;

  Field() = default;
  Field(int h, int w, int c, double fill = 0.0);

  static Field from_image(const ImageF& img);
  static Field randn(int h, int w, int c, Rng& rng);
  // Clamps to [0,1].
  ImageF to_image() const;

  std::size_t size() const { return data.size(); }
  bool same_shape(const Field& o) const {
    return height == o.height && width == o.width && channels == o.channels;
  }
  double mean() const;
  double stddev() const;
  bool operator==(const Field&) const = default;
};

class NoiseSchedule {
 public:
  // beta_t for t = 1..T, in order.
  explicit NoiseSchedule(std::vector<double> betas);

  int steps() const { return static_cast<int>(beta_.size()); }
  // 1-based accessors; alpha_bar(0) is 1.
  double beta(int t) const;
  double alpha(int t) const;
  double alpha_bar(int t) const;

  std::span<const double> betas() const { return beta_; }

  nlohmann::json to_json() const;
  static NoiseSchedule from_json(const nlohmann::json& j);

 private:
  void check_step(int t, int lo) const;

  std::vector<double> beta_;
  std::vector<double> alpha_;
  std::vector<double> alpha_bar_;  // index 0 holds alpha_bar_0 = 1
};

// Endpoints inclusive: beta_1 = beta_start, beta_T = beta_end.
NoiseSchedule linear_schedule(int T = 1000, double beta_start = 1e-4, double beta_end = 0.02);

struct Condition {
  ImageF degraded;
  DegMask mask;
};

// Predicts the injected noise for state J_t at step t under a condition.
using Denoiser = std::function<Field(const Field& state, const Condition& cond, int t)>;

struct TrainingExample {
  Field noisy;
  Field target_noise;
  Condition condition;
  int timestep = 0;
};

// sqrt(abar_t) * J0 + sqrt(1 - abar_t) * eps, no clamping.
Field forward_marginal_sample(const Field& J0, int t, const Field& eps, const NoiseSchedule& sched);
// sqrt(1 - beta_t) * J_prev + sqrt(beta_t) * eps.
Field forward_chain_step(const Field& J_prev, int t, const Field& eps, const NoiseSchedule& sched);

// Draws t ~ U{1..T} then eps ~ N(0, I) from `rng`, in that order.
TrainingExample make_training_example(const Field& J0, Condition condition, const NoiseSchedule& sched, Rng& rng);

// (t, t_next) visited at loop index i of an S-step subsequence over T steps.
std::pair<int, int> timestep_subsequence(int T, int S, int i);

Field ddim_step(const Field& J_t, int t, int t_next, const Field& eps_hat, const NoiseSchedule& sched);

// Ancestral update with variance beta_t; z is the injected normal draw
// (ignored at t = 1).
Field ancestral_step(const Field& J_t, int t, const Field& eps_hat, const NoiseSchedule& sched, const Field& z);
Field ancestral_step(const Field& J_t, int t, const Field& eps_hat, const NoiseSchedule& sched, Rng& rng);

struct TraceRow {
  int i;
  int t;
  int t_next;
  double mean;
  double stddev;
};

// DDIM trajectory from a given J_T; returns the unclamped final state.
Field ddim_sample(const Field& J_T, const Condition& cond, const Denoiser& denoiser, const NoiseSchedule& sched,
                  int S, std::vector<TraceRow>* trace = nullptr);

// Full ancestral trajectory over all T steps from a given J_T; unclamped.
Field ancestral_sample(const Field& J_T, const Condition& cond, const Denoiser& denoiser,
                       const NoiseSchedule& sched, Rng& rng);

// Draws J_T ~ N(0, I) shaped like the degraded image, runs the S-step
// sampler and clamps the result into [0,1].
ImageF restore(const Condition& cond, const Denoiser& denoiser, const NoiseSchedule& sched, int S, Rng& rng,
               std::vector<TraceRow>* trace = nullptr);

void write_trace_csv(std::ostream& os, const std::vector<TraceRow>& trace);

// Bayes-optimal noise predictor for J_0 ~ N(mu, sigma2 I).
Denoiser analytic_gaussian_denoiser(Field mu, double sigma2, const NoiseSchedule& sched);

}  // namespace mixres::diffusion
