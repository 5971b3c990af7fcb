#include "mixres/diffusion.hpp"

#include <cmath>
#include <numeric>
#include <ostream>

#include "mixres/errors.hpp"

namespace mixres::diffusion {

Field::Field(int h, int w, int c, double fill) : height(h), width(w), channels(c) {
  if (h < 1 || w < 1 || c < 1) throw ShapeError("field dimensions must be >= 1");
  data.assign(static_cast<std::size_t>(h) * w * c, fill);
}

Field Field::from_image(const ImageF& img) {
  Field f(img.height(), img.width(), img.channels());
  std::copy(img.data().begin(), img.data().end(), f.data.begin());
  return f;
}

Field Field::randn(int h, int w, int c, Rng& rng) {
  Field f(h, w, c);
  for (double& v : f.data) v = rng.normal();
  return f;
}

ImageF Field::to_image() const {
  ImageF img(height, width, channels);
  for (std::size_t i = 0; i < data.size(); ++i)
    img.data()[i] = static_cast<float>(std::clamp(data[i], 0.0, 1.0));
  return img;
}

double Field::mean() const {
  return data.empty() ? 0.0 : std::accumulate(data.begin(), data.end(), 0.0) / static_cast<double>(data.size());
}

double Field::stddev() const {
  if (data.empty()) return 0.0;
  const double m = mean();
  double acc = 0.0;
  for (double v : data) acc += (v - m) * (v - m);
  return std::sqrt(acc / static_cast<double>(data.size()));
}

NoiseSchedule::NoiseSchedule(std::vector<double> betas) : beta_(std::move(betas)) {
  if (beta_.empty()) throw ParameterError("schedule needs at least one step");
  alpha_.resize(beta_.size());
  alpha_bar_.resize(beta_.size() + 1);
  alpha_bar_[0] = 1.0;
  for (std::size_t i = 0; i < beta_.size(); ++i) {
    if (!(beta_[i] > 0.0 && beta_[i] < 1.0)) throw ParameterError("beta_t must lie in (0,1)");
    alpha_[i] = 1.0 - beta_[i];
    alpha_bar_[i + 1] = alpha_bar_[i] * alpha_[i];
  }
}

void NoiseSchedule::check_step(int t, int lo) const {
  if (t < lo || t > steps()) throw ParameterError("timestep " + std::to_string(t) + " out of range");
}

double NoiseSchedule::beta(int t) const {
  check_step(t, 1);
  return beta_[t - 1];
}

double NoiseSchedule::alpha(int t) const {
  check_step(t, 1);
  return alpha_[t - 1];
}

double NoiseSchedule::alpha_bar(int t) const {
  check_step(t, 0);
  return alpha_bar_[t];
}

nlohmann::json NoiseSchedule::to_json() const { return {{"T", steps()}, {"beta", beta_}}; }

NoiseSchedule NoiseSchedule::from_json(const nlohmann::json& j) {
  try {
    auto betas = j.at("beta").get<std::vector<double>>();
    if (j.contains("T") && j["T"].get<int>() != static_cast<int>(betas.size()))
      throw ParameterError("schedule T does not match beta table length");
    return NoiseSchedule(std::move(betas));
  } catch (const nlohmann::json::exception& e) {
    throw ParameterError(std::string("malformed schedule JSON: ") + e.what());
  }
}

NoiseSchedule linear_schedule(int T, double beta_start, double beta_end) {
  if (T < 1) throw ParameterError("T must be >= 1");
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0))
    throw ParameterError("need 0 < beta_start <= beta_end < 1");
  std::vector<double> betas(T);
  for (int i = 0; i < T; ++i) {
    betas[i] = T == 1 ? beta_start : beta_start + (beta_end - beta_start) * static_cast<double>(i) / (T - 1);
  }
  betas.back() = T == 1 ? beta_start : beta_end;
  return NoiseSchedule(std::move(betas));
}

namespace {

void require_same(const Field& a, const Field& b, const char* what) {
  if (!a.same_shape(b)) throw ShapeError(std::string(what) + ": shape mismatch");
}

// out = ca * a + cb * b
Field axpby(double ca, const Field& a, double cb, const Field& b) {
  Field out = a;
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = ca * a.data[i] + cb * b.data[i];
  return out;
}

}  // namespace

Field forward_marginal_sample(const Field& J0, int t, const Field& eps, const NoiseSchedule& sched) {
  require_same(J0, eps, "forward_marginal_sample");
  if (t < 1) throw ParameterError("forward_marginal_sample: t must be >= 1");
  const double ab = sched.alpha_bar(t);
  return axpby(std::sqrt(ab), J0, std::sqrt(1.0 - ab), eps);
}

Field forward_chain_step(const Field& J_prev, int t, const Field& eps, const NoiseSchedule& sched) {
  require_same(J_prev, eps, "forward_chain_step");
  const double b = sched.beta(t);
  return axpby(std::sqrt(1.0 - b), J_prev, std::sqrt(b), eps);
}

TrainingExample make_training_example(const Field& J0, Condition condition, const NoiseSchedule& sched, Rng& rng) {
  TrainingExample ex;
  ex.timestep = rng.uniform_int(1, sched.steps());
  ex.target_noise = Field::randn(J0.height, J0.width, J0.channels, rng);
  ex.noisy = forward_marginal_sample(J0, ex.timestep, ex.target_noise, sched);
  ex.condition = std::move(condition);
  return ex;
}

std::pair<int, int> timestep_subsequence(int T, int S, int i) {
  if (!(1 <= S && S <= T)) throw ParameterError("timestep_subsequence: need 1 <= S <= T");
  if (i < 1 || i > S) throw ParameterError("timestep_subsequence: i out of range");
  const int t = (i - 1) * T / S + 1;
  const int t_next = i > 1 ? (i - 2) * T / S + 1 : 0;
  return {t, t_next};
}

Field ddim_step(const Field& J_t, int t, int t_next, const Field& eps_hat, const NoiseSchedule& sched) {
  require_same(J_t, eps_hat, "ddim_step");
  if (t < 1 || t_next < 0) throw ParameterError("ddim_step: need t >= 1 and t_next >= 0");
  if (t_next == t) return J_t;
  const double ab = sched.alpha_bar(t);
  const double ab_next = sched.alpha_bar(t_next);
  const double s = std::sqrt(1.0 - ab);
  const double inv = 1.0 / std::sqrt(ab);
  const double a_next = std::sqrt(ab_next);
  const double s_next = std::sqrt(1.0 - ab_next);
  Field out = J_t;
  for (std::size_t k = 0; k < out.data.size(); ++k) {
    const double e = eps_hat.data[k];
    const double j0 = (J_t.data[k] - s * e) * inv;
    out.data[k] = a_next * j0 + s_next * e;
  }
  return out;
}

Field ancestral_step(const Field& J_t, int t, const Field& eps_hat, const NoiseSchedule& sched, const Field& z) {
  require_same(J_t, eps_hat, "ancestral_step");
  const double b = sched.beta(t);
  const double a = sched.alpha(t);
  const double coef = b / std::sqrt(1.0 - sched.alpha_bar(t));
  const double inv = 1.0 / std::sqrt(a);
  const double sigma = t > 1 ? std::sqrt(b) : 0.0;
  if (t > 1) require_same(J_t, z, "ancestral_step");
  Field out = J_t;
  for (std::size_t k = 0; k < out.data.size(); ++k) {
    out.data[k] = inv * (J_t.data[k] - coef * eps_hat.data[k]);
    if (t > 1) out.data[k] += sigma * z.data[k];
  }
  return out;
}

Field ancestral_step(const Field& J_t, int t, const Field& eps_hat, const NoiseSchedule& sched, Rng& rng) {
  if (t > 1) return ancestral_step(J_t, t, eps_hat, sched, Field::randn(J_t.height, J_t.width, J_t.channels, rng));
  return ancestral_step(J_t, t, eps_hat, sched, Field{});
}

Field ddim_sample(const Field& J_T, const Condition& cond, const Denoiser& denoiser, const NoiseSchedule& sched,
                  int S, std::vector<TraceRow>* trace) {
  const int T = sched.steps();
  Field state = J_T;
  for (int i = S; i >= 1; --i) {
    const auto [t, t_next] = timestep_subsequence(T, S, i);
    const Field eps_hat = denoiser(state, cond, t);
    if (!eps_hat.same_shape(state)) throw ShapeError("denoiser output shape differs from state");
    state = ddim_step(state, t, t_next, eps_hat, sched);
    if (trace) trace->push_back({i, t, t_next, state.mean(), state.stddev()});
  }
  return state;
}

Field ancestral_sample(const Field& J_T, const Condition& cond, const Denoiser& denoiser,
                       const NoiseSchedule& sched, Rng& rng) {
  Field state = J_T;
  for (int t = sched.steps(); t >= 1; --t) state = ancestral_step(state, t, denoiser(state, cond, t), sched, rng);
  return state;
}

ImageF restore(const Condition& cond, const Denoiser& denoiser, const NoiseSchedule& sched, int S, Rng& rng,
               std::vector<TraceRow>* trace) {
  if (S < 1 || S > sched.steps()) throw ParameterError("restore: need 1 <= S <= T");
  const auto& I = cond.degraded;
  if (!cond.mask.same_dims(I)) throw ShapeError("restore: mask and degraded image dimensions differ");
  const Field J_T = Field::randn(I.height(), I.width(), I.channels(), rng);
  return ddim_sample(J_T, cond, denoiser, sched, S, trace).to_image();
}

void write_trace_csv(std::ostream& os, const std::vector<TraceRow>& trace) {
  os << "i,t,t_next,state_mean,state_std\n";
  for (const auto& r : trace) os << r.i << ',' << r.t << ',' << r.t_next << ',' << r.mean << ',' << r.stddev << '\n';
}

Denoiser analytic_gaussian_denoiser(Field mu, double sigma2, const NoiseSchedule& sched) {
  if (!(sigma2 >= 0.0)) throw ParameterError("sigma2 must be >= 0");
  return [mu = std::move(mu), sigma2, sched](const Field& state, const Condition&, int t) {
    if (!state.same_shape(mu)) throw ShapeError("analytic denoiser: state shape differs from mu");
    const double ab = sched.alpha_bar(t);
    const double sab = std::sqrt(ab);
    const double denom = ab * sigma2 + 1.0 - ab;
    const double s = std::sqrt(1.0 - ab);
    Field eps = state;
    for (std::size_t k = 0; k < eps.data.size(); ++k) {
      const double posterior_mean = (sigma2 * sab * state.data[k] + (1.0 - ab) * mu.data[k]) / denom;
      eps.data[k] = (state.data[k] - sab * posterior_mean) / s;
    }
    return eps;
  };
}

}  // namespace mixres::diffusion
