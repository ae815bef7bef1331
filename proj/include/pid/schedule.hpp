#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "pid/ops.hpp"
#include "pid/tensor.hpp"

// Variance schedule and the closed-form Gaussian identities of the forward
// corruption process
//   z_t = sqrt(abar_t) z_0 + sqrt(1 - abar_t) eps,   eps ~ N(0, I)
// with abar_0 = 1 (t = 0 is the identity point). Timesteps are 1-based;
// accessors take t in [1, T] except alpha_bar which accepts [0, T].

namespace pid::diffusion {

struct ScheduleConfig {
  int timesteps = 1000;
  double beta_start = 1e-4;
  double beta_end = 0.02;
};

class NoiseSchedule {
public:
  static NoiseSchedule linear(const ScheduleConfig& cfg) {
    if (cfg.timesteps < 1) {
      throw std::invalid_argument("schedule: timesteps must be >= 1, got " +
                                  std::to_string(cfg.timesteps));
    }
    if (!(cfg.beta_start > 0.0) || !(cfg.beta_end < 1.0) || !(cfg.beta_start <= cfg.beta_end)) {
      throw std::invalid_argument("schedule: need 0 < beta_start <= beta_end < 1");
    }
    NoiseSchedule s;
    s.t_ = cfg.timesteps;
    s.beta_.assign(static_cast<std::size_t>(cfg.timesteps) + 1, 0.0);
    s.alpha_bar_.assign(static_cast<std::size_t>(cfg.timesteps) + 1, 1.0);
    double cum = 1.0;
    for (int t = 1; t <= cfg.timesteps; ++t) {
      const double frac = cfg.timesteps == 1
                              ? 0.0
                              : static_cast<double>(t - 1) / static_cast<double>(cfg.timesteps - 1);
      const double beta = cfg.beta_start + (cfg.beta_end - cfg.beta_start) * frac;
      s.beta_[static_cast<std::size_t>(t)] = beta;
      cum *= 1.0 - beta;
      s.alpha_bar_[static_cast<std::size_t>(t)] = cum;
    }
    return s;
  }

  int timesteps() const { return t_; }

  double beta(int t) const {
    check_step(t);
    return beta_[static_cast<std::size_t>(t)];
  }

  double alpha(int t) const { return 1.0 - beta(t); }

  double alpha_bar(int t) const {
    if (t < 0 || t > t_) {
      throw std::out_of_range("schedule: alpha_bar index " + std::to_string(t) +
                              " outside [0, " + std::to_string(t_) + "]");
    }
    return alpha_bar_[static_cast<std::size_t>(t)];
  }

private:
  void check_step(int t) const {
    if (t < 1 || t > t_) {
      throw std::out_of_range("schedule: step " + std::to_string(t) + " outside [1, " +
                              std::to_string(t_) + "]");
    }
  }

  int t_ = 0;
  std::vector<double> beta_;
  std::vector<double> alpha_bar_;
};

namespace detail {

template <typename S>
std::vector<S> per_batch(const std::vector<int>& t, const NoiseSchedule& sched,
                         double (*f)(const NoiseSchedule&, int)) {
  std::vector<S> out(t.size());
  for (std::size_t i = 0; i < t.size(); ++i) out[i] = static_cast<S>(f(sched, t[i]));
  return out;
}

}  // namespace detail

// z_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps, per-sample timesteps.
template <typename S>
Tensor<S> forward_diffuse(const Tensor<S>& x0, const Tensor<S>& eps, const std::vector<int>& t,
                          const NoiseSchedule& sched) {
  pid::detail::expect_same_shape(x0, eps, "forward_diffuse");
  if (static_cast<std::int64_t>(t.size()) != x0.dim(0)) {
    throw std::invalid_argument("forward_diffuse: timestep count does not match batch");
  }
  std::vector<S> c0(t.size()), c1(t.size());
  for (std::size_t i = 0; i < t.size(); ++i) {
    const double ab = sched.alpha_bar(t[i]);
    c0[i] = static_cast<S>(std::sqrt(ab));
    c1[i] = static_cast<S>(std::sqrt(1.0 - ab));
  }
  return add(scale_batch(x0, std::move(c0)), scale_batch(eps, std::move(c1)));
}

// x0_hat = (z_t - sqrt(1 - abar_t) eps_hat) / sqrt(abar_t). Exact inverse of
// forward_diffuse when eps_hat equals the true noise.
template <typename S>
Tensor<S> predict_x0(const Tensor<S>& zt, const Tensor<S>& eps_hat, const std::vector<int>& t,
                     const NoiseSchedule& sched) {
  pid::detail::expect_same_shape(zt, eps_hat, "predict_x0");
  if (static_cast<std::int64_t>(t.size()) != zt.dim(0)) {
    throw std::invalid_argument("predict_x0: timestep count does not match batch");
  }
  std::vector<S> inv(t.size()), c1(t.size());
  for (std::size_t i = 0; i < t.size(); ++i) {
    const double ab = sched.alpha_bar(t[i]);
    inv[i] = static_cast<S>(1.0 / std::sqrt(ab));
    c1[i] = static_cast<S>(std::sqrt(1.0 - ab));
  }
  return scale_batch(sub(zt, scale_batch(eps_hat, std::move(c1))), std::move(inv));
}

struct GaussianMoments {
  double mean_x0_coef = 0.0;  // coefficient on x0
  double mean_xt_coef = 0.0;  // coefficient on x_t
  double variance = 0.0;
};

// Closed-form posterior q(x_{t-1} | x_t, x_0):
//   mean = sqrt(abar_{t-1}) beta_t / (1 - abar_t) x0
//        + sqrt(alpha_t) (1 - abar_{t-1}) / (1 - abar_t) x_t
//   var  = (1 - abar_{t-1}) beta_t / (1 - abar_t)
inline GaussianMoments q_posterior_moments(int t, const NoiseSchedule& sched) {
  const double ab_t = sched.alpha_bar(t);
  const double ab_prev = sched.alpha_bar(t - 1);
  const double beta_t = sched.beta(t);
  const double alpha_t = sched.alpha(t);
  GaussianMoments m;
  m.mean_x0_coef = std::sqrt(ab_prev) * beta_t / (1.0 - ab_t);
  m.mean_xt_coef = std::sqrt(alpha_t) * (1.0 - ab_prev) / (1.0 - ab_t);
  m.variance = (1.0 - ab_prev) * beta_t / (1.0 - ab_t);
  return m;
}

template <typename S>
struct PosteriorTensors {
  Tensor<S> mean;
  std::vector<S> variance;  // per batch element
};

template <typename S>
PosteriorTensors<S> q_posterior(const Tensor<S>& x0, const Tensor<S>& xt,
                                const std::vector<int>& t, const NoiseSchedule& sched) {
  pid::detail::expect_same_shape(x0, xt, "q_posterior");
  if (static_cast<std::int64_t>(t.size()) != x0.dim(0)) {
    throw std::invalid_argument("q_posterior: timestep count does not match batch");
  }
  std::vector<S> c0(t.size()), ct(t.size()), var(t.size());
  for (std::size_t i = 0; i < t.size(); ++i) {
    const auto m = q_posterior_moments(t[i], sched);
    c0[i] = static_cast<S>(m.mean_x0_coef);
    ct[i] = static_cast<S>(m.mean_xt_coef);
    var[i] = static_cast<S>(m.variance);
  }
  PosteriorTensors<S> out;
  out.mean = add(scale_batch(x0, std::move(c0)), scale_batch(xt, std::move(ct)));
  out.variance = std::move(var);
  return out;
}

enum class StepVariance { Posterior, Beta };

// One ancestral reverse step t -> t-1 from a noise prediction. `noise` must
// be standard normal of z's shape; it is ignored at t = 1 where the
// transition is deterministic.
template <typename S>
Tensor<S> ddpm_step(const Tensor<S>& zt, const Tensor<S>& eps_hat, int t,
                    const NoiseSchedule& sched, const Tensor<S>& noise,
                    StepVariance variance_kind = StepVariance::Posterior) {
  const std::vector<int> tv(static_cast<std::size_t>(zt.dim(0)), t);
  auto x0_hat = predict_x0(zt, eps_hat, tv, sched);
  auto post = q_posterior(x0_hat, zt, tv, sched);
  if (t <= 1) return post.mean;
  const double var = variance_kind == StepVariance::Posterior
                         ? q_posterior_moments(t, sched).variance
                         : sched.beta(t);
  return add(post.mean, mul_scalar(noise, static_cast<S>(std::sqrt(var))));
}

// Non-Markovian jump t -> t_prev (t_prev < t, t_prev may be 0):
//   z_prev = sqrt(abar_prev) x0_hat + sqrt(1 - abar_prev - sigma^2) eps_hat
//          + sigma noise
//   sigma  = eta sqrt((1-abar_prev)/(1-abar_t)) sqrt(1 - abar_t/abar_prev)
// eta = 0 is deterministic; eta = 1 on consecutive steps matches ddpm_step.
template <typename S>
Tensor<S> ddim_step(const Tensor<S>& zt, const Tensor<S>& eps_hat, int t, int t_prev,
                    const NoiseSchedule& sched, double eta, const Tensor<S>& noise) {
  if (t_prev < 0 || t_prev >= t) {
    throw std::invalid_argument("ddim_step: need 0 <= t_prev < t, got t_prev=" +
                                std::to_string(t_prev) + " t=" + std::to_string(t));
  }
  const std::vector<int> tv(static_cast<std::size_t>(zt.dim(0)), t);
  auto x0_hat = predict_x0(zt, eps_hat, tv, sched);
  const double ab_t = sched.alpha_bar(t);
  const double ab_prev = sched.alpha_bar(t_prev);
  const double sigma = eta * std::sqrt((1.0 - ab_prev) / (1.0 - ab_t)) *
                       std::sqrt(1.0 - ab_t / ab_prev);
  const double dir_coef_sq = 1.0 - ab_prev - sigma * sigma;
  // guard: roundoff can push the direction coefficient a hair below zero
  const double dir_coef = std::sqrt(std::max(dir_coef_sq, 0.0));
  auto out = add(mul_scalar(x0_hat, static_cast<S>(std::sqrt(ab_prev))),
                 mul_scalar(eps_hat, static_cast<S>(dir_coef)));
  if (sigma > 0.0) {
    out = add(out, mul_scalar(noise, static_cast<S>(sigma)));
  }
  return out;
}

// Descending subsequence T = tau_1 > tau_2 > ... > tau_s >= 1, uniformly
// spaced (rounded); always includes T, and 1 when s >= 2.
inline std::vector<int> sampling_timesteps(int total_t, int steps) {
  if (steps < 1 || steps > total_t) {
    throw std::invalid_argument("sampling_timesteps: steps must be in [1, " +
                                std::to_string(total_t) + "], got " + std::to_string(steps));
  }
  std::vector<int> taus;
  taus.reserve(static_cast<std::size_t>(steps));
  if (steps == 1) {
    taus.push_back(total_t);
    return taus;
  }
  for (int i = 0; i < steps; ++i) {
    const double frac = static_cast<double>(i) / static_cast<double>(steps - 1);
    int tau = static_cast<int>(std::lround(total_t - frac * (total_t - 1)));
    if (!taus.empty() && tau >= taus.back()) tau = taus.back() - 1;
    if (tau < 1) break;
    taus.push_back(tau);
  }
  return taus;
}

}  // namespace pid::diffusion
