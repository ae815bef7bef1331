#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

#include "pid/codec.hpp"
#include "pid/denoiser.hpp"
#include "pid/rng.hpp"
#include "pid/schedule.hpp"
#include "pid/tensor.hpp"

// Reverse-process samplers. Images are processed one at a time with noise
// streams keyed by (image index, step index), so results are independent of
// how requests are batched.

namespace pid::diffusion {

enum class SamplerKind { Ddpm, Ddim };

inline const char* sampler_name(SamplerKind k) { return k == SamplerKind::Ddpm ? "ddpm" : "ddim"; }

inline SamplerKind sampler_from_name(const std::string& name) {
  if (name == "ddpm") return SamplerKind::Ddpm;
  if (name == "ddim") return SamplerKind::Ddim;
  throw std::invalid_argument("unknown sampler kind: " + name);
}

struct SamplerConfig {
  SamplerKind kind = SamplerKind::Ddpm;
  int steps = 0;     // 0: visit every timestep; ddim may use a strided subsequence
  double eta = 0.0;  // ddim stochasticity (1 reproduces the ancestral update)
  StepVariance variance = StepVariance::Posterior;  // ddpm noise scale
};

// Copy one batch element: [B,...] -> [1,...]. Data only, no gradient graph.
template <typename S>
Tensor<S> batch_slice(const Tensor<S>& x, std::int64_t b) {
  if (x.rank() < 1 || b < 0 || b >= x.dim(0)) {
    throw std::invalid_argument("batch_slice: index " + std::to_string(b) + " out of range for " +
                                shape_str(x.shape()));
  }
  Shape s = x.shape();
  s[0] = 1;
  const std::int64_t stride = x.numel() / x.dim(0);
  std::vector<S> data(x.data().begin() + b * stride, x.data().begin() + (b + 1) * stride);
  return Tensor<S>::from_data(s, std::move(data));
}

// Elementwise clamp to the model's [-1,1] value range. Data only.
template <typename S>
Tensor<S> clamp_signed_unit(const Tensor<S>& x) {
  std::vector<S> data = x.data();
  for (auto& v : data) v = std::clamp(v, S(-1), S(1));
  return Tensor<S>::from_data(x.shape(), std::move(data));
}

// Generate infrared predictions for a batch of visible images.
// rgb: [B,3,H,W] in [-1,1]; returns [B,1,H,W] clamped to [-1,1].
// on_step (optional) observes intermediate latents: (image, t, z_after_step).
template <typename S>
Tensor<S> sample(const DenoiserModel<S>& model, const Conditioner<S>& cond,
                 const LatentCodec<S>& codec, const NoiseSchedule& sched, const Tensor<S>& rgb,
                 const SamplerConfig& cfg, const Rng& rng,
                 const std::type_identity_t<
                     std::function<void(std::int64_t image, int t, const Tensor<S>& z)>>&
                     on_step = {}) {
  NoGradGuard no_grad;
  if (rgb.rank() != 4 || rgb.dim(1) != 3) {
    throw std::invalid_argument("sample: expected [B,3,H,W] visible input, got " +
                                shape_str(rgb.shape()));
  }
  const int total_t = sched.timesteps();
  std::vector<int> taus;
  switch (cfg.kind) {
    case SamplerKind::Ddpm:
      if (cfg.steps != 0 && cfg.steps != total_t) {
        throw std::invalid_argument(
            "sample: the ancestral sampler visits every timestep; use steps=0 or the ddim kind");
      }
      taus = sampling_timesteps(total_t, total_t);
      break;
    case SamplerKind::Ddim:
      if (cfg.eta < 0.0) throw std::invalid_argument("sample: eta must be >= 0");
      taus = sampling_timesteps(total_t, cfg.steps == 0 ? total_t : cfg.steps);
      break;
  }
  const int f = codec.factor();
  const std::int64_t h = rgb.dim(2), w = rgb.dim(3);
  if (h % f != 0 || w % f != 0) {
    throw std::invalid_argument("sample: image extents must be divisible by the codec factor");
  }
  const Shape zshape{1, codec.latent_channels(), h / f, w / f};
  const std::int64_t znumel = shape_numel(zshape);

  std::vector<Tensor<S>> outputs;
  outputs.reserve(static_cast<std::size_t>(rgb.dim(0)));
  for (std::int64_t b = 0; b < rgb.dim(0); ++b) {
    auto view = batch_slice(rgb, b);
    auto cond_map = cond(view, &codec);
    auto img_rng = rng.fork(static_cast<std::uint64_t>(b));

    std::vector<S> init(static_cast<std::size_t>(znumel));
    img_rng.fork(0).fill_normal(init);
    auto z = Tensor<S>::from_data(zshape, std::move(init));

    for (std::size_t i = 0; i < taus.size(); ++i) {
      const int t = taus[i];
      const int t_prev = i + 1 < taus.size() ? taus[i + 1] : 0;
      auto eps_hat = model(z, cond_map, {t});
      std::vector<S> nz(static_cast<std::size_t>(znumel));
      img_rng.fork(static_cast<std::uint64_t>(i) + 1).fill_normal(nz);
      auto noise = Tensor<S>::from_data(zshape, std::move(nz));
      if (cfg.kind == SamplerKind::Ddpm) {
        z = ddpm_step(z, eps_hat, t, sched, noise, cfg.variance);
      } else {
        z = ddim_step(z, eps_hat, t, t_prev, sched, cfg.eta, noise);
      }
      if (on_step) on_step(b, t, z);
    }
    auto img = clamp_signed_unit(codec.decode(z));
    // stack_batch prepends a batch axis, so store each image as [C,H,W]
    Shape chw(img.shape().begin() + 1, img.shape().end());
    outputs.push_back(Tensor<S>::from_data(std::move(chw), img.data()));
  }
  return stack_batch(outputs);
}

}  // namespace pid::diffusion
