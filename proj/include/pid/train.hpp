#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "pid/adamw.hpp"
#include "pid/codec.hpp"
#include "pid/denoiser.hpp"
#include "pid/ops.hpp"
#include "pid/rng.hpp"
#include "pid/schedule.hpp"
#include "pid/serialize.hpp"
#include "pid/tev.hpp"
#include "pid/tensor.hpp"

// Training of the conditional denoiser: the noise-matching objective plus two
// physics terms that push the predicted clean image toward the decomposition
// manifold of a frozen, self-supervised TeV network.
//   total = L_Noise + k1 * L_Rec + k2 * L_TeV

namespace pid::training {

template <typename S>
void freeze_params(const std::vector<nn::ParamRef<S>>& refs) {
  for (const auto& r : refs) {
    auto t = r.tensor;
    t.set_requires_grad(false);
  }
}

template <typename S>
bool all_frozen(const std::vector<nn::ParamRef<S>>& refs) {
  for (const auto& r : refs) {
    if (r.tensor.requires_grad()) return false;
  }
  return true;
}

struct LossWeights {
  double k1 = 50.0;  // reconstruction-through-decomposition weight
  double k2 = 5.0;   // decomposition-agreement weight
};

inline void validate_weights(const LossWeights& w) {
  if (w.k1 < 0.0 || w.k2 < 0.0) {
    throw std::invalid_argument("loss weights must be >= 0");
  }
}

// One training example: infrared target [1,H,W] and visible input [3,H,W],
// both in [-1,1].
template <typename S>
struct TrainPair {
  Tensor<S> infrared;
  Tensor<S> visible;
};

// ---------------------------------------------------------------------------
// Losses.
// ---------------------------------------------------------------------------

// Mean absolute error between true and predicted noise.
template <typename S>
Tensor<S> loss_noise(const Tensor<S>& eps, const Tensor<S>& eps_hat) {
  return mae(eps_hat, eps);
}

// Self-reconstruction through the frozen decomposition network:
//   MSE( reassemble(decompose(x)), x )  in [0,1] image space.
// Gradient flows through every use of x (decomposition input, grid means,
// and the comparison target); the network's own weights stay fixed.
template <typename S>
Tensor<S> loss_rec(const tev::TeVNetModel<S>& tevnet, const Tensor<S>& x_hat_norm) {
  if (!all_frozen(tevnet.params())) {
    throw std::invalid_argument("loss_rec: the decomposition network must be frozen");
  }
  auto comps = tevnet.forward(x_hat_norm);
  auto unit = tev::to_unit(x_hat_norm);
  Tensor<S> shat;
  if (comps.kind == tev::HeadKind::Mixing) {
    shat = tev::grid_downsample(unit, tevnet.config().m);
  }
  auto rec = tev::reconstruct(comps, shat);
  return mse(rec, unit);
}

// Agreement of decompositions: MSE between the concatenated component maps of
// the prediction and of the clean target (all component channels weighted
// equally). The target side carries no gradient.
template <typename S>
Tensor<S> loss_tev(const tev::TeVNetModel<S>& tevnet, const Tensor<S>& x_hat_norm,
                   const Tensor<S>& x0_norm) {
  if (!all_frozen(tevnet.params())) {
    throw std::invalid_argument("loss_tev: the decomposition network must be frozen");
  }
  auto pred = tevnet.forward(x_hat_norm).stacked();
  Tensor<S> ref;
  {
    NoGradGuard off;
    ref = tevnet.forward(x0_norm).stacked();
  }
  return mse(pred, ref);
}

// ---------------------------------------------------------------------------
// Model bundle and training step.
// ---------------------------------------------------------------------------

template <typename S>
struct PIDModel {
  diffusion::DenoiserModel<S> denoiser;
  diffusion::Conditioner<S> conditioner;
  diffusion::LatentCodec<S> codec;                // frozen unless identity
  std::optional<tev::TeVNetModel<S>> tevnet;      // frozen; required when k1 or k2 > 0

  std::vector<nn::ParamRef<S>> trainable_params() const {
    auto refs = denoiser.params();
    for (auto& r : conditioner.params()) refs.push_back(r);
    return refs;
  }

  // Freeze the physics components and verify the bundle is usable with the
  // given weights.
  void prepare(const LossWeights& w) {
    validate_weights(w);
    if ((w.k1 > 0.0 || w.k2 > 0.0) && !tevnet.has_value()) {
      throw std::invalid_argument(
          "physics losses enabled (k1 or k2 > 0) but no decomposition network is loaded");
    }
    if (tevnet.has_value()) freeze_params(tevnet->params());
    if (codec.trainable()) freeze_params(codec.params());
  }

  void save(const std::string& path) const {
    NamedTensors<S> entries;
    entries.emplace_back("meta/format", Tensor<S>::scalar(S(1)));
    const auto& dc = denoiser.config();
    entries.emplace_back("meta/latent", Tensor<S>::scalar(static_cast<S>(dc.latent_channels)));
    entries.emplace_back("meta/cond", Tensor<S>::scalar(static_cast<S>(dc.cond_channels)));
    entries.emplace_back("meta/base", Tensor<S>::scalar(static_cast<S>(dc.base_channels)));
    entries.emplace_back("meta/time_dim", Tensor<S>::scalar(static_cast<S>(dc.time_dim)));
    const auto& cc = conditioner.config();
    entries.emplace_back("meta/cond_kind",
                         Tensor<S>::scalar(cc.kind == diffusion::ConditionerKind::Mlp ? S(0)
                                                                                      : S(1)));
    entries.emplace_back("meta/cond_hidden", Tensor<S>::scalar(static_cast<S>(cc.hidden)));
    entries.emplace_back("meta/cond_out", Tensor<S>::scalar(static_cast<S>(cc.out_channels)));
    entries.emplace_back("meta/cond_factor", Tensor<S>::scalar(static_cast<S>(cc.factor)));
    auto refs = denoiser.params();
    for (auto& r : conditioner.params()) refs.push_back(r);
    nn::export_params(refs, entries);
    save_checkpoint(path, entries);
  }

  // Loads denoiser + conditioner weights; codec and tevnet are supplied by
  // the caller (they live in their own archives).
  static PIDModel load(const std::string& path, diffusion::LatentCodec<S> codec,
                       std::optional<tev::TeVNetModel<S>> tevnet) {
    auto entries = load_checkpoint<S>(path);
    diffusion::DenoiserConfig dc;
    dc.latent_channels = static_cast<std::int64_t>(checkpoint_get(entries, "meta/latent").item());
    dc.cond_channels = static_cast<std::int64_t>(checkpoint_get(entries, "meta/cond").item());
    dc.base_channels = static_cast<std::int64_t>(checkpoint_get(entries, "meta/base").item());
    dc.time_dim = static_cast<std::int64_t>(checkpoint_get(entries, "meta/time_dim").item());
    diffusion::ConditionerConfig cc;
    cc.kind = checkpoint_get(entries, "meta/cond_kind").item() == S(0)
                  ? diffusion::ConditionerKind::Mlp
                  : diffusion::ConditionerKind::Encoder;
    cc.hidden = static_cast<std::int64_t>(checkpoint_get(entries, "meta/cond_hidden").item());
    cc.out_channels = static_cast<std::int64_t>(checkpoint_get(entries, "meta/cond_out").item());
    cc.factor = static_cast<int>(checkpoint_get(entries, "meta/cond_factor").item());
    PIDModel mdl;
    mdl.denoiser = diffusion::DenoiserModel<S>::make(dc, 0);
    mdl.conditioner = diffusion::Conditioner<S>::make(cc, 0);
    mdl.codec = std::move(codec);
    mdl.tevnet = std::move(tevnet);
    auto refs = mdl.denoiser.params();
    for (auto& r : mdl.conditioner.params()) refs.push_back(r);
    nn::import_params(refs, entries);
    return mdl;
  }
};

struct LossBreakdown {
  double noise = 0.0;
  double rec = 0.0;
  double tev = 0.0;
  double total = 0.0;
  std::int64_t physics_count = 0;  // batch elements the physics terms covered
};

// One micro-batch: draw (t, eps) per element, corrupt, predict, assemble the
// objective, and backpropagate (gradients accumulate on the trainable
// parameters; the caller owns zeroing and the optimizer step).
//
// Per-element randomness comes from step_rng.fork(element): stream 0 yields
// the timestep, stream 1 the noise. loss_scale scales the backpropagated
// gradient (1/accumulation for averaged micro-batches), never the report.
// physics_t_cutoff > 0 restricts the physics terms to elements with
// t <= cutoff.
template <typename S>
LossBreakdown pid_training_step(PIDModel<S>& model, const diffusion::NoiseSchedule& sched,
                                const std::vector<TrainPair<S>>& batch, const LossWeights& weights,
                                const Rng& step_rng, int physics_t_cutoff = 0,
                                double loss_scale = 1.0,
                                std::int64_t element_offset = 0) {
  validate_weights(weights);
  if (batch.empty()) throw std::invalid_argument("pid_training_step: empty batch");
  const bool physics = weights.k1 > 0.0 || weights.k2 > 0.0;
  if (physics && !model.tevnet.has_value()) {
    throw std::invalid_argument(
        "pid_training_step: physics losses enabled but no decomposition network is loaded");
  }

  const auto b = static_cast<std::int64_t>(batch.size());
  std::vector<Tensor<S>> ir_items, rgb_items;
  ir_items.reserve(batch.size());
  rgb_items.reserve(batch.size());
  for (const auto& p : batch) {
    ir_items.push_back(p.infrared);
    rgb_items.push_back(p.visible);
  }
  auto x0 = stack_batch(ir_items);    // [B,1,H,W]
  auto rgb = stack_batch(rgb_items);  // [B,3,H,W]

  // Latent geometry comes from the codec.
  const int f = model.codec.factor();
  const pid::Shape zshape{b, model.codec.latent_channels(), x0.dim(2) / f, x0.dim(3) / f};
  const std::int64_t zper = shape_numel(zshape) / b;

  std::vector<int> t(static_cast<std::size_t>(b));
  std::vector<S> eps_data(static_cast<std::size_t>(shape_numel(zshape)));
  for (std::int64_t e = 0; e < b; ++e) {
    auto er = step_rng.fork(static_cast<std::uint64_t>(element_offset + e));
    t[static_cast<std::size_t>(e)] =
        static_cast<int>(er.fork(0).next_int(1, sched.timesteps()));
    std::vector<S> one(static_cast<std::size_t>(zper));
    er.fork(1).fill_normal(one);
    std::copy(one.begin(), one.end(), eps_data.begin() + e * zper);
  }
  auto eps = Tensor<S>::from_data(zshape, std::move(eps_data));

  Tensor<S> z0;
  {
    // The codec is frozen, so the clean latent carries no gradient path.
    NoGradGuard off;
    z0 = model.codec.encode(x0);
  }
  auto zt = diffusion::forward_diffuse(z0, eps, t, sched);
  auto cond = model.conditioner(rgb, &model.codec);
  auto eps_hat = model.denoiser(zt, cond, t);

  auto l_noise = loss_noise(eps, eps_hat);
  auto total = l_noise;
  LossBreakdown out;
  out.noise = static_cast<double>(l_noise.item());

  if (physics) {
    std::vector<std::int64_t> active;
    for (std::int64_t e = 0; e < b; ++e) {
      if (physics_t_cutoff <= 0 || t[static_cast<std::size_t>(e)] <= physics_t_cutoff) {
        active.push_back(e);
      }
    }
    out.physics_count = static_cast<std::int64_t>(active.size());
    if (!active.empty()) {
      auto x0_hat_lat = diffusion::predict_x0(zt, eps_hat, t, sched);
      auto x0_hat = model.codec.decode(x0_hat_lat);  // [-1,1] pixel space, unclamped
      const bool subset = out.physics_count != b;
      auto x0_hat_sel = subset ? select_batch(x0_hat, active) : x0_hat;
      if (weights.k1 > 0.0) {
        auto l_rec = loss_rec(*model.tevnet, x0_hat_sel);
        out.rec = static_cast<double>(l_rec.item());
        total = add(total, mul_scalar(l_rec, static_cast<S>(weights.k1)));
      }
      if (weights.k2 > 0.0) {
        auto x0_sel = subset ? select_batch(x0, active) : x0;
        auto l_tev = loss_tev(*model.tevnet, x0_hat_sel, x0_sel);
        out.tev = static_cast<double>(l_tev.item());
        total = add(total, mul_scalar(l_tev, static_cast<S>(weights.k2)));
      }
    }
  }
  out.total = static_cast<double>(total.item());
  auto objective = loss_scale == 1.0 ? total : mul_scalar(total, static_cast<S>(loss_scale));
  backward(objective);
  return out;
}

// ---------------------------------------------------------------------------
// Training loop.
// ---------------------------------------------------------------------------

struct PidTrainConfig {
  int iterations = 5000;  // iterations to run in this call
  int start_iteration = 0;  // completed iterations from a resumed run; offsets
                            // numbering and the per-iteration random streams
  std::int64_t batch = 4;
  int accumulation = 1;  // optimizer steps consume accumulation micro-batches
  double lr = 1e-4;
  double weight_decay = 0.0;
  std::uint64_t seed = 0;
  LossWeights weights;
  int physics_t_cutoff = 0;  // 0: physics terms at every timestep
  int log_every = 50;
};

template <typename S>
struct TrainHooks {
  std::function<void(int iteration, const LossBreakdown&)> on_log;
  std::function<void(int iteration, PIDModel<S>&)> on_checkpoint;
  int checkpoint_every = 0;  // 0: only the final checkpoint
};

// Deterministic training loop: iteration i uses per-element streams
// rng(seed).fork(i).fork(effective_element), so a run is a pure function of
// (seed, config, dataset order). Gradient accumulation averages micro-batch
// gradients, matching one large batch of batch*accumulation elements.
// Returns the logged breakdowns (one per logged iteration).
template <typename S>
std::vector<LossBreakdown> train(PIDModel<S>& model, const diffusion::NoiseSchedule& sched,
                                 const std::vector<TrainPair<S>>& dataset,
                                 const PidTrainConfig& cfg, const TrainHooks<S>& hooks = {}) {
  if (dataset.empty()) throw std::invalid_argument("train: empty dataset");
  if (cfg.accumulation < 1) throw std::invalid_argument("train: accumulation must be >= 1");
  if (cfg.batch < 1) throw std::invalid_argument("train: batch must be >= 1");
  if (cfg.start_iteration < 0) throw std::invalid_argument("train: start_iteration must be >= 0");
  model.prepare(cfg.weights);

  auto refs = model.trainable_params();
  auto params = nn::param_tensors(refs);
  AdamWConfig<S> ocfg;
  ocfg.lr = static_cast<S>(cfg.lr);
  ocfg.weight_decay = static_cast<S>(cfg.weight_decay);
  AdamW<S> opt(ocfg);

  Rng base(cfg.seed, 0x9121);
  const auto n = static_cast<std::int64_t>(dataset.size());
  std::vector<LossBreakdown> log;
  for (int step = 1; step <= cfg.iterations; ++step) {
    // Global numbering continues across resumed runs, so a resumed run draws
    // fresh per-iteration streams instead of replaying the first run's.
    const int iter = cfg.start_iteration + step;
    auto iter_rng = base.fork(static_cast<std::uint64_t>(iter));
    for (auto& p : params) p.zero_grad();
    LossBreakdown agg;
    const double inv_a = 1.0 / static_cast<double>(cfg.accumulation);
    for (int micro = 0; micro < cfg.accumulation; ++micro) {
      const std::int64_t offset = static_cast<std::int64_t>(micro) * cfg.batch;
      std::vector<TrainPair<S>> batch;
      batch.reserve(static_cast<std::size_t>(cfg.batch));
      for (std::int64_t e = 0; e < cfg.batch; ++e) {
        // stream 2 of the element rng picks the example, so micro-batching
        // does not perturb the draw for a given effective element index
        auto er = iter_rng.fork(static_cast<std::uint64_t>(offset + e));
        const auto pick = er.fork(2).next_int(0, n - 1);
        batch.push_back(dataset[static_cast<std::size_t>(pick)]);
      }
      auto part = pid_training_step(model, sched, batch, cfg.weights, iter_rng,
                                    cfg.physics_t_cutoff, inv_a, offset);
      agg.noise += part.noise * inv_a;
      agg.rec += part.rec * inv_a;
      agg.tev += part.tev * inv_a;
      agg.total += part.total * inv_a;
      agg.physics_count += part.physics_count;
    }
    opt.step(params);
    const bool last = step == cfg.iterations;
    const bool should_log = cfg.log_every > 0 && (iter % cfg.log_every == 0 || last);
    if (should_log) {
      if (hooks.on_log) hooks.on_log(iter, agg);
      log.push_back(agg);
    }
    if (hooks.on_checkpoint &&
        ((hooks.checkpoint_every > 0 && iter % hooks.checkpoint_every == 0) || last)) {
      hooks.on_checkpoint(iter, model);
    }
  }
  return log;
}

}  // namespace pid::training
