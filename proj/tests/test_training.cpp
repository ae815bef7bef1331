#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <sstream>
#include <vector>

#include "pid/gradcheck.hpp"
#include "pid/ops.hpp"
#include "pid/rng.hpp"
#include "pid/tev.hpp"
#include "pid/train.hpp"

using pid::Rng;
using pid::Tensor;
using namespace pid::training;
namespace pd = pid::diffusion;
namespace pt = pid::tev;

namespace {

template <typename S>
Tensor<S> random_image(const pid::Shape& shape, Rng rng) {
  std::vector<S> data(static_cast<std::size_t>(pid::shape_numel(shape)));
  rng.fill_uniform(data, -1.0, 1.0);
  return Tensor<S>::from_data(shape, std::move(data));
}

template <typename S>
std::vector<TrainPair<S>> tiny_dataset(int n, std::int64_t hw, std::uint64_t seed) {
  std::vector<TrainPair<S>> out;
  Rng rng(seed, 0xda7a);
  for (int i = 0; i < n; ++i) {
    out.push_back({random_image<S>({1, hw, hw}, rng.fork(2 * i)),
                   random_image<S>({3, hw, hw}, rng.fork(2 * i + 1))});
  }
  return out;
}

template <typename S>
pt::TeVNetModel<S> frozen_tevnet(std::uint64_t seed, pt::HeadKind head = pt::HeadKind::Mixing) {
  pt::TeVNetConfig cfg;
  cfg.head = head;
  cfg.m = 4;
  cfg.base_channels = 2;
  auto net = pt::TeVNetModel<S>::init(cfg, seed);
  freeze_params(net.params());
  return net;
}

template <typename S>
PIDModel<S> tiny_model(std::uint64_t seed, bool with_tevnet = true) {
  pd::DenoiserConfig dc;
  dc.latent_channels = 1;
  dc.cond_channels = 2;
  dc.base_channels = 2;
  dc.time_dim = 4;
  pd::ConditionerConfig cc;
  cc.kind = pd::ConditionerKind::Mlp;
  cc.hidden = 2;
  cc.out_channels = 2;
  cc.factor = 1;
  PIDModel<S> mdl;
  mdl.denoiser = pd::DenoiserModel<S>::make(dc, seed);
  mdl.conditioner = pd::Conditioner<S>::make(cc, seed + 1);
  mdl.codec = pd::LatentCodec<S>::identity();
  if (with_tevnet) mdl.tevnet = frozen_tevnet<S>(seed + 2);
  return mdl;
}

pd::NoiseSchedule tiny_schedule(int t = 10) {
  pd::ScheduleConfig cfg;
  cfg.timesteps = t;
  cfg.beta_start = 0.01;
  cfg.beta_end = 0.25;
  return pd::NoiseSchedule::linear(cfg);
}

// ---------------------------------------------------------------------------
// select_batch (gradient-preserving row gather used by the timestep cutoff).
// ---------------------------------------------------------------------------

TEST(SelectBatch, ForwardGather) {
  auto x = Tensor<double>::from_data({3, 2}, {1, 2, 3, 4, 5, 6});
  auto y = pid::select_batch(x, {2, 0});
  ASSERT_EQ(y.dim(0), 2);
  EXPECT_DOUBLE_EQ(y.data()[0], 5.0);
  EXPECT_DOUBLE_EQ(y.data()[1], 6.0);
  EXPECT_DOUBLE_EQ(y.data()[2], 1.0);
  EXPECT_DOUBLE_EQ(y.data()[3], 2.0);
  EXPECT_THROW(pid::select_batch(x, {3}), std::invalid_argument);
  EXPECT_THROW(pid::select_batch(x, {-1}), std::invalid_argument);
  EXPECT_THROW(pid::select_batch(x, {}), std::invalid_argument);
}

TEST(SelectBatch, BackwardScatterAddsDuplicates) {
  auto x = Tensor<double>::from_data({3, 2}, {1, 2, 3, 4, 5, 6});
  x.set_requires_grad(true);
  auto y = pid::select_batch(x, {1, 1, 2});
  auto loss = pid::sum(y);
  pid::backward(loss);
  const auto& g = x.grad();
  EXPECT_DOUBLE_EQ(g[0], 0.0);
  EXPECT_DOUBLE_EQ(g[1], 0.0);
  EXPECT_DOUBLE_EQ(g[2], 2.0);  // row 1 selected twice
  EXPECT_DOUBLE_EQ(g[3], 2.0);
  EXPECT_DOUBLE_EQ(g[4], 1.0);
  EXPECT_DOUBLE_EQ(g[5], 1.0);
}

// ---------------------------------------------------------------------------
// Individual losses.
// ---------------------------------------------------------------------------

TEST(LossNoise, KnownValues) {
  auto eps = random_image<double>({2, 1, 4, 4}, Rng(1));
  EXPECT_DOUBLE_EQ(loss_noise(eps, eps).item(), 0.0);
  auto zero = Tensor<double>::zeros({2, 1, 4, 4});
  auto c = Tensor<double>::full({2, 1, 4, 4}, -0.75);
  EXPECT_DOUBLE_EQ(loss_noise(zero, c).item(), 0.75);
  auto bad = Tensor<double>::zeros({2, 1, 4, 5});
  EXPECT_THROW(loss_noise(zero, bad), std::invalid_argument);
}

TEST(LossRec, MatchesManualPipelineAndIsNonNegative) {
  auto net = frozen_tevnet<double>(3);
  auto x = random_image<double>({2, 1, 8, 8}, Rng(5));
  auto loss = loss_rec(net, x);
  EXPECT_GE(loss.item(), 0.0);

  auto comps = net.forward(x);
  auto unit = pt::to_unit(x);
  auto shat = pt::grid_downsample(unit, net.config().m);
  auto want = pid::mse(pt::reconstruct(comps, shat), unit);
  EXPECT_DOUBLE_EQ(loss.item(), want.item());
}

TEST(LossRec, RequiresFrozenNetwork) {
  pt::TeVNetConfig cfg;
  cfg.base_channels = 2;
  auto net = pt::TeVNetModel<double>::init(cfg, 1);  // params still trainable
  auto x = random_image<double>({1, 1, 8, 8}, Rng(2));
  EXPECT_THROW(loss_rec(net, x), std::invalid_argument);
  EXPECT_THROW(loss_tev(net, x, x), std::invalid_argument);
}

TEST(LossRec, GradientFlowsToInput) {
  auto net = frozen_tevnet<double>(7);
  auto x = random_image<double>({1, 1, 8, 8}, Rng(8));
  x.set_requires_grad(true);
  auto loss = loss_rec(net, x);
  pid::backward(loss);
  ASSERT_TRUE(x.has_grad());
  double norm = 0.0;
  for (auto g : x.grad()) norm += std::abs(g);
  EXPECT_GT(norm, 0.0);
  // The frozen network accumulated nothing.
  for (const auto& r : net.params()) EXPECT_FALSE(r.tensor.has_grad());
}

TEST(LossTev, IdenticalInputsGiveZero) {
  auto net = frozen_tevnet<double>(11);
  auto x = random_image<double>({2, 1, 8, 8}, Rng(12));
  EXPECT_DOUBLE_EQ(loss_tev(net, x, x).item(), 0.0);
}

TEST(LossTev, SymmetricAndSensitive) {
  auto net = frozen_tevnet<double>(13);
  auto a = random_image<double>({1, 1, 8, 8}, Rng(14));
  auto b = random_image<double>({1, 1, 8, 8}, Rng(15));
  EXPECT_DOUBLE_EQ(loss_tev(net, a, b).item(), loss_tev(net, b, a).item());

  // Inverting a non-constant image must change its decomposition.
  auto inv = pid::neg(a);
  EXPECT_GT(loss_tev(net, a, inv).item(), 0.0);
}

TEST(LossTev, WorksForDirectHead) {
  auto net = frozen_tevnet<double>(17, pt::HeadKind::Direct);
  auto a = random_image<double>({1, 1, 8, 8}, Rng(18));
  auto b = random_image<double>({1, 1, 8, 8}, Rng(19));
  EXPECT_GT(loss_tev(net, a, b).item(), 0.0);
  EXPECT_GE(loss_rec(net, a).item(), 0.0);
}

// ---------------------------------------------------------------------------
// Training step.
// ---------------------------------------------------------------------------

TEST(TrainingStep, BreakdownSumsToTotal) {
  auto model = tiny_model<double>(21);
  auto sched = tiny_schedule();
  auto data = tiny_dataset<double>(4, 8, 1);
  LossWeights w;
  w.k1 = 50.0;
  w.k2 = 5.0;
  model.prepare(w);
  for (auto& p : pid::nn::param_tensors(model.trainable_params())) p.zero_grad();
  std::vector<TrainPair<double>> batch(data.begin(), data.begin() + 3);
  auto out = pid_training_step(model, sched, batch, w, Rng(5, 0xabc));
  EXPECT_EQ(out.physics_count, 3);
  EXPECT_NEAR(out.total, out.noise + 50.0 * out.rec + 5.0 * out.tev, 1e-6);
  EXPECT_GT(out.noise, 0.0);
  EXPECT_GT(out.rec, 0.0);
}

TEST(TrainingStep, BaselineSkipsPhysicsExactly) {
  auto sched = tiny_schedule();
  auto data = tiny_dataset<double>(2, 8, 2);
  std::vector<TrainPair<double>> batch(data.begin(), data.end());
  LossWeights w;
  w.k1 = 0.0;
  w.k2 = 0.0;

  // Model without any decomposition network runs fine at (0,0)...
  auto bare = tiny_model<double>(31, false);
  bare.prepare(w);
  auto refs = bare.trainable_params();
  for (auto& p : pid::nn::param_tensors(refs)) p.zero_grad();
  auto out = pid_training_step(bare, sched, batch, w, Rng(6, 0xabc));
  EXPECT_EQ(out.total, out.noise);  // exact, not approximate
  EXPECT_EQ(out.rec, 0.0);
  EXPECT_EQ(out.tev, 0.0);
  EXPECT_EQ(out.physics_count, 0);

  // ...and produces gradients bitwise identical to a hand-written
  // noise-only step on an identically initialized model.
  auto manual = tiny_model<double>(31, false);
  auto mrefs = manual.trainable_params();
  for (auto& p : pid::nn::param_tensors(mrefs)) p.zero_grad();
  {
    std::vector<Tensor<double>> ir, rgb;
    for (const auto& p : batch) {
      ir.push_back(p.infrared);
      rgb.push_back(p.visible);
    }
    auto x0 = pid::stack_batch(ir);
    auto vis = pid::stack_batch(rgb);
    const auto b = static_cast<std::int64_t>(batch.size());
    Rng step_rng(6, 0xabc);
    std::vector<int> t(static_cast<std::size_t>(b));
    std::vector<double> eps_data(static_cast<std::size_t>(x0.numel()));
    const std::int64_t per = x0.numel() / b;
    for (std::int64_t e = 0; e < b; ++e) {
      auto er = step_rng.fork(static_cast<std::uint64_t>(e));
      t[static_cast<std::size_t>(e)] = static_cast<int>(er.fork(0).next_int(1, sched.timesteps()));
      std::vector<double> one(static_cast<std::size_t>(per));
      er.fork(1).fill_normal(one);
      std::copy(one.begin(), one.end(), eps_data.begin() + e * per);
    }
    auto eps = Tensor<double>::from_data(x0.shape(), std::move(eps_data));
    auto zt = pd::forward_diffuse(x0, eps, t, sched);
    auto cond = manual.conditioner(vis, &manual.codec);
    auto eps_hat = manual.denoiser(zt, cond, t);
    pid::backward(pid::mae(eps_hat, eps));
  }
  ASSERT_EQ(refs.size(), mrefs.size());
  for (std::size_t i = 0; i < refs.size(); ++i) {
    ASSERT_TRUE(refs[i].tensor.has_grad());
    ASSERT_TRUE(mrefs[i].tensor.has_grad());
    const auto& a = refs[i].tensor.grad();
    const auto& m = mrefs[i].tensor.grad();
    ASSERT_EQ(a.size(), m.size());
    for (std::size_t j = 0; j < a.size(); ++j) {
      EXPECT_EQ(a[j], m[j]) << refs[i].name << "[" << j << "]";
    }
  }
}

TEST(TrainingStep, PhysicsRequiresTevnet) {
  auto model = tiny_model<double>(41, false);
  auto sched = tiny_schedule();
  auto data = tiny_dataset<double>(1, 8, 3);
  LossWeights w;
  w.k1 = 50.0;
  w.k2 = 0.0;
  EXPECT_THROW(model.prepare(w), std::invalid_argument);
  std::vector<TrainPair<double>> batch(data.begin(), data.end());
  EXPECT_THROW(pid_training_step(model, sched, batch, w, Rng(1)), std::invalid_argument);
}

TEST(TrainingStep, TimestepCutoffLimitsPhysics) {
  auto model = tiny_model<double>(43);
  auto sched = tiny_schedule(10);
  auto data = tiny_dataset<double>(6, 8, 4);
  LossWeights w;  // defaults 50, 5
  model.prepare(w);
  auto params = pid::nn::param_tensors(model.trainable_params());

  // Find the drawn timesteps for this step rng to pick a cutoff that splits
  // the batch.
  Rng step_rng(9, 0xabc);
  std::vector<int> drawn;
  for (std::int64_t e = 0; e < 6; ++e) {
    drawn.push_back(static_cast<int>(step_rng.fork(e).fork(0).next_int(1, 10)));
  }
  std::vector<int> sorted = drawn;
  std::sort(sorted.begin(), sorted.end());
  const int cutoff = sorted[2];
  std::int64_t expect_count = 0;
  for (int t : drawn) {
    if (t <= cutoff) ++expect_count;
  }
  ASSERT_GT(expect_count, 0);
  ASSERT_LT(expect_count, 6);

  std::vector<TrainPair<double>> batch(data.begin(), data.end());
  for (auto& p : params) p.zero_grad();
  auto out = pid_training_step(model, sched, batch, w, step_rng, cutoff);
  EXPECT_EQ(out.physics_count, expect_count);
  EXPECT_NEAR(out.total, out.noise + 50.0 * out.rec + 5.0 * out.tev, 1e-6);

  // Cutoff above the chain length keeps every element.
  for (auto& p : params) p.zero_grad();
  auto all = pid_training_step(model, sched, batch, w, step_rng, 10);
  EXPECT_EQ(all.physics_count, 6);
}

// The step's internally built objective matches a hand-assembled replica:
// same losses, bitwise-equal gradients, and finite differences confirm the
// full physics path end to end.
TEST(TrainingStep, FullObjectiveGradientsMatchFiniteDifferences) {
  auto model = tiny_model<double>(51);
  auto sched = tiny_schedule(6);
  auto data = tiny_dataset<double>(3, 8, 5);
  LossWeights w;
  w.k1 = 50.0;
  w.k2 = 5.0;
  model.prepare(w);
  std::vector<TrainPair<double>> batch(data.begin(), data.end());
  Rng step_rng(12, 0xabc);

  // Hand-assembled replica of the step's forward pass.
  auto objective = [&]() -> Tensor<double> {
    std::vector<Tensor<double>> ir, rgb;
    for (const auto& p : batch) {
      ir.push_back(p.infrared);
      rgb.push_back(p.visible);
    }
    auto x0 = pid::stack_batch(ir);
    auto vis = pid::stack_batch(rgb);
    const auto b = static_cast<std::int64_t>(batch.size());
    std::vector<int> t(static_cast<std::size_t>(b));
    std::vector<double> eps_data(static_cast<std::size_t>(x0.numel()));
    const std::int64_t per = x0.numel() / b;
    for (std::int64_t e = 0; e < b; ++e) {
      auto er = step_rng.fork(static_cast<std::uint64_t>(e));
      t[static_cast<std::size_t>(e)] = static_cast<int>(er.fork(0).next_int(1, sched.timesteps()));
      std::vector<double> one(static_cast<std::size_t>(per));
      er.fork(1).fill_normal(one);
      std::copy(one.begin(), one.end(), eps_data.begin() + e * per);
    }
    auto eps = Tensor<double>::from_data(x0.shape(), std::move(eps_data));
    auto zt = pd::forward_diffuse(x0, eps, t, sched);
    auto cond = model.conditioner(vis, &model.codec);
    auto eps_hat = model.denoiser(zt, cond, t);
    auto total = pid::mae(eps_hat, eps);
    auto x0_hat = pd::predict_x0(zt, eps_hat, t, sched);
    total = pid::add(total, pid::mul_scalar(loss_rec(*model.tevnet, x0_hat), 50.0));
    total = pid::add(total, pid::mul_scalar(loss_tev(*model.tevnet, x0_hat, x0), 5.0));
    return total;
  };

  auto refs = model.trainable_params();
  auto params = pid::nn::param_tensors(refs);
  auto names = pid::nn::param_names(refs);

  // 1) step vs replica: bitwise-equal gradients.
  for (auto& p : params) p.zero_grad();
  auto out = pid_training_step(model, sched, batch, w, step_rng);
  std::vector<std::vector<double>> step_grads;
  for (auto& p : params) step_grads.push_back(p.grad());
  for (auto& p : params) p.zero_grad();
  pid::backward(objective());
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& g = params[i].grad();
    ASSERT_EQ(g.size(), step_grads[i].size());
    for (std::size_t j = 0; j < g.size(); ++j) {
      EXPECT_EQ(g[j], step_grads[i][j]) << names[i] << "[" << j << "]";
    }
  }
  EXPECT_NEAR(out.total, objective().item(), 1e-12);

  // 2) replica vs central finite differences. The weighted objective is O(10),
  // so central differences carry ~1e-9 of roundoff noise; gradients below
  // ~1e-5 are noise-dominated and the floor compares them absolutely. A real
  // gradient bug would show O(1) relative error well above this calibration.
  auto report = pid::finite_difference_check<double>(objective, params, names, 1e-5, 3e-5);
  std::ostringstream worst;
  for (const auto& e : report.worst) {
    worst << e.param << "[" << e.index << "] analytic=" << e.analytic << " fd=" << e.numeric
          << " rel=" << e.rel_error << "\n";
  }
  EXPECT_TRUE(report.pass(1e-4)) << "max rel error " << report.max_rel_error << "\n"
                                 << worst.str();
}

// ---------------------------------------------------------------------------
// Training loop.
// ---------------------------------------------------------------------------

template <typename S>
std::vector<std::vector<S>> snapshot(const std::vector<pid::nn::ParamRef<S>>& refs) {
  std::vector<std::vector<S>> out;
  for (const auto& r : refs) out.push_back(r.tensor.data());
  return out;
}

TEST(TrainLoop, ZeroIterationsLeaveModelUntouched) {
  auto model = tiny_model<double>(61);
  auto sched = tiny_schedule();
  auto data = tiny_dataset<double>(4, 8, 6);
  auto before = snapshot(model.trainable_params());
  PidTrainConfig cfg;
  cfg.iterations = 0;
  auto log = train(model, sched, data, cfg);
  EXPECT_TRUE(log.empty());
  auto after = snapshot(model.trainable_params());
  EXPECT_EQ(before, after);
}

TEST(TrainLoop, EmptyDatasetRejected) {
  auto model = tiny_model<double>(62);
  auto sched = tiny_schedule();
  std::vector<TrainPair<double>> empty;
  PidTrainConfig cfg;
  EXPECT_THROW(train(model, sched, empty, cfg), std::invalid_argument);
}

TEST(TrainLoop, FrozenComponentsNeverChange) {
  auto model = tiny_model<double>(63);
  auto sched = tiny_schedule();
  auto data = tiny_dataset<double>(4, 8, 7);
  auto tev_before = snapshot(model.tevnet->params());
  PidTrainConfig cfg;
  cfg.iterations = 3;
  cfg.batch = 2;
  cfg.lr = 1e-3;
  cfg.log_every = 1;
  auto log = train(model, sched, data, cfg);
  ASSERT_EQ(log.size(), 3u);
  auto tev_after = snapshot(model.tevnet->params());
  EXPECT_EQ(tev_before, tev_after);
  // The trainable stack did move.
  EXPECT_GT(log.front().total, 0.0);
}

TEST(TrainLoop, DeterministicAndSeedSensitive) {
  auto sched = tiny_schedule();
  auto data = tiny_dataset<double>(4, 8, 8);
  PidTrainConfig cfg;
  cfg.iterations = 3;
  cfg.batch = 2;
  cfg.log_every = 1;
  cfg.seed = 77;

  auto m1 = tiny_model<double>(64);
  auto m2 = tiny_model<double>(64);
  auto l1 = train(m1, sched, data, cfg);
  auto l2 = train(m2, sched, data, cfg);
  EXPECT_EQ(snapshot(m1.trainable_params()), snapshot(m2.trainable_params()));
  ASSERT_EQ(l1.size(), l2.size());
  for (std::size_t i = 0; i < l1.size(); ++i) {
    EXPECT_EQ(l1[i].total, l2[i].total);
  }

  auto m3 = tiny_model<double>(64);
  PidTrainConfig other = cfg;
  other.seed = 78;
  train(m3, sched, data, other);
  EXPECT_NE(snapshot(m1.trainable_params()), snapshot(m3.trainable_params()));
}

TEST(TrainLoop, AccumulationMatchesLargeBatch) {
  auto sched = tiny_schedule();
  auto data = tiny_dataset<double>(6, 8, 9);
  PidTrainConfig big;
  big.iterations = 1;
  big.batch = 4;
  big.accumulation = 1;
  big.lr = 1e-3;
  big.log_every = 1;
  big.seed = 5;
  PidTrainConfig split = big;
  split.batch = 2;
  split.accumulation = 2;

  auto m_big = tiny_model<double>(65);
  auto m_split = tiny_model<double>(65);
  auto log_big = train(m_big, sched, data, big);
  auto log_split = train(m_split, sched, data, split);

  ASSERT_EQ(log_big.size(), 1u);
  ASSERT_EQ(log_split.size(), 1u);
  EXPECT_NEAR(log_big[0].total, log_split[0].total, 1e-9);
  EXPECT_NEAR(log_big[0].noise, log_split[0].noise, 1e-9);

  auto pb = snapshot(m_big.trainable_params());
  auto ps = snapshot(m_split.trainable_params());
  ASSERT_EQ(pb.size(), ps.size());
  double worst = 0.0;
  for (std::size_t i = 0; i < pb.size(); ++i) {
    ASSERT_EQ(pb[i].size(), ps[i].size());
    for (std::size_t j = 0; j < pb[i].size(); ++j) {
      worst = std::max(worst, std::abs(pb[i][j] - ps[i][j]));
    }
  }
  EXPECT_LT(worst, 1e-6);
}

TEST(TrainLoop, CheckpointHookCadence) {
  auto model = tiny_model<double>(66);
  auto sched = tiny_schedule();
  auto data = tiny_dataset<double>(4, 8, 10);
  PidTrainConfig cfg;
  cfg.iterations = 5;
  cfg.batch = 1;
  cfg.log_every = 2;
  TrainHooks<double> hooks;
  std::vector<int> ckpt_iters, log_iters;
  hooks.checkpoint_every = 2;
  hooks.on_checkpoint = [&](int it, PIDModel<double>&) { ckpt_iters.push_back(it); };
  hooks.on_log = [&](int it, const LossBreakdown&) { log_iters.push_back(it); };
  auto log = train(model, sched, data, cfg, hooks);
  EXPECT_EQ(ckpt_iters, (std::vector<int>{2, 4, 5}));  // cadence plus final
  EXPECT_EQ(log_iters, (std::vector<int>{2, 4, 5}));   // cadence plus final
  EXPECT_EQ(log.size(), log_iters.size());
}

// ---------------------------------------------------------------------------
// Model bundle persistence.
// ---------------------------------------------------------------------------

TEST(ModelBundle, SaveLoadRoundTrip) {
  auto model = tiny_model<float>(71);
  auto z = random_image<float>({2, 1, 8, 8}, Rng(72));
  auto rgb = random_image<float>({2, 3, 8, 8}, Rng(73));
  auto cond = model.conditioner(rgb, &model.codec);
  auto before = model.denoiser(z, cond, {3, 7});

  const std::string path = std::filesystem::temp_directory_path() / "pid_bundle.ckpt";
  model.save(path);
  auto loaded =
      PIDModel<float>::load(path, pd::LatentCodec<float>::identity(), std::nullopt);
  EXPECT_FALSE(loaded.tevnet.has_value());
  auto cond2 = loaded.conditioner(rgb, &loaded.codec);
  auto after = loaded.denoiser(z, cond2, {3, 7});
  for (std::int64_t i = 0; i < before.numel(); ++i) {
    EXPECT_EQ(before.data()[i], after.data()[i]);
  }
  std::remove(path.c_str());
}

}  // namespace
