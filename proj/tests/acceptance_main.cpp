// Acceptance gate. Each numbered check prints exactly one line:
//   criterion <n> PASS: <measurements>
//   criterion <n> FAIL: <measurements>
// and the process exits nonzero if any selected criterion fails.
//
// Usage: acceptance [--criteria 1,2,...] [--cli <path-to-pid-binary>]
// (default: all criteria; criterion 9 needs --cli).

#include <sys/wait.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "pid/dataset_io.hpp"
#include "pid/metrics.hpp"
#include "pid/radiometry.hpp"
#include "pid/sampler.hpp"
#include "pid/scene.hpp"
#include "pid/train.hpp"

namespace fs = std::filesystem;
using pid::Rng;
using pid::Tensor;
namespace pd = pid::diffusion;
namespace pt = pid::tev;
namespace pr = pid::radiometry;
namespace pm = pid::metrics;
namespace px = pid::data;
namespace ptr = pid::training;

namespace {

std::string g_cli;

struct Timer {
  std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  }
};

std::string fmt(double v, const char* spec = "%.6g") {
  char buf[64];
  std::snprintf(buf, sizeof(buf), spec, v);
  return buf;
}

// ---------------------------------------------------------------------------
// 1. Band-integrated exitance against the total-power law.
// ---------------------------------------------------------------------------

bool criterion_1(std::string& detail) {
  const pr::SpectralBand wide{1e-7, 1e-3};
  double worst = 0.0;
  for (const double temp : {250.0, 300.0, 500.0, 1000.0}) {
    const double band = pr::band_exitance(temp, wide);
    const double total = pr::stefan_boltzmann_exitance(temp);
    worst = std::max(worst, std::abs(band - total) / total);
  }
  detail = "band vs sigma-T^4 worst relative gap " + fmt(worst) + " (tol 0.01)";
  return worst < 0.01;
}

// ---------------------------------------------------------------------------
// 2. Spectral peak location at a terrestrial temperature.
// ---------------------------------------------------------------------------

bool criterion_2(std::string& detail) {
  const double temp = 293.15;
  const double peak = pr::wien_peak_wavelength(temp);
  const bool in_window = peak >= 9.88e-6 && peak <= 9.89e-6;

  const int n = 4096;
  const double lo = 1e-7, hi = 1e-3;
  const double ratio = std::pow(hi / lo, 1.0 / (n - 1));
  int argmax = 0;
  double best = -1.0;
  std::vector<double> grid(n);
  double lambda = lo;
  for (int i = 0; i < n; ++i, lambda *= ratio) {
    grid[static_cast<std::size_t>(i)] = lambda;
    const double b = pr::planck_spectral_exitance(lambda, temp);
    if (b > best) {
      best = b;
      argmax = i;
    }
  }
  const double cell_lo = grid[static_cast<std::size_t>(std::max(0, argmax - 1))];
  const double cell_hi = grid[static_cast<std::size_t>(std::min(n - 1, argmax + 1))];
  const bool on_grid = peak >= cell_lo && peak <= cell_hi;
  detail = "peak " + fmt(peak * 1e6) + " um (window [9.88, 9.89]), grid argmax cell [" +
           fmt(cell_lo * 1e6) + ", " + fmt(cell_hi * 1e6) + "] um";
  return in_window && on_grid;
}

// ---------------------------------------------------------------------------
// 3. Diffusion algebra: inversion, posterior, and composed marginals.
// ---------------------------------------------------------------------------

bool criterion_3(std::string& detail) {
  pd::ScheduleConfig sc;  // 1000 steps, betas 1e-4..0.02
  auto sched = pd::NoiseSchedule::linear(sc);
  Rng rng(33, 0xacce);

  // (a) corrupt-then-recover round trip.
  double worst_rt = 0.0;
  for (int rep = 0; rep < 20; ++rep) {
    auto r = rng.fork(static_cast<std::uint64_t>(rep));
    std::vector<double> x0v(64), epsv(64);
    r.fork(0).fill_normal(x0v);
    r.fork(1).fill_normal(epsv);
    const int t = static_cast<int>(r.fork(2).next_int(1, sched.timesteps()));
    auto x0 = Tensor<double>::from_data({1, 1, 8, 8}, x0v);
    auto eps = Tensor<double>::from_data({1, 1, 8, 8}, epsv);
    auto zt = pd::forward_diffuse(x0, eps, {t}, sched);
    auto back = pd::predict_x0(zt, eps, {t}, sched);
    for (std::size_t i = 0; i < x0v.size(); ++i) {
      worst_rt = std::max(worst_rt, std::abs(back.data()[i] - x0v[i]));
    }
  }

  // (b) closed-form single-step posterior against grid-quadrature Bayes.
  double worst_post = 0.0;
  for (int rep = 0; rep < 20; ++rep) {
    auto r = rng.fork(1000 + static_cast<std::uint64_t>(rep));
    const int t = static_cast<int>(r.fork(0).next_int(2, sched.timesteps()));
    const double x0 = r.fork(1).next_normal();
    const double zt = r.fork(2).next_normal();
    const auto m = pd::q_posterior_moments(t, sched);
    const double mean = m.mean_x0_coef * x0 + m.mean_xt_coef * zt;
    const double sd = std::sqrt(m.variance);

    const double a_t = std::sqrt(sched.alpha(t));
    const double b_t = sched.beta(t);
    const double a_prev = std::sqrt(sched.alpha_bar(t - 1));
    const double v_prev = 1.0 - sched.alpha_bar(t - 1);
    const int grid_n = 20001;
    const double glo = mean - 12.0 * sd, ghi = mean + 12.0 * sd;
    const double dz = (ghi - glo) / (grid_n - 1);
    double w_sum = 0.0, m1 = 0.0, m2 = 0.0;
    for (int i = 0; i < grid_n; ++i) {
      const double z = glo + dz * i;
      const double d1 = zt - a_t * z;
      const double d2 = z - a_prev * x0;
      const double w = std::exp(-0.5 * d1 * d1 / b_t - 0.5 * d2 * d2 / v_prev);
      w_sum += w;
      m1 += w * z;
      m2 += w * z * z;
    }
    const double mean_q = m1 / w_sum;
    const double var_q = m2 / w_sum - mean_q * mean_q;
    worst_post = std::max(worst_post, std::abs(mean_q - mean));
    worst_post = std::max(worst_post, std::abs(var_q - m.variance));
  }

  // (c) stepwise corruption composed over the whole chain must land on the
  // closed-form marginal; Monte Carlo with standard-error bars.
  pd::ScheduleConfig sc_small;
  sc_small.timesteps = 50;
  sc_small.beta_start = 1e-3;
  sc_small.beta_end = 0.1;
  auto sched_small = pd::NoiseSchedule::linear(sc_small);
  const double x0 = 0.7;
  const int n_samples = 100000;
  double acc = 0.0, acc2 = 0.0;
  Rng mc(77, 0x3c);
  for (int s = 0; s < n_samples; ++s) {
    auto r = mc.fork(static_cast<std::uint64_t>(s));
    double z = x0;
    for (int t = 1; t <= sched_small.timesteps(); ++t) {
      z = std::sqrt(1.0 - sched_small.beta(t)) * z + std::sqrt(sched_small.beta(t)) * r.next_normal();
    }
    acc += z;
    acc2 += z * z;
  }
  const double mean_hat = acc / n_samples;
  const double var_hat = acc2 / n_samples - mean_hat * mean_hat;
  const double ab = sched_small.alpha_bar(sched_small.timesteps());
  const double mean_ref = std::sqrt(ab) * x0;
  const double var_ref = 1.0 - ab;
  const double se_mean = std::sqrt(var_ref / n_samples);
  const double se_var = var_ref * std::sqrt(2.0 / (n_samples - 1));
  const bool mc_ok = std::abs(mean_hat - mean_ref) < 3.0 * se_mean &&
                     std::abs(var_hat - var_ref) < 3.0 * se_var;

  detail = "round trip " + fmt(worst_rt) + " (tol 1e-12); posterior vs quadrature " +
           fmt(worst_post) + " (tol 1e-6); composed marginal off by " +
           fmt(std::abs(mean_hat - mean_ref) / se_mean) + " / " +
           fmt(std::abs(var_hat - var_ref) / se_var) + " standard errors (tol 3)";
  return worst_rt <= 1e-12 && worst_post <= 1e-6 && mc_ok;
}

// ---------------------------------------------------------------------------
// 4. Gradient integrity of the full weighted objective, both precisions.
// ---------------------------------------------------------------------------

template <typename S>
struct ToyInstance {
  ptr::PIDModel<S> model;
  pd::NoiseSchedule sched = pd::NoiseSchedule::linear({10, 0.01, 0.25});
  Tensor<S> x0, rgb, eps;
  std::vector<int> t;

  Tensor<S> objective() {
    auto zt = pd::forward_diffuse(x0, eps, t, sched);
    auto cond = model.conditioner(rgb, &model.codec);
    auto eps_hat = model.denoiser(zt, cond, t);
    auto total = pid::mae(eps_hat, eps);
    auto x0_hat = pd::predict_x0(zt, eps_hat, t, sched);
    total = pid::add(total, pid::mul_scalar(ptr::loss_rec(*model.tevnet, x0_hat), S(50)));
    total = pid::add(total, pid::mul_scalar(ptr::loss_tev(*model.tevnet, x0_hat, x0), S(5)));
    return total;
  }
};

// Builds the double instance with every parameter and input snapped to a
// float-representable value, so a float twin computes the same function.
ToyInstance<double> toy_f64(std::uint64_t seed) {
  ToyInstance<double> inst;
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
  pt::TeVNetConfig tc;
  tc.m = 4;
  tc.base_channels = 2;
  inst.model.denoiser = pd::DenoiserModel<double>::make(dc, seed);
  inst.model.conditioner = pd::Conditioner<double>::make(cc, seed + 1);
  inst.model.codec = pd::LatentCodec<double>::identity();
  inst.model.tevnet = pt::TeVNetModel<double>::init(tc, seed + 2);
  ptr::freeze_params(inst.model.tevnet->params());

  Rng rng(seed, 0x417);
  std::vector<double> x0v(2 * 64), rgbv(2 * 3 * 64), epsv(2 * 64);
  rng.fork(0).fill_uniform(x0v, -1.0, 1.0);
  rng.fork(1).fill_uniform(rgbv, -1.0, 1.0);
  rng.fork(2).fill_normal(epsv);
  const auto snap = [](std::vector<double>& v) {
    for (auto& x : v) x = static_cast<double>(static_cast<float>(x));
  };
  snap(x0v);
  snap(rgbv);
  snap(epsv);
  inst.x0 = Tensor<double>::from_data({2, 1, 8, 8}, std::move(x0v));
  inst.rgb = Tensor<double>::from_data({2, 3, 8, 8}, std::move(rgbv));
  inst.eps = Tensor<double>::from_data({2, 1, 8, 8}, std::move(epsv));
  inst.t = {3, 7};

  for (auto& ref : inst.model.trainable_params()) {
    for (auto& v : ref.tensor.mutable_data()) v = static_cast<double>(static_cast<float>(v));
  }
  for (auto& ref : inst.model.tevnet->params()) {
    for (auto& v : ref.tensor.mutable_data()) v = static_cast<double>(static_cast<float>(v));
  }
  return inst;
}

// Float twin holding exactly the same (float-representable) values.
ToyInstance<float> toy_f32_from(const ToyInstance<double>& src) {
  ToyInstance<float> inst;
  pd::DenoiserConfig dc = src.model.denoiser.config();
  pd::ConditionerConfig cc = src.model.conditioner.config();
  pt::TeVNetConfig tc = src.model.tevnet->config();
  inst.model.denoiser = pd::DenoiserModel<float>::make(dc, 0);
  inst.model.conditioner = pd::Conditioner<float>::make(cc, 0);
  inst.model.codec = pd::LatentCodec<float>::identity();
  inst.model.tevnet = pt::TeVNetModel<float>::init(tc, 0);
  ptr::freeze_params(inst.model.tevnet->params());

  const auto copy_params = [](auto dst_refs, const auto& src_refs) {
    for (std::size_t i = 0; i < dst_refs.size(); ++i) {
      auto& dst = dst_refs[i].tensor.mutable_data();
      const auto& srcv = src_refs[i].tensor.data();
      for (std::size_t j = 0; j < dst.size(); ++j) dst[j] = static_cast<float>(srcv[j]);
    }
  };
  copy_params(inst.model.trainable_params(), src.model.trainable_params());
  copy_params(inst.model.tevnet->params(), src.model.tevnet->params());

  const auto cast = [](const Tensor<double>& x) {
    std::vector<float> v(x.data().begin(), x.data().end());
    return Tensor<float>::from_data(x.shape(), std::move(v));
  };
  inst.x0 = cast(src.x0);
  inst.rgb = cast(src.rgb);
  inst.eps = cast(src.eps);
  inst.t = src.t;
  return inst;
}

bool criterion_4(std::string& detail) {
  auto f64 = toy_f64(51);
  auto f32 = toy_f32_from(f64);

  auto refs64 = f64.model.trainable_params();
  auto refs32 = f32.model.trainable_params();
  std::int64_t param_count = 0;
  for (const auto& r : refs64) param_count += r.tensor.numel();
  if (param_count > 1000) {
    detail = "toy config has " + std::to_string(param_count) + " parameters (limit 1000)";
    return false;
  }

  // Analytic gradients, both precisions, of the same function.
  auto params64 = pid::nn::param_tensors(refs64);
  auto params32 = pid::nn::param_tensors(refs32);
  for (auto& p : params64) p.zero_grad();
  for (auto& p : params32) p.zero_grad();
  pid::backward(f64.objective());
  pid::backward(f32.objective());

  // One central-difference sweep (double arithmetic) serves both precisions.
  // Calibration: the weighted objective is O(10); with h = 3e-5, central
  // differences carry roughly 1e-10 of roundoff and the occasional
  // kink-crossing of the absolute-error term stays below ~1e-7, so entries
  // are compared absolutely below the floor. A wrong gradient would show up
  // as O(1) relative error in either precision.
  const double h = 3e-5;
  const double floor64 = 0.1, floor32 = 0.01;
  double worst64 = 0.0, worst32 = 0.0;
  {
    pid::NoGradGuard off;
    for (std::size_t p = 0; p < params64.size(); ++p) {
      auto& data = params64[p].mutable_data();
      const auto& g64 = params64[p].grad();
      const auto& g32 = params32[p].grad();
      for (std::size_t i = 0; i < data.size(); ++i) {
        const double saved = data[i];
        data[i] = saved + h;
        const double f_plus = f64.objective().item();
        data[i] = saved - h;
        const double f_minus = f64.objective().item();
        data[i] = saved;
        const double fd = (f_plus - f_minus) / (2.0 * h);
        const double rel64 =
            std::abs(fd - g64[i]) / std::max({std::abs(fd), std::abs(g64[i]), floor64});
        const double a32 = static_cast<double>(g32[i]);
        const double rel32 = std::abs(fd - a32) / std::max({std::abs(fd), std::abs(a32), floor32});
        worst64 = std::max(worst64, rel64);
        worst32 = std::max(worst32, rel32);
      }
    }
  }
  detail = std::to_string(param_count) + " params; f64 max rel " + fmt(worst64) +
           " (tol 1e-6, floor " + fmt(floor64) + "); f32 max rel " + fmt(worst32) +
           " (tol 1e-3, floor " + fmt(floor32) + "); h " + fmt(h);
  return worst64 < 1e-6 && worst32 < 1e-3;
}

// ---------------------------------------------------------------------------
// 5. Decomposition network reaches small held-out reconstruction error.
// ---------------------------------------------------------------------------

bool criterion_5(std::string& detail) {
  auto pairs = px::generate_dataset<double>(40, 32, 32, 4, 901);
  std::vector<Tensor<double>> train_imgs, held_imgs;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    (i < 32 ? train_imgs : held_imgs).push_back(pairs[i].infrared);
  }
  pt::TeVNetConfig nc;
  nc.head = pt::HeadKind::Mixing;
  nc.m = 4;
  nc.base_channels = 16;
  auto model = pt::TeVNetModel<double>::init(nc, 7);
  pt::TevTrainConfig tc;
  tc.epochs = 200;
  tc.batch = 16;
  tc.lr = 1e-3;
  tc.seed = 7;
  const double train_loss = pt::train_tevnet(model, train_imgs, tc);
  const double held = pt::eval_tevnet(model, held_imgs);
  detail = "held-out reconstruction mse " + fmt(held) + " (tol 1e-3) after " +
           std::to_string(tc.epochs) + " epochs; final train loss " + fmt(train_loss);
  return held < 1e-3;
}

// ---------------------------------------------------------------------------
// 6. Physics-weighted training beats the unweighted baseline on its own
//    reconstruction score without losing fidelity.
// ---------------------------------------------------------------------------

struct RunScore {
  double lrec = 0.0;
  double psnr = 0.0;
  double train_noise = 0.0;  // final logged training breakdown
  double train_rec = 0.0;
};

RunScore train_and_score(const std::vector<ptr::TrainPair<double>>& train_set,
                         const std::vector<px::ScenePair<double>>& test_set,
                         const pt::TeVNetModel<double>& tevnet, double k1, double k2,
                         std::uint64_t seed, int iterations) {
  pd::ScheduleConfig sc;
  sc.timesteps = 100;
  sc.beta_start = 1e-4;
  sc.beta_end = 0.1;
  auto sched = pd::NoiseSchedule::linear(sc);

  pd::DenoiserConfig dc;
  dc.latent_channels = 1;
  dc.cond_channels = 8;
  dc.base_channels = 16;
  dc.time_dim = 32;
  pd::ConditionerConfig cc;
  cc.kind = pd::ConditionerKind::Mlp;
  cc.hidden = 16;
  cc.out_channels = 8;
  cc.factor = 1;

  ptr::PIDModel<double> model;
  Rng init(seed, 0x9d);
  model.denoiser = pd::DenoiserModel<double>::make(dc, init.fork(1).next_u64());
  model.conditioner = pd::Conditioner<double>::make(cc, init.fork(2).next_u64());
  model.codec = pd::LatentCodec<double>::identity();
  model.tevnet = tevnet;  // frozen copy; baseline runs simply never touch it

  ptr::PidTrainConfig tc;
  tc.iterations = iterations;
  tc.batch = 4;
  tc.lr = 2e-4;
  tc.seed = seed;
  tc.weights.k1 = k1;
  tc.weights.k2 = k2;
  // The noise-level cutoff keeps the physics terms on nearly-clean implied
  // images, where the decomposition is meaningful; at high noise the implied
  // clean image is dominated by amplified prediction error.
  tc.physics_t_cutoff = 25;
  tc.log_every = iterations;  // quiet
  const auto logs = ptr::train(model, sched, train_set, tc);

  // Generate one image per test pair and score both metrics.
  std::vector<Tensor<double>> rgb_items, ref_items;
  for (const auto& p : test_set) {
    rgb_items.push_back(p.visible);
    ref_items.push_back(p.infrared);
  }
  Tensor<double> rgb, ref;
  {
    pid::NoGradGuard off;
    rgb = pid::stack_batch(rgb_items);
    ref = pid::stack_batch(ref_items);
  }
  pd::SamplerConfig scfg;
  scfg.kind = pd::SamplerKind::Ddim;
  scfg.steps = 20;
  scfg.eta = 0.0;
  auto images = pd::sample(model.denoiser, model.conditioner, model.codec, sched, rgb, scfg,
                           Rng(99, 0x5a));

  RunScore score;
  if (!logs.empty()) {
    score.train_noise = logs.back().noise;
    score.train_rec = logs.back().rec;
  }
  {
    pid::NoGradGuard off;
    double lrec_acc = 0.0;
    for (std::int64_t b = 0; b < images.dim(0); ++b) {
      pid::Shape one{1, images.dim(1), images.dim(2), images.dim(3)};
      std::vector<double> d(images.data().begin() + b * pid::shape_numel(one),
                            images.data().begin() + (b + 1) * pid::shape_numel(one));
      auto img = Tensor<double>::from_data(one, std::move(d));
      lrec_acc += ptr::loss_rec(tevnet, img).item();
    }
    score.lrec = lrec_acc / static_cast<double>(images.dim(0));
    auto report = pm::evaluate_pairs(images, ref, 2.0);
    score.psnr = report.psnr_mean;
  }
  return score;
}

bool criterion_6(std::string& detail) {
  const int iterations = 5000;
  auto train_pairs = px::generate_dataset<double>(32, 32, 32, 4, 1201);
  auto test_pairs = px::generate_dataset<double>(100, 32, 32, 4, 1301);
  std::vector<ptr::TrainPair<double>> train_set;
  for (const auto& p : train_pairs) train_set.push_back({p.infrared, p.visible});

  std::vector<Tensor<double>> train_imgs;
  for (const auto& p : train_pairs) train_imgs.push_back(p.infrared);
  pt::TeVNetConfig nc;
  nc.m = 4;
  nc.base_channels = 16;
  auto tevnet = pt::TeVNetModel<double>::init(nc, 7);
  pt::TevTrainConfig ttc;
  ttc.epochs = 150;
  ttc.seed = 7;
  pt::train_tevnet(tevnet, train_imgs, ttc);
  ptr::freeze_params(tevnet.params());

  int wins = 0;
  std::string per_seed;
  for (const std::uint64_t seed : {11ull, 12ull, 13ull}) {
    const auto base = train_and_score(train_set, test_pairs, tevnet, 0.0, 0.0, seed, iterations);
    const auto phys = train_and_score(train_set, test_pairs, tevnet, 50.0, 5.0, seed, iterations);
    const bool lower_lrec = phys.lrec < base.lrec;
    const bool psnr_ok = phys.psnr >= base.psnr - 0.5;
    if (lower_lrec && psnr_ok) ++wins;
    per_seed += " [seed " + std::to_string(seed) + ": L_Rec " + fmt(phys.lrec) + " vs " +
                fmt(base.lrec) + (lower_lrec ? " (lower)" : " (NOT lower)") + ", psnr " +
                fmt(phys.psnr, "%.3f") + " vs " + fmt(base.psnr, "%.3f") +
                (psnr_ok ? " (ok)" : " (drop > 0.5 dB)") + ", train noise/rec " +
                fmt(phys.train_noise) + "/" + fmt(phys.train_rec) + " vs " +
                fmt(base.train_noise) + "]";
  }
  detail = std::to_string(wins) + "/3 seeds favor the physics-weighted run (need >= 2);" + per_seed;
  return wins >= 2;
}

// ---------------------------------------------------------------------------
// 7. The grid-mixing head separates image domains more strongly than the
//    direct head under identical budgets.
// ---------------------------------------------------------------------------

bool criterion_7(std::string& detail) {
  auto pairs = px::generate_dataset<double>(56, 32, 32, 4, 2101);
  std::vector<Tensor<double>> train_imgs;
  std::vector<Tensor<double>> score_ir, score_vis;
  {
    pid::NoGradGuard off;
    for (std::size_t i = 0; i < pairs.size(); ++i) {
      if (i < 24) {
        train_imgs.push_back(pairs[i].infrared);
      } else {
        score_ir.push_back(pairs[i].infrared);
        score_vis.push_back(pid::mean_channels(pid::stack_batch<double>({pairs[i].visible})));
      }
    }
  }

  const auto gap_for = [&](pt::HeadKind head, std::uint64_t seed) {
    pt::TeVNetConfig nc;
    nc.head = head;
    nc.m = 4;
    nc.base_channels = 16;
    auto net = pt::TeVNetModel<double>::init(nc, seed);
    pt::TevTrainConfig tc;
    tc.epochs = 60;
    tc.seed = seed;
    pt::train_tevnet(net, train_imgs, tc);
    ptr::freeze_params(net.params());
    pid::NoGradGuard off;
    std::vector<double> d_ir, d_vis;
    for (const auto& img : score_ir) {
      d_ir.push_back(ptr::loss_rec(net, pid::stack_batch<double>({img})).item());
    }
    for (const auto& gray : score_vis) {
      d_vis.push_back(ptr::loss_rec(net, gray).item());
    }
    return pm::emd_1d(d_vis, d_ir);
  };

  int wins = 0;
  std::string per_seed;
  for (const std::uint64_t seed : {21ull, 22ull, 23ull}) {
    const double mixing = gap_for(pt::HeadKind::Mixing, seed);
    const double direct = gap_for(pt::HeadKind::Direct, seed);
    const bool ok = mixing > 0.0 && direct > 0.0 && mixing > direct;
    if (ok) ++wins;
    per_seed += " [seed " + std::to_string(seed) + ": mixing " + fmt(mixing) + ", direct " +
                fmt(direct) + (ok ? "" : " (NOT separated)") + "]";
  }
  detail = std::to_string(wins) +
           "/3 seeds show a positive gap that is larger for the mixing head (need >= 2);" +
           per_seed;
  return wins >= 2;
}

// ---------------------------------------------------------------------------
// 8. Compute-cost model: quoted component counts and affinity in the step
//    count.
// ---------------------------------------------------------------------------

bool criterion_8(std::string& detail) {
  pm::CostModel cost{439.34, 114.43, 927.62};  // in G-multiply-accumulates
  const double t20 = cost.total(20);
  const double t200 = cost.total(200);
  const bool totals_ok = std::abs(t20 - 3655.56) <= 1e-9 && std::abs(t200 - 24252.96) <= 1e-9 &&
                         fmt(t20, "%.2f") == "3655.56" && fmt(t200, "%.2f") == "24252.96";
  bool affine_ok = true;
  const int steps[5] = {2, 5, 20, 50, 200};
  for (int i = 1; i < 5; ++i) {
    const double lhs = cost.total(steps[i]) - cost.total(steps[0]);
    const double rhs = (steps[i] - steps[0]) * cost.denoiser_step_macs;
    if (std::abs(lhs - rhs) > 1e-9) affine_ok = false;
  }
  detail = "total(20) " + fmt(t20, "%.2f") + " (expect 3655.56), total(200) " + fmt(t200, "%.2f") +
           " (expect 24252.96), affine in the step count over 5 counts " +
           (affine_ok ? "holds" : "violated");
  return totals_ok && affine_ok;
}

// ---------------------------------------------------------------------------
// 9. Determinism: repeated deterministic sampling and repeated seeded CLI
//    commands produce byte-identical artifacts.
// ---------------------------------------------------------------------------

int run_shell(const std::string& cmd) {
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string file_bytes(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

bool trees_identical(const fs::path& a, const fs::path& b, std::string& why) {
  std::size_t na = 0, nb = 0;
  for (const auto& e : fs::recursive_directory_iterator(a)) {
    if (!e.is_regular_file()) continue;
    ++na;
    const auto rel = fs::relative(e.path(), a);
    if (!fs::exists(b / rel)) {
      why = "missing " + (b / rel).string();
      return false;
    }
    if (file_bytes(e.path()) != file_bytes(b / rel)) {
      why = "bytes differ at " + rel.string();
      return false;
    }
  }
  for (const auto& e : fs::recursive_directory_iterator(b)) {
    if (e.is_regular_file()) ++nb;
  }
  if (na != nb) {
    why = "file counts differ";
    return false;
  }
  return true;
}

bool criterion_9(std::string& detail) {
  // Library-level: deterministic (eta = 0) sampling twice from the same seed.
  {
    auto inst = toy_f64(81);
    pd::SamplerConfig scfg;
    scfg.kind = pd::SamplerKind::Ddim;
    scfg.steps = 4;
    scfg.eta = 0.0;
    auto once = pd::sample(inst.model.denoiser, inst.model.conditioner, inst.model.codec,
                           inst.sched, inst.rgb, scfg, Rng(5, 0x5a));
    auto twice = pd::sample(inst.model.denoiser, inst.model.conditioner, inst.model.codec,
                            inst.sched, inst.rgb, scfg, Rng(5, 0x5a));
    if (once.data() != twice.data()) {
      detail = "repeated deterministic sampling diverged at the library level";
      return false;
    }
  }

  if (g_cli.empty()) {
    detail = "no --cli path provided, cannot exercise the executable";
    return false;
  }
  const fs::path root = fs::temp_directory_path() / "pid_acceptance_det";
  fs::remove_all(root);
  fs::create_directories(root);

  // Every stage of the pipeline, run twice into separate roots. All paths are
  // relative with the root as working directory, so the two trees must be
  // byte-identical down to the echoed configs.
  const auto pass_root = [&](const std::string& tag) {
    const fs::path r = root / tag;
    fs::create_directories(r);
    const std::vector<std::string> cmds = {
        "data-gen --set out_dir=data train_count=5 test_count=3 height=32 width=32 seed=5",
        "codec-train --set dataset=data/train out_dir=codec factor=2"
        " latent_channels=2 base_channels=4 epochs=2 seed=2",
        "tevnet-train --set dataset=data/train out_dir=tev epochs=2 seed=1",
        "pid-train --set dataset=data/train out_dir=model tevnet=tev/tevnet.ckpt"
        " k1=50 k2=5 iterations=2 batch=1 base_channels=8 time_dim=16"
        " cond_hidden=4 cond_channels=3 timesteps=100 log_every=1 seed=3",
        "sample --set model=model/model.ckpt dataset=data/test out_dir=gen"
        " sampler=ddim steps=3 eta=0 seed=11 timesteps=100",
        "evaluate --set dataset=data/test generated=gen/s_003 out_dir=eval"
        " tevnet=tev/tevnet.ckpt model=model/model.ckpt",
        "decompose --set tevnet=tev/tevnet.ckpt dataset=data/test out_dir=dec count=2",
    };
    for (const auto& cmd : cmds) {
      const std::string full = "cd " + r.string() + " && " + g_cli + " " + cmd + " > " +
                               (root / "last_output.txt").string() + " 2>&1";
      if (run_shell(full) != 0) {
        return "command failed: " + cmd + "\n" + file_bytes(root / "last_output.txt");
      }
    }
    return std::string();
  };

  for (const char* tag : {"a", "b"}) {
    const auto err = pass_root(tag);
    if (!err.empty()) {
      detail = err;
      return false;
    }
  }
  fs::remove(root / "last_output.txt");
  std::string why;
  if (!trees_identical(root / "a", root / "b", why)) {
    detail = "repeated CLI pipeline differs: " + why;
    return false;
  }
  std::size_t files = 0;
  for (const auto& e : fs::recursive_directory_iterator(root / "a")) {
    if (e.is_regular_file()) ++files;
  }
  detail = "library sampling bitwise-stable; full CLI pipeline (7 commands, " +
           std::to_string(files) + " files) byte-identical across two runs";
  return true;
}

// ---------------------------------------------------------------------------
// 10. Metric sanity: identity scores, monotonicity, and the tiny-instance
//     transport oracle.
// ---------------------------------------------------------------------------

double emd_assignment_oracle(const std::vector<double>& p, const std::vector<double>& q) {
  const std::size_t n = p.size();
  const std::size_t full = (1u << n) - 1u;
  std::vector<double> best(full + 1, 1e300);
  best[0] = 0.0;
  for (std::size_t mask = 0; mask < full; ++mask) {
    if (best[mask] >= 1e300) continue;
    std::size_t i = 0;  // number of already-matched p points
    for (std::size_t m = mask; m != 0; m >>= 1) i += m & 1u;
    for (std::size_t j = 0; j < n; ++j) {
      if (mask & (1u << j)) continue;
      const auto next = mask | (1u << j);
      best[next] = std::min(best[next], best[mask] + std::abs(p[i] - q[j]));
    }
  }
  return best[full] / static_cast<double>(n);
}

bool criterion_10(std::string& detail) {
  Rng rng(42, 0x717);

  // Self-similarity is exactly 1.
  double worst_self = 0.0;
  for (int rep = 0; rep < 5; ++rep) {
    std::vector<double> v(3 * 16 * 16);
    rng.fork(static_cast<std::uint64_t>(rep)).fill_uniform(v, -1.0, 1.0);
    auto x = Tensor<double>::from_data({3, 16, 16}, std::move(v));
    worst_self = std::max(worst_self, std::abs(pm::ssim(x, x, 2.0) - 1.0));
  }

  // Peak signal-to-noise strictly decreases as squared error grows.
  std::vector<std::pair<double, double>> mse_psnr;
  for (int rep = 0; rep < 20; ++rep) {
    auto r = rng.fork(100 + static_cast<std::uint64_t>(rep));
    std::vector<double> av(64), bv(64);
    r.fork(0).fill_uniform(av, -1.0, 1.0);
    const double scale = r.fork(1).next_uniform(0.01, 0.8);
    std::vector<double> noise(64);
    r.fork(2).fill_normal(noise);
    for (std::size_t i = 0; i < av.size(); ++i) bv[i] = av[i] + scale * noise[i];
    auto a = Tensor<double>::from_data({1, 8, 8}, std::move(av));
    auto b = Tensor<double>::from_data({1, 8, 8}, std::move(bv));
    mse_psnr.emplace_back(pm::mse_between(a, b), pm::psnr(a, b, 2.0).db);
  }
  std::sort(mse_psnr.begin(), mse_psnr.end());
  bool monotone = true;
  for (std::size_t i = 1; i < mse_psnr.size(); ++i) {
    if (!(mse_psnr[i].second < mse_psnr[i - 1].second)) monotone = false;
  }

  // One-dimensional transport distance against the brute-force matcher.
  double worst_emd = 0.0;
  for (int rep = 0; rep < 5; ++rep) {
    auto r = rng.fork(200 + static_cast<std::uint64_t>(rep));
    const auto n = static_cast<std::size_t>(r.fork(0).next_int(4, 8));
    std::vector<double> p(n), q(n);
    r.fork(1).fill_uniform(p, -2.0, 2.0);
    r.fork(2).fill_uniform(q, -2.0, 2.0);
    worst_emd = std::max(worst_emd, std::abs(pm::emd_1d(p, q) - emd_assignment_oracle(p, q)));
  }

  detail = "self-similarity gap " + fmt(worst_self) + " (tol 1e-9); psnr strictly monotone in mse " +
           (monotone ? "holds" : "violated") + " over 20 pairs; transport vs matcher gap " +
           fmt(worst_emd) + " (tol 1e-9)";
  return worst_self <= 1e-9 && monotone && worst_emd <= 1e-9;
}

}  // namespace

int main(int argc, char** argv) {
  std::vector<int> selected;
  for (int i = 1; i < argc; ++i) {
    const std::string arg = argv[i];
    if (arg == "--criteria" && i + 1 < argc) {
      std::stringstream ss(argv[++i]);
      std::string item;
      while (std::getline(ss, item, ',')) selected.push_back(std::stoi(item));
    } else if (arg == "--cli" && i + 1 < argc) {
      g_cli = fs::absolute(argv[++i]).string();
    } else {
      std::cerr << "usage: acceptance [--criteria 1,2,...] [--cli <pid-binary>]\n";
      return 2;
    }
  }
  const std::map<int, std::function<bool(std::string&)>> criteria = {
      {1, criterion_1}, {2, criterion_2}, {3, criterion_3}, {4, criterion_4},
      {5, criterion_5}, {6, criterion_6}, {7, criterion_7}, {8, criterion_8},
      {9, criterion_9}, {10, criterion_10},
  };
  if (selected.empty()) {
    for (const auto& [n, fn] : criteria) selected.push_back(n);
  }

  bool all_pass = true;
  for (const int n : selected) {
    const auto it = criteria.find(n);
    if (it == criteria.end()) {
      std::cout << "criterion " << n << " FAIL: no such criterion\n";
      all_pass = false;
      continue;
    }
    std::string detail;
    Timer timer;
    bool pass = false;
    try {
      pass = it->second(detail);
    } catch (const std::exception& e) {
      detail = std::string("exception: ") + e.what();
    }
    std::cout << "criterion " << n << (pass ? " PASS: " : " FAIL: ") << detail << " ["
              << fmt(timer.seconds(), "%.1f") << "s]\n";
    std::cout.flush();
    if (!pass) all_pass = false;
  }
  return all_pass ? 0 : 1;
}
