#pragma once

// Subcommand implementations for the pid CLI. Each command consumes a
// RunConfig, validates its key set, performs the stage, and writes its
// resolved configuration (defaults made explicit) to <out_dir>/config.resolved
// so the exact run can be replayed by feeding that file back.
//
// Error contract (mapped to exit codes by the executable):
//   ConfigError          -> 2   bad/unknown key or value
//   DependencyError      -> 3   a stage was requested before its inputs exist
//   MissingArtifactError -> 4   a referenced file is absent
//
// If the environment variable PID_OUT_ROOT is set, relative out_dir values
// are placed under it.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "pid/config.hpp"
#include "pid/dataset_io.hpp"
#include "pid/metrics.hpp"
#include "pid/sampler.hpp"
#include "pid/scene.hpp"
#include "pid/train.hpp"

namespace pid::cli {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Shared plumbing.
// ---------------------------------------------------------------------------

// Shortest round-trip decimal form; config echoes and logs must re-parse to
// the exact same value.
inline std::string num_str(double v) {
  char buf[40];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

inline std::string num_str(long long v) { return std::to_string(v); }
inline std::string num_str(std::uint64_t v) { return std::to_string(v); }

inline RunConfig config_from_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config file: " + path);
  return RunConfig::parse(is, path);
}

// out_dir resolution: relative paths land under $PID_OUT_ROOT when it is set.
inline fs::path resolve_out_dir(const RunConfig& cfg) {
  fs::path out = cfg.require_string("out_dir");
  if (out.is_relative()) {
    if (const char* root = std::getenv("PID_OUT_ROOT"); root != nullptr && *root != '\0') {
      out = fs::path(root) / out;
    }
  }
  fs::create_directories(out);
  return out;
}

inline void check_stage(const RunConfig& cfg, const std::string& stage) {
  if (cfg.has("stage") && cfg.get_string("stage", "") != stage) {
    throw ConfigError("config names stage \"" + cfg.get_string("stage", "") +
                      "\" but the \"" + stage + "\" command was invoked");
  }
}

inline void write_resolved_config(const fs::path& out_dir, const RunConfig& resolved) {
  const auto path = out_dir / "config.resolved";
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << resolved.echo();
  if (!os) throw std::runtime_error("write failed: " + path.string());
}

inline void require_artifact(const std::string& path, const std::string& what) {
  if (!fs::exists(path)) throw MissingArtifactError(what + " not found: " + path);
}

// Datasets are referenced by their directory; the manifest is the marker.
inline std::string require_dataset_dir(const RunConfig& cfg, const std::string& key) {
  const std::string dir = cfg.require_string(key);
  if (!fs::exists(fs::path(dir) / "manifest.tsv")) {
    throw MissingArtifactError("dataset (" + key + ") not found: no manifest.tsv in " + dir);
  }
  return dir;
}

inline std::vector<int> parse_step_list(const std::string& key, const std::string& text) {
  std::vector<int> out;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const auto comma = std::min(text.find(',', pos), text.size());
    const std::string item = detail::trim(text.substr(pos, comma - pos));
    if (item.empty()) {
      throw ConfigError("config key \"" + key + "\": empty entry in list \"" + text + "\"");
    }
    try {
      std::size_t used = 0;
      const int v = std::stoi(item, &used);
      if (used != item.size() || v < 1) throw std::invalid_argument("bad");
      out.push_back(v);
    } catch (const std::exception&) {
      throw ConfigError("config key \"" + key + "\": expected positive integers, got \"" + item +
                        "\"");
    }
    pos = comma + 1;
    if (comma == text.size()) break;
  }
  if (out.empty()) throw ConfigError("config key \"" + key + "\": empty list");
  return out;
}

inline std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const auto comma = std::min(text.find(',', pos), text.size());
    const std::string item = detail::trim(text.substr(pos, comma - pos));
    if (!item.empty()) out.push_back(item);
    pos = comma + 1;
    if (comma == text.size()) break;
  }
  return out;
}

// [B,...] batch -> one [rest...] item (data copy, no autodiff history).
template <typename S>
Tensor<S> take_batch_item(const Tensor<S>& x, std::int64_t b) {
  Shape rest(x.shape().begin() + 1, x.shape().end());
  const std::int64_t per = shape_numel(rest);
  std::vector<S> d(static_cast<std::size_t>(per));
  std::copy(x.data().begin() + b * per, x.data().begin() + (b + 1) * per, d.begin());
  return Tensor<S>::from_data(std::move(rest), std::move(d));
}

template <typename S>
std::vector<Tensor<S>> infrared_images(const std::vector<data::ScenePair<S>>& pairs) {
  std::vector<Tensor<S>> out;
  out.reserve(pairs.size());
  for (const auto& p : pairs) out.push_back(p.infrared);
  return out;
}

inline diffusion::ScheduleConfig schedule_from_config(const RunConfig& cfg) {
  diffusion::ScheduleConfig sc;
  sc.timesteps = static_cast<int>(cfg.get_int("timesteps", 100));
  sc.beta_start = cfg.get_double("beta_start", sc.beta_start);
  sc.beta_end = cfg.get_double("beta_end", sc.beta_end);
  if (sc.timesteps < 1) throw ConfigError("config key \"timesteps\": must be >= 1");
  return sc;
}

inline void echo_schedule(RunConfig& r, const diffusion::ScheduleConfig& sc) {
  r.set("timesteps", num_str(static_cast<long long>(sc.timesteps)));
  r.set("beta_start", num_str(sc.beta_start));
  r.set("beta_end", num_str(sc.beta_end));
}

// ---------------------------------------------------------------------------
// data-gen: synthesize paired visible/infrared datasets.
// ---------------------------------------------------------------------------

inline void cmd_data_gen(const RunConfig& cfg) {
  check_stage(cfg, "data-gen");
  cfg.check_allowed({"stage", "out_dir", "train_count", "test_count", "height", "width",
                     "grid_cells", "seed", "previews"});
  const auto out = resolve_out_dir(cfg);
  const long long train_count = cfg.get_int("train_count", 500);
  const long long test_count = cfg.get_int("test_count", 100);
  const long long height = cfg.get_int("height", 64);
  const long long width = cfg.get_int("width", 64);
  const long long grid_cells = cfg.get_int("grid_cells", 4);
  const std::uint64_t seed = cfg.get_u64("seed", 0);
  const long long previews = cfg.get_int("previews", 0);
  if (train_count < 1) throw ConfigError("config key \"train_count\": must be >= 1");
  if (test_count < 0) throw ConfigError("config key \"test_count\": must be >= 0");
  if (previews < 0) throw ConfigError("config key \"previews\": must be >= 0");

  Rng root(seed, 0x111);
  const auto train_seed = root.fork(0).next_u64();
  const auto test_seed = root.fork(1).next_u64();

  auto train = data::generate_dataset<double>(train_count, height, width,
                                              static_cast<int>(grid_cells), train_seed);
  data::save_dataset((out / "train").string(), train);
  std::cout << "data-gen: wrote " << train.size() << " train pairs to " << (out / "train").string()
            << "\n";
  if (test_count > 0) {
    auto test = data::generate_dataset<double>(test_count, height, width,
                                               static_cast<int>(grid_cells), test_seed);
    data::save_dataset((out / "test").string(), test);
    std::cout << "data-gen: wrote " << test.size() << " test pairs to " << (out / "test").string()
              << "\n";
  }

  if (previews > 0) {
    const auto pv = out / "preview";
    fs::create_directories(pv);
    const auto n = std::min<std::size_t>(static_cast<std::size_t>(previews), train.size());
    for (std::size_t i = 0; i < n; ++i) {
      const auto name = data::pair_name(static_cast<std::int64_t>(i));
      data::save_pgm16((pv / (name + "_ir.pgm")).string(), train[i].infrared, -1.0, 1.0);
      Tensor<double> gray;
      {
        NoGradGuard off;
        gray = mean_channels(stack_batch<double>({train[i].visible}));
      }
      data::save_pgm16((pv / (name + "_vis.pgm")).string(),
                       take_batch_item(gray, 0), -1.0, 1.0);
    }
  }

  RunConfig resolved = cfg;
  resolved.set("stage", "data-gen");
  resolved.set("train_count", num_str(train_count));
  resolved.set("test_count", num_str(test_count));
  resolved.set("height", num_str(height));
  resolved.set("width", num_str(width));
  resolved.set("grid_cells", num_str(grid_cells));
  resolved.set("seed", num_str(seed));
  resolved.set("previews", num_str(previews));
  write_resolved_config(out, resolved);
}

// ---------------------------------------------------------------------------
// codec-train: reconstruction-train the latent autoencoder.
// ---------------------------------------------------------------------------

inline void cmd_codec_train(const RunConfig& cfg) {
  check_stage(cfg, "codec-train");
  cfg.check_allowed({"stage", "dataset", "out_dir", "factor", "latent_channels", "base_channels",
                     "epochs", "batch", "lr", "seed"});
  const auto out = resolve_out_dir(cfg);
  const std::string dataset_dir = require_dataset_dir(cfg, "dataset");
  const long long factor = cfg.get_int("factor", 2);
  const long long latent_channels = cfg.get_int("latent_channels", 4);
  const long long base_channels = cfg.get_int("base_channels", 8);
  diffusion::CodecTrainConfig tc;
  tc.epochs = static_cast<int>(cfg.get_int("epochs", tc.epochs));
  tc.batch = cfg.get_int("batch", tc.batch);
  tc.lr = cfg.get_double("lr", tc.lr);
  tc.seed = cfg.get_u64("seed", 0);

  auto pairs = data::load_dataset<double>(dataset_dir);
  auto images = infrared_images(pairs);

  auto codec = diffusion::LatentCodec<double>::learned(static_cast<int>(factor), latent_channels,
                                                       base_channels, tc.seed);
  std::ofstream log(out / "train.log");
  if (!log) throw std::runtime_error("cannot write train.log in " + out.string());
  const double final_loss = diffusion::codec_train<double>(
      codec, images, tc,
      [&](int epoch, double loss) { log << "epoch " << epoch << " loss " << num_str(loss) << "\n"; });
  codec.save((out / "codec.ckpt").string());
  std::cout << "codec-train: final epoch loss " << num_str(final_loss) << ", checkpoint "
            << (out / "codec.ckpt").string() << "\n";

  RunConfig resolved = cfg;
  resolved.set("stage", "codec-train");
  resolved.set("factor", num_str(factor));
  resolved.set("latent_channels", num_str(latent_channels));
  resolved.set("base_channels", num_str(base_channels));
  resolved.set("epochs", num_str(static_cast<long long>(tc.epochs)));
  resolved.set("batch", num_str(static_cast<long long>(tc.batch)));
  resolved.set("lr", num_str(tc.lr));
  resolved.set("seed", num_str(tc.seed));
  write_resolved_config(out, resolved);
}

// ---------------------------------------------------------------------------
// tevnet-train: self-supervised decomposition training.
// ---------------------------------------------------------------------------

inline void cmd_tevnet_train(const RunConfig& cfg) {
  check_stage(cfg, "tevnet-train");
  cfg.check_allowed({"stage", "dataset", "eval_dataset", "out_dir", "head", "grid_cells",
                     "base_channels", "epochs", "batch", "lr", "weight_decay", "seed"});
  const auto out = resolve_out_dir(cfg);
  const std::string dataset_dir = require_dataset_dir(cfg, "dataset");
  const std::string head = cfg.get_string("head", "tev");
  tev::TeVNetConfig nc;
  try {
    nc.head = tev::head_from_name(head);
  } catch (const std::exception&) {
    throw ConfigError("config key \"head\": expected tev or tes, got \"" + head + "\"");
  }
  nc.m = static_cast<int>(cfg.get_int("grid_cells", nc.m));
  nc.base_channels = cfg.get_int("base_channels", nc.base_channels);
  tev::TevTrainConfig tc;
  tc.epochs = static_cast<int>(cfg.get_int("epochs", tc.epochs));
  tc.batch = cfg.get_int("batch", tc.batch);
  tc.lr = cfg.get_double("lr", tc.lr);
  tc.weight_decay = cfg.get_double("weight_decay", tc.weight_decay);
  tc.seed = cfg.get_u64("seed", 0);

  auto images = infrared_images(data::load_dataset<double>(dataset_dir));
  auto model = tev::TeVNetModel<double>::init(nc, tc.seed);
  std::ofstream log(out / "train.log");
  if (!log) throw std::runtime_error("cannot write train.log in " + out.string());
  const double final_loss = tev::train_tevnet<double>(
      model, images, tc,
      [&](int epoch, double loss) { log << "epoch " << epoch << " loss " << num_str(loss) << "\n"; });
  model.save((out / "tevnet.ckpt").string());
  std::cout << "tevnet-train: final epoch loss " << num_str(final_loss) << ", checkpoint "
            << (out / "tevnet.ckpt").string() << "\n";

  if (cfg.has("eval_dataset")) {
    const std::string eval_dir = require_dataset_dir(cfg, "eval_dataset");
    auto eval_images = infrared_images(data::load_dataset<double>(eval_dir));
    const double eval_mse = tev::eval_tevnet(model, eval_images);
    log << "eval mse " << num_str(eval_mse) << "\n";
    std::cout << "tevnet-train: held-out reconstruction mse " << num_str(eval_mse) << "\n";
  }

  RunConfig resolved = cfg;
  resolved.set("stage", "tevnet-train");
  resolved.set("head", head);
  resolved.set("grid_cells", num_str(static_cast<long long>(nc.m)));
  resolved.set("base_channels", num_str(static_cast<long long>(nc.base_channels)));
  resolved.set("epochs", num_str(static_cast<long long>(tc.epochs)));
  resolved.set("batch", num_str(static_cast<long long>(tc.batch)));
  resolved.set("lr", num_str(tc.lr));
  resolved.set("weight_decay", num_str(tc.weight_decay));
  resolved.set("seed", num_str(tc.seed));
  write_resolved_config(out, resolved);
}

// ---------------------------------------------------------------------------
// pid-train: conditioned denoising diffusion with optional physics terms.
// ---------------------------------------------------------------------------

// Sidecar recording how far a run got, so a later run can resume numbering.
inline void write_train_state(const fs::path& out, int completed_iterations) {
  std::ofstream os(out / "state.txt");
  if (!os) throw std::runtime_error("cannot write state.txt in " + out.string());
  os << "iterations=" << completed_iterations << "\n";
}

inline int read_train_state(const fs::path& dir) {
  const auto path = dir / "state.txt";
  std::ifstream is(path);
  if (!is) throw MissingArtifactError("training state not found: " + path.string());
  auto state = RunConfig::parse(is, path.string());
  return static_cast<int>(state.require_int("iterations"));
}

inline void cmd_pid_train(const RunConfig& cfg) {
  check_stage(cfg, "pid-train");
  cfg.check_allowed({"stage", "dataset", "out_dir", "tevnet", "codec", "k1", "k2", "iterations",
                     "batch", "accumulation", "lr", "weight_decay", "seed", "timesteps",
                     "beta_start", "beta_end", "physics_t_cutoff", "log_every", "checkpoint_every",
                     "cond", "cond_hidden", "cond_channels", "base_channels", "time_dim",
                     "resume"});
  const auto out = resolve_out_dir(cfg);
  const std::string dataset_dir = require_dataset_dir(cfg, "dataset");

  training::LossWeights weights;
  weights.k1 = cfg.get_double("k1", weights.k1);
  weights.k2 = cfg.get_double("k2", weights.k2);
  if (weights.k1 < 0.0 || weights.k2 < 0.0) {
    throw ConfigError("config keys k1/k2 must be >= 0");
  }

  // Physics terms need the frozen decomposition network; refusing up front
  // keeps the dependency order of the stages honest.
  std::optional<tev::TeVNetModel<double>> tevnet;
  if (cfg.has("tevnet")) {
    require_artifact(cfg.require_string("tevnet"), "tevnet checkpoint");
    tevnet = tev::TeVNetModel<double>::load(cfg.require_string("tevnet"));
  } else if (weights.k1 > 0.0 || weights.k2 > 0.0) {
    throw DependencyError(
        "physics losses enabled (k1=" + num_str(weights.k1) + ", k2=" + num_str(weights.k2) +
        ") but no tevnet checkpoint is configured; train one first and pass tevnet=<path>");
  }

  diffusion::LatentCodec<double> codec = diffusion::LatentCodec<double>::identity();
  if (cfg.has("codec")) {
    require_artifact(cfg.require_string("codec"), "codec checkpoint");
    codec = diffusion::LatentCodec<double>::load(cfg.require_string("codec"));
  }

  const auto sc = schedule_from_config(cfg);
  auto sched = diffusion::NoiseSchedule::linear(sc);

  training::PidTrainConfig tc;
  tc.iterations = static_cast<int>(cfg.get_int("iterations", 1000));
  tc.batch = cfg.get_int("batch", tc.batch);
  tc.accumulation = static_cast<int>(cfg.get_int("accumulation", tc.accumulation));
  tc.lr = cfg.get_double("lr", tc.lr);
  tc.weight_decay = cfg.get_double("weight_decay", tc.weight_decay);
  tc.seed = cfg.get_u64("seed", 0);
  tc.weights = weights;
  tc.physics_t_cutoff = static_cast<int>(cfg.get_int("physics_t_cutoff", tc.physics_t_cutoff));
  tc.log_every = static_cast<int>(cfg.get_int("log_every", 10));

  const std::string cond_kind = cfg.get_string("cond", "mlp");
  diffusion::ConditionerConfig cc;
  try {
    cc.kind = diffusion::conditioner_from_name(cond_kind);
  } catch (const std::exception&) {
    throw ConfigError("config key \"cond\": expected mlp or encoder, got \"" + cond_kind + "\"");
  }
  cc.hidden = cfg.get_int("cond_hidden", cc.hidden);
  cc.out_channels = cfg.get_int("cond_channels", cc.out_channels);
  cc.factor = codec.factor();
  diffusion::DenoiserConfig dc;
  dc.latent_channels = codec.latent_channels();
  dc.cond_channels = cc.out_channels;
  dc.base_channels = cfg.get_int("base_channels", dc.base_channels);
  dc.time_dim = cfg.get_int("time_dim", dc.time_dim);

  training::PIDModel<double> model;
  if (cfg.has("resume")) {
    const fs::path prev = cfg.require_string("resume");
    require_artifact((prev / "model.ckpt").string(), "resume checkpoint");
    model = training::PIDModel<double>::load((prev / "model.ckpt").string(), std::move(codec),
                                             std::move(tevnet));
    tc.start_iteration = read_train_state(prev);
    // Optimizer moments restart from zero on resume; only the iteration
    // numbering and its random streams continue.
  } else {
    Rng init(tc.seed, 0x9d);
    model.denoiser = diffusion::DenoiserModel<double>::make(dc, init.fork(1).next_u64());
    model.conditioner = diffusion::Conditioner<double>::make(cc, init.fork(2).next_u64());
    model.codec = std::move(codec);
    model.tevnet = std::move(tevnet);
  }

  auto pairs = data::load_dataset<double>(dataset_dir);
  std::vector<training::TrainPair<double>> dataset;
  dataset.reserve(pairs.size());
  for (const auto& p : pairs) dataset.push_back({p.infrared, p.visible});

  const bool resuming = cfg.has("resume");
  std::ofstream metrics(out / "metrics.log",
                        resuming ? std::ios::out | std::ios::app : std::ios::out);
  if (!metrics) throw std::runtime_error("cannot write metrics.log in " + out.string());
  if (!resuming) metrics << "iteration, L_Noise, L_Rec, L_TeV, total\n";

  training::TrainHooks<double> hooks;
  hooks.checkpoint_every = static_cast<int>(cfg.get_int("checkpoint_every", 0));
  hooks.on_log = [&](int iteration, const training::LossBreakdown& b) {
    metrics << iteration << ", " << num_str(b.noise) << ", " << num_str(b.rec) << ", "
            << num_str(b.tev) << ", " << num_str(b.total) << "\n";
  };
  hooks.on_checkpoint = [&](int iteration, training::PIDModel<double>& m) {
    m.save((out / "model.ckpt").string());
    write_train_state(out, iteration);
  };

  auto history = training::train(model, sched, dataset, tc, hooks);
  model.save((out / "model.ckpt").string());
  write_train_state(out, tc.start_iteration + tc.iterations);
  if (!history.empty()) {
    const auto& last = history.back();
    std::cout << "pid-train: iteration " << (tc.start_iteration + tc.iterations) << " total loss "
              << num_str(last.total) << " (noise " << num_str(last.noise) << ", rec "
              << num_str(last.rec) << ", tev " << num_str(last.tev) << ")\n";
  }
  std::cout << "pid-train: checkpoint " << (out / "model.ckpt").string() << "\n";

  RunConfig resolved = cfg;
  resolved.set("stage", "pid-train");
  resolved.set("k1", num_str(weights.k1));
  resolved.set("k2", num_str(weights.k2));
  resolved.set("iterations", num_str(static_cast<long long>(tc.iterations)));
  resolved.set("batch", num_str(static_cast<long long>(tc.batch)));
  resolved.set("accumulation", num_str(static_cast<long long>(tc.accumulation)));
  resolved.set("lr", num_str(tc.lr));
  resolved.set("weight_decay", num_str(tc.weight_decay));
  resolved.set("seed", num_str(tc.seed));
  echo_schedule(resolved, sc);
  resolved.set("physics_t_cutoff", num_str(static_cast<long long>(tc.physics_t_cutoff)));
  resolved.set("log_every", num_str(static_cast<long long>(tc.log_every)));
  resolved.set("checkpoint_every", num_str(static_cast<long long>(hooks.checkpoint_every)));
  resolved.set("cond", cond_kind);
  resolved.set("cond_hidden", num_str(static_cast<long long>(cc.hidden)));
  resolved.set("cond_channels", num_str(static_cast<long long>(cc.out_channels)));
  resolved.set("base_channels", num_str(static_cast<long long>(dc.base_channels)));
  resolved.set("time_dim", num_str(static_cast<long long>(dc.time_dim)));
  write_resolved_config(out, resolved);
}

// ---------------------------------------------------------------------------
// sample: generate infrared predictions from visible conditioning images.
// ---------------------------------------------------------------------------

inline void cmd_sample(const RunConfig& cfg) {
  check_stage(cfg, "sample");
  cfg.check_allowed({"stage", "model", "codec", "dataset", "out_dir", "sampler", "steps", "eta",
                     "seed", "count", "timesteps", "beta_start", "beta_end", "ddpm_variance"});
  const auto out = resolve_out_dir(cfg);
  const std::string model_path = cfg.require_string("model");
  require_artifact(model_path, "model checkpoint");
  const std::string dataset_dir = require_dataset_dir(cfg, "dataset");

  diffusion::LatentCodec<double> codec = diffusion::LatentCodec<double>::identity();
  if (cfg.has("codec")) {
    require_artifact(cfg.require_string("codec"), "codec checkpoint");
    codec = diffusion::LatentCodec<double>::load(cfg.require_string("codec"));
  }
  auto model = training::PIDModel<double>::load(model_path, std::move(codec), std::nullopt);

  const auto sc = schedule_from_config(cfg);
  auto sched = diffusion::NoiseSchedule::linear(sc);

  diffusion::SamplerConfig scfg;
  const std::string sampler = cfg.get_string("sampler", "ddim");
  try {
    scfg.kind = diffusion::sampler_from_name(sampler);
  } catch (const std::exception&) {
    throw ConfigError("config key \"sampler\": expected ddpm or ddim, got \"" + sampler + "\"");
  }
  scfg.eta = cfg.get_double("eta", 0.0);
  const std::string variance = cfg.get_string("ddpm_variance", "posterior");
  if (variance == "posterior") {
    scfg.variance = diffusion::StepVariance::Posterior;
  } else if (variance == "beta") {
    scfg.variance = diffusion::StepVariance::Beta;
  } else {
    throw ConfigError("config key \"ddpm_variance\": expected posterior or beta, got \"" +
                      variance + "\"");
  }
  const std::string steps_text = cfg.get_string("steps", "20");
  const auto step_counts = parse_step_list("steps", steps_text);
  const std::uint64_t seed = cfg.get_u64("seed", 0);

  auto pairs = data::load_dataset<double>(dataset_dir);
  long long count = cfg.get_int("count", static_cast<long long>(pairs.size()));
  if (count < 1) throw ConfigError("config key \"count\": must be >= 1");
  count = std::min<long long>(count, static_cast<long long>(pairs.size()));
  std::vector<Tensor<double>> rgb_items;
  rgb_items.reserve(static_cast<std::size_t>(count));
  for (long long i = 0; i < count; ++i) rgb_items.push_back(pairs[static_cast<std::size_t>(i)].visible);
  Tensor<double> rgb;
  {
    NoGradGuard off;
    rgb = stack_batch(rgb_items);
  }

  // One directory per step count. Every sweep entry reuses the same seed, so
  // the initial latents match across step counts and only the trajectory
  // length differs.
  for (const int s : step_counts) {
    char dname[16];
    std::snprintf(dname, sizeof(dname), "s_%03d", s);
    const auto sdir = out / dname;
    fs::create_directories(sdir);
    std::ofstream trace(sdir / "trace.log");
    if (!trace) throw std::runtime_error("cannot write trace.log in " + sdir.string());
    auto scfg_s = scfg;
    scfg_s.steps = s;
    Rng rng(seed, 0x5a);
    auto images = diffusion::sample<double>(
        model.denoiser, model.conditioner, model.codec, sched, rgb, scfg_s, rng,
        [&](std::int64_t image, int t, const Tensor<double>& z) {
          double acc = 0.0;
          for (const double v : z.data()) acc += std::abs(v);
          trace << "image " << image << " t " << t << " mean_abs "
                << num_str(acc / static_cast<double>(z.numel())) << "\n";
        });
    for (std::int64_t b = 0; b < images.dim(0); ++b) {
      const auto name = data::pair_name(b);
      data::save_pgm16((sdir / (name + ".pgm")).string(), take_batch_item(images, b), -1.0, 1.0);
    }
    std::cout << "sample: wrote " << images.dim(0) << " images to " << sdir.string() << "\n";
  }

  RunConfig resolved = cfg;
  resolved.set("stage", "sample");
  resolved.set("sampler", sampler);
  resolved.set("steps", steps_text);
  resolved.set("eta", num_str(scfg.eta));
  resolved.set("ddpm_variance", variance);
  resolved.set("seed", num_str(seed));
  resolved.set("count", num_str(count));
  echo_schedule(resolved, sc);
  write_resolved_config(out, resolved);
}

// ---------------------------------------------------------------------------
// evaluate: fidelity metrics, decomposition-loss distributions, compute table.
// ---------------------------------------------------------------------------

template <typename S>
double rec_loss_of(const tev::TeVNetModel<S>& tevnet, const Tensor<S>& image) {
  NoGradGuard off;
  auto batch = stack_batch<S>({image});
  return static_cast<double>(training::loss_rec(tevnet, batch).item());
}

inline void cmd_evaluate(const RunConfig& cfg) {
  check_stage(cfg, "evaluate");
  cfg.check_allowed({"stage", "dataset", "generated", "out_dir", "tevnet", "model", "codec",
                     "macs_steps", "data_range"});
  const auto out = resolve_out_dir(cfg);
  const std::string dataset_dir = require_dataset_dir(cfg, "dataset");
  const std::string gen_dir = cfg.require_string("generated");
  if (!fs::is_directory(gen_dir)) {
    throw MissingArtifactError("generated image directory not found: " + gen_dir);
  }
  const double data_range = cfg.get_double("data_range", 2.0);
  if (!(data_range > 0.0)) throw ConfigError("config key \"data_range\": must be > 0");

  auto ref = data::load_dataset<double>(dataset_dir);
  const auto n = static_cast<std::int64_t>(ref.size());

  // Alignment: the generated set must cover exactly the reference indices.
  std::vector<std::int64_t> missing, unmatched;
  for (std::int64_t i = 0; i < n; ++i) {
    if (!fs::exists(fs::path(gen_dir) / (data::pair_name(i) + ".pgm"))) missing.push_back(i);
  }
  for (const auto& entry : fs::directory_iterator(gen_dir)) {
    const auto name = entry.path().filename().string();
    if (name.size() == 14 && name.rfind("pair_", 0) == 0 && name.ends_with(".pgm")) {
      const auto idx = std::stoll(name.substr(5, 5));
      if (idx >= n) unmatched.push_back(idx);
    }
  }
  if (!missing.empty() || !unmatched.empty()) {
    std::string msg = "generated set is misaligned with the reference set:";
    if (!missing.empty()) {
      msg += " missing indices";
      for (auto i : missing) msg += " " + std::to_string(i);
      msg += ";";
    }
    if (!unmatched.empty()) {
      msg += " indices without a reference";
      for (auto i : unmatched) msg += " " + std::to_string(i);
    }
    throw MissingArtifactError(msg);
  }

  // Fidelity is measured in the export format: generated pixels necessarily
  // live on the 16-bit lattice of their PGM files, so the reference is
  // snapped onto the same lattice (identical save+load arithmetic). A
  // pixel-exact generator therefore scores exact-equality metrics.
  const auto snap16 = [](const Tensor<double>& x) {
    std::vector<double> d(x.data().begin(), x.data().end());
    const double inv = 65535.0 / 2.0, scale = 2.0 / 65535.0;
    for (auto& v : d) {
      const double q = std::min(65535.0, std::max(0.0, (v + 1.0) * inv));
      v = -1.0 + static_cast<double>(std::lround(q)) * scale;
    }
    return Tensor<double>::from_data(x.shape(), std::move(d));
  };
  std::vector<Tensor<double>> gen_items, ref_items;
  gen_items.reserve(ref.size());
  ref_items.reserve(ref.size());
  for (std::int64_t i = 0; i < n; ++i) {
    auto [img, meta] = data::load_pgm16((fs::path(gen_dir) / (data::pair_name(i) + ".pgm")).string());
    gen_items.push_back(std::move(img));
    ref_items.push_back(snap16(ref[static_cast<std::size_t>(i)].infrared));
  }
  Tensor<double> gen_batch, ref_batch;
  {
    NoGradGuard off;
    gen_batch = stack_batch(gen_items);
    ref_batch = stack_batch(ref_items);
  }
  auto report = metrics::evaluate_pairs(gen_batch, ref_batch, data_range);
  {
    std::ofstream csv(out / "metrics.csv");
    csv << metrics::format_report_csv(report);
    std::ofstream table(out / "metrics.txt");
    table << metrics::format_report_table(report);
  }
  std::cout << "evaluate: psnr " << num_str(report.psnr_mean) << " dB, ssim "
            << num_str(report.ssim_mean) << " over " << n << " pairs\n";

  // Decomposition-loss distributions: visible-like (channel mean), real
  // infrared, and generated images all scored by the frozen decomposition
  // network, then compared pairwise by earth-mover distance.
  const std::string tevnet_path = cfg.require_string("tevnet");
  require_artifact(tevnet_path, "tevnet checkpoint");
  auto tevnet = tev::TeVNetModel<double>::load(tevnet_path);
  training::freeze_params(tevnet.params());
  std::vector<double> d_vis, d_ir, d_gen;
  d_vis.reserve(ref.size());
  d_ir.reserve(ref.size());
  d_gen.reserve(ref.size());
  for (std::int64_t i = 0; i < n; ++i) {
    Tensor<double> vis_gray;
    {
      NoGradGuard off;
      vis_gray = take_batch_item(
          mean_channels(stack_batch<double>({ref[static_cast<std::size_t>(i)].visible})), 0);
    }
    d_vis.push_back(rec_loss_of(tevnet, vis_gray));
    d_ir.push_back(rec_loss_of(tevnet, ref_items[static_cast<std::size_t>(i)]));
    d_gen.push_back(rec_loss_of(tevnet, gen_items[static_cast<std::size_t>(i)]));
  }
  {
    std::ofstream lrec(out / "lrec.csv");
    lrec << "index,visible,infrared,generated\n";
    for (std::int64_t i = 0; i < n; ++i) {
      lrec << i << "," << num_str(d_vis[static_cast<std::size_t>(i)]) << ","
           << num_str(d_ir[static_cast<std::size_t>(i)]) << ","
           << num_str(d_gen[static_cast<std::size_t>(i)]) << "\n";
    }
  }
  {
    const std::vector<std::pair<std::string, const std::vector<double>*>> sets = {
        {"visible", &d_vis}, {"infrared", &d_ir}, {"generated", &d_gen}};
    std::ofstream emd(out / "emd.csv");
    emd << "set,visible,infrared,generated\n";
    for (const auto& [rname, rv] : sets) {
      emd << rname;
      for (const auto& [cname, cv] : sets) emd << "," << num_str(metrics::emd_1d(*rv, *cv));
      emd << "\n";
    }
  }
  std::cout << "evaluate: emd(visible, infrared) "
            << num_str(metrics::emd_1d(d_vis, d_ir)) << ", emd(generated, infrared) "
            << num_str(metrics::emd_1d(d_gen, d_ir)) << "\n";

  // Compute cost versus step count, from the loaded model's own profile.
  const std::string model_path = cfg.require_string("model");
  require_artifact(model_path, "model checkpoint");
  diffusion::LatentCodec<double> codec = diffusion::LatentCodec<double>::identity();
  if (cfg.has("codec")) {
    require_artifact(cfg.require_string("codec"), "codec checkpoint");
    codec = diffusion::LatentCodec<double>::load(cfg.require_string("codec"));
  }
  auto model = training::PIDModel<double>::load(model_path, std::move(codec), std::nullopt);
  const std::int64_t h = ref_items[0].dim(1), w = ref_items[0].dim(2);
  const int f = model.codec.factor();
  metrics::CostModel cost;
  cost.conditioner_macs = metrics::macs_sum(model.conditioner.macs_profile(h, w, &model.codec));
  cost.denoiser_step_macs = metrics::macs_sum(model.denoiser.macs_profile(h / f, w / f));
  cost.decoder_macs = metrics::macs_sum(model.codec.macs_profile_decode(h / f, w / f));
  const auto macs_steps = parse_step_list("macs_steps",
                                          cfg.get_string("macs_steps", "2,4,5,10,20,50,100"));
  {
    std::ofstream macs(out / "macs.csv");
    macs << "s,conditioner_macs,denoiser_macs_per_step,decoder_macs,total_macs\n";
    for (const int s : macs_steps) {
      macs << s << "," << num_str(cost.conditioner_macs) << ","
           << num_str(cost.denoiser_step_macs) << "," << num_str(cost.decoder_macs) << ","
           << num_str(cost.total(s)) << "\n";
    }
  }

  RunConfig resolved = cfg;
  resolved.set("stage", "evaluate");
  resolved.set("data_range", num_str(data_range));
  resolved.set("macs_steps", cfg.get_string("macs_steps", "2,4,5,10,20,50,100"));
  write_resolved_config(out, resolved);
}

// ---------------------------------------------------------------------------
// decompose: export per-component images and the reconstruction-error map.
// ---------------------------------------------------------------------------

inline void cmd_decompose(const RunConfig& cfg) {
  check_stage(cfg, "decompose");
  cfg.check_allowed({"stage", "tevnet", "dataset", "inputs", "out_dir", "count"});
  const auto out = resolve_out_dir(cfg);
  const std::string tevnet_path = cfg.require_string("tevnet");
  require_artifact(tevnet_path, "tevnet checkpoint");
  auto tevnet = tev::TeVNetModel<double>::load(tevnet_path);
  training::freeze_params(tevnet.params());

  std::vector<std::pair<std::string, Tensor<double>>> inputs;  // (name, [1,H,W] in [-1,1])
  if (cfg.has("inputs")) {
    for (const auto& path : split_list(cfg.require_string("inputs"))) {
      require_artifact(path, "input image");
      auto [img, meta] = data::load_pgm16(path);
      inputs.emplace_back(fs::path(path).stem().string(), std::move(img));
    }
    if (inputs.empty()) throw ConfigError("config key \"inputs\": empty list");
  } else {
    const std::string dataset_dir = require_dataset_dir(cfg, "dataset");
    auto pairs = data::load_dataset<double>(dataset_dir);
    long long count = cfg.get_int("count", static_cast<long long>(pairs.size()));
    if (count < 1) throw ConfigError("config key \"count\": must be >= 1");
    count = std::min<long long>(count, static_cast<long long>(pairs.size()));
    for (long long i = 0; i < count; ++i) {
      inputs.emplace_back(data::pair_name(i), pairs[static_cast<std::size_t>(i)].infrared);
    }
  }

  std::ofstream log(out / "decompose.log");
  if (!log) throw std::runtime_error("cannot write decompose.log in " + out.string());
  NoGradGuard off;
  for (const auto& [name, image] : inputs) {
    auto batch = stack_batch<double>({image});
    auto comps = tevnet.forward(batch);
    auto unit = tev::to_unit(batch);
    Tensor<double> env, recon;
    if (comps.kind == tev::HeadKind::Mixing) {
      auto shat = tev::grid_downsample(unit, tevnet.config().m);
      env = grid_mix(comps.v, shat);
      recon = tev::reconstruct(comps, shat);
    } else {
      env = comps.phi;
      recon = tev::reconstruct(comps, Tensor<double>::scalar(0.0));
    }

    const auto numel = static_cast<std::size_t>(unit.numel());
    std::vector<double> err(numel);
    double err_max = 0.0, err_sq = 0.0;
    for (std::size_t i = 0; i < numel; ++i) {
      const double d = std::abs(recon.data()[i] - unit.data()[i]);
      err[i] = d;
      err_max = std::max(err_max, d);
      err_sq += d * d;
    }
    const double recon_mse = err_sq / static_cast<double>(numel);
    auto err_map = Tensor<double>::from_data(unit.shape(), std::move(err));

    const auto max_of = [](const Tensor<double>& x) {
      double hi = 0.0;
      for (const double v : x.data()) hi = std::max(hi, v);
      return std::max(hi, 1e-12);  // degenerate all-zero maps still need hi > lo
    };
    const double t_hi = max_of(comps.t);
    const double env_hi = max_of(env);
    const double err_hi = max_of(err_map);
    data::save_pgm16_raw((out / (name + "_e.pgm")).string(), take_batch_item(comps.e, 0), 0.0, 1.0);
    data::save_pgm16_raw((out / (name + "_t.pgm")).string(), take_batch_item(comps.t, 0), 0.0,
                         t_hi);
    data::save_pgm16_raw((out / (name + "_env.pgm")).string(), take_batch_item(env, 0), 0.0,
                         env_hi);
    data::save_pgm16_raw((out / (name + "_err.pgm")).string(), take_batch_item(err_map, 0), 0.0,
                         err_hi);
    std::ofstream side(out / (name + ".range"));
    side << "e 0 1\n"
         << "t 0 " << num_str(t_hi) << "\n"
         << "env 0 " << num_str(env_hi) << "\n"
         << "err 0 " << num_str(err_hi) << "\n";
    log << name << " recon_mse " << num_str(recon_mse) << " err_max " << num_str(err_max) << "\n";
  }
  std::cout << "decompose: wrote component maps for " << inputs.size() << " images to "
            << out.string() << "\n";

  RunConfig resolved = cfg;
  resolved.set("stage", "decompose");
  write_resolved_config(out, resolved);
}

// ---------------------------------------------------------------------------
// Dispatch by stage name (for `pid run --config file` replays).
// ---------------------------------------------------------------------------

inline void run_stage(const std::string& stage, const RunConfig& cfg) {
  if (stage == "data-gen") return cmd_data_gen(cfg);
  if (stage == "codec-train") return cmd_codec_train(cfg);
  if (stage == "tevnet-train") return cmd_tevnet_train(cfg);
  if (stage == "pid-train") return cmd_pid_train(cfg);
  if (stage == "sample") return cmd_sample(cfg);
  if (stage == "evaluate") return cmd_evaluate(cfg);
  if (stage == "decompose") return cmd_decompose(cfg);
  throw ConfigError("unknown stage \"" + stage + "\"");
}

}  // namespace pid::cli
