#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "pid/codec.hpp"
#include "pid/nn.hpp"
#include "pid/ops.hpp"
#include "pid/rng.hpp"
#include "pid/serialize.hpp"
#include "pid/tensor.hpp"

// Noise-prediction network: a small two-level UNet over latent maps,
// conditioned on a visible-image feature map (channel concatenation) and on
// the diffusion timestep (sinusoidal embedding added as per-channel biases).

namespace pid::diffusion {

// Sinusoidal features for integer timesteps: [B, dim] leaf tensor with
// [sin(t/10000^(2i/dim)), cos(...)] pairs. dim must be even.
template <typename S>
Tensor<S> timestep_embedding(const std::vector<int>& t, std::int64_t dim) {
  if (dim <= 0 || dim % 2 != 0) {
    throw std::invalid_argument("timestep_embedding: dim must be positive and even, got " +
                                std::to_string(dim));
  }
  const auto b = static_cast<std::int64_t>(t.size());
  std::vector<S> data(static_cast<std::size_t>(b * dim));
  const std::int64_t half = dim / 2;
  for (std::int64_t i = 0; i < b; ++i) {
    const double tv = static_cast<double>(t[static_cast<std::size_t>(i)]);
    for (std::int64_t k = 0; k < half; ++k) {
      const double freq =
          std::exp(-std::log(10000.0) * static_cast<double>(k) / static_cast<double>(half));
      const double ang = tv * freq;
      data[static_cast<std::size_t>(i * dim + 2 * k)] = static_cast<S>(std::sin(ang));
      data[static_cast<std::size_t>(i * dim + 2 * k + 1)] = static_cast<S>(std::cos(ang));
    }
  }
  return Tensor<S>::from_data({b, dim}, std::move(data));
}

// ---------------------------------------------------------------------------
// Visible-image conditioner.
// ---------------------------------------------------------------------------

enum class ConditionerKind { Mlp, Encoder };

inline const char* conditioner_name(ConditionerKind k) {
  return k == ConditionerKind::Mlp ? "mlp" : "encoder";
}

inline ConditionerKind conditioner_from_name(const std::string& name) {
  if (name == "mlp") return ConditionerKind::Mlp;
  if (name == "encoder") return ConditionerKind::Encoder;
  throw std::invalid_argument("unknown conditioner kind: " + name);
}

struct ConditionerConfig {
  ConditionerKind kind = ConditionerKind::Mlp;
  std::int64_t hidden = 16;  // Mlp hidden width
  std::int64_t out_channels = 8;
  int factor = 1;  // spatial reduction; must match the codec's factor
};

// Maps a visible image [B,3,H,W] to a conditioning feature map
// [B,out,H/f,W/f] matching the latent resolution.
//  - Mlp: average-pool to the latent grid, then per-pixel 1x1 convolutions.
//  - Encoder: luminance through a frozen codec encoder (shared per-pixel
//    statistics with the latent space itself).
template <typename S>
class Conditioner {
public:
  Conditioner() = default;

  static Conditioner make(const ConditionerConfig& cfg, std::uint64_t seed) {
    Conditioner c;
    c.cfg_ = cfg;
    if (cfg.factor != 1 && cfg.factor != 2 && cfg.factor != 4) {
      throw std::invalid_argument("conditioner: factor must be 1, 2, or 4");
    }
    if (cfg.kind == ConditionerKind::Mlp) {
      if (cfg.hidden < 1 || cfg.out_channels < 1) {
        throw std::invalid_argument("conditioner: hidden and out_channels must be >= 1");
      }
      Rng rng(seed);
      using C = nn::Conv2dLayer<S>;
      c.fc1_ = C::make(3, cfg.hidden, 1, 1, Padding::Same, rng);
      c.fc2_ = C::make(cfg.hidden, cfg.hidden, 1, 1, Padding::Same, rng);
      c.fc3_ = C::make(cfg.hidden, cfg.out_channels, 1, 1, Padding::Same, rng);
    }
    return c;
  }

  const ConditionerConfig& config() const { return cfg_; }

  // codec is required (and consulted) only for the Encoder kind.
  Tensor<S> operator()(const Tensor<S>& rgb, const LatentCodec<S>* codec = nullptr) const {
    if (rgb.rank() != 4 || rgb.dim(1) != 3) {
      throw std::invalid_argument("conditioner: expected [B,3,H,W] input, got " +
                                  shape_str(rgb.shape()));
    }
    if (cfg_.kind == ConditionerKind::Encoder) {
      if (codec == nullptr) {
        throw std::invalid_argument("conditioner: encoder kind requires a codec");
      }
      if (codec->factor() != cfg_.factor) {
        throw std::invalid_argument("conditioner: codec factor mismatch");
      }
      return codec->encode(mean_channels(rgb));
    }
    auto x = cfg_.factor == 1 ? rgb : avg_pool2d(rgb, cfg_.factor);
    return fc3_(silu(fc2_(silu(fc1_(x)))));
  }

  std::vector<nn::ParamRef<S>> params() const {
    std::vector<nn::ParamRef<S>> refs;
    if (cfg_.kind == ConditionerKind::Mlp) {
      fc1_.params("cond/fc1", refs);
      fc2_.params("cond/fc2", refs);
      fc3_.params("cond/fc3", refs);
    }
    return refs;
  }

  std::vector<nn::MacsItem> macs_profile(std::int64_t h, std::int64_t w,
                                         const LatentCodec<S>* codec = nullptr) const {
    if (cfg_.kind == ConditionerKind::Encoder) {
      if (codec == nullptr) {
        throw std::invalid_argument("conditioner: encoder kind requires a codec");
      }
      return codec->macs_profile_encode(h, w);
    }
    std::vector<nn::MacsItem> out;
    const std::int64_t lh = h / cfg_.factor, lw = w / cfg_.factor;
    fc1_.macs("cond/fc1", lh, lw, out);
    fc2_.macs("cond/fc2", lh, lw, out);
    fc3_.macs("cond/fc3", lh, lw, out);
    return out;
  }

private:
  ConditionerConfig cfg_;
  nn::Conv2dLayer<S> fc1_, fc2_, fc3_;
};

// ---------------------------------------------------------------------------
// UNet noise predictor.
// ---------------------------------------------------------------------------

struct DenoiserConfig {
  std::int64_t latent_channels = 1;
  std::int64_t cond_channels = 8;
  std::int64_t base_channels = 32;
  std::int64_t time_dim = 64;
};

template <typename S>
class DenoiserModel {
public:
  DenoiserModel() = default;

  static DenoiserModel make(const DenoiserConfig& cfg, std::uint64_t seed) {
    if (cfg.latent_channels < 1 || cfg.cond_channels < 0 || cfg.base_channels < 1) {
      throw std::invalid_argument("denoiser: channel counts must be positive");
    }
    if (cfg.time_dim <= 0 || cfg.time_dim % 2 != 0) {
      throw std::invalid_argument("denoiser: time_dim must be positive and even");
    }
    DenoiserModel mdl;
    mdl.cfg_ = cfg;
    Rng rng(seed);
    using C = nn::Conv2dLayer<S>;
    using L = nn::LinearLayer<S>;
    const std::int64_t c1 = cfg.base_channels;
    const std::int64_t c2 = 2 * cfg.base_channels;
    mdl.time_fc1_ = L::make(cfg.time_dim, cfg.time_dim, rng);
    mdl.time_fc2_ = L::make(cfg.time_dim, cfg.time_dim, rng);
    mdl.in_conv_ = C::make(cfg.latent_channels + cfg.cond_channels, c1, 3, 1, Padding::Same, rng);
    mdl.tb1_ = L::make(cfg.time_dim, c1, rng);
    mdl.enc1b_ = C::make(c1, c1, 3, 1, Padding::Same, rng);
    mdl.down_ = C::make(c1, c2, 3, 2, Padding::Same, rng);
    mdl.tb2_ = L::make(cfg.time_dim, c2, rng);
    mdl.enc2b_ = C::make(c2, c2, 3, 1, Padding::Same, rng);
    mdl.mid_ = C::make(c2, c2, 3, 1, Padding::Same, rng);
    mdl.tbm_ = L::make(cfg.time_dim, c2, rng);
    mdl.up_conv_ = C::make(c2, c1, 3, 1, Padding::Same, rng);
    mdl.fuse_ = C::make(2 * c1, c1, 3, 1, Padding::Same, rng);
    mdl.tbu_ = L::make(cfg.time_dim, c1, rng);
    mdl.out_conv_ = C::make(c1, cfg.latent_channels, 3, 1, Padding::Same, rng);
    return mdl;
  }

  const DenoiserConfig& config() const { return cfg_; }

  // zt: [B,latent,H,W]; cond: [B,cond,H,W] (same spatial grid); t: one
  // timestep per batch element. H and W must be even (one downsampling).
  Tensor<S> operator()(const Tensor<S>& zt, const Tensor<S>& cond,
                       const std::vector<int>& t) const {
    if (zt.rank() != 4 || zt.dim(1) != cfg_.latent_channels) {
      throw std::invalid_argument("denoiser: bad latent input shape " + shape_str(zt.shape()));
    }
    if (cond.rank() != 4 || cond.dim(1) != cfg_.cond_channels || cond.dim(0) != zt.dim(0) ||
        cond.dim(2) != zt.dim(2) || cond.dim(3) != zt.dim(3)) {
      throw std::invalid_argument("denoiser: conditioning shape " + shape_str(cond.shape()) +
                                  " does not match latent " + shape_str(zt.shape()));
    }
    if (static_cast<std::int64_t>(t.size()) != zt.dim(0)) {
      throw std::invalid_argument("denoiser: need one timestep per batch element");
    }
    if (zt.dim(2) % 2 != 0 || zt.dim(3) % 2 != 0) {
      throw std::invalid_argument("denoiser: latent spatial extents must be even");
    }
    auto temb = timestep_embedding<S>(t, cfg_.time_dim);
    auto tfeat = silu(time_fc2_(silu(time_fc1_(temb))));

    auto x = concat_channels(zt, cond);
    auto h1 = silu(add_channel_bias(in_conv_(x), tb1_(tfeat)));
    h1 = silu(enc1b_(h1));
    auto h2 = silu(add_channel_bias(down_(h1), tb2_(tfeat)));
    h2 = silu(enc2b_(h2));
    auto hm = silu(add_channel_bias(mid_(h2), tbm_(tfeat)));
    auto u = silu(up_conv_(upsample_nearest2x(hm)));
    auto f = silu(add_channel_bias(fuse_(concat_channels(u, h1)), tbu_(tfeat)));
    return out_conv_(f);
  }

  std::vector<nn::ParamRef<S>> params() const {
    std::vector<nn::ParamRef<S>> refs;
    time_fc1_.params("unet/time_fc1", refs);
    time_fc2_.params("unet/time_fc2", refs);
    in_conv_.params("unet/in_conv", refs);
    tb1_.params("unet/tb1", refs);
    enc1b_.params("unet/enc1b", refs);
    down_.params("unet/down", refs);
    tb2_.params("unet/tb2", refs);
    enc2b_.params("unet/enc2b", refs);
    mid_.params("unet/mid", refs);
    tbm_.params("unet/tbm", refs);
    up_conv_.params("unet/up_conv", refs);
    fuse_.params("unet/fuse", refs);
    tbu_.params("unet/tbu", refs);
    out_conv_.params("unet/out_conv", refs);
    return refs;
  }

  // Per-layer multiply-accumulate counts for one forward pass at the given
  // latent spatial extents (linear layers counted per batch element).
  std::vector<nn::MacsItem> macs_profile(std::int64_t h, std::int64_t w) const {
    std::vector<nn::MacsItem> out;
    time_fc1_.macs("unet/time_fc1", out);
    time_fc2_.macs("unet/time_fc2", out);
    in_conv_.macs("unet/in_conv", h, w, out);
    tb1_.macs("unet/tb1", out);
    enc1b_.macs("unet/enc1b", h, w, out);
    down_.macs("unet/down", h, w, out);
    tb2_.macs("unet/tb2", out);
    enc2b_.macs("unet/enc2b", h / 2, w / 2, out);
    mid_.macs("unet/mid", h / 2, w / 2, out);
    tbm_.macs("unet/tbm", out);
    up_conv_.macs("unet/up_conv", h, w, out);
    fuse_.macs("unet/fuse", h, w, out);
    tbu_.macs("unet/tbu", out);
    out_conv_.macs("unet/out_conv", h, w, out);
    return out;
  }

  void save(const std::string& path) const {
    NamedTensors<S> entries;
    entries.emplace_back("meta/format", Tensor<S>::scalar(S(1)));
    entries.emplace_back("meta/latent", Tensor<S>::scalar(static_cast<S>(cfg_.latent_channels)));
    entries.emplace_back("meta/cond", Tensor<S>::scalar(static_cast<S>(cfg_.cond_channels)));
    entries.emplace_back("meta/base", Tensor<S>::scalar(static_cast<S>(cfg_.base_channels)));
    entries.emplace_back("meta/time_dim", Tensor<S>::scalar(static_cast<S>(cfg_.time_dim)));
    auto refs = params();
    nn::export_params(refs, entries);
    save_checkpoint(path, entries);
  }

  static DenoiserModel load(const std::string& path) {
    auto entries = load_checkpoint<S>(path);
    DenoiserConfig cfg;
    cfg.latent_channels = static_cast<std::int64_t>(checkpoint_get(entries, "meta/latent").item());
    cfg.cond_channels = static_cast<std::int64_t>(checkpoint_get(entries, "meta/cond").item());
    cfg.base_channels = static_cast<std::int64_t>(checkpoint_get(entries, "meta/base").item());
    cfg.time_dim = static_cast<std::int64_t>(checkpoint_get(entries, "meta/time_dim").item());
    auto mdl = make(cfg, 0);
    auto refs = mdl.params();
    nn::import_params(refs, entries);
    return mdl;
  }

private:
  DenoiserConfig cfg_;
  nn::LinearLayer<S> time_fc1_, time_fc2_, tb1_, tb2_, tbm_, tbu_;
  nn::Conv2dLayer<S> in_conv_, enc1b_, down_, enc2b_, mid_, up_conv_, fuse_, out_conv_;
};

}  // namespace pid::diffusion
