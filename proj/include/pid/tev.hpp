#pragma once

#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "pid/adamw.hpp"
#include "pid/nn.hpp"
#include "pid/ops.hpp"
#include "pid/rng.hpp"
#include "pid/serialize.hpp"
#include "pid/tensor.hpp"

// Physical decomposition of an infrared image S into
//   S = e * T + (1 - e) * (V . Shat)        (mixing-map head)
//   S = e * T + (1 - e) * Phi               (direct-environment head)
// where e is a per-pixel emissivity-like gate, T the thermal component, Shat
// the vector of grid-cell means of S, and V an m-channel map contracted
// against Shat pixelwise. All image-space quantities here live in [0, 1];
// model-space tensors in [-1, 1] are mapped at the boundary.

namespace pid::tev {

enum class HeadKind { Mixing, Direct };

inline std::string head_name(HeadKind k) {
  return k == HeadKind::Mixing ? "tev" : "tes";
}

inline HeadKind head_from_name(const std::string& s) {
  if (s == "tev") return HeadKind::Mixing;
  if (s == "tes") return HeadKind::Direct;
  throw std::invalid_argument("head: expected 'tev' or 'tes', got '" + s + "'");
}

template <typename S>
Tensor<S> to_unit(const Tensor<S>& x_norm) {
  return mul_scalar(add_scalar(x_norm, S(1)), S(0.5));
}

template <typename S>
Tensor<S> to_norm(const Tensor<S>& x_unit) {
  return sub_scalar(mul_scalar(x_unit, S(2)), S(1));
}

// Per-cell means of a [0,1] single-channel image, [B, m].
template <typename S>
Tensor<S> grid_downsample(const Tensor<S>& img01, int m) {
  return grid_cell_means(img01, m);
}

template <typename S>
struct Components {
  HeadKind kind = HeadKind::Mixing;
  int m = 0;           // grid cells, mixing head only
  Tensor<S> e;         // [B,1,H,W], in (0,1)
  Tensor<S> t;         // [B,1,H,W], >= 0
  Tensor<S> v;         // [B,m,H,W], mixing head
  Tensor<S> phi;       // [B,1,H,W], direct head, >= 0

  // Channel stack [B, 2+m, H, W] or [B, 3, H, W] for component-space losses.
  Tensor<S> stacked() const {
    return concat_channels(concat_channels(e, t), kind == HeadKind::Mixing ? v : phi);
  }
};

// Reconstruction in [0,1] image space from mixing-head components.
template <typename S>
Tensor<S> reconstruct_mixing(const Components<S>& c, const Tensor<S>& shat) {
  auto env = grid_mix(c.v, shat);
  return add(mul(c.e, c.t), mul(scalar_sub(S(1), c.e), env));
}

// Reconstruction in [0,1] image space from direct-head components.
template <typename S>
Tensor<S> reconstruct_direct(const Components<S>& c) {
  return add(mul(c.e, c.t), mul(scalar_sub(S(1), c.e), c.phi));
}

// Dispatching form; `shat` is ignored by the direct head.
template <typename S>
Tensor<S> reconstruct(const Components<S>& c, const Tensor<S>& shat) {
  return c.kind == HeadKind::Mixing ? reconstruct_mixing(c, shat) : reconstruct_direct(c);
}

struct TeVNetConfig {
  HeadKind head = HeadKind::Mixing;
  int m = 4;
  std::int64_t base_channels = 16;
};

// Three-level convolutional encoder-decoder with skip connections; final
// 3x3 conv emits the component channels (e, T, then V or Phi).
template <typename S>
class TeVNetModel {
public:
  static TeVNetModel init(const TeVNetConfig& cfg, std::uint64_t seed) {
    if (cfg.head == HeadKind::Mixing) grid_layout(cfg.m);  // validates m
    if (cfg.base_channels < 1) throw std::invalid_argument("tevnet: base_channels must be >= 1");
    TeVNetModel mdl;
    mdl.cfg_ = cfg;
    Rng rng(seed);
    const std::int64_t c1 = cfg.base_channels, c2 = 2 * c1, c3 = 4 * c1;
    const std::int64_t out_ch = cfg.head == HeadKind::Mixing ? 2 + cfg.m : 3;
    using C = nn::Conv2dLayer<S>;
    mdl.enc1a_ = C::make(1, c1, 3, 1, Padding::Same, rng);
    mdl.enc1b_ = C::make(c1, c1, 3, 1, Padding::Same, rng);
    mdl.enc2a_ = C::make(c1, c2, 3, 2, Padding::Same, rng);
    mdl.enc2b_ = C::make(c2, c2, 3, 1, Padding::Same, rng);
    mdl.enc3a_ = C::make(c2, c3, 3, 2, Padding::Same, rng);
    mdl.enc3b_ = C::make(c3, c3, 3, 1, Padding::Same, rng);
    mdl.dec2u_ = C::make(c3, c2, 3, 1, Padding::Same, rng);
    mdl.dec2m_ = C::make(2 * c2, c2, 3, 1, Padding::Same, rng);
    mdl.dec1u_ = C::make(c2, c1, 3, 1, Padding::Same, rng);
    mdl.dec1m_ = C::make(2 * c1, c1, 3, 1, Padding::Same, rng);
    mdl.head_ = C::make(c1, out_ch, 3, 1, Padding::Same, rng);
    return mdl;
  }

  const TeVNetConfig& config() const { return cfg_; }

  // x_norm: [B,1,H,W] in [-1,1]; H and W divisible by 4.
  Components<S> forward(const Tensor<S>& x_norm) const {
    auto x01 = to_unit(x_norm);
    auto e1 = silu(enc1b_(silu(enc1a_(x01))));
    auto e2 = silu(enc2b_(silu(enc2a_(e1))));
    auto e3 = silu(enc3b_(silu(enc3a_(e2))));
    auto d2 = silu(dec2m_(concat_channels(silu(dec2u_(upsample_nearest2x(e3))), e2)));
    auto d1 = silu(dec1m_(concat_channels(silu(dec1u_(upsample_nearest2x(d2))), e1)));
    auto logits = head_(d1);
    Components<S> out;
    out.kind = cfg_.head;
    out.m = cfg_.m;
    out.e = sigmoid(slice_channels(logits, 0, 1));
    out.t = relu(slice_channels(logits, 1, 2));
    if (cfg_.head == HeadKind::Mixing) {
      out.v = slice_channels(logits, 2, 2 + cfg_.m);
    } else {
      out.phi = relu(slice_channels(logits, 2, 3));
    }
    return out;
  }

  std::vector<nn::ParamRef<S>> params() const {
    std::vector<nn::ParamRef<S>> refs;
    enc1a_.params("tevnet/enc1a", refs);
    enc1b_.params("tevnet/enc1b", refs);
    enc2a_.params("tevnet/enc2a", refs);
    enc2b_.params("tevnet/enc2b", refs);
    enc3a_.params("tevnet/enc3a", refs);
    enc3b_.params("tevnet/enc3b", refs);
    dec2u_.params("tevnet/dec2u", refs);
    dec2m_.params("tevnet/dec2m", refs);
    dec1u_.params("tevnet/dec1u", refs);
    dec1m_.params("tevnet/dec1m", refs);
    head_.params("tevnet/head", refs);
    return refs;
  }

  std::vector<nn::MacsItem> macs_profile(std::int64_t h, std::int64_t w) const {
    std::vector<nn::MacsItem> out;
    enc1a_.macs("tevnet/enc1a", h, w, out);
    enc1b_.macs("tevnet/enc1b", h, w, out);
    enc2a_.macs("tevnet/enc2a", h, w, out);
    enc2b_.macs("tevnet/enc2b", h / 2, w / 2, out);
    enc3a_.macs("tevnet/enc3a", h / 2, w / 2, out);
    enc3b_.macs("tevnet/enc3b", h / 4, w / 4, out);
    dec2u_.macs("tevnet/dec2u", h / 2, w / 2, out);
    dec2m_.macs("tevnet/dec2m", h / 2, w / 2, out);
    dec1u_.macs("tevnet/dec1u", h, w, out);
    dec1m_.macs("tevnet/dec1m", h, w, out);
    head_.macs("tevnet/head", h, w, out);
    return out;
  }

  void save(const std::string& path) const {
    NamedTensors<S> entries;
    entries.emplace_back("meta/format", Tensor<S>::scalar(S(1)));
    entries.emplace_back("meta/head", Tensor<S>::scalar(cfg_.head == HeadKind::Mixing ? S(0) : S(1)));
    entries.emplace_back("meta/m", Tensor<S>::scalar(static_cast<S>(cfg_.m)));
    entries.emplace_back("meta/base", Tensor<S>::scalar(static_cast<S>(cfg_.base_channels)));
    auto refs = params();
    nn::export_params(refs, entries);
    save_checkpoint(path, entries);
  }

  static TeVNetModel load(const std::string& path) {
    auto entries = load_checkpoint<S>(path);
    TeVNetConfig cfg;
    cfg.head = checkpoint_get(entries, "meta/head").item() == S(0) ? HeadKind::Mixing
                                                                   : HeadKind::Direct;
    cfg.m = static_cast<int>(checkpoint_get(entries, "meta/m").item());
    cfg.base_channels = static_cast<std::int64_t>(checkpoint_get(entries, "meta/base").item());
    auto mdl = init(cfg, 0);
    auto refs = mdl.params();
    nn::import_params(refs, entries);
    return mdl;
  }

private:
  TeVNetConfig cfg_;
  nn::Conv2dLayer<S> enc1a_, enc1b_, enc2a_, enc2b_, enc3a_, enc3b_;
  nn::Conv2dLayer<S> dec2u_, dec2m_, dec1u_, dec1m_, head_;
};

// Self-supervised objective: decompose, reassemble with the input's own grid
// means, compare in [0,1] image space.
template <typename S>
Tensor<S> selfsup_loss(const TeVNetModel<S>& model, const Tensor<S>& x_norm) {
  auto comps = model.forward(x_norm);
  Tensor<S> shat;
  if (comps.kind == HeadKind::Mixing) {
    // grid means of the input are a constant target, not a gradient path
    NoGradGuard off;
    shat = grid_downsample(to_unit(x_norm), model.config().m);
  }
  auto rec = reconstruct(comps, shat);
  return mse(rec, to_unit(x_norm));
}

struct TevTrainConfig {
  int epochs = 200;
  std::int64_t batch = 16;
  double lr = 1e-3;
  double weight_decay = 0.0;
  std::uint64_t seed = 0;
};

// Epoch-shuffled minibatch training; images are [1,H,W] tensors in [-1,1].
// Returns the final epoch's mean training loss.
template <typename S>
double train_tevnet(TeVNetModel<S>& model, const std::vector<Tensor<S>>& images,
                    const TevTrainConfig& cfg,
                    const std::function<void(int epoch, double loss)>& on_epoch = {}) {
  if (images.empty()) throw std::invalid_argument("train_tevnet: no images");
  auto refs = model.params();
  auto params = nn::param_tensors(refs);
  AdamWConfig<S> ocfg;
  ocfg.lr = static_cast<S>(cfg.lr);
  ocfg.weight_decay = static_cast<S>(cfg.weight_decay);
  AdamW<S> opt(ocfg);
  Rng rng(cfg.seed, 0x7e57);
  const std::int64_t n = static_cast<std::int64_t>(images.size());
  double epoch_loss = 0.0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    auto erng = rng.fork(static_cast<std::uint64_t>(epoch));
    std::vector<std::int64_t> perm(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) perm[static_cast<std::size_t>(i)] = i;
    for (std::int64_t i = n - 1; i > 0; --i) {
      std::swap(perm[static_cast<std::size_t>(i)],
                perm[static_cast<std::size_t>(erng.next_int(0, i))]);
    }
    double acc = 0.0;
    std::int64_t batches = 0;
    for (std::int64_t start = 0; start < n; start += cfg.batch) {
      const std::int64_t stop = std::min(n, start + cfg.batch);
      std::vector<Tensor<S>> items;
      items.reserve(static_cast<std::size_t>(stop - start));
      for (std::int64_t i = start; i < stop; ++i) {
        items.push_back(images[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])]);
      }
      auto batch = stack_batch(items);
      for (auto& p : params) p.zero_grad();
      auto loss = selfsup_loss(model, batch);
      backward(loss);
      opt.step(params);
      acc += static_cast<double>(loss.item());
      ++batches;
    }
    epoch_loss = acc / static_cast<double>(batches);
    if (on_epoch) on_epoch(epoch, epoch_loss);
  }
  return epoch_loss;
}

// Mean reconstruction MSE in [0,1] space over a held-out set, no training.
template <typename S>
double eval_tevnet(const TeVNetModel<S>& model, const std::vector<Tensor<S>>& images) {
  if (images.empty()) throw std::invalid_argument("eval_tevnet: no images");
  NoGradGuard off;
  double acc = 0.0;
  for (const auto& img : images) {
    auto batch = stack_batch<S>({img});
    acc += static_cast<double>(selfsup_loss(model, batch).item());
  }
  return acc / static_cast<double>(images.size());
}

}  // namespace pid::tev
