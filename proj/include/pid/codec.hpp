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

// Pixel <-> latent codec for the denoising model. The identity codec is a
// pass-through (factor 1); the learned codec is a small convolutional
// autoencoder with spatial reduction factor 1, 2, or 4.

namespace pid::diffusion {

enum class CodecKind { Identity, Learned };

template <typename S>
class LatentCodec {
public:
  static LatentCodec identity() {
    LatentCodec c;
    c.kind_ = CodecKind::Identity;
    c.factor_ = 1;
    c.latent_channels_ = 1;
    return c;
  }

  static LatentCodec learned(int factor, std::int64_t latent_channels, std::int64_t base,
                             std::uint64_t seed) {
    if (factor != 1 && factor != 2 && factor != 4) {
      throw std::invalid_argument("codec: reduction factor must be 1, 2, or 4, got " +
                                  std::to_string(factor));
    }
    if (latent_channels < 1 || base < 1) {
      throw std::invalid_argument("codec: latent_channels and base must be >= 1");
    }
    LatentCodec c;
    c.kind_ = CodecKind::Learned;
    c.factor_ = factor;
    c.latent_channels_ = latent_channels;
    c.base_ = base;
    Rng rng(seed);
    using C = nn::Conv2dLayer<S>;
    const std::int64_t b = base;
    c.enc_in_ = C::make(1, b, 3, 1, Padding::Same, rng);
    if (factor >= 2) c.enc_d1_ = C::make(b, 2 * b, 3, 2, Padding::Same, rng);
    if (factor == 4) c.enc_d2_ = C::make(2 * b, 4 * b, 3, 2, Padding::Same, rng);
    const std::int64_t top = b * factor;
    c.enc_out_ = C::make(top, latent_channels, 3, 1, Padding::Same, rng);
    c.dec_in_ = C::make(latent_channels, top, 3, 1, Padding::Same, rng);
    if (factor == 4) c.dec_u2_ = C::make(4 * b, 2 * b, 3, 1, Padding::Same, rng);
    if (factor >= 2) c.dec_u1_ = C::make(2 * b, b, 3, 1, Padding::Same, rng);
    c.dec_out_ = C::make(b, 1, 3, 1, Padding::Same, rng);
    return c;
  }

  CodecKind kind() const { return kind_; }
  int factor() const { return factor_; }
  std::int64_t latent_channels() const { return latent_channels_; }
  bool trainable() const { return kind_ == CodecKind::Learned; }

  // [B,1,H,W] -> [B,latent,H/f,W/f]
  Tensor<S> encode(const Tensor<S>& x) const {
    if (kind_ == CodecKind::Identity) return x;
    auto h = silu(enc_in_(x));
    if (factor_ >= 2) h = silu(enc_d1_(h));
    if (factor_ == 4) h = silu(enc_d2_(h));
    return enc_out_(h);
  }

  // [B,latent,H/f,W/f] -> [B,1,H,W]
  Tensor<S> decode(const Tensor<S>& z) const {
    if (kind_ == CodecKind::Identity) return z;
    auto h = silu(dec_in_(z));
    if (factor_ == 4) h = silu(dec_u2_(upsample_nearest2x(h)));
    if (factor_ >= 2) h = silu(dec_u1_(upsample_nearest2x(h)));
    return dec_out_(h);
  }

  std::vector<nn::ParamRef<S>> params() const {
    std::vector<nn::ParamRef<S>> refs;
    if (kind_ == CodecKind::Identity) return refs;
    enc_in_.params("codec/enc_in", refs);
    if (factor_ >= 2) enc_d1_.params("codec/enc_d1", refs);
    if (factor_ == 4) enc_d2_.params("codec/enc_d2", refs);
    enc_out_.params("codec/enc_out", refs);
    dec_in_.params("codec/dec_in", refs);
    if (factor_ == 4) dec_u2_.params("codec/dec_u2", refs);
    if (factor_ >= 2) dec_u1_.params("codec/dec_u1", refs);
    dec_out_.params("codec/dec_out", refs);
    return refs;
  }

  void freeze() {
    for (auto& r : params()) r.tensor.set_requires_grad(false);
  }

  // Encoder-side profile; input spatial extents are of the pixel image.
  std::vector<nn::MacsItem> macs_profile_encode(std::int64_t h, std::int64_t w) const {
    std::vector<nn::MacsItem> out;
    if (kind_ == CodecKind::Identity) return out;
    enc_in_.macs("codec/enc_in", h, w, out);
    if (factor_ >= 2) enc_d1_.macs("codec/enc_d1", h, w, out);
    if (factor_ == 4) enc_d2_.macs("codec/enc_d2", h / 2, w / 2, out);
    enc_out_.macs("codec/enc_out", h / factor_, w / factor_, out);
    return out;
  }

  std::vector<nn::MacsItem> macs_profile_decode(std::int64_t h, std::int64_t w) const {
    std::vector<nn::MacsItem> out;
    if (kind_ == CodecKind::Identity) return out;
    const std::int64_t lh = h / factor_, lw = w / factor_;
    dec_in_.macs("codec/dec_in", lh, lw, out);
    if (factor_ == 4) dec_u2_.macs("codec/dec_u2", lh * 2, lw * 2, out);
    if (factor_ >= 2) dec_u1_.macs("codec/dec_u1", h, w, out);
    dec_out_.macs("codec/dec_out", h, w, out);
    return out;
  }

  void save(const std::string& path) const {
    if (kind_ == CodecKind::Identity) {
      throw std::invalid_argument("codec: the identity codec has no state to save");
    }
    NamedTensors<S> entries;
    entries.emplace_back("meta/format", Tensor<S>::scalar(S(1)));
    entries.emplace_back("meta/factor", Tensor<S>::scalar(static_cast<S>(factor_)));
    entries.emplace_back("meta/latent", Tensor<S>::scalar(static_cast<S>(latent_channels_)));
    entries.emplace_back("meta/base", Tensor<S>::scalar(static_cast<S>(base_)));
    auto refs = params();
    nn::export_params(refs, entries);
    save_checkpoint(path, entries);
  }

  static LatentCodec load(const std::string& path) {
    auto entries = load_checkpoint<S>(path);
    const int factor = static_cast<int>(checkpoint_get(entries, "meta/factor").item());
    const auto latent = static_cast<std::int64_t>(checkpoint_get(entries, "meta/latent").item());
    const auto base = static_cast<std::int64_t>(checkpoint_get(entries, "meta/base").item());
    auto c = learned(factor, latent, base, 0);
    auto refs = c.params();
    nn::import_params(refs, entries);
    return c;
  }

private:
  CodecKind kind_ = CodecKind::Identity;
  int factor_ = 1;
  std::int64_t latent_channels_ = 1;
  std::int64_t base_ = 16;
  nn::Conv2dLayer<S> enc_in_, enc_d1_, enc_d2_, enc_out_;
  nn::Conv2dLayer<S> dec_in_, dec_u2_, dec_u1_, dec_out_;
};

struct CodecTrainConfig {
  int epochs = 100;
  std::int64_t batch = 16;
  double lr = 1e-3;
  std::uint64_t seed = 0;
};

// Plain reconstruction training (MSE in [-1,1] image space). Each image is a
// [1,H,W] tensor; batches are stacked along a new leading axis. Returns the
// final epoch's mean loss.
template <typename S>
double codec_train(LatentCodec<S>& codec, const std::vector<Tensor<S>>& images,
                   const CodecTrainConfig& cfg,
                   const std::function<void(int epoch, double loss)>& on_epoch = {}) {
  if (!codec.trainable()) {
    throw std::invalid_argument("codec_train: the identity codec is not trainable");
  }
  if (images.empty()) throw std::invalid_argument("codec_train: no images");
  auto refs = codec.params();
  auto params = nn::param_tensors(refs);
  AdamWConfig<S> ocfg;
  ocfg.lr = static_cast<S>(cfg.lr);
  AdamW<S> opt(ocfg);
  Rng rng(cfg.seed, 0xc0dec);
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
      for (std::int64_t i = start; i < stop; ++i) {
        items.push_back(images[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])]);
      }
      auto batch = stack_batch(items);
      for (auto& p : params) p.zero_grad();
      auto loss = mse(codec.decode(codec.encode(batch)), batch);
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

}  // namespace pid::diffusion
