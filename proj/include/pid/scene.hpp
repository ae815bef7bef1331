#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "pid/ops.hpp"
#include "pid/radiometry.hpp"
#include "pid/rng.hpp"
#include "pid/tensor.hpp"
#include "pid/tev.hpp"

// Synthetic infrared/visible scene generation. Scenes are flat primitives
// (rectangles, disks) with physical temperature and emissivity over a
// background with a diagonal temperature ramp. Infrared radiance follows
// the two-term surface model: observed = e * thermal + (1 - e) * environment,
// where the environment term is the mean emission of the pixel's grid cell.
// Because the environment is built on the same grid the decomposition
// network uses, every generated pair carries an exact component oracle.

namespace pid::data {

struct ScenePrimitive {
  enum class Kind { Rectangle, Disk };
  Kind kind = Kind::Rectangle;
  // Center and half-extents in pixels; the primitive must lie inside the canvas.
  double cy = 0.0, cx = 0.0, ry = 1.0, rx = 1.0;
  double temperature_k = 300.0;  // [250, 400]
  double emissivity = 0.9;       // [0.05, 1]
  double albedo = 0.5;           // [0, 1]
};

struct SyntheticSceneSpec {
  std::int64_t height = 64;
  std::int64_t width = 64;
  double background_temperature_k = 285.0;
  double background_gradient_k = 12.0;  // peak-to-peak diagonal ramp
  double background_emissivity = 0.92;
  double background_albedo = 0.35;
  // Optional attenuation: observed = tau * surface + (1 - tau) * atmosphere.
  double tau_atmosphere = 1.0;
  double atmosphere_temperature_k = 290.0;
  int grid_cells = 4;  // environment grid; must match the decomposition's cell count
  radiometry::SpectralBand band = radiometry::SpectralBand::lwir();
  std::uint64_t seed = 0;
  std::vector<ScenePrimitive> primitives;
};

inline void validate_spec(const SyntheticSceneSpec& spec) {
  if (spec.height < 8 || spec.width < 8 || spec.height % 4 != 0 || spec.width % 4 != 0) {
    throw std::invalid_argument("scene: canvas must be at least 8x8 with sides divisible by 4, got " +
                                std::to_string(spec.height) + "x" + std::to_string(spec.width));
  }
  grid_layout(spec.grid_cells);  // validates the cell count
  spec.band.validate();
  const double half = spec.background_gradient_k * 0.5;
  if (spec.background_temperature_k - half < 250.0 || spec.background_temperature_k + half > 400.0) {
    throw std::invalid_argument("scene: background temperature ramp must stay within [250, 400] K");
  }
  if (spec.background_emissivity < 0.05 || spec.background_emissivity > 1.0) {
    throw std::invalid_argument("scene: background emissivity must be in [0.05, 1]");
  }
  if (spec.background_albedo < 0.0 || spec.background_albedo > 1.0) {
    throw std::invalid_argument("scene: background albedo must be in [0, 1]");
  }
  if (!(spec.tau_atmosphere > 0.0) || spec.tau_atmosphere > 1.0) {
    throw std::invalid_argument("scene: tau must be in (0, 1]");
  }
  if (!(spec.atmosphere_temperature_k > 0.0)) {
    throw std::invalid_argument("scene: atmosphere temperature must be positive");
  }
  for (std::size_t i = 0; i < spec.primitives.size(); ++i) {
    const auto& p = spec.primitives[i];
    const std::string tag = "scene: primitive " + std::to_string(i);
    if (!(p.ry > 0.0) || !(p.rx > 0.0)) throw std::invalid_argument(tag + ": extents must be positive");
    if (p.cy - p.ry < 0.0 || p.cy + p.ry > static_cast<double>(spec.height - 1) ||
        p.cx - p.rx < 0.0 || p.cx + p.rx > static_cast<double>(spec.width - 1)) {
      throw std::invalid_argument(tag + ": must lie inside the canvas");
    }
    if (p.temperature_k < 250.0 || p.temperature_k > 400.0) {
      throw std::invalid_argument(tag + ": temperature must be in [250, 400] K");
    }
    if (p.emissivity < 0.05 || p.emissivity > 1.0) {
      throw std::invalid_argument(tag + ": emissivity must be in [0.05, 1]");
    }
    if (p.albedo < 0.0 || p.albedo > 1.0) {
      throw std::invalid_argument(tag + ": albedo must be in [0, 1]");
    }
  }
}

// Affine range metadata of the [-1, 1] normalization (raw radiance units).
struct NormMeta {
  double lo = 0.0;
  double hi = 1.0;
};

// Min-max map to [-1, 1]; the minimum pixel lands on -1 and the maximum on +1.
template <typename S>
std::pair<Tensor<S>, NormMeta> normalize(const Tensor<S>& raw) {
  const auto& d = raw.data();
  if (d.empty()) throw std::invalid_argument("normalize: empty image");
  double lo = static_cast<double>(d[0]), hi = static_cast<double>(d[0]);
  for (const S v : d) {
    lo = std::min(lo, static_cast<double>(v));
    hi = std::max(hi, static_cast<double>(v));
  }
  if (!(hi > lo)) {
    throw std::invalid_argument("normalize: constant image has no range to map");
  }
  const double inv = 1.0 / (hi - lo);
  std::vector<S> out(d.size());
  for (std::size_t i = 0; i < d.size(); ++i) {
    out[i] = static_cast<S>(2.0 * ((static_cast<double>(d[i]) - lo) * inv) - 1.0);
  }
  return {Tensor<S>::from_data(raw.shape(), std::move(out)), NormMeta{lo, hi}};
}

template <typename S>
Tensor<S> denormalize(const Tensor<S>& norm, const NormMeta& meta) {
  if (!(meta.hi > meta.lo)) throw std::invalid_argument("denormalize: invalid range");
  const auto& d = norm.data();
  std::vector<S> out(d.size());
  for (std::size_t i = 0; i < d.size(); ++i) {
    out[i] = static_cast<S>((static_cast<double>(d[i]) + 1.0) * 0.5 * (meta.hi - meta.lo) + meta.lo);
  }
  return Tensor<S>::from_data(norm.shape(), std::move(out));
}

template <typename S>
struct ScenePair {
  Tensor<S> infrared;  // [1, H, W] in [-1, 1]
  Tensor<S> visible;   // [3, H, W] in [-1, 1]
  NormMeta norm;       // radiance range behind the infrared normalization
  std::uint64_t seed = 0;
  bool has_oracle = false;
  tev::Components<S> oracle;  // batch-1 component maps; empty unless synthetic
};

// Mixing map whose contraction against the image's own grid-cell means
// reproduces `phi01` at every pixel: v_a = phi01 * s_a / sum_b s_b^2. The
// denominator is positive whenever the image is not identically zero, so the
// construction never degenerates. Both the generator and augmentation build
// the map this way, keeping the oracle exact under crops and flips.
template <typename S>
Tensor<S> rebuild_mixing_map(const Tensor<S>& ir_norm, const Tensor<S>& phi01, int m) {
  NoGradGuard off;
  if (ir_norm.rank() != 3 || ir_norm.dim(0) != 1) {
    throw std::invalid_argument("rebuild_mixing_map: expected a [1,H,W] infrared image, got " +
                                shape_str(ir_norm.shape()));
  }
  const std::int64_t h = ir_norm.dim(1), w = ir_norm.dim(2);
  auto unit = tev::to_unit(Tensor<S>::from_data({1, 1, h, w}, ir_norm.data()));
  auto cell_means = grid_cell_means(unit, m);  // [1, m]
  double den = 0.0;
  for (const S v : cell_means.data()) den += static_cast<double>(v) * static_cast<double>(v);
  if (!(den > 0.0)) {
    throw std::invalid_argument("rebuild_mixing_map: image grid means are all zero");
  }
  const auto& phi = phi01.data();
  const std::int64_t hw = h * w;
  std::vector<S> v(static_cast<std::size_t>(m) * static_cast<std::size_t>(hw));
  for (int a = 0; a < m; ++a) {
    const double coef = static_cast<double>(cell_means.data()[static_cast<std::size_t>(a)]) / den;
    for (std::int64_t p = 0; p < hw; ++p) {
      v[static_cast<std::size_t>(a * hw + p)] =
          static_cast<S>(static_cast<double>(phi[static_cast<std::size_t>(p)]) * coef);
    }
  }
  return Tensor<S>::from_data({1, m, h, w}, std::move(v));
}

namespace detail {

inline double clamp01(double v) { return std::min(1.0, std::max(0.0, v)); }

// 3x3 Sobel gradient magnitude with replicated borders, scaled to max 1.
inline std::vector<double> sobel_edge_map(const std::vector<double>& img, std::int64_t h,
                                          std::int64_t w) {
  std::vector<double> mag(static_cast<std::size_t>(h * w), 0.0);
  auto at = [&](std::int64_t y, std::int64_t x) {
    y = std::clamp<std::int64_t>(y, 0, h - 1);
    x = std::clamp<std::int64_t>(x, 0, w - 1);
    return img[static_cast<std::size_t>(y * w + x)];
  };
  double peak = 0.0;
  for (std::int64_t y = 0; y < h; ++y) {
    for (std::int64_t x = 0; x < w; ++x) {
      const double gx = (at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1)) -
                        (at(y - 1, x - 1) + 2.0 * at(y, x - 1) + at(y + 1, x - 1));
      const double gy = (at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1)) -
                        (at(y - 1, x - 1) + 2.0 * at(y - 1, x) + at(y - 1, x + 1));
      const double g = std::sqrt(gx * gx + gy * gy);
      mag[static_cast<std::size_t>(y * w + x)] = g;
      peak = std::max(peak, g);
    }
  }
  if (peak > 0.0) {
    for (auto& v : mag) v /= peak;
  }
  return mag;
}

}  // namespace detail

template <typename S>
ScenePair<S> generate_scene(const SyntheticSceneSpec& spec) {
  validate_spec(spec);
  const std::int64_t h = spec.height, w = spec.width, n = h * w;

  // Paint physical fields: temperature, emissivity, albedo.
  std::vector<double> temp(static_cast<std::size_t>(n));
  std::vector<double> emis(static_cast<std::size_t>(n), spec.background_emissivity);
  std::vector<double> alb(static_cast<std::size_t>(n), spec.background_albedo);
  const double span = static_cast<double>(h - 1 + w - 1);
  for (std::int64_t y = 0; y < h; ++y) {
    for (std::int64_t x = 0; x < w; ++x) {
      const double ramp = static_cast<double>(y + x) / span - 0.5;  // diagonal, [-0.5, 0.5]
      temp[static_cast<std::size_t>(y * w + x)] =
          spec.background_temperature_k + spec.background_gradient_k * ramp;
    }
  }
  for (const auto& p : spec.primitives) {
    const std::int64_t y0 = static_cast<std::int64_t>(std::floor(p.cy - p.ry));
    const std::int64_t y1 = static_cast<std::int64_t>(std::ceil(p.cy + p.ry));
    const std::int64_t x0 = static_cast<std::int64_t>(std::floor(p.cx - p.rx));
    const std::int64_t x1 = static_cast<std::int64_t>(std::ceil(p.cx + p.rx));
    for (std::int64_t y = std::max<std::int64_t>(y0, 0); y <= std::min(y1, h - 1); ++y) {
      for (std::int64_t x = std::max<std::int64_t>(x0, 0); x <= std::min(x1, w - 1); ++x) {
        const double dy = static_cast<double>(y) - p.cy;
        const double dx = static_cast<double>(x) - p.cx;
        const bool inside = p.kind == ScenePrimitive::Kind::Rectangle
                                ? (std::abs(dy) <= p.ry && std::abs(dx) <= p.rx)
                                : ((dy / p.ry) * (dy / p.ry) + (dx / p.rx) * (dx / p.rx) <= 1.0);
        if (inside) {
          const std::size_t i = static_cast<std::size_t>(y * w + x);
          temp[i] = p.temperature_k;
          emis[i] = p.emissivity;
          alb[i] = p.albedo;
        }
      }
    }
  }

  // Band radiance per pixel; the ramp yields few distinct temperatures, so
  // memoizing the quadrature keeps generation cheap.
  std::unordered_map<double, double> cache;
  auto radiance = [&](double tk) {
    auto it = cache.find(tk);
    if (it != cache.end()) return it->second;
    const double v = radiometry::band_exitance(tk, spec.band);
    cache.emplace(tk, v);
    return v;
  };
  std::vector<double> rad(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) rad[static_cast<std::size_t>(i)] = radiance(temp[static_cast<std::size_t>(i)]);

  // Environment: per grid cell, mean of the emission map e * R.
  const auto [gh, gw] = grid_layout(spec.grid_cells);
  if (h % gh != 0 || w % gw != 0) {
    throw std::invalid_argument("scene: canvas not divisible by the environment grid");
  }
  const std::int64_t ch = h / gh, cw = w / gw;
  std::vector<double> phi_env(static_cast<std::size_t>(n));
  for (std::int64_t gy = 0; gy < gh; ++gy) {
    for (std::int64_t gx = 0; gx < gw; ++gx) {
      double acc = 0.0;
      for (std::int64_t y = gy * ch; y < (gy + 1) * ch; ++y)
        for (std::int64_t x = gx * cw; x < (gx + 1) * cw; ++x) {
          const std::size_t i = static_cast<std::size_t>(y * w + x);
          acc += emis[i] * rad[i];
        }
      const double mean = acc / static_cast<double>(ch * cw);
      for (std::int64_t y = gy * ch; y < (gy + 1) * ch; ++y)
        for (std::int64_t x = gx * cw; x < (gx + 1) * cw; ++x) {
          phi_env[static_cast<std::size_t>(y * w + x)] = mean;
        }
    }
  }

  // Observed radiance, organised so the two-term identity
  // observed = e * thermal + (1 - e) * environment holds exactly.
  const double tau = spec.tau_atmosphere;
  const double r_atm = tau < 1.0 ? radiance(spec.atmosphere_temperature_k) : 0.0;
  std::vector<double> tterm(static_cast<std::size_t>(n)), pterm(static_cast<std::size_t>(n)),
      sobs(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) {
    const std::size_t k = static_cast<std::size_t>(i);
    tterm[k] = tau * rad[k] + (1.0 - tau) * r_atm;
    pterm[k] = tau * phi_env[k] + (1.0 - tau) * r_atm;
    sobs[k] = emis[k] * tterm[k] + (1.0 - emis[k]) * pterm[k];
  }

  auto raw = Tensor<double>::from_data({1, h, w}, sobs);
  auto [ir_d, meta] = normalize(raw);

  ScenePair<S> pair;
  pair.seed = spec.seed;
  pair.norm = meta;
  {
    std::vector<S> ir(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) ir[static_cast<std::size_t>(i)] = static_cast<S>(ir_d.data()[static_cast<std::size_t>(i)]);
    pair.infrared = Tensor<S>::from_data({1, h, w}, std::move(ir));
  }

  // Component oracle in [0, 1] image space: the same affine map sends both
  // terms through because the emissivity weights sum to one.
  const double inv_range = 1.0 / (meta.hi - meta.lo);
  std::vector<S> e_o(static_cast<std::size_t>(n)), t_o(static_cast<std::size_t>(n)),
      p_o(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) {
    const std::size_t k = static_cast<std::size_t>(i);
    e_o[k] = static_cast<S>(emis[k]);
    t_o[k] = static_cast<S>((tterm[k] - meta.lo) * inv_range);
    p_o[k] = static_cast<S>((pterm[k] - meta.lo) * inv_range);
  }
  pair.has_oracle = true;
  pair.oracle.kind = tev::HeadKind::Mixing;
  pair.oracle.m = spec.grid_cells;
  pair.oracle.e = Tensor<S>::from_data({1, 1, h, w}, std::move(e_o));
  pair.oracle.t = Tensor<S>::from_data({1, 1, h, w}, std::move(t_o));
  pair.oracle.phi = Tensor<S>::from_data({1, 1, h, w}, std::move(p_o));
  pair.oracle.v = rebuild_mixing_map(pair.infrared, pair.oracle.phi, spec.grid_cells);

  // Visible rendering: tinted albedo darkened along Sobel edges. Albedo is
  // independent of temperature, so hot-but-dark and cold-but-bright surfaces
  // both occur and the visible image underdetermines the infrared one.
  const auto edges = detail::sobel_edge_map(alb, h, w);
  constexpr double kTint[3] = {1.0, 0.94, 0.85};
  constexpr double kEdgeShade = 0.5;
  std::vector<S> vis(static_cast<std::size_t>(3 * n));
  for (int c = 0; c < 3; ++c) {
    for (std::int64_t i = 0; i < n; ++i) {
      const std::size_t k = static_cast<std::size_t>(i);
      const double v01 = detail::clamp01(alb[k] * kTint[c] - kEdgeShade * edges[k]);
      vis[static_cast<std::size_t>(c * n + i)] = static_cast<S>(2.0 * v01 - 1.0);
    }
  }
  pair.visible = Tensor<S>::from_data({3, h, w}, std::move(vis));
  return pair;
}

namespace detail {

template <typename S>
Tensor<S> crop_flip(const Tensor<S>& x, std::int64_t oy, std::int64_t ox, std::int64_t ch,
                    std::int64_t cw, bool hflip) {
  const std::int64_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  std::vector<S> out(static_cast<std::size_t>(c * ch * cw));
  for (std::int64_t ci = 0; ci < c; ++ci)
    for (std::int64_t y = 0; y < ch; ++y)
      for (std::int64_t x2 = 0; x2 < cw; ++x2) {
        const std::int64_t sx = hflip ? ox + (cw - 1 - x2) : ox + x2;
        out[static_cast<std::size_t>((ci * ch + y) * cw + x2)] =
            x.data()[static_cast<std::size_t>((ci * h + (oy + y)) * w + sx)];
      }
  return Tensor<S>::from_data({c, ch, cw}, std::move(out));
}

template <typename S>
Tensor<S> crop_flip4(const Tensor<S>& x, std::int64_t oy, std::int64_t ox, std::int64_t ch,
                     std::int64_t cw, bool hflip) {
  Shape s(x.shape().begin() + 1, x.shape().end());
  auto flat = crop_flip(Tensor<S>::from_data(s, x.data()), oy, ox, ch, cw, hflip);
  return Tensor<S>::from_data({1, x.dim(1), ch, cw}, flat.data());
}

}  // namespace detail

// Deterministic crop + optional horizontal flip applied identically to the
// infrared, visible, and oracle maps. The mixing map is rebuilt against the
// cropped image's grid means so the oracle stays exact.
template <typename S>
ScenePair<S> apply_augment(const ScenePair<S>& pair, std::int64_t oy, std::int64_t ox,
                           std::int64_t crop_h, std::int64_t crop_w, bool hflip) {
  const std::int64_t h = pair.infrared.dim(1), w = pair.infrared.dim(2);
  if (crop_h < 1 || crop_w < 1 || crop_h > h || crop_w > w) {
    throw std::invalid_argument("augment: crop " + std::to_string(crop_h) + "x" +
                                std::to_string(crop_w) + " exceeds image " + std::to_string(h) +
                                "x" + std::to_string(w));
  }
  if (oy < 0 || ox < 0 || oy + crop_h > h || ox + crop_w > w) {
    throw std::invalid_argument("augment: crop offset out of bounds");
  }
  if (pair.has_oracle) {
    const auto [gh, gw] = grid_layout(pair.oracle.m);
    if (crop_h % gh != 0 || crop_w % gw != 0) {
      throw std::invalid_argument("augment: crop size must stay divisible by the environment grid");
    }
  }
  ScenePair<S> out;
  out.norm = pair.norm;
  out.seed = pair.seed;
  out.infrared = detail::crop_flip(pair.infrared, oy, ox, crop_h, crop_w, hflip);
  out.visible = detail::crop_flip(pair.visible, oy, ox, crop_h, crop_w, hflip);
  out.has_oracle = pair.has_oracle;
  if (pair.has_oracle) {
    out.oracle.kind = pair.oracle.kind;
    out.oracle.m = pair.oracle.m;
    out.oracle.e = detail::crop_flip4(pair.oracle.e, oy, ox, crop_h, crop_w, hflip);
    out.oracle.t = detail::crop_flip4(pair.oracle.t, oy, ox, crop_h, crop_w, hflip);
    out.oracle.phi = detail::crop_flip4(pair.oracle.phi, oy, ox, crop_h, crop_w, hflip);
    out.oracle.v = rebuild_mixing_map(out.infrared, out.oracle.phi, out.oracle.m);
  }
  return out;
}

// Random crop + flip; offsets and the flip coin are drawn from a fork of
// `rng`, so the same generator state yields the same augmentation.
template <typename S>
ScenePair<S> augment(const ScenePair<S>& pair, const Rng& rng, std::int64_t crop_h,
                     std::int64_t crop_w) {
  const std::int64_t h = pair.infrared.dim(1), w = pair.infrared.dim(2);
  if (crop_h < 1 || crop_w < 1 || crop_h > h || crop_w > w) {
    throw std::invalid_argument("augment: crop " + std::to_string(crop_h) + "x" +
                                std::to_string(crop_w) + " exceeds image " + std::to_string(h) +
                                "x" + std::to_string(w));
  }
  Rng r = rng.fork(0xa06);
  const std::int64_t oy = r.next_int(0, h - crop_h);
  const std::int64_t ox = r.next_int(0, w - crop_w);
  const bool flip = r.next_int(0, 1) == 1;
  return apply_augment(pair, oy, ox, crop_h, crop_w, flip);
}

// Random scene layout: a handful of primitives with independent temperature,
// emissivity, and albedo over a ramped background. Fully determined by `seed`.
inline SyntheticSceneSpec sample_scene_spec(std::int64_t height, std::int64_t width,
                                            int grid_cells, std::uint64_t seed) {
  if (height < 16 || width < 16) {
    throw std::invalid_argument("sample_scene_spec: canvas must be at least 16x16");
  }
  SyntheticSceneSpec spec;
  spec.height = height;
  spec.width = width;
  spec.grid_cells = grid_cells;
  spec.seed = seed;
  Rng rng(seed, 0x5ce9eull);
  spec.background_temperature_k = rng.next_uniform(276.0, 294.0);
  spec.background_gradient_k = rng.next_uniform(6.0, 16.0);
  spec.background_emissivity = rng.next_uniform(0.85, 0.96);
  spec.background_albedo = rng.next_uniform(0.2, 0.5);
  const std::int64_t count = rng.next_int(2, 5);
  for (std::int64_t k = 0; k < count; ++k) {
    ScenePrimitive p;
    p.kind = rng.next_int(0, 1) == 1 ? ScenePrimitive::Kind::Disk
                                     : ScenePrimitive::Kind::Rectangle;
    p.ry = rng.next_uniform(2.5, static_cast<double>(height) / 4.0);
    p.rx = rng.next_uniform(2.5, static_cast<double>(width) / 4.0);
    p.cy = rng.next_uniform(p.ry, static_cast<double>(height - 1) - p.ry);
    p.cx = rng.next_uniform(p.rx, static_cast<double>(width - 1) - p.rx);
    p.temperature_k = rng.next_uniform(255.0, 395.0);
    p.emissivity = rng.next_uniform(0.05, 1.0);
    p.albedo = rng.next_uniform(0.05, 0.95);
    spec.primitives.push_back(p);
  }
  return spec;
}

// Generate `count` independent pairs; each pair's seed is derived from
// (base_seed, index) and recorded so it can be regenerated in isolation.
template <typename S>
std::vector<ScenePair<S>> generate_dataset(std::int64_t count, std::int64_t height,
                                           std::int64_t width, int grid_cells,
                                           std::uint64_t base_seed) {
  if (count < 1) throw std::invalid_argument("generate_dataset: count must be positive");
  std::vector<ScenePair<S>> out;
  out.reserve(static_cast<std::size_t>(count));
  const Rng root(base_seed, 0xda7aull);
  for (std::int64_t i = 0; i < count; ++i) {
    const std::uint64_t pair_seed = root.fork(static_cast<std::uint64_t>(i)).next_u64();
    out.push_back(generate_scene<S>(sample_scene_spec(height, width, grid_cells, pair_seed)));
  }
  return out;
}

}  // namespace pid::data
