#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <stdexcept>
#include <string>
#include <vector>

#include "pid/nn.hpp"
#include "pid/tensor.hpp"

// Image-quality metrics (PSNR, SSIM), the 1-D earth mover's distance used to
// compare per-image loss distributions across modalities, and the affine
// sampling-cost model total(s) = conditioner + s * denoiser_step + decoder.

namespace pid::metrics {

// Flag value reported when two images match exactly (zero MSE); finite so
// aggregates stay well-defined. Nonzero MSE always goes through the formula,
// keeping PSNR strictly decreasing in MSE.
constexpr double kPsnrCap = 99.0;

struct PsnrResult {
  double db = 0.0;
  bool capped = false;  // true iff the images were bitwise-equal (MSE == 0)
};

template <typename S>
double mse_between(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument("metrics: shape mismatch " + shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
  }
  if (a.data().empty()) throw std::invalid_argument("metrics: empty image");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.data().size(); ++i) {
    const double d = static_cast<double>(a.data()[i]) - static_cast<double>(b.data()[i]);
    acc += d * d;
  }
  return acc / static_cast<double>(a.data().size());
}

template <typename S>
PsnrResult psnr(const Tensor<S>& a, const Tensor<S>& b, double data_range) {
  if (!(data_range > 0.0)) throw std::invalid_argument("psnr: data range must be positive");
  const double m = mse_between(a, b);
  if (m == 0.0) return {kPsnrCap, true};
  return {10.0 * std::log10(data_range * data_range / m), false};
}

namespace detail {

// 11x11 Gaussian window, sigma 1.5, normalized to unit sum.
inline const std::vector<double>& ssim_window() {
  static const std::vector<double> w = [] {
    constexpr int k = 11;
    constexpr double sigma = 1.5;
    std::vector<double> out(k * k);
    double sum = 0.0;
    for (int i = 0; i < k; ++i)
      for (int j = 0; j < k; ++j) {
        const double dy = i - (k - 1) / 2.0, dx = j - (k - 1) / 2.0;
        out[static_cast<std::size_t>(i * k + j)] =
            std::exp(-(dy * dy + dx * dx) / (2.0 * sigma * sigma));
        sum += out[static_cast<std::size_t>(i * k + j)];
      }
    for (auto& v : out) v /= sum;
    return out;
  }();
  return w;
}

// Mean local SSIM of one [H, W] plane over valid (fully interior) windows.
inline double ssim_plane(const double* x, const double* y, std::int64_t h, std::int64_t w,
                         double data_range) {
  constexpr int k = 11;
  const auto& win = ssim_window();
  const double c1 = (0.01 * data_range) * (0.01 * data_range);
  const double c2 = (0.03 * data_range) * (0.03 * data_range);
  double acc = 0.0;
  std::int64_t count = 0;
  for (std::int64_t oy = 0; oy + k <= h; ++oy) {
    for (std::int64_t ox = 0; ox + k <= w; ++ox) {
      double mx = 0.0, my = 0.0, mxx = 0.0, myy = 0.0, mxy = 0.0;
      for (int i = 0; i < k; ++i)
        for (int j = 0; j < k; ++j) {
          const double wv = win[static_cast<std::size_t>(i * k + j)];
          const double xv = x[(oy + i) * w + (ox + j)];
          const double yv = y[(oy + i) * w + (ox + j)];
          mx += wv * xv;
          my += wv * yv;
          mxx += wv * xv * xv;
          myy += wv * yv * yv;
          mxy += wv * xv * yv;
        }
      const double vx = mxx - mx * mx;
      const double vy = myy - my * my;
      const double cxy = mxy - mx * my;
      acc += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) /
             ((mx * mx + my * my + c1) * (vx + vy + c2));
      ++count;
    }
  }
  return acc / static_cast<double>(count);
}

}  // namespace detail

// Mean SSIM over all channel planes; images of rank 2 ([H,W]) or 3 ([C,H,W]).
template <typename S>
double ssim(const Tensor<S>& a, const Tensor<S>& b, double data_range) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument("ssim: shape mismatch " + shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
  }
  if (!(data_range > 0.0)) throw std::invalid_argument("ssim: data range must be positive");
  if (a.rank() != 2 && a.rank() != 3) {
    throw std::invalid_argument("ssim: expected [H,W] or [C,H,W], got " + shape_str(a.shape()));
  }
  const std::int64_t c = a.rank() == 3 ? a.dim(0) : 1;
  const std::int64_t h = a.dim(a.rank() - 2), w = a.dim(a.rank() - 1);
  if (h < 11 || w < 11) {
    throw std::invalid_argument("ssim: image " + shape_str(a.shape()) +
                                " is smaller than the 11x11 window");
  }
  std::vector<double> xa(a.data().begin(), a.data().end());
  std::vector<double> xb(b.data().begin(), b.data().end());
  double acc = 0.0;
  for (std::int64_t ci = 0; ci < c; ++ci) {
    acc += detail::ssim_plane(xa.data() + ci * h * w, xb.data() + ci * h * w, h, w, data_range);
  }
  return acc / static_cast<double>(c);
}

// 1-D earth mover's distance between empirical distributions. Equal-size
// samples reduce to the mean absolute difference of the sorted values; the
// general case integrates |F_p - F_q| over the merged support.
inline double emd_1d(std::vector<double> p, std::vector<double> q) {
  if (p.empty() || q.empty()) throw std::invalid_argument("emd_1d: empty sample set");
  std::sort(p.begin(), p.end());
  std::sort(q.begin(), q.end());
  if (p.size() == q.size()) {
    double acc = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) acc += std::abs(p[i] - q[i]);
    return acc / static_cast<double>(p.size());
  }
  // Sweep the merged breakpoints; between consecutive values both CDFs are
  // constant, contributing |F_p - F_q| * segment length.
  const double np = static_cast<double>(p.size()), nq = static_cast<double>(q.size());
  std::size_t ip = 0, iq = 0;
  double dist = 0.0, prev = std::min(p[0], q[0]);
  while (ip < p.size() || iq < q.size()) {
    const double x = ip < p.size() && (iq >= q.size() || p[ip] <= q[iq]) ? p[ip] : q[iq];
    dist += std::abs(static_cast<double>(ip) / np - static_cast<double>(iq) / nq) * (x - prev);
    prev = x;
    while (ip < p.size() && p[ip] == x) ++ip;
    while (iq < q.size() && q[iq] == x) ++iq;
  }
  return dist;
}

// Sampling cost in multiply-accumulate operations: a fixed conditioner pass,
// one denoiser pass per step, and a fixed decoder pass.
struct CostModel {
  double conditioner_macs = 0.0;
  double denoiser_step_macs = 0.0;
  double decoder_macs = 0.0;

  double total(std::int64_t steps) const {
    if (steps < 0) throw std::invalid_argument("cost model: steps must be >= 0");
    return conditioner_macs + static_cast<double>(steps) * denoiser_step_macs + decoder_macs;
  }
};

inline double macs_sum(const std::vector<nn::MacsItem>& items) {
  double acc = 0.0;
  for (const auto& it : items) acc += it.macs;
  return acc;
}

// Per-image PSNR/SSIM plus mean and population standard deviation.
struct MetricReport {
  std::vector<double> psnr_db;
  std::vector<bool> psnr_capped;
  std::vector<double> ssim_value;
  double psnr_mean = 0.0, psnr_std = 0.0;
  double ssim_mean = 0.0, ssim_std = 0.0;
};

namespace detail {

inline void mean_std(const std::vector<double>& v, double& mean, double& sd) {
  mean = 0.0;
  for (const double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  double var = 0.0;
  for (const double x : v) var += (x - mean) * (x - mean);
  sd = std::sqrt(var / static_cast<double>(v.size()));
}

}  // namespace detail

// a, b: [B,C,H,W] batches. PSNR is computed over each whole image; SSIM is
// the mean over its channel planes.
template <typename S>
MetricReport evaluate_pairs(const Tensor<S>& a, const Tensor<S>& b, double data_range) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument("evaluate_pairs: shape mismatch " + shape_str(a.shape()) +
                                " vs " + shape_str(b.shape()));
  }
  if (a.rank() != 4) {
    throw std::invalid_argument("evaluate_pairs: expected [B,C,H,W], got " +
                                shape_str(a.shape()));
  }
  const std::int64_t bsz = a.dim(0), c = a.dim(1), h = a.dim(2), w = a.dim(3);
  if (bsz < 1) throw std::invalid_argument("evaluate_pairs: empty batch");
  MetricReport rep;
  const std::int64_t per = c * h * w;
  for (std::int64_t i = 0; i < bsz; ++i) {
    std::vector<S> xa(a.data().begin() + i * per, a.data().begin() + (i + 1) * per);
    std::vector<S> xb(b.data().begin() + i * per, b.data().begin() + (i + 1) * per);
    auto ta = Tensor<S>::from_data({c, h, w}, std::move(xa));
    auto tb = Tensor<S>::from_data({c, h, w}, std::move(xb));
    const auto pr = psnr(ta, tb, data_range);
    rep.psnr_db.push_back(pr.db);
    rep.psnr_capped.push_back(pr.capped);
    rep.ssim_value.push_back(ssim(ta, tb, data_range));
  }
  detail::mean_std(rep.psnr_db, rep.psnr_mean, rep.psnr_std);
  detail::mean_std(rep.ssim_value, rep.ssim_mean, rep.ssim_std);
  return rep;
}

inline std::string format_report_table(const MetricReport& rep) {
  std::string out = "image    psnr_db    ssim\n";
  char line[96];
  for (std::size_t i = 0; i < rep.psnr_db.size(); ++i) {
    std::snprintf(line, sizeof(line), "%-8zu %8.4f%s  %8.6f\n", i, rep.psnr_db[i],
                  rep.psnr_capped[i] ? "*" : " ", rep.ssim_value[i]);
    out += line;
  }
  std::snprintf(line, sizeof(line), "mean     %8.4f   %8.6f\nstd      %8.4f   %8.6f\n",
                rep.psnr_mean, rep.ssim_mean, rep.psnr_std, rep.ssim_std);
  out += line;
  if (std::any_of(rep.psnr_capped.begin(), rep.psnr_capped.end(), [](bool b) { return b; })) {
    out += "(* exact match, PSNR reported as the 99 dB flag value)\n";
  }
  return out;
}

inline std::string format_report_csv(const MetricReport& rep) {
  std::string out = "image,psnr_db,psnr_capped,ssim\n";
  char line[96];
  for (std::size_t i = 0; i < rep.psnr_db.size(); ++i) {
    std::snprintf(line, sizeof(line), "%zu,%.6f,%d,%.8f\n", i, rep.psnr_db[i],
                  rep.psnr_capped[i] ? 1 : 0, rep.ssim_value[i]);
    out += line;
  }
  std::snprintf(line, sizeof(line), "mean,%.6f,,%.8f\nstd,%.6f,,%.8f\n", rep.psnr_mean,
                rep.ssim_mean, rep.psnr_std, rep.ssim_std);
  out += line;
  return out;
}

}  // namespace pid::metrics
