#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "pid/ops.hpp"
#include "pid/rng.hpp"
#include "pid/serialize.hpp"
#include "pid/tensor.hpp"

namespace pid::nn {

// Holds a handle that shares storage with the owning layer, so optimizer
// updates and checkpoint loads are visible to the model.
template <typename S>
struct ParamRef {
  std::string name;
  Tensor<S> tensor;
};

// Multiply-accumulate profile entry; spatial extents are of the layer output.
struct MacsItem {
  std::string name;
  double macs = 0.0;
};

inline double conv_macs(std::int64_t in_c, std::int64_t out_c, std::int64_t k,
                        std::int64_t out_h, std::int64_t out_w) {
  return static_cast<double>(in_c * out_c * k * k) * static_cast<double>(out_h * out_w);
}

inline double linear_macs(std::int64_t in_f, std::int64_t out_f, std::int64_t batch_positions = 1) {
  return static_cast<double>(in_f * out_f) * static_cast<double>(batch_positions);
}

template <typename S>
struct Conv2dLayer {
  Tensor<S> w, b;
  int stride = 1;
  Padding pad = Padding::Same;

  static Conv2dLayer make(std::int64_t in_c, std::int64_t out_c, std::int64_t k, int stride,
                          Padding pad, Rng& rng) {
    Conv2dLayer l;
    l.stride = stride;
    l.pad = pad;
    const double bound = 1.0 / std::sqrt(static_cast<double>(in_c * k * k));
    std::vector<S> wd(static_cast<std::size_t>(out_c * in_c * k * k));
    rng.fill_uniform(wd, -bound, bound);
    l.w = Tensor<S>::from_data({out_c, in_c, k, k}, std::move(wd), true);
    std::vector<S> bd(static_cast<std::size_t>(out_c));
    rng.fill_uniform(bd, -bound, bound);
    l.b = Tensor<S>::from_data({out_c}, std::move(bd), true);
    return l;
  }

  Tensor<S> operator()(const Tensor<S>& x) const { return conv2d(x, w, b, stride, pad); }

  std::int64_t in_channels() const { return w.dim(1); }
  std::int64_t out_channels() const { return w.dim(0); }
  std::int64_t kernel() const { return w.dim(2); }

  void params(const std::string& prefix, std::vector<ParamRef<S>>& out) const {
    out.push_back({prefix + "/w", w});
    out.push_back({prefix + "/b", b});
  }

  // Output spatial extents for an input of h x w.
  std::pair<std::int64_t, std::int64_t> out_hw(std::int64_t h, std::int64_t w_in) const {
    const std::int64_t k = kernel();
    const std::int64_t p = pad == Padding::Same ? (k - 1) / 2 : 0;
    return {(h + 2 * p - k) / stride + 1, (w_in + 2 * p - k) / stride + 1};
  }

  void macs(const std::string& name, std::int64_t h, std::int64_t w_in,
            std::vector<MacsItem>& out) const {
    const auto [ho, wo] = out_hw(h, w_in);
    out.push_back({name, conv_macs(in_channels(), out_channels(), kernel(), ho, wo)});
  }
};

template <typename S>
struct LinearLayer {
  Tensor<S> w, b;

  static LinearLayer make(std::int64_t in_f, std::int64_t out_f, Rng& rng) {
    LinearLayer l;
    const double bound = 1.0 / std::sqrt(static_cast<double>(in_f));
    std::vector<S> wd(static_cast<std::size_t>(out_f * in_f));
    rng.fill_uniform(wd, -bound, bound);
    l.w = Tensor<S>::from_data({out_f, in_f}, std::move(wd), true);
    std::vector<S> bd(static_cast<std::size_t>(out_f));
    rng.fill_uniform(bd, -bound, bound);
    l.b = Tensor<S>::from_data({out_f}, std::move(bd), true);
    return l;
  }

  Tensor<S> operator()(const Tensor<S>& x) const { return linear(x, w, b); }

  std::int64_t in_features() const { return w.dim(1); }
  std::int64_t out_features() const { return w.dim(0); }

  void params(const std::string& prefix, std::vector<ParamRef<S>>& out) const {
    out.push_back({prefix + "/w", w});
    out.push_back({prefix + "/b", b});
  }

  void macs(const std::string& name, std::vector<MacsItem>& out) const {
    out.push_back({name, linear_macs(in_features(), out_features())});
  }
};

template <typename S>
std::int64_t param_count(const std::vector<ParamRef<S>>& refs) {
  std::int64_t n = 0;
  for (const auto& r : refs) n += r.tensor.numel();
  return n;
}

template <typename S>
std::vector<Tensor<S>> param_tensors(const std::vector<ParamRef<S>>& refs) {
  std::vector<Tensor<S>> out;
  out.reserve(refs.size());
  for (const auto& r : refs) out.push_back(r.tensor);
  return out;
}

template <typename S>
std::vector<std::string> param_names(const std::vector<ParamRef<S>>& refs) {
  std::vector<std::string> out;
  out.reserve(refs.size());
  for (const auto& r : refs) out.push_back(r.name);
  return out;
}

template <typename S>
void export_params(const std::vector<ParamRef<S>>& refs, NamedTensors<S>& out) {
  // Detach so the exported snapshot does not alias live parameter storage.
  for (const auto& r : refs) out.emplace_back(r.name, r.tensor.detach());
}

template <typename S>
void import_params(std::vector<ParamRef<S>>& refs, const NamedTensors<S>& entries) {
  for (auto& r : refs) {
    const Tensor<S>& stored = checkpoint_get(entries, r.name);
    if (stored.shape() != r.tensor.shape()) {
      throw std::runtime_error("checkpoint: shape mismatch for " + r.name + ": stored " +
                               shape_str(stored.shape()) + " vs model " +
                               shape_str(r.tensor.shape()));
    }
    r.tensor.mutable_data() = stored.data();
  }
}

}  // namespace pid::nn
