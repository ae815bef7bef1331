#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "pid/tensor.hpp"

namespace pid {

namespace detail {

inline void expect(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

template <typename S>
void expect_same_shape(const Tensor<S>& a, const Tensor<S>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                " vs " + shape_str(b.shape()));
  }
}

template <typename S>
void expect_rank(const Tensor<S>& t, int rank, const char* op) {
  if (t.rank() != rank) {
    throw std::invalid_argument(std::string(op) + ": expected rank " + std::to_string(rank) +
                                ", got shape " + shape_str(t.shape()));
  }
}

// c[M,N] += a[M,K] * b[K,N]
template <typename S>
void gemm_nn_acc(const S* a, const S* b, S* c, std::int64_t M, std::int64_t K, std::int64_t N) {
  for (std::int64_t i = 0; i < M; ++i) {
    const S* arow = a + i * K;
    S* crow = c + i * N;
    for (std::int64_t k = 0; k < K; ++k) {
      const S av = arow[k];
      const S* brow = b + k * N;
      for (std::int64_t j = 0; j < N; ++j) crow[j] += av * brow[j];
    }
  }
}

// c[M,N] += a[M,K] * b[N,K]^T
// The dot product uses fixed-width lane accumulators so the compiler can
// vectorize without reassociating; summation order is fixed, so results are
// reproducible for a given build.
template <typename S>
void gemm_nt_acc(const S* a, const S* b, S* c, std::int64_t M, std::int64_t K, std::int64_t N) {
  constexpr std::int64_t V = 16;
  for (std::int64_t i = 0; i < M; ++i) {
    const S* arow = a + i * K;
    S* crow = c + i * N;
    const std::int64_t tail = K % V;
    const std::int64_t kmain = K - tail;
    for (std::int64_t j = 0; j < N; ++j) {
      const S* brow = b + j * K;
      S lanes[V] = {};
      for (std::int64_t k = 0; k < kmain; k += V) {
        for (std::int64_t l = 0; l < V; ++l) lanes[l] += arow[k + l] * brow[k + l];
      }
      S acc = S(0);
      for (std::int64_t l = 0; l < V; ++l) acc += lanes[l];
      for (std::int64_t t = 0; t < tail; ++t) acc += arow[kmain + t] * brow[kmain + t];
      crow[j] += acc;
    }
  }
}

// c[M,N] += a[K,M]^T * b[K,N]
template <typename S>
void gemm_tn_acc(const S* a, const S* b, S* c, std::int64_t M, std::int64_t K, std::int64_t N) {
  for (std::int64_t k = 0; k < K; ++k) {
    const S* acol = a + k * M;
    const S* brow = b + k * N;
    for (std::int64_t i = 0; i < M; ++i) {
      const S av = acol[i];
      S* crow = c + i * N;
      for (std::int64_t j = 0; j < N; ++j) crow[j] += av * brow[j];
    }
  }
}

template <typename S>
S stable_sigmoid(S x) {
  if (x >= S(0)) {
    return S(1) / (S(1) + std::exp(-x));
  }
  const S e = std::exp(x);
  return e / (S(1) + e);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise arithmetic

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  detail::expect_same_shape(a, b, "add");
  std::vector<S> out(a.data());
  const auto& bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bd[i];
  return make_result<S>(a.shape(), std::move(out), {a, b}, [](TensorNode<S>& n) {
    for (int p = 0; p < 2; ++p) {
      auto& par = *n.parents[p];
      if (!par.requires_grad) continue;
      par.ensure_grad();
      for (std::size_t i = 0; i < n.grad.size(); ++i) par.grad[i] += n.grad[i];
    }
  });
}

template <typename S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  detail::expect_same_shape(a, b, "sub");
  std::vector<S> out(a.data());
  const auto& bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bd[i];
  return make_result<S>(a.shape(), std::move(out), {a, b}, [](TensorNode<S>& n) {
    auto& pa = *n.parents[0];
    if (pa.requires_grad) {
      pa.ensure_grad();
      for (std::size_t i = 0; i < n.grad.size(); ++i) pa.grad[i] += n.grad[i];
    }
    auto& pb = *n.parents[1];
    if (pb.requires_grad) {
      pb.ensure_grad();
      for (std::size_t i = 0; i < n.grad.size(); ++i) pb.grad[i] -= n.grad[i];
    }
  });
}

template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  detail::expect_same_shape(a, b, "mul");
  std::vector<S> out(a.data());
  const auto& bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bd[i];
  return make_result<S>(a.shape(), std::move(out), {a, b}, [](TensorNode<S>& n) {
    auto& pa = *n.parents[0];
    auto& pb = *n.parents[1];
    if (pa.requires_grad) {
      pa.ensure_grad();
      for (std::size_t i = 0; i < n.grad.size(); ++i) pa.grad[i] += n.grad[i] * pb.data[i];
    }
    if (pb.requires_grad) {
      pb.ensure_grad();
      for (std::size_t i = 0; i < n.grad.size(); ++i) pb.grad[i] += n.grad[i] * pa.data[i];
    }
  });
}

template <typename S>
Tensor<S> div(const Tensor<S>& a, const Tensor<S>& b) {
  detail::expect_same_shape(a, b, "div");
  const auto& bd = b.data();
  for (std::size_t i = 0; i < bd.size(); ++i) {
    if (bd[i] == S(0)) {
      throw std::domain_error("div: exact zero denominator at flat index " + std::to_string(i));
    }
  }
  std::vector<S> out(a.data());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] /= bd[i];
  return make_result<S>(a.shape(), std::move(out), {a, b}, [](TensorNode<S>& n) {
    auto& pa = *n.parents[0];
    auto& pb = *n.parents[1];
    if (pa.requires_grad) {
      pa.ensure_grad();
      for (std::size_t i = 0; i < n.grad.size(); ++i) pa.grad[i] += n.grad[i] / pb.data[i];
    }
    if (pb.requires_grad) {
      pb.ensure_grad();
      for (std::size_t i = 0; i < n.grad.size(); ++i) {
        pb.grad[i] -= n.grad[i] * pa.data[i] / (pb.data[i] * pb.data[i]);
      }
    }
  });
}

template <typename S>
Tensor<S> add_scalar(const Tensor<S>& a, S v) {
  std::vector<S> out(a.data());
  for (auto& x : out) x += v;
  return make_result<S>(a.shape(), std::move(out), {a}, [](TensorNode<S>& n) {
    auto& pa = *n.parents[0];
    if (!pa.requires_grad) return;
    pa.ensure_grad();
    for (std::size_t i = 0; i < n.grad.size(); ++i) pa.grad[i] += n.grad[i];
  });
}

template <typename S>
Tensor<S> mul_scalar(const Tensor<S>& a, S v) {
  std::vector<S> out(a.data());
  for (auto& x : out) x *= v;
  return make_result<S>(a.shape(), std::move(out), {a}, [v](TensorNode<S>& n) {
    auto& pa = *n.parents[0];
    if (!pa.requires_grad) return;
    pa.ensure_grad();
    for (std::size_t i = 0; i < n.grad.size(); ++i) pa.grad[i] += n.grad[i] * v;
  });
}

template <typename S>
Tensor<S> sub_scalar(const Tensor<S>& a, S v) { return add_scalar(a, -v); }

template <typename S>
Tensor<S> scalar_sub(S v, const Tensor<S>& a) { return add_scalar(mul_scalar(a, S(-1)), v); }

template <typename S>
Tensor<S> div_scalar(const Tensor<S>& a, S v) {
  if (v == S(0)) throw std::domain_error("div_scalar: exact zero denominator");
  return mul_scalar(a, S(1) / v);
}

template <typename S>
Tensor<S> neg(const Tensor<S>& a) { return mul_scalar(a, S(-1)); }

// out[b, ...] = coefs[b] * x[b, ...]; the coefficients are constants, so no
// gradient flows to them. Used for per-sample schedule factors.
template <typename S>
Tensor<S> scale_batch(const Tensor<S>& x, std::vector<S> coefs) {
  detail::expect(x.rank() >= 1, "scale_batch: rank >= 1 required");
  const std::int64_t B = x.dim(0);
  detail::expect(static_cast<std::int64_t>(coefs.size()) == B,
                 "scale_batch: coefficient count does not match batch size");
  const std::int64_t per = x.numel() / (B == 0 ? 1 : B);
  std::vector<S> out(x.data());
  for (std::int64_t b = 0; b < B; ++b) {
    const S c = coefs[static_cast<std::size_t>(b)];
    for (std::int64_t i = 0; i < per; ++i) out[static_cast<std::size_t>(b * per + i)] *= c;
  }
  return make_result<S>(x.shape(), std::move(out), {x},
                        [coefs = std::move(coefs), B, per](TensorNode<S>& n) {
    auto& pa = *n.parents[0];
    if (!pa.requires_grad) return;
    pa.ensure_grad();
    for (std::int64_t b = 0; b < B; ++b) {
      const S c = coefs[static_cast<std::size_t>(b)];
      for (std::int64_t i = 0; i < per; ++i) {
        const auto k = static_cast<std::size_t>(b * per + i);
        pa.grad[k] += n.grad[k] * c;
      }
    }
  });
}

// out[i, ...] = x[idx[i], ...]; gathers whole batch rows. Gradients
// scatter-add back to the selected rows (a row picked twice accumulates).
template <typename S>
Tensor<S> select_batch(const Tensor<S>& x, std::vector<std::int64_t> idx) {
  detail::expect(x.rank() >= 1, "select_batch: rank >= 1 required");
  detail::expect(!idx.empty(), "select_batch: empty index list");
  const std::int64_t B = x.dim(0);
  for (auto i : idx) {
    detail::expect(i >= 0 && i < B,
                   "select_batch: index " + std::to_string(i) + " outside batch of " +
                       std::to_string(B));
  }
  const std::int64_t per = x.numel() / (B == 0 ? 1 : B);
  const auto n_out = static_cast<std::int64_t>(idx.size());
  Shape out_shape = x.shape();
  out_shape[0] = n_out;
  std::vector<S> out(static_cast<std::size_t>(n_out * per));
  for (std::int64_t r = 0; r < n_out; ++r) {
    const std::int64_t src = idx[static_cast<std::size_t>(r)];
    std::copy(x.data().begin() + src * per, x.data().begin() + (src + 1) * per,
              out.begin() + r * per);
  }
  return make_result<S>(std::move(out_shape), std::move(out), {x},
                        [idx = std::move(idx), per](TensorNode<S>& n) {
    auto& pa = *n.parents[0];
    if (!pa.requires_grad) return;
    pa.ensure_grad();
    for (std::size_t r = 0; r < idx.size(); ++r) {
      const auto src = static_cast<std::size_t>(idx[r]) * static_cast<std::size_t>(per);
      const auto dst = r * static_cast<std::size_t>(per);
      for (std::int64_t i = 0; i < per; ++i) {
        pa.grad[src + static_cast<std::size_t>(i)] += n.grad[dst + static_cast<std::size_t>(i)];
      }
    }
  });
}

// ---------------------------------------------------------------------------
// activations

enum class Activation { Relu, Sigmoid, Silu };

template <typename S>
Tensor<S> relu(const Tensor<S>& a) {
  std::vector<S> out(a.data());
  for (auto& x : out) x = x > S(0) ? x : S(0);
  return make_result<S>(a.shape(), std::move(out), {a}, [](TensorNode<S>& n) {
    auto& pa = *n.parents[0];
    if (!pa.requires_grad) return;
    pa.ensure_grad();
    // subgradient at 0 is taken as 0
    for (std::size_t i = 0; i < n.grad.size(); ++i) {
      if (pa.data[i] > S(0)) pa.grad[i] += n.grad[i];
    }
  });
}

template <typename S>
Tensor<S> sigmoid(const Tensor<S>& a) {
  std::vector<S> out(a.data());
  for (auto& x : out) x = detail::stable_sigmoid(x);
  return make_result<S>(a.shape(), std::move(out), {a}, [](TensorNode<S>& n) {
    auto& pa = *n.parents[0];
    if (!pa.requires_grad) return;
    pa.ensure_grad();
    for (std::size_t i = 0; i < n.grad.size(); ++i) {
      const S y = n.data[i];
      pa.grad[i] += n.grad[i] * y * (S(1) - y);
    }
  });
}

template <typename S>
Tensor<S> silu(const Tensor<S>& a) {
  std::vector<S> out(a.data());
  for (auto& x : out) x = x * detail::stable_sigmoid(x);
  return make_result<S>(a.shape(), std::move(out), {a}, [](TensorNode<S>& n) {
    auto& pa = *n.parents[0];
    if (!pa.requires_grad) return;
    pa.ensure_grad();
    for (std::size_t i = 0; i < n.grad.size(); ++i) {
      const S x = pa.data[i];
      const S s = detail::stable_sigmoid(x);
      pa.grad[i] += n.grad[i] * s * (S(1) + x * (S(1) - s));
    }
  });
}

template <typename S>
Tensor<S> activation(Activation kind, const Tensor<S>& a) {
  switch (kind) {
    case Activation::Relu: return relu(a);
    case Activation::Sigmoid: return sigmoid(a);
    case Activation::Silu: return silu(a);
  }
  throw std::invalid_argument("activation: unknown kind");
}

template <typename S>
Tensor<S> abs_t(const Tensor<S>& a) {
  std::vector<S> out(a.data());
  for (auto& x : out) x = std::abs(x);
  return make_result<S>(a.shape(), std::move(out), {a}, [](TensorNode<S>& n) {
    auto& pa = *n.parents[0];
    if (!pa.requires_grad) return;
    pa.ensure_grad();
    // subgradient at 0 is taken as 0
    for (std::size_t i = 0; i < n.grad.size(); ++i) {
      const S x = pa.data[i];
      if (x > S(0)) pa.grad[i] += n.grad[i];
      else if (x < S(0)) pa.grad[i] -= n.grad[i];
    }
  });
}

// ---------------------------------------------------------------------------
// reductions (sums accumulate in double for accuracy; order is fixed)

template <typename S>
Tensor<S> sum(const Tensor<S>& a) {
  double acc = 0.0;
  for (const auto& v : a.data()) acc += static_cast<double>(v);
  return make_result<S>({1}, {static_cast<S>(acc)}, {a}, [](TensorNode<S>& n) {
    auto& pa = *n.parents[0];
    if (!pa.requires_grad) return;
    pa.ensure_grad();
    const S g = n.grad[0];
    for (auto& gv : pa.grad) gv += g;
  });
}

template <typename S>
Tensor<S> mean(const Tensor<S>& a) {
  detail::expect(a.numel() > 0, "mean: empty tensor");
  const S inv = S(1) / static_cast<S>(a.numel());
  double acc = 0.0;
  for (const auto& v : a.data()) acc += static_cast<double>(v);
  acc *= static_cast<double>(inv);
  return make_result<S>({1}, {static_cast<S>(acc)}, {a}, [inv](TensorNode<S>& n) {
    auto& pa = *n.parents[0];
    if (!pa.requires_grad) return;
    pa.ensure_grad();
    const S g = n.grad[0] * inv;
    for (auto& gv : pa.grad) gv += g;
  });
}

template <typename S>
Tensor<S> mse(const Tensor<S>& a, const Tensor<S>& b) {
  auto d = sub(a, b);
  return mean(mul(d, d));
}

template <typename S>
Tensor<S> mae(const Tensor<S>& a, const Tensor<S>& b) {
  return mean(abs_t(sub(a, b)));
}

// ---------------------------------------------------------------------------
// matmul / linear

template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  detail::expect_rank(a, 2, "matmul");
  detail::expect_rank(b, 2, "matmul");
  const std::int64_t M = a.dim(0), K = a.dim(1), K2 = b.dim(0), N = b.dim(1);
  if (K != K2) {
    throw std::invalid_argument("matmul: inner dimensions disagree, " + shape_str(a.shape()) +
                                " vs " + shape_str(b.shape()));
  }
  std::vector<S> out(static_cast<std::size_t>(M * N), S(0));
  detail::gemm_nn_acc(a.data().data(), b.data().data(), out.data(), M, K, N);
  return make_result<S>({M, N}, std::move(out), {a, b}, [M, K, N](TensorNode<S>& n) {
    auto& pa = *n.parents[0];
    auto& pb = *n.parents[1];
    if (pa.requires_grad) {
      pa.ensure_grad();
      detail::gemm_nt_acc(n.grad.data(), pb.data.data(), pa.grad.data(), M, N, K);
    }
    if (pb.requires_grad) {
      pb.ensure_grad();
      detail::gemm_tn_acc(pa.data.data(), n.grad.data(), pb.grad.data(), K, M, N);
    }
  });
}

// y[b, o] = sum_i x[b, i] * w[o, i] + bias[o]
template <typename S>
Tensor<S> linear(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& bias) {
  detail::expect_rank(x, 2, "linear");
  detail::expect_rank(w, 2, "linear");
  const std::int64_t B = x.dim(0), I = x.dim(1), O = w.dim(0);
  detail::expect(w.dim(1) == I, "linear: weight shape " + shape_str(w.shape()) +
                                    " does not match input " + shape_str(x.shape()));
  const bool has_bias = bias.defined();
  if (has_bias) {
    detail::expect(bias.rank() == 1 && bias.dim(0) == O,
                   "linear: bias shape " + shape_str(bias.shape()));
  }
  std::vector<S> out(static_cast<std::size_t>(B * O), S(0));
  detail::gemm_nt_acc(x.data().data(), w.data().data(), out.data(), B, I, O);
  if (has_bias) {
    const auto& bd = bias.data();
    for (std::int64_t b = 0; b < B; ++b)
      for (std::int64_t o = 0; o < O; ++o)
        out[static_cast<std::size_t>(b * O + o)] += bd[static_cast<std::size_t>(o)];
  }
  std::vector<Tensor<S>> inputs = {x, w};
  if (has_bias) inputs.push_back(bias);
  return make_result<S>({B, O}, std::move(out), std::move(inputs),
                        [B, I, O, has_bias](TensorNode<S>& n) {
    auto& px = *n.parents[0];
    auto& pw = *n.parents[1];
    if (px.requires_grad) {
      px.ensure_grad();
      detail::gemm_nn_acc(n.grad.data(), pw.data.data(), px.grad.data(), B, O, I);
    }
    if (pw.requires_grad) {
      pw.ensure_grad();
      detail::gemm_tn_acc(n.grad.data(), px.data.data(), pw.grad.data(), O, B, I);
    }
    if (has_bias) {
      auto& pbias = *n.parents[2];
      if (pbias.requires_grad) {
        pbias.ensure_grad();
        for (std::int64_t b = 0; b < B; ++b)
          for (std::int64_t o = 0; o < O; ++o)
            pbias.grad[static_cast<std::size_t>(o)] += n.grad[static_cast<std::size_t>(b * O + o)];
      }
    }
  });
}

template <typename S>
Tensor<S> linear(const Tensor<S>& x, const Tensor<S>& w) {
  return linear(x, w, Tensor<S>());
}

// ---------------------------------------------------------------------------
// conv2d (NCHW, odd kernels, stride 1 or 2, same/valid padding)

enum class Padding { Same, Valid };

struct Conv2dDims {
  std::int64_t B, C, H, W, O, KH, KW, PH, PW, HO, WO;
  int stride;
};

template <typename S>
Conv2dDims conv2d_dims(const Tensor<S>& x, const Tensor<S>& w, int stride, Padding pad) {
  detail::expect_rank(x, 4, "conv2d");
  detail::expect_rank(w, 4, "conv2d");
  detail::expect(stride == 1 || stride == 2, "conv2d: stride must be 1 or 2");
  Conv2dDims d{};
  d.B = x.dim(0); d.C = x.dim(1); d.H = x.dim(2); d.W = x.dim(3);
  d.O = w.dim(0); d.KH = w.dim(2); d.KW = w.dim(3);
  d.stride = stride;
  detail::expect(w.dim(1) == d.C, "conv2d: weight channels " + shape_str(w.shape()) +
                                      " do not match input " + shape_str(x.shape()));
  detail::expect(d.KH % 2 == 1 && d.KW % 2 == 1, "conv2d: kernel extents must be odd");
  d.PH = pad == Padding::Same ? (d.KH - 1) / 2 : 0;
  d.PW = pad == Padding::Same ? (d.KW - 1) / 2 : 0;
  d.HO = (d.H + 2 * d.PH - d.KH) / stride + 1;
  d.WO = (d.W + 2 * d.PW - d.KW) / stride + 1;
  detail::expect(d.HO > 0 && d.WO > 0, "conv2d: kernel larger than padded input");
  return d;
}

namespace detail {

template <typename S>
void im2col(const S* x, const Conv2dDims& d, S* col) {
  const std::int64_t HW = d.HO * d.WO;
  for (std::int64_t c = 0; c < d.C; ++c) {
    const S* xc = x + c * d.H * d.W;
    for (std::int64_t ki = 0; ki < d.KH; ++ki) {
      for (std::int64_t kj = 0; kj < d.KW; ++kj) {
        S* crow = col + ((c * d.KH + ki) * d.KW + kj) * HW;
        for (std::int64_t oh = 0; oh < d.HO; ++oh) {
          const std::int64_t ih = oh * d.stride + ki - d.PH;
          S* cdst = crow + oh * d.WO;
          if (ih < 0 || ih >= d.H) {
            for (std::int64_t ow = 0; ow < d.WO; ++ow) cdst[ow] = S(0);
            continue;
          }
          const S* xrow = xc + ih * d.W;
          for (std::int64_t ow = 0; ow < d.WO; ++ow) {
            const std::int64_t iw = ow * d.stride + kj - d.PW;
            cdst[ow] = (iw >= 0 && iw < d.W) ? xrow[iw] : S(0);
          }
        }
      }
    }
  }
}

template <typename S>
void col2im_acc(const S* col, const Conv2dDims& d, S* x) {
  const std::int64_t HW = d.HO * d.WO;
  for (std::int64_t c = 0; c < d.C; ++c) {
    S* xc = x + c * d.H * d.W;
    for (std::int64_t ki = 0; ki < d.KH; ++ki) {
      for (std::int64_t kj = 0; kj < d.KW; ++kj) {
        const S* crow = col + ((c * d.KH + ki) * d.KW + kj) * HW;
        for (std::int64_t oh = 0; oh < d.HO; ++oh) {
          const std::int64_t ih = oh * d.stride + ki - d.PH;
          if (ih < 0 || ih >= d.H) continue;
          const S* csrc = crow + oh * d.WO;
          S* xrow = xc + ih * d.W;
          for (std::int64_t ow = 0; ow < d.WO; ++ow) {
            const std::int64_t iw = ow * d.stride + kj - d.PW;
            if (iw >= 0 && iw < d.W) xrow[iw] += csrc[ow];
          }
        }
      }
    }
  }
}

}  // namespace detail

template <typename S>
Tensor<S> conv2d(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& bias,
                 int stride = 1, Padding pad = Padding::Same) {
  const Conv2dDims d = conv2d_dims(x, w, stride, pad);
  const bool has_bias = bias.defined();
  if (has_bias) {
    detail::expect(bias.rank() == 1 && bias.dim(0) == d.O,
                   "conv2d: bias shape " + shape_str(bias.shape()));
  }
  const std::int64_t CKK = d.C * d.KH * d.KW;
  const std::int64_t HW = d.HO * d.WO;
  std::vector<S> col(static_cast<std::size_t>(CKK * HW));
  std::vector<S> out(static_cast<std::size_t>(d.B * d.O * HW), S(0));
  for (std::int64_t b = 0; b < d.B; ++b) {
    detail::im2col(x.data().data() + b * d.C * d.H * d.W, d, col.data());
    detail::gemm_nn_acc(w.data().data(), col.data(), out.data() + b * d.O * HW, d.O, CKK, HW);
  }
  if (has_bias) {
    const auto& bd = bias.data();
    for (std::int64_t b = 0; b < d.B; ++b)
      for (std::int64_t o = 0; o < d.O; ++o) {
        const S bv = bd[static_cast<std::size_t>(o)];
        S* orow = out.data() + (b * d.O + o) * HW;
        for (std::int64_t i = 0; i < HW; ++i) orow[i] += bv;
      }
  }
  std::vector<Tensor<S>> inputs = {x, w};
  if (has_bias) inputs.push_back(bias);
  return make_result<S>({d.B, d.O, d.HO, d.WO}, std::move(out), std::move(inputs),
                        [d, has_bias](TensorNode<S>& n) {
    auto& px = *n.parents[0];
    auto& pw = *n.parents[1];
    const std::int64_t CKK = d.C * d.KH * d.KW;
    const std::int64_t HW = d.HO * d.WO;
    std::vector<S> col(static_cast<std::size_t>(CKK * HW));
    std::vector<S> dcol(static_cast<std::size_t>(CKK * HW));
    if (px.requires_grad) px.ensure_grad();
    if (pw.requires_grad) pw.ensure_grad();
    for (std::int64_t b = 0; b < d.B; ++b) {
      const S* dy = n.grad.data() + b * d.O * HW;
      if (pw.requires_grad) {
        // dW[o, ckk] += dY[o, hw] . col[ckk, hw]
        detail::im2col(px.data.data() + b * d.C * d.H * d.W, d, col.data());
        detail::gemm_nt_acc(dy, col.data(), pw.grad.data(), d.O, HW, CKK);
      }
      if (px.requires_grad) {
        // dcol[ckk, hw] = W^T[ckk, o] . dY[o, hw]
        std::fill(dcol.begin(), dcol.end(), S(0));
        detail::gemm_tn_acc(pw.data.data(), dy, dcol.data(), CKK, d.O, HW);
        detail::col2im_acc(dcol.data(), d, px.grad.data() + b * d.C * d.H * d.W);
      }
    }
    if (has_bias) {
      auto& pbias = *n.parents[2];
      if (pbias.requires_grad) {
        pbias.ensure_grad();
        for (std::int64_t b = 0; b < d.B; ++b)
          for (std::int64_t o = 0; o < d.O; ++o) {
            const S* dy = n.grad.data() + (b * d.O + o) * HW;
            double acc = 0.0;
            for (std::int64_t i = 0; i < HW; ++i) acc += static_cast<double>(dy[i]);
            pbias.grad[static_cast<std::size_t>(o)] += static_cast<S>(acc);
          }
      }
    }
  });
}

template <typename S>
Tensor<S> conv2d(const Tensor<S>& x, const Tensor<S>& w, int stride = 1,
                 Padding pad = Padding::Same) {
  return conv2d(x, w, Tensor<S>(), stride, pad);
}

// ---------------------------------------------------------------------------
// shape / channel ops

template <typename S>
Tensor<S> concat_channels(const Tensor<S>& a, const Tensor<S>& b) {
  detail::expect_rank(a, 4, "concat_channels");
  detail::expect_rank(b, 4, "concat_channels");
  detail::expect(a.dim(0) == b.dim(0) && a.dim(2) == b.dim(2) && a.dim(3) == b.dim(3),
                 "concat_channels: non-channel dims disagree, " + shape_str(a.shape()) +
                     " vs " + shape_str(b.shape()));
  const std::int64_t B = a.dim(0), Ca = a.dim(1), Cb = b.dim(1);
  const std::int64_t HW = a.dim(2) * a.dim(3);
  std::vector<S> out(static_cast<std::size_t>(B * (Ca + Cb) * HW));
  for (std::int64_t bi = 0; bi < B; ++bi) {
    std::copy_n(a.data().data() + bi * Ca * HW, Ca * HW, out.data() + bi * (Ca + Cb) * HW);
    std::copy_n(b.data().data() + bi * Cb * HW, Cb * HW,
                out.data() + bi * (Ca + Cb) * HW + Ca * HW);
  }
  return make_result<S>({B, Ca + Cb, a.dim(2), a.dim(3)}, std::move(out), {a, b},
                        [B, Ca, Cb, HW](TensorNode<S>& n) {
    auto& pa = *n.parents[0];
    auto& pb = *n.parents[1];
    if (pa.requires_grad) {
      pa.ensure_grad();
      for (std::int64_t bi = 0; bi < B; ++bi) {
        const S* g = n.grad.data() + bi * (Ca + Cb) * HW;
        S* pg = pa.grad.data() + bi * Ca * HW;
        for (std::int64_t i = 0; i < Ca * HW; ++i) pg[i] += g[i];
      }
    }
    if (pb.requires_grad) {
      pb.ensure_grad();
      for (std::int64_t bi = 0; bi < B; ++bi) {
        const S* g = n.grad.data() + bi * (Ca + Cb) * HW + Ca * HW;
        S* pg = pb.grad.data() + bi * Cb * HW;
        for (std::int64_t i = 0; i < Cb * HW; ++i) pg[i] += g[i];
      }
    }
  });
}

// channels [c0, c1)
template <typename S>
Tensor<S> slice_channels(const Tensor<S>& x, std::int64_t c0, std::int64_t c1) {
  detail::expect_rank(x, 4, "slice_channels");
  const std::int64_t B = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  detail::expect(c0 >= 0 && c1 > c0 && c1 <= C, "slice_channels: range [" + std::to_string(c0) +
                                                    ", " + std::to_string(c1) + ") out of " +
                                                    std::to_string(C) + " channels");
  const std::int64_t Cs = c1 - c0;
  std::vector<S> out(static_cast<std::size_t>(B * Cs * HW));
  for (std::int64_t bi = 0; bi < B; ++bi) {
    std::copy_n(x.data().data() + (bi * C + c0) * HW, Cs * HW, out.data() + bi * Cs * HW);
  }
  return make_result<S>({B, Cs, x.dim(2), x.dim(3)}, std::move(out), {x},
                        [B, C, c0, Cs, HW](TensorNode<S>& n) {
    auto& pa = *n.parents[0];
    if (!pa.requires_grad) return;
    pa.ensure_grad();
    for (std::int64_t bi = 0; bi < B; ++bi) {
      const S* g = n.grad.data() + bi * Cs * HW;
      S* pg = pa.grad.data() + (bi * C + c0) * HW;
      for (std::int64_t i = 0; i < Cs * HW; ++i) pg[i] += g[i];
    }
  });
}

template <typename S>
Tensor<S> mean_channels(const Tensor<S>& x) {
  detail::expect_rank(x, 4, "mean_channels");
  const std::int64_t B = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  const S inv = S(1) / static_cast<S>(C);
  std::vector<S> out(static_cast<std::size_t>(B * HW), S(0));
  for (std::int64_t bi = 0; bi < B; ++bi)
    for (std::int64_t c = 0; c < C; ++c) {
      const S* xr = x.data().data() + (bi * C + c) * HW;
      S* orow = out.data() + bi * HW;
      for (std::int64_t i = 0; i < HW; ++i) orow[i] += xr[i] * inv;
    }
  return make_result<S>({B, 1, x.dim(2), x.dim(3)}, std::move(out), {x},
                        [B, C, HW, inv](TensorNode<S>& n) {
    auto& pa = *n.parents[0];
    if (!pa.requires_grad) return;
    pa.ensure_grad();
    for (std::int64_t bi = 0; bi < B; ++bi)
      for (std::int64_t c = 0; c < C; ++c) {
        const S* g = n.grad.data() + bi * HW;
        S* pg = pa.grad.data() + (bi * C + c) * HW;
        for (std::int64_t i = 0; i < HW; ++i) pg[i] += g[i] * inv;
      }
  });
}

template <typename S>
Tensor<S> upsample_nearest2x(const Tensor<S>& x) {
  detail::expect_rank(x, 4, "upsample_nearest2x");
  const std::int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  std::vector<S> out(static_cast<std::size_t>(B * C * 4 * H * W));
  for (std::int64_t bc = 0; bc < B * C; ++bc) {
    const S* src = x.data().data() + bc * H * W;
    S* dst = out.data() + bc * 4 * H * W;
    for (std::int64_t h = 0; h < 2 * H; ++h) {
      const S* srow = src + (h / 2) * W;
      S* drow = dst + h * 2 * W;
      for (std::int64_t w = 0; w < 2 * W; ++w) drow[w] = srow[w / 2];
    }
  }
  return make_result<S>({B, C, 2 * H, 2 * W}, std::move(out), {x},
                        [B, C, H, W](TensorNode<S>& n) {
    auto& pa = *n.parents[0];
    if (!pa.requires_grad) return;
    pa.ensure_grad();
    for (std::int64_t bc = 0; bc < B * C; ++bc) {
      const S* g = n.grad.data() + bc * 4 * H * W;
      S* pg = pa.grad.data() + bc * H * W;
      for (std::int64_t h = 0; h < 2 * H; ++h) {
        const S* grow = g + h * 2 * W;
        S* prow = pg + (h / 2) * W;
        for (std::int64_t w = 0; w < 2 * W; ++w) prow[w / 2] += grow[w];
      }
    }
  });
}

template <typename S>
Tensor<S> avg_pool2d(const Tensor<S>& x, int factor) {
  detail::expect_rank(x, 4, "avg_pool2d");
  detail::expect(factor >= 1, "avg_pool2d: factor must be >= 1");
  if (factor == 1) return mul_scalar(x, S(1));
  const std::int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3), f = factor;
  detail::expect(H % f == 0 && W % f == 0,
                 "avg_pool2d: spatial dims " + shape_str(x.shape()) +
                     " not divisible by factor " + std::to_string(factor));
  const std::int64_t HO = H / f, WO = W / f;
  const S inv = S(1) / static_cast<S>(f * f);
  std::vector<S> out(static_cast<std::size_t>(B * C * HO * WO), S(0));
  for (std::int64_t bc = 0; bc < B * C; ++bc) {
    const S* src = x.data().data() + bc * H * W;
    S* dst = out.data() + bc * HO * WO;
    for (std::int64_t oh = 0; oh < HO; ++oh)
      for (std::int64_t ow = 0; ow < WO; ++ow) {
        S acc = S(0);
        for (std::int64_t i = 0; i < f; ++i)
          for (std::int64_t j = 0; j < f; ++j) acc += src[(oh * f + i) * W + ow * f + j];
        dst[oh * WO + ow] = acc * inv;
      }
  }
  return make_result<S>({B, C, HO, WO}, std::move(out), {x},
                        [B, C, H, W, HO, WO, f, inv](TensorNode<S>& n) {
    auto& pa = *n.parents[0];
    if (!pa.requires_grad) return;
    pa.ensure_grad();
    for (std::int64_t bc = 0; bc < B * C; ++bc) {
      const S* g = n.grad.data() + bc * HO * WO;
      S* pg = pa.grad.data() + bc * H * W;
      for (std::int64_t oh = 0; oh < HO; ++oh)
        for (std::int64_t ow = 0; ow < WO; ++ow) {
          const S gv = g[oh * WO + ow] * inv;
          for (std::int64_t i = 0; i < f; ++i)
            for (std::int64_t j = 0; j < f; ++j) pg[(oh * f + i) * W + ow * f + j] += gv;
        }
    }
  });
}

// out[b, c, h, w] = x[b, c, h, w] + v[b, c]
template <typename S>
Tensor<S> add_channel_bias(const Tensor<S>& x, const Tensor<S>& v) {
  detail::expect_rank(x, 4, "add_channel_bias");
  detail::expect_rank(v, 2, "add_channel_bias");
  const std::int64_t B = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  detail::expect(v.dim(0) == B && v.dim(1) == C,
                 "add_channel_bias: bias shape " + shape_str(v.shape()) +
                     " does not match input " + shape_str(x.shape()));
  std::vector<S> out(x.data());
  for (std::int64_t bc = 0; bc < B * C; ++bc) {
    const S bv = v.data()[static_cast<std::size_t>(bc)];
    S* row = out.data() + bc * HW;
    for (std::int64_t i = 0; i < HW; ++i) row[i] += bv;
  }
  return make_result<S>(x.shape(), std::move(out), {x, v}, [B, C, HW](TensorNode<S>& n) {
    auto& px = *n.parents[0];
    auto& pv = *n.parents[1];
    if (px.requires_grad) {
      px.ensure_grad();
      for (std::size_t i = 0; i < n.grad.size(); ++i) px.grad[i] += n.grad[i];
    }
    if (pv.requires_grad) {
      pv.ensure_grad();
      for (std::int64_t bc = 0; bc < B * C; ++bc) {
        const S* g = n.grad.data() + bc * HW;
        double acc = 0.0;
        for (std::int64_t i = 0; i < HW; ++i) acc += static_cast<double>(g[i]);
        pv.grad[static_cast<std::size_t>(bc)] += static_cast<S>(acc);
      }
    }
  });
}

// ---------------------------------------------------------------------------
// grid ops used by the decomposition head

// Grid layouts are fixed per cell count: 2 -> 1x2, 4 -> 2x2, 8 -> 2x4
// (rows x cols). Cell index is row-major over the grid.
inline std::pair<std::int64_t, std::int64_t> grid_layout(int m) {
  switch (m) {
    case 2: return {1, 2};
    case 4: return {2, 2};
    case 8: return {2, 4};
    default:
      throw std::invalid_argument("grid_layout: cell count must be 2, 4, or 8, got " +
                                  std::to_string(m));
  }
}

// x[B,1,H,W] -> per-cell means [B, m]
template <typename S>
Tensor<S> grid_cell_means(const Tensor<S>& x, int m) {
  detail::expect_rank(x, 4, "grid_cell_means");
  detail::expect(x.dim(1) == 1, "grid_cell_means: expected a single channel, got " +
                                    shape_str(x.shape()));
  const auto [gh, gw] = grid_layout(m);
  const std::int64_t B = x.dim(0), H = x.dim(2), W = x.dim(3);
  detail::expect(H % gh == 0 && W % gw == 0,
                 "grid_cell_means: spatial dims " + shape_str(x.shape()) +
                     " not divisible by grid " + std::to_string(gh) + "x" + std::to_string(gw));
  const std::int64_t ch = H / gh, cw = W / gw;
  const S inv = S(1) / static_cast<S>(ch * cw);
  std::vector<S> out(static_cast<std::size_t>(B * m), S(0));
  for (std::int64_t b = 0; b < B; ++b) {
    const S* src = x.data().data() + b * H * W;
    for (std::int64_t gy = 0; gy < gh; ++gy)
      for (std::int64_t gx = 0; gx < gw; ++gx) {
        double acc = 0.0;
        for (std::int64_t i = 0; i < ch; ++i)
          for (std::int64_t j = 0; j < cw; ++j)
            acc += static_cast<double>(src[(gy * ch + i) * W + gx * cw + j]);
        out[static_cast<std::size_t>(b * m + gy * gw + gx)] = static_cast<S>(acc) * inv;
      }
  }
  const std::int64_t ghc = gh, gwc = gw;
  return make_result<S>({B, m}, std::move(out), {x},
                        [B, H, W, ghc, gwc, ch, cw, inv](TensorNode<S>& n) {
    auto& pa = *n.parents[0];
    if (!pa.requires_grad) return;
    pa.ensure_grad();
    for (std::int64_t b = 0; b < B; ++b) {
      S* pg = pa.grad.data() + b * H * W;
      for (std::int64_t gy = 0; gy < ghc; ++gy)
        for (std::int64_t gx = 0; gx < gwc; ++gx) {
          const S gv = n.grad[static_cast<std::size_t>(b * ghc * gwc + gy * gwc + gx)] * inv;
          for (std::int64_t i = 0; i < ch; ++i)
            for (std::int64_t j = 0; j < cw; ++j) pg[(gy * ch + i) * W + gx * cw + j] += gv;
        }
    }
  });
}

// out[b,0,h,w] = sum_a v[b,a,h,w] * s[b,a]; pixelwise contraction of the
// m-channel mixing map against the per-cell vector.
template <typename S>
Tensor<S> grid_mix(const Tensor<S>& v, const Tensor<S>& s) {
  detail::expect_rank(v, 4, "grid_mix");
  detail::expect_rank(s, 2, "grid_mix");
  const std::int64_t B = v.dim(0), M = v.dim(1), HW = v.dim(2) * v.dim(3);
  detail::expect(s.dim(0) == B && s.dim(1) == M,
                 "grid_mix: vector shape " + shape_str(s.shape()) + " does not match map " +
                     shape_str(v.shape()));
  std::vector<S> out(static_cast<std::size_t>(B * HW), S(0));
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t a = 0; a < M; ++a) {
      const S sv = s.data()[static_cast<std::size_t>(b * M + a)];
      const S* vr = v.data().data() + (b * M + a) * HW;
      S* orow = out.data() + b * HW;
      for (std::int64_t i = 0; i < HW; ++i) orow[i] += vr[i] * sv;
    }
  return make_result<S>({B, 1, v.dim(2), v.dim(3)}, std::move(out), {v, s},
                        [B, M, HW](TensorNode<S>& n) {
    auto& pv = *n.parents[0];
    auto& ps = *n.parents[1];
    if (pv.requires_grad) {
      pv.ensure_grad();
      for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t a = 0; a < M; ++a) {
          const S sv = ps.data[static_cast<std::size_t>(b * M + a)];
          const S* g = n.grad.data() + b * HW;
          S* pg = pv.grad.data() + (b * M + a) * HW;
          for (std::int64_t i = 0; i < HW; ++i) pg[i] += g[i] * sv;
        }
    }
    if (ps.requires_grad) {
      ps.ensure_grad();
      for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t a = 0; a < M; ++a) {
          const S* g = n.grad.data() + b * HW;
          const S* vr = pv.data.data() + (b * M + a) * HW;
          double acc = 0.0;
          for (std::int64_t i = 0; i < HW; ++i) acc += static_cast<double>(g[i] * vr[i]);
          ps.grad[static_cast<std::size_t>(b * M + a)] += static_cast<S>(acc);
        }
    }
  });
}

// ---------------------------------------------------------------------------
// batch assembly (leaf utility, no gradient)

template <typename S>
Tensor<S> stack_batch(const std::vector<Tensor<S>>& items) {
  detail::expect(!items.empty(), "stack_batch: empty list");
  const Shape& s0 = items[0].shape();
  Shape out_shape;
  out_shape.push_back(static_cast<std::int64_t>(items.size()));
  out_shape.insert(out_shape.end(), s0.begin(), s0.end());
  std::vector<S> out;
  out.reserve(static_cast<std::size_t>(shape_numel(out_shape)));
  for (const auto& t : items) {
    if (t.shape() != s0) {
      throw std::invalid_argument("stack_batch: shape mismatch " + shape_str(t.shape()) +
                                  " vs " + shape_str(s0));
    }
    out.insert(out.end(), t.data().begin(), t.data().end());
  }
  return Tensor<S>::from_data(std::move(out_shape), std::move(out));
}

}  // namespace pid
