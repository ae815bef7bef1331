#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "pid/serialize.hpp"
#include "pid/tensor.hpp"

namespace pid {

template <typename S>
struct AdamWConfig {
  S lr = S(1e-3);
  S beta1 = S(0.9);
  S beta2 = S(0.999);
  S eps = S(1e-8);
  // Decoupled decay: applied directly to the parameter, not through the
  // moment estimates.
  S weight_decay = S(0);
};

template <typename S>
class AdamW {
public:
  explicit AdamW(AdamWConfig<S> cfg) : cfg_(cfg) {}

  const AdamWConfig<S>& config() const { return cfg_; }
  std::int64_t step_count() const { return step_; }

  void step(std::vector<Tensor<S>>& params) {
    if (m_.empty()) {
      m_.resize(params.size());
      v_.resize(params.size());
      for (std::size_t p = 0; p < params.size(); ++p) {
        m_[p].assign(params[p].data().size(), S(0));
        v_[p].assign(params[p].data().size(), S(0));
      }
    }
    if (m_.size() != params.size()) {
      throw std::invalid_argument("adamw: parameter count changed between steps");
    }
    ++step_;
    const S bc1 = S(1) - static_cast<S>(std::pow(static_cast<double>(cfg_.beta1), static_cast<double>(step_)));
    const S bc2 = S(1) - static_cast<S>(std::pow(static_cast<double>(cfg_.beta2), static_cast<double>(step_)));
    for (std::size_t p = 0; p < params.size(); ++p) {
      auto& t = params[p];
      if (!t.has_grad()) {
        throw std::invalid_argument("adamw: parameter " + std::to_string(p) +
                                    " has no gradient; call zero_grad + backward first");
      }
      const auto& g = t.grad();
      auto& x = t.mutable_data();
      if (m_[p].size() != x.size()) {
        throw std::invalid_argument("adamw: parameter " + std::to_string(p) + " changed size");
      }
      auto& m = m_[p];
      auto& v = v_[p];
      for (std::size_t i = 0; i < x.size(); ++i) {
        m[i] = cfg_.beta1 * m[i] + (S(1) - cfg_.beta1) * g[i];
        v[i] = cfg_.beta2 * v[i] + (S(1) - cfg_.beta2) * g[i] * g[i];
        const S mhat = m[i] / bc1;
        const S vhat = v[i] / bc2;
        x[i] -= cfg_.lr * (mhat / (std::sqrt(vhat) + cfg_.eps) + cfg_.weight_decay * x[i]);
      }
    }
  }

  // Moment buffers and step counter keyed by the caller's parameter names,
  // for checkpoint resume.
  void export_state(const std::vector<std::string>& names, NamedTensors<S>& out) const {
    if (!m_.empty() && names.size() != m_.size()) {
      throw std::invalid_argument("adamw: name count does not match parameter count");
    }
    out.emplace_back("opt/step", Tensor<S>::scalar(static_cast<S>(step_)));
    for (std::size_t p = 0; p < m_.size(); ++p) {
      out.emplace_back("opt/m/" + names[p],
                       Tensor<S>::from_data({static_cast<std::int64_t>(m_[p].size())}, m_[p]));
      out.emplace_back("opt/v/" + names[p],
                       Tensor<S>::from_data({static_cast<std::int64_t>(v_[p].size())}, v_[p]));
    }
  }

  void import_state(const std::vector<std::string>& names, const NamedTensors<S>& entries) {
    step_ = static_cast<std::int64_t>(checkpoint_get(entries, "opt/step").item());
    m_.resize(names.size());
    v_.resize(names.size());
    for (std::size_t p = 0; p < names.size(); ++p) {
      m_[p] = checkpoint_get(entries, "opt/m/" + names[p]).data();
      v_[p] = checkpoint_get(entries, "opt/v/" + names[p]).data();
    }
  }

private:
  AdamWConfig<S> cfg_;
  std::int64_t step_ = 0;
  std::vector<std::vector<S>> m_, v_;
};

}  // namespace pid
