#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "pid/tensor.hpp"

namespace pid {

struct GradCheckEntry {
  std::string param;
  std::int64_t index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_error = 0.0;
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::int64_t checked = 0;
  // Worst entries, sorted by descending relative error.
  std::vector<GradCheckEntry> worst;

  bool pass(double tol) const { return checked > 0 && max_rel_error < tol; }
};

// Central-difference check of d(objective)/d(params). The objective must be a
// pure function of the current parameter values (freeze any noise or index
// draws before calling). Relative error uses a floor so near-zero entries are
// compared absolutely: |fd - g| / max(|fd|, |g|, floor).
template <typename S>
GradCheckReport finite_difference_check(const std::function<Tensor<S>()>& objective,
                                        std::vector<Tensor<S>>& params,
                                        const std::vector<std::string>& names,
                                        double h, double floor = 1e-3,
                                        std::size_t keep_worst = 16) {
  for (auto& p : params) p.zero_grad();
  Tensor<S> loss = objective();
  backward(loss);

  std::vector<std::vector<double>> analytic(params.size());
  for (std::size_t p = 0; p < params.size(); ++p) {
    const auto& g = params[p].grad();
    analytic[p].assign(g.begin(), g.end());
  }

  GradCheckReport report;
  std::vector<GradCheckEntry> entries;
  NoGradGuard off;
  for (std::size_t p = 0; p < params.size(); ++p) {
    auto& data = params[p].mutable_data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const S saved = data[i];
      data[i] = static_cast<S>(static_cast<double>(saved) + h);
      const double f_plus = static_cast<double>(objective().item());
      data[i] = static_cast<S>(static_cast<double>(saved) - h);
      const double f_minus = static_cast<double>(objective().item());
      data[i] = saved;
      const double fd = (f_plus - f_minus) / (2.0 * h);
      const double g = analytic[p][i];
      const double denom = std::max({std::abs(fd), std::abs(g), floor});
      const double rel = std::abs(fd - g) / denom;
      report.max_rel_error = std::max(report.max_rel_error, rel);
      ++report.checked;
      entries.push_back({names.size() > p ? names[p] : ("param" + std::to_string(p)),
                         static_cast<std::int64_t>(i), g, fd, rel});
    }
  }
  std::sort(entries.begin(), entries.end(),
            [](const GradCheckEntry& a, const GradCheckEntry& b) { return a.rel_error > b.rel_error; });
  if (entries.size() > keep_worst) entries.resize(keep_worst);
  report.worst = std::move(entries);
  return report;
}

}  // namespace pid
