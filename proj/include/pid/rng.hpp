#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

namespace pid {

// Counter-based deterministic generator. Every draw is a pure function of
// (seed, stream, counter), so independent streams can be carved out of one
// seed without any shared mutable state and results are identical across
// platforms and run orders.
class Rng {
public:
  explicit Rng(std::uint64_t seed, std::uint64_t stream = 0)
      : state_(mix(mix(0x9e3779b97f4a7c15ull ^ seed) ^ mix(stream))) {}

  // Derive an independent child stream; drawing from the child never
  // perturbs the parent.
  Rng fork(std::uint64_t stream) const { return Rng(state_, stream); }

  std::uint64_t next_u64() {
    state_ += 0x9e3779b97f4a7c15ull;
    return mix(state_);
  }

  // Uniform in [0, 1), 53-bit resolution.
  double next_uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  double next_uniform(double lo, double hi) {
    return lo + (hi - lo) * next_uniform();
  }

  // int in [lo, hi] inclusive
  std::int64_t next_int(std::int64_t lo, std::int64_t hi) {
    const std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
    return lo + static_cast<std::int64_t>(next_u64() % span);
  }

  // Standard normal via Box-Muller; the spare value is cached so draw
  // parity does not affect the stream position visible to callers.
  double next_normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = next_uniform();
    double u2 = next_uniform();
    while (u1 <= 0.0) u1 = next_uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }

  template <typename S>
  void fill_normal(std::vector<S>& out) {
    for (auto& v : out) v = static_cast<S>(next_normal());
  }

  template <typename S>
  void fill_uniform(std::vector<S>& out, double lo, double hi) {
    for (auto& v : out) v = static_cast<S>(next_uniform(lo, hi));
  }

private:
  static constexpr std::uint64_t mix(std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ull;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  std::uint64_t state_;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

}  // namespace pid
