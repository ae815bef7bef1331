#pragma once

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>

// Blackbody spectral exitance and band integrals, all in SI units (meters,
// kelvin, W/m^2). The spectral form carries the 2*pi hemispheric factor, so
// integrating it over all wavelengths recovers sigma * T^4 exactly.

namespace pid::radiometry {

struct PhysicalConstants {
  static constexpr double planck_h = 6.62607015e-34;   // J s
  static constexpr double light_c = 2.99792458e8;      // m / s
  static constexpr double boltzmann_k = 1.380649e-23;  // J / K

  // sigma = 2 pi^5 k^4 / (15 h^3 c^2)
  static constexpr double stefan_boltzmann() {
    constexpr double pi = std::numbers::pi;
    constexpr double k4 = boltzmann_k * boltzmann_k * boltzmann_k * boltzmann_k;
    constexpr double h3 = planck_h * planck_h * planck_h;
    constexpr double pi5 = pi * pi * pi * pi * pi;
    return 2.0 * pi5 * k4 / (15.0 * h3 * light_c * light_c);
  }

  // Wien displacement constant, micrometer kelvin.
  static constexpr double wien_b_um_k = 2898.0;
};

struct SpectralBand {
  double lambda_min_m = 0.0;
  double lambda_max_m = 0.0;

  void validate() const {
    if (!(lambda_min_m > 0.0) || !(lambda_max_m > lambda_min_m)) {
      throw std::invalid_argument("spectral band: need 0 < lambda_min < lambda_max, got [" +
                                  std::to_string(lambda_min_m) + ", " +
                                  std::to_string(lambda_max_m) + "]");
    }
  }

  static SpectralBand lwir() { return {7.5e-6, 13.5e-6}; }
};

namespace detail {

inline void check_temperature(double temp_k) {
  if (!(temp_k > 0.0)) {
    throw std::invalid_argument("radiometry: temperature must be positive, got " +
                                std::to_string(temp_k));
  }
}

}  // namespace detail

// Spectral exitance at one wavelength, W / (m^2 m). Evaluated through expm1
// for small exponents and an explicit Wien tail for large ones so the result
// stays finite over the whole supported range.
inline double planck_spectral_exitance(double lambda_m, double temp_k) {
  detail::check_temperature(temp_k);
  if (!(lambda_m > 0.0)) {
    throw std::invalid_argument("radiometry: wavelength must be positive, got " +
                                std::to_string(lambda_m));
  }
  constexpr double h = PhysicalConstants::planck_h;
  constexpr double c = PhysicalConstants::light_c;
  constexpr double k = PhysicalConstants::boltzmann_k;
  const double l2 = lambda_m * lambda_m;
  const double l5 = l2 * l2 * lambda_m;
  const double front = 2.0 * std::numbers::pi * h * c * c / l5;
  const double x = h * c / (lambda_m * k * temp_k);
  if (x > 30.0) {
    // 1/(e^x - 1) ~ e^-x; the neglected term is below 1e-13 relative
    return front * std::exp(-x);
  }
  return front / std::expm1(x);
}

inline double stefan_boltzmann_exitance(double temp_k) {
  detail::check_temperature(temp_k);
  const double t2 = temp_k * temp_k;
  return PhysicalConstants::stefan_boltzmann() * t2 * t2;
}

// Band-integrated exitance, W/m^2. Composite Simpson rule on a log-wavelength
// grid: with u = ln(lambda) the integrand becomes B(e^u) e^u, which is smooth
// and well resolved by uniform u spacing across decades.
inline double band_exitance(double temp_k, const SpectralBand& band, int intervals = 1024) {
  detail::check_temperature(temp_k);
  band.validate();
  if (intervals < 2 || intervals % 2 != 0) {
    throw std::invalid_argument("band_exitance: interval count must be even and >= 2, got " +
                                std::to_string(intervals));
  }
  const double u0 = std::log(band.lambda_min_m);
  const double u1 = std::log(band.lambda_max_m);
  const double h = (u1 - u0) / static_cast<double>(intervals);
  auto f = [temp_k](double u) {
    const double lambda = std::exp(u);
    return planck_spectral_exitance(lambda, temp_k) * lambda;
  };
  double acc = f(u0) + f(u1);
  for (int i = 1; i < intervals; ++i) {
    acc += f(u0 + h * static_cast<double>(i)) * (i % 2 == 1 ? 4.0 : 2.0);
  }
  return acc * h / 3.0;
}

// Wavelength of peak spectral exitance (meters): lambda_peak = b / T.
inline double wien_peak_wavelength(double temp_k) {
  detail::check_temperature(temp_k);
  return PhysicalConstants::wien_b_um_k * 1e-6 / temp_k;
}

}  // namespace pid::radiometry
