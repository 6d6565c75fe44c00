#pragma once

// Differentiable feature density of a set of grid transforms, the error-warped
// target density, and the relative-entropy loss between them. All math here
// runs in double regardless of the model's scalar type.

#include <cmath>
#include <span>
#include <stdexcept>
#include <vector>

#include "apmg/model.hpp"

namespace apmg {

inline constexpr double kDensityEps = 1e-8;
/// Exponents beyond this contribute exactly zero density (and zero gradient).
inline constexpr double kExponentClamp = 700.0;

class DensityError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Standalone flat-top kernel exp(-t^(2p) / 2).
double flat_top(double t, int p);

/// x^(2p) by repeated squaring.
inline double even_power(double x, int p) {
  double sq = x * x, out = 1.0;
  for (int e = p; e > 0; e >>= 1) {
    if (e & 1) out *= sq;
    sq *= sq;
  }
  return out;
}

/// Per-grid term |det(A)| * exp(-sum_d l_d^(2p)); returns 0 past the exponent clamp.
/// The magnitude is used so a grid that passes through a reflection keeps a
/// non-negative density (its cell count per volume is unchanged).
template <class T>
double density_term(const Transform<T>& g, const std::array<double, 3>& x, int p) {
  double e = 0.0;
  for (int r = 0; r < 3; ++r) {
    const double l = double(g[r * 4]) * x[0] + double(g[r * 4 + 1]) * x[1] + double(g[r * 4 + 2]) * x[2] +
                     double(g[r * 4 + 3]);
    e += even_power(l, p);
  }
  if (!(e <= kExponentClamp)) return 0.0;
  return std::abs(det3(g)) * std::exp(-e);
}

/// Adds scale * d(term)/dG to the top three rows of `grad`.
template <class T>
void accumulate_density_term_grad(const Transform<T>& g, const std::array<double, 3>& x, int p, double scale,
                                  std::array<double, 16>& grad) {
  double l[3], e = 0.0;
  for (int r = 0; r < 3; ++r) {
    l[r] = double(g[r * 4]) * x[0] + double(g[r * 4 + 1]) * x[1] + double(g[r * 4 + 2]) * x[2] +
           double(g[r * 4 + 3]);
    e += even_power(l[r], p);
  }
  if (!(e <= kExponentClamp)) return;
  const double a = g[0], b = g[1], c = g[2];
  const double d = g[4], ee = g[5], f = g[6];
  const double h = g[8], i = g[9], k = g[10];
  const double cof[9] = {ee * k - f * i, -(d * k - f * h), d * i - ee * h,
                         -(b * k - c * i), a * k - c * h, -(a * i - b * h),
                         b * f - c * ee, -(a * f - c * d), a * ee - b * d};
  const double det = a * cof[0] + b * cof[1] + c * cof[2];
  const double sign = det < 0.0 ? -1.0 : 1.0;
  const double ex = std::exp(-e);
  for (int r = 0; r < 3; ++r) {
    // d exp(-E)/d l_r = -exp(-E) * 2p * l_r^(2p-1)
    const double dl = -sign * det * ex * 2.0 * p * even_power(l[r], p - 1) * l[r];
    for (int col = 0; col < 3; ++col) grad[r * 4 + col] += scale * (sign * cof[r * 3 + col] * ex + dl * x[col]);
    grad[r * 4 + 3] += scale * dl;
  }
}

template <class T>
double feature_density(std::span<const Transform<T>> transforms, const std::array<double, 3>& x, int p) {
  double rho = 0.0;
  for (const auto& g : transforms) rho += density_term(g, x, p);
  return rho;
}

/// rho / sum(rho). Throws DensityError when the batch carries no density.
std::vector<double> scale_density(std::span<const double> rho);

/// Exponent applied to log(rho_scaled + eps) when building the target.
inline double target_exponent(double h, double mean_h, double eps = kDensityEps) {
  return (mean_h + eps) / (h + eps);
}

/// rho* = (rho_scaled + eps)^((mean_h + eps) / (h + eps)).
double target_density(double rho_scaled, double h, double mean_h, double eps = kDensityEps);

/// (1/N) sum rho_scaled * log((rho_scaled + eps) / target).
double density_loss(std::span<const double> rho_scaled, std::span<const double> target,
                    double eps = kDensityEps);

}  // namespace apmg
