#include "apmg/density.hpp"

namespace apmg {

double flat_top(double t, int p) {
  if (p < 1) throw DensityError("flat-top strength must be >= 1");
  return std::exp(-0.5 * even_power(t, p));
}

std::vector<double> scale_density(std::span<const double> rho) {
  double sum = 0.0;
  for (double r : rho) sum += r;
  if (!(sum > 0.0)) throw DensityError("feature density is zero over the whole batch");
  std::vector<double> out(rho.size());
  for (std::size_t i = 0; i < rho.size(); ++i) out[i] = rho[i] / sum;
  return out;
}

double target_density(double rho_scaled, double h, double mean_h, double eps) {
  return std::pow(rho_scaled + eps, target_exponent(h, mean_h, eps));
}

double density_loss(std::span<const double> rho_scaled, std::span<const double> target, double eps) {
  if (rho_scaled.size() != target.size() || rho_scaled.empty())
    throw DensityError("density loss needs matching non-empty vectors");
  double acc = 0.0;
  for (std::size_t i = 0; i < rho_scaled.size(); ++i)
    acc += rho_scaled[i] * (std::log(rho_scaled[i] + eps) - std::log(target[i]));
  return acc / static_cast<double>(rho_scaled.size());
}

}  // namespace apmg
