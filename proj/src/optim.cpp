#include "apmg/optim.hpp"

#include <algorithm>

namespace apmg {

double finite_diff_check(const std::function<double()>& loss, std::span<double> params,
                         std::span<const std::size_t> indices, std::span<const double> analytic, double step) {
  if (!(step > 0.0)) throw std::invalid_argument("finite-difference step must be positive");
  if (indices.size() != analytic.size()) throw std::invalid_argument("index and gradient counts differ");
  double worst = 0.0;
  for (std::size_t k = 0; k < indices.size(); ++k) {
    double& p = params[indices[k]];
    const double saved = p;
    p = saved + step;
    const double up = loss();
    p = saved - step;
    const double down = loss();
    p = saved;
    const double numeric = (up - down) / (2.0 * step);
    const double denom = std::max({std::abs(analytic[k]), std::abs(numeric), 1e-8});
    worst = std::max(worst, std::abs(analytic[k] - numeric) / denom);
  }
  return worst;
}

}  // namespace apmg
