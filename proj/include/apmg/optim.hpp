#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <vector>

namespace apmg {

struct AdamParams {
  double beta1 = 0.9;
  double beta2 = 0.99;
  double eps = 1e-8;
};

/// Moments for one parameter tensor.
struct AdamState {
  std::vector<double> m, v;
  std::int64_t t = 0;

  AdamState() = default;
  explicit AdamState(std::size_t n) : m(n, 0.0), v(n, 0.0) {}
};

/// Bias-corrected Adam update. Entries whose gradient is exactly zero are left
/// alone (parameter and moments), so a zero gradient is always a no-op.
template <class T>
void adam_step(std::span<T> params, std::span<const T> grads, AdamState& state, double lr,
               const AdamParams& hp = {}) {
  if (params.size() != grads.size() || state.m.size() != params.size() || state.v.size() != params.size())
    throw std::invalid_argument("adam_step: parameter, gradient and state shapes differ");
  ++state.t;
  const double c1 = 1.0 - std::pow(hp.beta1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(hp.beta2, static_cast<double>(state.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = static_cast<double>(grads[i]);
    if (g == 0.0) continue;
    double& m = state.m[i];
    double& v = state.v[i];
    m = hp.beta1 * m + (1.0 - hp.beta1) * g;
    v = hp.beta2 * v + (1.0 - hp.beta2) * g * g;
    const double step = lr * (m / c1) / (std::sqrt(v / c2) + hp.eps);
    params[i] = static_cast<T>(static_cast<double>(params[i]) - step);
  }
}

/// Central-difference gradient check over selected coordinates of `params`.
/// `loss` is re-evaluated after each perturbation; `analytic[k]` is the claimed
/// derivative for coordinate `indices[k]`. Returns the maximum of
/// |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
double finite_diff_check(const std::function<double()>& loss, std::span<double> params,
                         std::span<const std::size_t> indices, std::span<const double> analytic, double step);

}  // namespace apmg
