#pragma once

// Batched model kernels. Every kernel takes an Exec policy: Exec::serial runs
// the loops on the calling thread, Exec::parallel spreads them over OpenMP
// threads. Work is split into fixed-size chunks whose partial results are
// reduced in chunk order, so both policies produce bit-identical output for
// any thread count.

#include <algorithm>
#include <span>
#include <vector>

#include "apmg/density.hpp"
#include "apmg/model.hpp"

namespace apmg {

enum class Exec { serial, parallel };

inline constexpr std::size_t kChunk = 256;

template <class T>
struct GradientSet {
  std::vector<T> d_grids;
  std::vector<T> d_w1, d_w2, d_w3;
  std::vector<Transform<T>> d_transforms;  // bottom rows stay zero

  static GradientSet zeros_like(const BasicModel<T>& m) {
    GradientSet g;
    g.d_grids.assign(m.grids.size(), T(0));
    g.d_w1.assign(m.w1.size(), T(0));
    g.d_w2.assign(m.w2.size(), T(0));
    g.d_w3.assign(m.w3.size(), T(0));
    g.d_transforms.assign(m.transforms.size(), Transform<T>{});
    return g;
  }
};

namespace detail {

/// Decoder weights with transposed copies so per-point products run as
/// contiguous axpy sweeps in the same accumulation order as decoder_raw().
template <class T>
struct PackedDecoder {
  explicit PackedDecoder(const BasicModel<T>& m)
      : n_in(m.feature_dim()), w1(m.w1.data()), w2(m.w2.data()), w3(m.w3.data()), vmin(m.vmin), vmax(m.vmax) {
    w1t.resize(static_cast<std::size_t>(n_in) * kHidden);
    for (int j = 0; j < kHidden; ++j)
      for (int k = 0; k < n_in; ++k) w1t[static_cast<std::size_t>(k) * kHidden + j] = m.w1[j * n_in + k];
    w2t.resize(kHidden * kHidden);
    for (int j = 0; j < kHidden; ++j)
      for (int k = 0; k < kHidden; ++k) w2t[k * kHidden + j] = m.w2[j * kHidden + k];
  }

  T forward(const T* y, DecoderTrace<T>& t) const {
    std::fill(t.h1.begin(), t.h1.end(), T(0));
    for (int k = 0; k < n_in; ++k) {
      const T yk = y[k];
      if (yk == T(0)) continue;
      const T* col = w1t.data() + static_cast<std::size_t>(k) * kHidden;
      for (int j = 0; j < kHidden; ++j) t.h1[j] += yk * col[j];
    }
    for (int j = 0; j < kHidden; ++j) t.a1[j] = t.h1[j] > T(0) ? t.h1[j] : T(0);
    std::fill(t.h2.begin(), t.h2.end(), T(0));
    for (int k = 0; k < kHidden; ++k) {
      const T ak = t.a1[k];
      if (ak == T(0)) continue;
      const T* col = w2t.data() + k * kHidden;
      for (int j = 0; j < kHidden; ++j) t.h2[j] += ak * col[j];
    }
    for (int j = 0; j < kHidden; ++j) t.a2[j] = t.h2[j] > T(0) ? t.h2[j] : T(0);
    T out = 0;
    for (int j = 0; j < kHidden; ++j) out += w3[j] * t.a2[j];
    t.raw = out;
    return out;
  }

  /// Accumulates decoder gradients for d(loss)/d(raw) and writes d(loss)/dy.
  void backward(const T* y, const DecoderTrace<T>& t, T d_raw, T* dw1, T* dw2, T* dw3, T* dy) const {
    std::array<T, kHidden> dh2{}, da1{}, dh1{};
    for (int j = 0; j < kHidden; ++j) {
      dw3[j] += d_raw * t.a2[j];
      dh2[j] = t.h2[j] > T(0) ? w3[j] * d_raw : T(0);
    }
    for (int j = 0; j < kHidden; ++j) {
      const T g = dh2[j];
      if (g == T(0)) continue;
      T* row = dw2 + j * kHidden;
      const T* wrow = w2 + j * kHidden;
      for (int k = 0; k < kHidden; ++k) {
        row[k] += g * t.a1[k];
        da1[k] += g * wrow[k];
      }
    }
    for (int k = 0; k < kHidden; ++k) dh1[k] = t.h1[k] > T(0) ? da1[k] : T(0);
    std::fill(dy, dy + n_in, T(0));
    for (int j = 0; j < kHidden; ++j) {
      const T g = dh1[j];
      if (g == T(0)) continue;
      T* row = dw1 + static_cast<std::size_t>(j) * n_in;
      const T* wrow = w1 + static_cast<std::size_t>(j) * n_in;
      for (int k = 0; k < n_in; ++k) {
        row[k] += g * y[k];
        dy[k] += g * wrow[k];
      }
    }
  }

  int n_in;
  const T* w1;
  const T* w2;
  const T* w3;
  T vmin, vmax;
  std::vector<T> w1t, w2t;
};

inline std::size_t chunk_count(std::size_t n) { return (n + kChunk - 1) / kChunk; }

}  // namespace detail

/// Evaluates f(x) for every coordinate.
template <class T>
void forward_batch(const BasicModel<T>& model, std::span<const std::array<T, 3>> coords, std::span<T> out,
                   Exec exec = Exec::parallel) {
  const detail::PackedDecoder<T> dec(model);
  const int n_in = model.feature_dim();
  const std::ptrdiff_t n = static_cast<std::ptrdiff_t>(coords.size());
  const bool par = exec == Exec::parallel;
#pragma omp parallel if (par)
  {
    std::vector<T> y(n_in);
    DecoderTrace<T> trace;
#pragma omp for schedule(static)
    for (std::ptrdiff_t i = 0; i < n; ++i) {
      encode(model, coords[i], std::span<T>(y));
      out[i] = scale_output(model, dec.forward(y.data(), trace));
    }
  }
}

/// Mean squared reconstruction error and its gradient with respect to the
/// feature grids and decoder weights. Transform gradients are left untouched.
/// `sq_errors`, when non-empty, receives the per-point squared errors.
template <class T>
T recon_loss_and_grads(const BasicModel<T>& model, std::span<const std::array<T, 3>> coords,
                       std::span<const T> targets, GradientSet<T>& grads, std::span<T> sq_errors = {},
                       Exec exec = Exec::parallel) {
  const std::size_t n = coords.size();
  if (n == 0) throw ModelError("reconstruction loss needs a non-empty batch");
  if (targets.size() != n) throw ModelError("coordinate and target counts differ");
  if (!sq_errors.empty() && sq_errors.size() != n) throw ModelError("error buffer has the wrong length");

  const ModelConfig& cfg = model.config;
  const int n_in = model.feature_dim();
  const int channels = cfg.channels;
  const detail::PackedDecoder<T> dec(model);
  const std::size_t n_w1 = model.w1.size(), n_w2 = model.w2.size(), n_w3 = model.w3.size();
  const std::size_t part = n_w1 + n_w2 + n_w3 + 1;
  const std::size_t chunks = detail::chunk_count(n);
  std::vector<T> partials(chunks * part, T(0));
  std::vector<T> dy_all(n * n_in);
  const T scale = T(2) / static_cast<T>(n);
  const T range = model.vmax - model.vmin;
  const bool par = exec == Exec::parallel;

#pragma omp parallel if (par)
  {
    std::vector<T> y(n_in);
    DecoderTrace<T> trace;
#pragma omp for schedule(static)
    for (std::ptrdiff_t c = 0; c < static_cast<std::ptrdiff_t>(chunks); ++c) {
      T* buf = partials.data() + c * part;
      T* dw1 = buf;
      T* dw2 = dw1 + n_w1;
      T* dw3 = dw2 + n_w2;
      T& loss = dw3[n_w3];
      const std::size_t end = std::min(n, (c + 1) * kChunk);
      for (std::size_t i = c * kChunk; i < end; ++i) {
        encode(model, coords[i], std::span<T>(y));
        const T out = scale_output(model, dec.forward(y.data(), trace));
        const T err = out - targets[i];
        loss += err * err;
        if (!sq_errors.empty()) sq_errors[i] = err * err;
        dec.backward(y.data(), trace, scale * err * range, dw1, dw2, dw3, dy_all.data() + i * n_in);
      }
    }
  }

  T loss = 0;
  for (std::size_t c = 0; c < chunks; ++c) {
    const T* buf = partials.data() + c * part;
    for (std::size_t k = 0; k < n_w1; ++k) grads.d_w1[k] += buf[k];
    for (std::size_t k = 0; k < n_w2; ++k) grads.d_w2[k] += buf[n_w1 + k];
    for (std::size_t k = 0; k < n_w3; ++k) grads.d_w3[k] += buf[n_w1 + n_w2 + k];
    loss += buf[part - 1];
  }

  // Scatter feature gradients; each grid owns a disjoint slab of d_grids.
  const auto off = corner_offsets(cfg);
  const std::size_t cstride = cfg.voxels_per_channel();
  const std::size_t gstride = cstride * channels;
#pragma omp parallel for schedule(static) if (par)
  for (int m = 0; m < cfg.grids; ++m) {
    T* dgrid = grads.d_grids.data() + m * gstride;
    for (std::size_t i = 0; i < n; ++i) {
      const GridCell<T> cell = locate_cell(cfg, to_local(model.transforms[m], coords[i]));
      if (!cell.inside) continue;
      const auto w = corner_weights(cell);
      const T* dy = dy_all.data() + i * n_in + m * channels;
      for (int ch = 0; ch < channels; ++ch) {
        if (dy[ch] == T(0)) continue;
        T* g = dgrid + ch * cstride + cell.base;
        for (int k = 0; k < 8; ++k) g[off[k]] += w[k] * dy[ch];
      }
    }
  }
  return loss / static_cast<T>(n);
}

/// Feature-density loss against the error-warped (detached) target, and its
/// gradient with respect to the top three rows of every grid transform.
/// `errors` are per-point errors h(x) >= 0.
template <class T>
double density_loss_and_grads(const BasicModel<T>& model, std::span<const std::array<T, 3>> coords,
                              std::span<const T> errors, GradientSet<T>& grads, Exec exec = Exec::parallel,
                              double eps = kDensityEps) {
  const std::size_t n = coords.size();
  if (n < 2) throw DensityError("density loss needs at least two points");
  if (errors.size() != n) throw DensityError("coordinate and error counts differ");
  const int p = model.config.flat_top_p;
  const bool par = exec == Exec::parallel;
  const std::span<const Transform<T>> transforms(model.transforms);

  std::vector<double> rho(n);
#pragma omp parallel for schedule(static) if (par)
  for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(n); ++i) {
    const std::array<double, 3> x{double(coords[i][0]), double(coords[i][1]), double(coords[i][2])};
    rho[i] = feature_density(transforms, x, p);
  }
  double sum = 0.0, mean_h = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    sum += rho[i];
    mean_h += double(errors[i]);
  }
  if (!(sum > 0.0)) throw DensityError("feature density is zero over the whole batch");
  mean_h /= static_cast<double>(n);

  // dL/ds_i, with L = (1/N) sum s_i (1 - r_i) log(s_i + eps) and r_i detached.
  std::vector<double> g(n);
  double loss = 0.0, gs = 0.0;
  const double inv_n = 1.0 / static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double s = rho[i] / sum;
    const double r = target_exponent(double(errors[i]), mean_h, eps);
    const double log_s = std::log(s + eps);
    loss += s * (log_s - r * log_s);
    g[i] = inv_n * ((log_s - r * log_s) + s / (s + eps));
    gs += g[i] * s;
  }
  loss *= inv_n;
  // Chain through the batch normalizer: dL/drho_j = (g_j - sum_i g_i s_i) / S.
  for (std::size_t i = 0; i < n; ++i) g[i] = (g[i] - gs) / sum;

#pragma omp parallel for schedule(static) if (par)
  for (int m = 0; m < model.config.grids; ++m) {
    std::array<double, 16> acc{};
    for (std::size_t i = 0; i < n; ++i) {
      const std::array<double, 3> x{double(coords[i][0]), double(coords[i][1]), double(coords[i][2])};
      accumulate_density_term_grad(model.transforms[m], x, p, g[i], acc);
    }
    for (int k = 0; k < 12; ++k) grads.d_transforms[m][k] += static_cast<T>(acc[k]);
  }
  return loss;
}

}  // namespace apmg
