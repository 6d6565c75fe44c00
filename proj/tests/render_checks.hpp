#pragma once

// Renderer properties shared by the unit tests and the acceptance runner.

#include <cmath>

#include "apmg/render.hpp"
#include "helpers.hpp"

namespace testing {

inline apmg::TransferFunction constant_tf(apmg::Vec3d color, double alpha) {
  apmg::TransferFunction tf;
  tf.colors = {{0.0, color[0], color[1], color[2]}, {1.0, color[0], color[1], color[2]}};
  tf.opacity = {{0.0, alpha}, {1.0, alpha}};
  tf.bake();
  return tf;
}

/// Slab intersection written out per axis, independent of the library version.
inline bool slab(const apmg::Vec3d& o, const apmg::Vec3d& d, double& t0, double& t1) {
  t0 = 0.0;
  t1 = 1e300;
  for (int a = 0; a < 3; ++a) {
    if (std::abs(d[a]) < 1e-300) {
      if (std::abs(o[a]) > 1.0) return false;
      continue;
    }
    const double inv = 1.0 / d[a];
    double lo = (-1.0 - o[a]) * inv, hi = (1.0 - o[a]) * inv;
    if (lo > hi) std::swap(lo, hi);
    t0 = std::max(t0, lo);
    t1 = std::min(t1, hi);
  }
  return t1 > t0;
}

/// Largest per-channel deviation of a constant-field render from the
/// closed-form front-to-back value (corrected alpha accumulated n times,
/// stopping at the early-exit threshold, then over the background).
inline double constant_field_error(const apmg::Camera& cam, const apmg::RenderConfig& cfg, apmg::Vec3d color,
                                   double alpha) {
  const apmg::Volume flat({6, 6, 6}, std::vector<float>(216, 0.75f));
  const apmg::VolumeField field(flat);
  const auto tf = constant_tf(color, alpha);
  const apmg::Image img = apmg::render_frame(field, cam, tf, cfg);
  const auto rays = apmg::generate_rays(cam);
  double worst = 0.0;
  for (int y = 0; y < cam.height; ++y)
    for (int x = 0; x < cam.width; ++x) {
      const auto& r = rays[static_cast<std::size_t>(y) * cam.width + x];
      double t0, t1;
      std::array<double, 4> expect;
      if (!slab(r.origin, r.dir, t0, t1)) {
        for (int k = 0; k < 4; ++k) expect[k] = cfg.background[k];
      } else {
        const int n = cfg.samples_per_ray;
        const double ac = 1.0 - std::pow(1.0 - alpha, (t1 - t0) / n / cfg.reference_step);
        // Accumulated opacity after k samples is 1 - (1 - ac)^k.
        int k = 0;
        double acc = 0.0;
        while (k < n && acc < cfg.early_exit) acc = 1.0 - std::pow(1.0 - ac, ++k);
        for (int c = 0; c < 3; ++c) expect[c] = color[c] * acc + (1.0 - acc) * cfg.background[c];
        expect[3] = acc + (1.0 - acc) * cfg.background[3];
      }
      const auto px = img.pixel(x, y);
      for (int c = 0; c < 4; ++c) worst = std::max(worst, std::abs(double(px[c]) - expect[c]));
    }
  return worst;
}

inline apmg::Volume textured_volume(apmg::Index3 dims = {20, 18, 16}) {
  apmg::SynthSpec spec;
  spec.dims = dims;
  spec.random_blobs = 5;
  spec.seed = 3;
  return apmg::synth_volume(spec);
}

inline apmg::Camera oblique_camera(int w, int h) {
  apmg::Camera c;
  c.eye = {2.2, 1.4, 2.6};
  c.look_at = {0.05, -0.1, 0.0};
  c.up = {0, 1, 0};
  c.fov_deg = 40;
  c.width = w;
  c.height = h;
  return c;
}

}  // namespace testing
