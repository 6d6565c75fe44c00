#include "apmg/render.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>

namespace apmg {

namespace {

Vec3d sub(const Vec3d& a, const Vec3d& b) { return {a[0] - b[0], a[1] - b[1], a[2] - b[2]}; }
Vec3d cross(const Vec3d& a, const Vec3d& b) {
  return {a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]};
}
double norm(const Vec3d& a) { return std::sqrt(a[0] * a[0] + a[1] * a[1] + a[2] * a[2]); }
Vec3d normalize(const Vec3d& a) {
  const double n = norm(a);
  return {a[0] / n, a[1] / n, a[2] / n};
}

template <class P>
void check_sorted(const std::vector<P>& pts, const char* what) {
  if (pts.empty()) throw RenderError(std::string(what) + " control points are empty");
  for (std::size_t i = 0; i < pts.size(); ++i) {
    if (!(pts[i].pos >= 0.0 && pts[i].pos <= 1.0))
      throw RenderError(std::string(what) + " control point position outside [0,1]");
    if (i > 0 && pts[i].pos < pts[i - 1].pos) throw RenderError(std::string(what) + " control points are not sorted");
  }
}

// Segment lookup shared by both curve kinds: index of the left point and the blend factor.
template <class P>
std::pair<std::size_t, double> locate(std::span<const P> pts, double x) {
  if (x <= pts.front().pos) return {0, 0.0};
  if (x >= pts.back().pos) return {pts.size() - 1, 0.0};
  std::size_t i = 0;
  while (i + 1 < pts.size() && pts[i + 1].pos <= x) ++i;
  if (i + 1 == pts.size()) return {i, 0.0};
  const double span = pts[i + 1].pos - pts[i].pos;
  return {i, span > 0.0 ? (x - pts[i].pos) / span : 0.0};
}

}  // namespace

void Camera::validate() const {
  const Vec3d view = sub(look_at, eye);
  if (!(norm(view) > 0.0)) throw RenderError("camera eye and look_at coincide");
  const Vec3d side = cross(view, up);
  if (!(norm(side) > 1e-12 * norm(view) * std::max(norm(up), 1e-300)))
    throw RenderError("camera up vector is parallel to the view direction");
  if (!(fov_deg > 0.0 && fov_deg < 180.0)) throw RenderError("camera fov must be in (0,180)");
  if (width < 1 || height < 1) throw RenderError("image size must be positive");
}

bool intersect_box(const Vec3d& o, const Vec3d& d, double& t0, double& t1) {
  double lo = -std::numeric_limits<double>::infinity();
  double hi = std::numeric_limits<double>::infinity();
  for (int a = 0; a < 3; ++a) {
    if (d[a] == 0.0) {
      if (o[a] < -1.0 || o[a] > 1.0) return false;
      continue;
    }
    double ta = (-1.0 - o[a]) / d[a];
    double tb = (1.0 - o[a]) / d[a];
    if (ta > tb) std::swap(ta, tb);
    lo = std::max(lo, ta);
    hi = std::min(hi, tb);
  }
  lo = std::max(lo, 0.0);
  if (!(hi > lo)) return false;
  t0 = lo;
  t1 = hi;
  return true;
}

std::vector<Ray> generate_rays(const Camera& cam) {
  cam.validate();
  const Vec3d f = normalize(sub(cam.look_at, cam.eye));
  const Vec3d r = normalize(cross(f, cam.up));
  const Vec3d u = cross(r, f);
  const double th = std::tan(cam.fov_deg * M_PI / 360.0);
  const double aspect = double(cam.width) / cam.height;
  std::vector<Ray> rays(static_cast<std::size_t>(cam.width) * cam.height);
  for (int y = 0; y < cam.height; ++y)
    for (int x = 0; x < cam.width; ++x) {
      const double px = (2.0 * (x + 0.5) / cam.width - 1.0) * th * aspect;
      const double py = (1.0 - 2.0 * (y + 0.5) / cam.height) * th;
      Ray& ray = rays[static_cast<std::size_t>(y) * cam.width + x];
      ray.origin = cam.eye;
      ray.dir = normalize({f[0] + px * r[0] + py * u[0], f[1] + px * r[1] + py * u[1], f[2] + px * r[2] + py * u[2]});
      ray.hit = intersect_box(ray.origin, ray.dir, ray.t0, ray.t1);
    }
  return rays;
}

// ---------------------------------------------------------------------------
// Transfer function

double eval_opacity(std::span<const OpacityPoint> pts, double x) {
  const auto [i, t] = locate(pts, x);
  if (t == 0.0) return pts[i].alpha;
  return pts[i].alpha + t * (pts[i + 1].alpha - pts[i].alpha);
}

Vec3d eval_color(std::span<const ColorPoint> pts, double x) {
  const auto [i, t] = locate(pts, x);
  const ColorPoint& a = pts[i];
  if (t == 0.0) return {a.r, a.g, a.b};
  const ColorPoint& b = pts[i + 1];
  return {a.r + t * (b.r - a.r), a.g + t * (b.g - a.g), a.b + t * (b.b - a.b)};
}

void TransferFunction::validate() const {
  check_sorted(colors, "color");
  check_sorted(opacity, "opacity");
  for (const auto& p : opacity)
    if (!(p.alpha >= 0.0 && p.alpha <= 1.0)) throw RenderError("opacity values must lie in [0,1]");
  if (!(window_lo >= 0.0 && window_hi <= 1.0 && window_lo < window_hi))
    throw RenderError("transfer function window must satisfy 0 <= lo < hi <= 1");
}

void TransferFunction::bake() {
  validate();
  for (int i = 0; i < kLutSize; ++i) {
    const double x = double(i) / (kLutSize - 1);
    const Vec3d c = eval_color(colors, x);
    lut[i] = {float(c[0]), float(c[1]), float(c[2]), float(eval_opacity(opacity, x))};
  }
}

TransferFunction TransferFunction::ramp() {
  TransferFunction tf;
  tf.colors = {{0.0, 0.0, 0.0, 0.0}, {1.0, 1.0, 1.0, 1.0}};
  tf.opacity = {{0.0, 0.0}, {1.0, 1.0}};
  tf.bake();
  return tf;
}

Rgba apply_tf(const TransferFunction& tf, double value, double vmin, double vmax) {
  double t = vmax > vmin ? (value - vmin) / (vmax - vmin) : 0.0;
  t = (t - tf.window_lo) / (tf.window_hi - tf.window_lo);
  t = std::clamp(t, 0.0, 1.0);
  const double x = t * (TransferFunction::kLutSize - 1);
  const int i = std::min(static_cast<int>(x), TransferFunction::kLutSize - 2);
  const float f = static_cast<float>(x - i);
  const Rgba& a = tf.lut[i];
  const Rgba& b = tf.lut[i + 1];
  return {a[0] + f * (b[0] - a[0]), a[1] + f * (b[1] - a[1]), a[2] + f * (b[2] - a[2]), a[3] + f * (b[3] - a[3])};
}

// ---------------------------------------------------------------------------
// Compositing

void RenderConfig::validate() const {
  if (samples_per_ray < 1) throw RenderError("samples per ray must be at least 1");
  if (batch_size < 1) throw RenderError("batch size must be at least 1");
  if (!(reference_step > 0.0)) throw RenderError("reference step must be positive");
}

Rgba composite_ray(std::span<const Rgba> samples, double step, const RenderConfig& cfg) {
  const double ratio = step / cfg.reference_step;
  double c[3] = {0, 0, 0};
  double acc = 0.0;
  for (const Rgba& s : samples) {
    const double a = std::clamp(double(s[3]), 0.0, 1.0);
    if (a == 0.0) continue;
    const double ac = a >= 1.0 ? 1.0 : 1.0 - std::pow(1.0 - a, ratio);
    const double w = (1.0 - acc) * ac;
    for (int k = 0; k < 3; ++k) c[k] += w * s[k];
    acc += w;
    if (acc >= cfg.early_exit) break;
  }
  const double rest = 1.0 - acc;
  return {float(c[0] + rest * cfg.background[0]), float(c[1] + rest * cfg.background[1]),
          float(c[2] + rest * cfg.background[2]), float(acc + rest * cfg.background[3])};
}

// ---------------------------------------------------------------------------
// Fields

void VolumeField::evaluate(std::span<const Vec3d> points, std::span<float> out) const {
  const std::ptrdiff_t n = static_cast<std::ptrdiff_t>(points.size());
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < n; ++i) out[i] = volume_.sample_clamped(points[i]);
}

void ModelField::evaluate(std::span<const Vec3d> points, std::span<float> out) const {
  std::vector<Vec3f> pf(points.size());
  for (std::size_t i = 0; i < points.size(); ++i)
    pf[i] = {float(points[i][0]), float(points[i][1]), float(points[i][2])};
  forward_batch<float>(model_, pf, out, exec_);
}

void DecomposedField::evaluate(std::span<const Vec3d> points, std::span<float> out) const {
  model_.infer(points, out, exec_);
}

// ---------------------------------------------------------------------------
// Frames

void render_pixels(const Field& field, const Camera& cam, std::span<const Ray> rays, const TransferFunction& tf,
                   const RenderConfig& cfg, std::span<const std::uint32_t> pixels, Image& image,
                   RenderStats* stats) {
  cfg.validate();
  if (image.width != cam.width || image.height != cam.height) throw RenderError("image size does not match camera");
  const auto t_start = std::chrono::steady_clock::now();
  const std::size_t S = static_cast<std::size_t>(cfg.samples_per_ray);
  const double vmin = field.vmin(), vmax = field.vmax();

  std::vector<std::uint32_t> hit;
  for (std::uint32_t p : pixels) {
    if (rays[p].hit)
      hit.push_back(p);
    else
      image.set(p % cam.width, p / cam.width, cfg.background);
  }

  // Whole rays are grouped so one group's samples fit a batch where possible;
  // field calls never exceed batch_size points.
  const std::size_t group = std::max<std::size_t>(1, cfg.batch_size / S);
  std::vector<Vec3d> pts;
  std::vector<float> vals;
  std::vector<Rgba> colors;
  std::uint64_t evaluated = 0;
  for (std::size_t g0 = 0; g0 < hit.size(); g0 += group) {
    const std::size_t g1 = std::min(hit.size(), g0 + group);
    const std::size_t count = (g1 - g0) * S;
    pts.resize(count);
    vals.resize(count);
    for (std::size_t k = g0; k < g1; ++k) {
      const Ray& r = rays[hit[k]];
      const double step = (r.t1 - r.t0) / S;
      Vec3d* out = pts.data() + (k - g0) * S;
      for (std::size_t s = 0; s < S; ++s) {
        const double t = r.t0 + (s + 0.5) * step;
        for (int a = 0; a < 3; ++a) out[s][a] = std::clamp(r.origin[a] + t * r.dir[a], -1.0, 1.0);
      }
    }
    for (std::size_t b = 0; b < count; b += cfg.batch_size) {
      const std::size_t e = std::min(count, b + cfg.batch_size);
      field.evaluate(std::span<const Vec3d>(pts).subspan(b, e - b), std::span<float>(vals).subspan(b, e - b));
    }
    evaluated += count;
    const std::ptrdiff_t nrays = static_cast<std::ptrdiff_t>(g1 - g0);
#pragma omp parallel for schedule(static) private(colors)
    for (std::ptrdiff_t k = 0; k < nrays; ++k) {
      colors.resize(S);
      const float* v = vals.data() + k * S;
      for (std::size_t s = 0; s < S; ++s) colors[s] = apply_tf(tf, v[s], vmin, vmax);
      const std::uint32_t p = hit[g0 + k];
      const Ray& r = rays[p];
      image.set(p % cam.width, p / cam.width, composite_ray(colors, (r.t1 - r.t0) / S, cfg));
    }
  }
  if (stats) {
    stats->points += evaluated;
    stats->seconds += std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
  }
}

Image render_frame(const Field& field, const Camera& cam, const TransferFunction& tf, const RenderConfig& cfg,
                   RenderStats* stats) {
  const std::vector<Ray> rays = generate_rays(cam);
  std::vector<std::uint32_t> all(rays.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = static_cast<std::uint32_t>(i);
  Image img(cam.width, cam.height);
  render_pixels(field, cam, rays, tf, cfg, all, img, stats);
  return img;
}

// ---------------------------------------------------------------------------
// Progressive rendering

std::vector<ProgressivePass> progressive_schedule(int width, int height) {
  if (width < 1 || height < 1) throw RenderError("image size must be positive");
  int levels = 0;
  while ((1 << levels) < std::max(width, height)) ++levels;
  std::vector<ProgressivePass> passes;
  for (int k = 0; k <= levels; ++k) {
    ProgressivePass pass;
    pass.level = k;
    pass.stride = 1 << (levels - k);
    const int s = pass.stride, coarse = 2 * s;
    for (int y = 0; y < height; y += s)
      for (int x = 0; x < width; x += s)
        if (k == 0 || x % coarse != 0 || y % coarse != 0)
          pass.pixels.push_back(static_cast<std::uint32_t>(y) * width + x);
    passes.push_back(std::move(pass));
  }
  return passes;
}

Image upscale_preview(const Image& src, int stride) {
  Image out(src.width, src.height);
  const int lx = ((src.width - 1) / stride) * stride;
  const int ly = ((src.height - 1) / stride) * stride;
  for (int y = 0; y < src.height; ++y) {
    const int y0 = std::min((y / stride) * stride, ly), y1 = std::min(y0 + stride, ly);
    const float fy = y1 == y0 ? 0.f : float(y - y0) / stride;
    for (int x = 0; x < src.width; ++x) {
      const int x0 = std::min((x / stride) * stride, lx), x1 = std::min(x0 + stride, lx);
      const float fx = x1 == x0 ? 0.f : float(x - x0) / stride;
      if (fx == 0.f && fy == 0.f) {
        out.set(x, y, src.pixel(x0, y0));
        continue;
      }
      const Rgba a = src.pixel(x0, y0), b = src.pixel(x1, y0), c = src.pixel(x0, y1), d = src.pixel(x1, y1);
      Rgba v;
      for (int k = 0; k < 4; ++k)
        v[k] = (1 - fy) * ((1 - fx) * a[k] + fx * b[k]) + fy * ((1 - fx) * c[k] + fx * d[k]);
      out.set(x, y, v);
    }
  }
  return out;
}

ProgressiveResult render_progressive(const Field& field, const Camera& cam, const TransferFunction& tf,
                                     const RenderConfig& cfg, const PassCallback& on_pass) {
  const std::vector<Ray> rays = generate_rays(cam);
  const auto passes = progressive_schedule(cam.width, cam.height);
  ProgressiveResult res;
  res.image = Image(cam.width, cam.height);
  for (std::size_t k = 0; k < passes.size(); ++k) {
    render_pixels(field, cam, rays, tf, cfg, passes[k].pixels, res.image, &res.stats);
    res.passes_done = static_cast<int>(k) + 1;
    if (!on_pass) continue;
    Image preview = upscale_preview(res.image, passes[k].stride);
    const bool go_on = on_pass(static_cast<int>(k), passes[k], preview);
    if (!go_on && k + 1 < passes.size()) {
      res.cancelled = true;
      break;
    }
  }
  return res;
}

}  // namespace apmg
