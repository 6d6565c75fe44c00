#pragma once

// Emission-absorption ray marcher over scalar fields (raw volumes, single
// models, brick decompositions) with a coarse-to-fine progressive mode.

#include <array>
#include <atomic>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <vector>

#include "apmg/decomposition.hpp"
#include "apmg/kernels.hpp"
#include "apmg/model.hpp"
#include "apmg/volume.hpp"

namespace apmg {

class RenderError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

using Rgba = std::array<float, 4>;

struct Camera {
  Vec3d eye{0, 0, 3};
  Vec3d look_at{0, 0, 0};
  Vec3d up{0, 1, 0};
  double fov_deg = 45.0;  // vertical
  int width = 256;
  int height = 256;

  void validate() const;
};

struct Ray {
  Vec3d origin{};
  Vec3d dir{};  // unit length
  bool hit = false;
  double t0 = 0, t1 = 0;  // entry/exit parameters when hit
};

/// Slab test against [-1,1]^3. Returns false on a miss; t0 is clamped to 0
/// when the origin is inside the box.
bool intersect_box(const Vec3d& origin, const Vec3d& dir, double& t0, double& t1);

/// One ray per pixel, row-major, pixel (0,0) at the top-left.
std::vector<Ray> generate_rays(const Camera& cam);

struct ColorPoint {
  double pos = 0;
  double r = 0, g = 0, b = 0;
};

struct OpacityPoint {
  double pos = 0;
  double alpha = 0;
};

struct TransferFunction {
  static constexpr int kLutSize = 256;

  std::vector<ColorPoint> colors;
  std::vector<OpacityPoint> opacity;
  double window_lo = 0.0, window_hi = 1.0;  // relative to the field's value range
  std::array<Rgba, kLutSize> lut{};

  void validate() const;
  /// Samples the piecewise-linear control curves at i/255 into the LUT.
  void bake();

  /// Grayscale ramp with a linear opacity ramp, already baked.
  static TransferFunction ramp();
};

/// Piecewise-linear evaluation of control points (clamped at the ends).
double eval_opacity(std::span<const OpacityPoint> pts, double x);
Vec3d eval_color(std::span<const ColorPoint> pts, double x);

Rgba apply_tf(const TransferFunction& tf, double value, double vmin, double vmax);

struct RenderConfig {
  int samples_per_ray = 256;
  std::size_t batch_size = 1 << 16;  // field queries per evaluation call
  Rgba background{0, 0, 0, 1};
  double early_exit = 0.99;  // values above 1 disable early termination
  double reference_step = 2.0 * 1.7320508075688772 / 255.0;  // voxel diagonal of a 256^3 lattice

  void validate() const;
};

/// Front-to-back compositing of samples taken `step` apart, then over the background.
Rgba composite_ray(std::span<const Rgba> samples, double step, const RenderConfig& cfg);

/// A scalar field over [-1,1]^3.
class Field {
 public:
  virtual ~Field() = default;
  virtual void evaluate(std::span<const Vec3d> points, std::span<float> out) const = 0;
  virtual float vmin() const = 0;
  virtual float vmax() const = 0;
};

class VolumeField : public Field {
 public:
  explicit VolumeField(Volume v) : volume_(std::move(v)) {}
  void evaluate(std::span<const Vec3d> points, std::span<float> out) const override;
  float vmin() const override { return volume_.vmin(); }
  float vmax() const override { return volume_.vmax(); }
  const Volume& volume() const { return volume_; }

 private:
  Volume volume_;
};

class ModelField : public Field {
 public:
  explicit ModelField(Model m, Exec exec = Exec::parallel) : model_(std::move(m)), exec_(exec) {}
  void evaluate(std::span<const Vec3d> points, std::span<float> out) const override;
  float vmin() const override { return model_.vmin; }
  float vmax() const override { return model_.vmax; }
  const Model& model() const { return model_; }

 private:
  Model model_;
  Exec exec_;
};

class DecomposedField : public Field {
 public:
  explicit DecomposedField(DecomposedModel m, Exec exec = Exec::parallel) : model_(std::move(m)), exec_(exec) {}
  void evaluate(std::span<const Vec3d> points, std::span<float> out) const override;
  float vmin() const override { return model_.vmin(); }
  float vmax() const override { return model_.vmax(); }
  const DecomposedModel& model() const { return model_; }

 private:
  DecomposedModel model_;
  Exec exec_;
};

/// Float RGBA image, row-major, top row first.
struct Image {
  int width = 0, height = 0;
  std::vector<float> rgba;

  Image() = default;
  Image(int w, int h) : width(w), height(h), rgba(static_cast<std::size_t>(w) * h * 4, 0.f) {}
  Rgba pixel(int x, int y) const {
    const float* p = rgba.data() + (static_cast<std::size_t>(y) * width + x) * 4;
    return {p[0], p[1], p[2], p[3]};
  }
  void set(int x, int y, const Rgba& c) {
    float* p = rgba.data() + (static_cast<std::size_t>(y) * width + x) * 4;
    std::copy(c.begin(), c.end(), p);
  }
};

struct RenderStats {
  std::uint64_t points = 0;
  double seconds = 0.0;
};

Image render_frame(const Field& field, const Camera& cam, const TransferFunction& tf, const RenderConfig& cfg,
                   RenderStats* stats = nullptr);

/// Renders only the listed pixels (flat indices y*width+x) into `image`.
void render_pixels(const Field& field, const Camera& cam, std::span<const Ray> rays, const TransferFunction& tf,
                   const RenderConfig& cfg, std::span<const std::uint32_t> pixels, Image& image,
                   RenderStats* stats = nullptr);

struct ProgressivePass {
  int level = 0;  // 0 is the coarsest
  int stride = 1;
  std::vector<std::uint32_t> pixels;
};

/// Checkerboard hierarchy: pass k holds the pixels on the stride-2^(K-k)
/// lattice that were not on any coarser lattice.
std::vector<ProgressivePass> progressive_schedule(int width, int height);

/// Bilinear upscale of the stride-`stride` lattice of `image`, with lattice
/// pixels kept exact.
Image upscale_preview(const Image& image, int stride);

/// Called after each completed pass with the preview image. Returning false
/// cancels the render before the next pass.
using PassCallback = std::function<bool(int pass_index, const ProgressivePass& pass, const Image& preview)>;

struct ProgressiveResult {
  Image image;  // fully evaluated only when !cancelled
  bool cancelled = false;
  int passes_done = 0;
  RenderStats stats;
};

ProgressiveResult render_progressive(const Field& field, const Camera& cam, const TransferFunction& tf,
                                     const RenderConfig& cfg, const PassCallback& on_pass);

// Image output.
std::vector<std::uint8_t> to_rgba8(const Image& image);
std::vector<std::uint8_t> encode_png(const Image& image);
void write_png(const std::filesystem::path& path, const Image& image);
/// Raw dump: u32 width, u32 height, then width*height*4 little-endian floats.
void write_float_dump(const std::filesystem::path& path, const Image& image);
Image read_float_dump(const std::filesystem::path& path);
/// PSNR of two float images over all channels, peak 1.
double image_psnr(const Image& a, const Image& b);

// JSON forms.
Camera parse_camera(const std::string& json_text);
std::string camera_to_json(const Camera& cam);
/// Accepts {"colors":[[x,r,g,b],...],"opacity":[[x,a],...],"window":[lo,hi]}
/// or an exported colormap with flat "RGBPoints"/"Points" arrays (optionally
/// wrapped in a one-element list). Returns a baked function.
TransferFunction parse_transfer_function(const std::string& json_text);
std::string transfer_function_to_json(const TransferFunction& tf);

struct RenderRequest {
  Camera camera;
  TransferFunction tf = TransferFunction::ramp();
  RenderConfig config;
  bool progressive = false;
  std::string request_id;
};

RenderRequest parse_render_request(const std::string& json_text);

}  // namespace apmg
