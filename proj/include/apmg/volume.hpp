#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace apmg {

using Vec3f = std::array<float, 3>;
using Vec3d = std::array<double, 3>;
using Index3 = std::array<int, 3>;

class VolumeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Sidecar header of a raw volume: `{dims:[W,H,D], dtype:"f32", endianness:"little"}`.
struct VolumeHeader {
  Index3 dims{0, 0, 0};
  std::string dtype = "f32";
  std::string endianness = "little";
  std::optional<std::string> name;

  std::size_t voxel_count() const {
    return static_cast<std::size_t>(dims[0]) * dims[1] * dims[2];
  }
  std::size_t byte_length() const { return voxel_count() * sizeof(float); }
};

VolumeHeader read_header(const std::filesystem::path& path);
void write_header(const std::filesystem::path& path, const VolumeHeader& header);
VolumeHeader parse_header(const std::string& json_text);

/// Inclusive voxel index box.
struct Extent {
  Index3 lo{0, 0, 0};
  Index3 hi{0, 0, 0};

  Index3 size() const { return {hi[0] - lo[0] + 1, hi[1] - lo[1] + 1, hi[2] - lo[2] + 1}; }
  bool contains(const Index3& v) const {
    for (int d = 0; d < 3; ++d)
      if (v[d] < lo[d] || v[d] > hi[d]) return false;
    return true;
  }
  friend bool operator==(const Extent&, const Extent&) = default;
};

/// Dense scalar field on a corner-aligned lattice spanning [-1,1]^3, x fastest.
class Volume {
 public:
  Volume() = default;
  Volume(Index3 dims, std::vector<float> data);

  const Index3& dims() const { return dims_; }
  int width() const { return dims_[0]; }
  int height() const { return dims_[1]; }
  int depth() const { return dims_[2]; }
  std::size_t size() const { return data_.size(); }
  std::span<const float> data() const { return data_; }
  float vmin() const { return vmin_; }
  float vmax() const { return vmax_; }

  std::size_t index(int x, int y, int z) const {
    return static_cast<std::size_t>(x) +
           static_cast<std::size_t>(dims_[0]) * (static_cast<std::size_t>(y) +
                                                 static_cast<std::size_t>(dims_[1]) * z);
  }
  float at(int x, int y, int z) const { return data_[index(x, y, z)]; }

  /// Normalized coordinate of lattice vertex i along axis d.
  double vertex_coord(int axis, int i) const;

  /// Trilinear sample at a point of [-1,1]^3. Throws on out-of-domain input.
  float sample(const Vec3d& x) const;
  float sample(const Vec3f& x) const { return sample(Vec3d{x[0], x[1], x[2]}); }
  /// Same as sample() but clamps the coordinate into the domain first.
  float sample_clamped(const Vec3d& x) const;

 private:
  float sample_unchecked(const Vec3d& x) const;

  Index3 dims_{0, 0, 0};
  std::vector<float> data_;
  float vmin_ = 0.f;
  float vmax_ = 0.f;
};

Volume load_volume(const std::filesystem::path& raw_path, const VolumeHeader& header);
Volume load_volume(const std::filesystem::path& raw_path, const std::filesystem::path& header_path);
void save_volume(const std::filesystem::path& raw_path, const std::filesystem::path& header_path,
                 const Volume& vol, std::optional<std::string> name = std::nullopt);

Volume crop(const Volume& vol, const Extent& e);

struct Blob {
  Vec3d center{0, 0, 0};
  Vec3d sigma{0.1, 0.1, 0.1};
  double amplitude = 1.0;
};

struct SynthSpec {
  Index3 dims{32, 32, 32};
  std::vector<Blob> blobs;
  double background = 0.0;
  /// Additional blobs drawn from `seed` (centers in [-0.8,0.8], sigma in [0.05,0.3]).
  int random_blobs = 0;
  std::uint64_t seed = 0;
};

/// Sum of anisotropic gaussian blobs evaluated at lattice vertices.
Volume synth_volume(const SynthSpec& spec);

}  // namespace apmg
