#include "apmg/volume.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <random>

#include <json.hpp>

namespace apmg {

namespace {

using json = nlohmann::json;

void compute_range(std::span<const float> data, float& lo, float& hi) {
  lo = data.empty() ? 0.f : data[0];
  hi = lo;
  for (float v : data) {
    if (!std::isfinite(v)) throw VolumeError("volume contains NaN or Inf");
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
}

double lattice_index(double a, int n) { return (a + 1.0) * 0.5 * (n - 1); }

}  // namespace

VolumeHeader parse_header(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::exception& e) {
    throw VolumeError(std::string("malformed volume header: ") + e.what());
  }
  VolumeHeader h;
  if (!j.contains("dims") || !j["dims"].is_array() || j["dims"].size() != 3)
    throw VolumeError("volume header needs dims:[W,H,D]");
  for (int d = 0; d < 3; ++d) {
    h.dims[d] = j["dims"][d].get<int>();
    if (h.dims[d] <= 0) throw VolumeError("volume dims must be positive");
  }
  h.dtype = j.value("dtype", std::string("f32"));
  h.endianness = j.value("endianness", std::string("little"));
  if (j.contains("name")) h.name = j["name"].get<std::string>();
  if (h.dtype != "f32") throw VolumeError("unsupported dtype '" + h.dtype + "'");
  if (h.endianness != "little") throw VolumeError("unsupported endianness '" + h.endianness + "'");
  return h;
}

VolumeHeader read_header(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw VolumeError("cannot open header " + path.string());
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_header(text);
}

void write_header(const std::filesystem::path& path, const VolumeHeader& header) {
  json j;
  j["dims"] = header.dims;
  j["dtype"] = header.dtype;
  j["endianness"] = header.endianness;
  if (header.name) j["name"] = *header.name;
  std::ofstream out(path);
  if (!out) throw VolumeError("cannot write header " + path.string());
  out << j.dump(2) << '\n';
}

Volume::Volume(Index3 dims, std::vector<float> data) : dims_(dims), data_(std::move(data)) {
  for (int d : dims_)
    if (d <= 0) throw VolumeError("volume dims must be positive");
  if (data_.size() != static_cast<std::size_t>(dims_[0]) * dims_[1] * dims_[2])
    throw VolumeError("volume data length does not match dims");
  compute_range(data_, vmin_, vmax_);
}

double Volume::vertex_coord(int axis, int i) const {
  const int n = dims_[axis];
  if (n == 1) return 0.0;
  return 2.0 * i / (n - 1) - 1.0;
}

float Volume::sample(const Vec3d& x) const {
  for (double c : x)
    if (!(c >= -1.0 && c <= 1.0)) throw VolumeError("sample coordinate outside [-1,1]^3");
  return sample_unchecked(x);
}

float Volume::sample_clamped(const Vec3d& x) const {
  return sample_unchecked({std::clamp(x[0], -1.0, 1.0), std::clamp(x[1], -1.0, 1.0),
                           std::clamp(x[2], -1.0, 1.0)});
}

float Volume::sample_unchecked(const Vec3d& x) const {
  int i0[3], i1[3];
  double t[3];
  for (int d = 0; d < 3; ++d) {
    const int n = dims_[d];
    if (n == 1) {
      i0[d] = i1[d] = 0;
      t[d] = 0.0;
      continue;
    }
    const double u = lattice_index(x[d], n);
    int base = std::min(static_cast<int>(std::floor(u)), n - 2);
    base = std::max(base, 0);
    i0[d] = base;
    i1[d] = base + 1;
    t[d] = u - base;
  }
  double acc = 0.0;
  for (int corner = 0; corner < 8; ++corner) {
    const int cx = corner & 1, cy = (corner >> 1) & 1, cz = (corner >> 2) & 1;
    const double w = (cx ? t[0] : 1.0 - t[0]) * (cy ? t[1] : 1.0 - t[1]) * (cz ? t[2] : 1.0 - t[2]);
    if (w == 0.0) continue;
    acc += w * at(cx ? i1[0] : i0[0], cy ? i1[1] : i0[1], cz ? i1[2] : i0[2]);
  }
  return static_cast<float>(acc);
}

Volume load_volume(const std::filesystem::path& raw_path, const VolumeHeader& header) {
  for (int d : header.dims)
    if (d <= 0) throw VolumeError("volume dims must be positive");
  if (header.dtype != "f32") throw VolumeError("unsupported dtype '" + header.dtype + "'");
  std::error_code ec;
  const auto bytes = std::filesystem::file_size(raw_path, ec);
  if (ec) throw VolumeError("cannot open volume " + raw_path.string());
  if (bytes != header.byte_length())
    throw VolumeError("volume payload is " + std::to_string(bytes) + " bytes, header declares " +
                      std::to_string(header.byte_length()));
  std::vector<float> data(header.voxel_count());
  std::ifstream in(raw_path, std::ios::binary);
  in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(bytes));
  if (!in) throw VolumeError("short read on " + raw_path.string());
  if constexpr (std::endian::native == std::endian::big) {
    for (float& v : data) v = std::bit_cast<float>(__builtin_bswap32(std::bit_cast<std::uint32_t>(v)));
  }
  return Volume(header.dims, std::move(data));
}

Volume load_volume(const std::filesystem::path& raw_path, const std::filesystem::path& header_path) {
  return load_volume(raw_path, read_header(header_path));
}

void save_volume(const std::filesystem::path& raw_path, const std::filesystem::path& header_path,
                 const Volume& vol, std::optional<std::string> name) {
  VolumeHeader h;
  h.dims = vol.dims();
  h.name = std::move(name);
  std::ofstream out(raw_path, std::ios::binary);
  if (!out) throw VolumeError("cannot write " + raw_path.string());
  static_assert(std::endian::native == std::endian::little, "big-endian hosts need a byte swap here");
  out.write(reinterpret_cast<const char*>(vol.data().data()),
            static_cast<std::streamsize>(vol.size() * sizeof(float)));
  write_header(header_path, h);
}

Volume crop(const Volume& vol, const Extent& e) {
  for (int d = 0; d < 3; ++d) {
    if (e.lo[d] < 0 || e.hi[d] >= vol.dims()[d] || e.lo[d] > e.hi[d])
      throw VolumeError("crop extent out of bounds");
  }
  const Index3 sz = e.size();
  std::vector<float> out;
  out.reserve(static_cast<std::size_t>(sz[0]) * sz[1] * sz[2]);
  for (int z = e.lo[2]; z <= e.hi[2]; ++z)
    for (int y = e.lo[1]; y <= e.hi[1]; ++y) {
      const float* row = vol.data().data() + vol.index(e.lo[0], y, z);
      out.insert(out.end(), row, row + sz[0]);
    }
  return Volume(sz, std::move(out));
}

Volume synth_volume(const SynthSpec& spec) {
  std::vector<Blob> blobs = spec.blobs;
  if (spec.random_blobs > 0) {
    std::mt19937_64 rng(spec.seed);
    std::uniform_real_distribution<double> pos(-0.8, 0.8), width(0.05, 0.3), amp(0.5, 1.5);
    for (int b = 0; b < spec.random_blobs; ++b) {
      Blob blob;
      for (double& c : blob.center) c = pos(rng);
      for (double& s : blob.sigma) s = width(rng);
      blob.amplitude = amp(rng);
      blobs.push_back(blob);
    }
  }
  const auto [w, h, d] = spec.dims;
  for (int n : spec.dims)
    if (n <= 0) throw VolumeError("volume dims must be positive");
  auto coord = [](int i, int n) { return n == 1 ? 0.0 : 2.0 * i / (n - 1) - 1.0; };
  std::vector<float> data(static_cast<std::size_t>(w) * h * d);
  std::size_t idx = 0;
  for (int z = 0; z < d; ++z)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const Vec3d p{coord(x, w), coord(y, h), coord(z, d)};
        double v = spec.background;
        for (const Blob& b : blobs) {
          double e = 0.0;
          for (int k = 0; k < 3; ++k) {
            const double r = (p[k] - b.center[k]) / b.sigma[k];
            e += r * r;
          }
          v += b.amplitude * std::exp(-0.5 * e);
        }
        data[idx++] = static_cast<float>(v);
      }
  return Volume(spec.dims, std::move(data));
}

}  // namespace apmg
