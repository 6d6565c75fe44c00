#include "apmg/model.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <random>

#include <json.hpp>

namespace apmg {

void ModelConfig::validate() const {
  if (grids <= 0 || channels <= 0) throw ModelError("grids and channels must be positive");
  for (int r : resolution)
    if (r < 2) throw ModelError("grid resolution must be at least 2 per axis");
  if (flat_top_p < 1) throw ModelError("flat-top strength must be >= 1");
}

std::array<Vec3d, 8> grid_corners_global(const Transform<double>& g) {
  const double det = det3(g);
  if (std::abs(det) < 1e-12) throw ModelError("grid transform is singular");
  // adjugate / det
  const double a = g[0], b = g[1], c = g[2];
  const double d = g[4], e = g[5], f = g[6];
  const double h = g[8], i = g[9], k = g[10];
  const double inv[9] = {(e * k - f * i) / det, (c * i - b * k) / det, (b * f - c * e) / det,
                         (f * h - d * k) / det, (a * k - c * h) / det, (c * d - a * f) / det,
                         (d * i - e * h) / det, (b * h - a * i) / det, (a * e - b * d) / det};
  std::array<Vec3d, 8> out{};
  for (int corner = 0; corner < 8; ++corner) {
    const double l[3] = {(corner & 1) ? 1.0 : -1.0, (corner & 2) ? 1.0 : -1.0, (corner & 4) ? 1.0 : -1.0};
    const double r[3] = {l[0] - g[3], l[1] - g[7], l[2] - g[11]};
    for (int row = 0; row < 3; ++row)
      out[corner][row] = inv[row * 3] * r[0] + inv[row * 3 + 1] * r[1] + inv[row * 3 + 2] * r[2];
  }
  return out;
}

Model init_model(ModelConfig config, std::uint64_t seed) {
  config.seed = seed;
  return init_model(config);
}

Model init_model(const ModelConfig& config) {
  config.validate();
  std::mt19937_64 rng(config.seed);
  Model model;
  model.config = config;
  const int m_count = config.grids;

  std::normal_distribution<double> diag(1.0, 0.05), off(0.0, 0.05);
  model.transforms.resize(m_count);
  for (auto& g : model.transforms) {
    do {
      for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 4; ++c) g[r * 4 + c] = static_cast<float>(r == c ? diag(rng) : off(rng));
      g[12] = g[13] = g[14] = 0.f;
      g[15] = 1.f;
    } while (det3(g) <= 0.0);
  }

  std::uniform_real_distribution<float> feat(-1e-4f, 1e-4f);
  model.grids.resize(config.grid_values());
  for (float& v : model.grids) v = feat(rng);

  auto glorot = [&](std::vector<float>& w, int fan_in, int fan_out) {
    const float limit = static_cast<float>(std::sqrt(6.0 / (fan_in + fan_out)));
    std::uniform_real_distribution<float> dist(-limit, limit);
    w.resize(static_cast<std::size_t>(fan_in) * fan_out);
    for (float& v : w) v = dist(rng);
  };
  glorot(model.w1, config.feature_dim(), kHidden);
  glorot(model.w2, kHidden, kHidden);
  glorot(model.w3, kHidden, 1);
  model.vmin = 0.f;
  model.vmax = 1.f;
  return model;
}

// ---------------------------------------------------------------------------
// Binary format: "APMG", u32 version, config (M,C,D,H,W u32; seed u64),
// transforms, grids, W1, W2, W3 (f32), vmin, vmax (f32), p (u32). Little-endian.

namespace {

constexpr char kMagic[4] = {'A', 'P', 'M', 'G'};
constexpr std::uint32_t kVersion = 1;

static_assert(std::endian::native == std::endian::little, "model I/O assumes a little-endian host");

class Writer {
 public:
  template <class V>
  void put(V v) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    bytes.insert(bytes.end(), p, p + sizeof(V));
  }
  void put(std::span<const float> v) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(v.data());
    bytes.insert(bytes.end(), p, p + v.size_bytes());
  }
  std::vector<std::uint8_t> bytes;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> b) : bytes_(b) {}
  template <class V>
  V get(const char* what) {
    V v;
    need(sizeof(V), what);
    std::memcpy(&v, bytes_.data() + pos_, sizeof(V));
    pos_ += sizeof(V);
    return v;
  }
  void get(std::span<float> out, const char* what) {
    need(out.size_bytes(), what);
    std::memcpy(out.data(), bytes_.data() + pos_, out.size_bytes());
    pos_ += out.size_bytes();
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n, const char* what) {
    if (pos_ + n > bytes_.size()) throw ModelError(std::string("model file truncated in ") + what);
  }
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> serialize_model(const Model& model) {
  const ModelConfig& c = model.config;
  Writer w;
  for (char ch : kMagic) w.put(ch);
  w.put(kVersion);
  w.put(static_cast<std::uint32_t>(c.grids));
  w.put(static_cast<std::uint32_t>(c.channels));
  for (int r : c.resolution) w.put(static_cast<std::uint32_t>(r));
  w.put(static_cast<std::uint64_t>(c.seed));
  for (const auto& g : model.transforms) w.put(std::span<const float>(g));
  w.put(std::span<const float>(model.grids));
  w.put(std::span<const float>(model.w1));
  w.put(std::span<const float>(model.w2));
  w.put(std::span<const float>(model.w3));
  w.put(model.vmin);
  w.put(model.vmax);
  w.put(static_cast<std::uint32_t>(c.flat_top_p));
  return std::move(w.bytes);
}

Model deserialize_model(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  char magic[4];
  for (char& ch : magic) ch = r.get<char>("header");
  if (std::memcmp(magic, kMagic, 4) != 0) throw ModelError("not an APMG model file (bad magic)");
  const auto version = r.get<std::uint32_t>("header");
  if (version != kVersion) throw ModelError("unsupported model version " + std::to_string(version));
  Model m;
  m.config.grids = static_cast<int>(r.get<std::uint32_t>("config"));
  m.config.channels = static_cast<int>(r.get<std::uint32_t>("config"));
  for (int& v : m.config.resolution) v = static_cast<int>(r.get<std::uint32_t>("config"));
  m.config.seed = r.get<std::uint64_t>("config");
  // Guard against absurd sizes before allocating.
  if (m.config.grids <= 0 || m.config.channels <= 0 || m.config.grid_values() > (std::size_t{1} << 34))
    throw ModelError("model config out of range");
  m.transforms.resize(m.config.grids);
  for (auto& g : m.transforms) r.get(std::span<float>(g), "transforms");
  m.grids.resize(m.config.grid_values());
  r.get(std::span<float>(m.grids), "grids");
  m.w1.resize(static_cast<std::size_t>(kHidden) * m.config.feature_dim());
  r.get(std::span<float>(m.w1), "decoder");
  m.w2.resize(kHidden * kHidden);
  r.get(std::span<float>(m.w2), "decoder");
  m.w3.resize(kHidden);
  r.get(std::span<float>(m.w3), "decoder");
  m.vmin = r.get<float>("range");
  m.vmax = r.get<float>("range");
  m.config.flat_top_p = static_cast<int>(r.get<std::uint32_t>("trailer"));
  if (!r.done()) throw ModelError("trailing bytes after model payload");
  m.config.validate();
  return m;
}

void save_model(const std::filesystem::path& path, const Model& model) {
  const auto bytes = serialize_model(model);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ModelError("cannot write model " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw ModelError("write failed for " + path.string());
}

Model load_model(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ModelError("cannot open model " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_model(bytes);
}

ModelConfig parse_model_config(const std::string& json_text) {
  const auto j = nlohmann::json::parse(json_text);
  ModelConfig c;
  c.grids = j.value("grids", c.grids);
  c.channels = j.value("channels", c.channels);
  if (j.contains("resolution")) {
    const auto& r = j["resolution"];
    if (!r.is_array() || r.size() != 3) throw ModelError("resolution must be [D,H,W]");
    for (int d = 0; d < 3; ++d) c.resolution[d] = r[d].get<int>();
  }
  c.flat_top_p = j.value("flat_top_p", c.flat_top_p);
  c.seed = j.value("seed", c.seed);
  c.validate();
  return c;
}

std::string model_config_json(const ModelConfig& c) {
  nlohmann::json j;
  j["grids"] = c.grids;
  j["channels"] = c.channels;
  j["resolution"] = c.resolution;
  j["flat_top_p"] = c.flat_top_p;
  j["seed"] = c.seed;
  return j.dump();
}

}  // namespace apmg
