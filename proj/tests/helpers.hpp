#pragma once

#include <filesystem>
#include <random>
#include <string>

#include "apmg/model.hpp"
#include "apmg/volume.hpp"

namespace testing {

/// Fresh directory under the system temp dir, removed on destruction.
struct TempDir {
  std::filesystem::path path;

  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path = std::filesystem::temp_directory_path() / ("apmg_" + tag + "_" + std::to_string(rd()));
    std::filesystem::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path, ec);
  }
  std::filesystem::path operator/(const std::string& name) const { return path / name; }
};

/// Model with grid values drawn from U(-amp, amp) so every path carries signal.
inline apmg::Model random_model(int grids, int channels, apmg::Index3 res, std::uint64_t seed, float amp = 1.f) {
  apmg::ModelConfig cfg;
  cfg.grids = grids;
  cfg.channels = channels;
  cfg.resolution = res;
  cfg.seed = seed;
  apmg::Model m = apmg::init_model(cfg);
  std::mt19937_64 rng(seed + 1000);
  std::uniform_real_distribution<float> u(-amp, amp);
  for (auto& v : m.grids) v = u(rng);
  return m;
}

inline apmg::Volume blob_volume(apmg::Index3 dims, apmg::Vec3d center = {0.3, -0.2, 0.1}, double sigma = 0.2) {
  apmg::SynthSpec spec;
  spec.dims = dims;
  spec.blobs.push_back({center, {sigma, sigma, sigma}, 1.0});
  return apmg::synth_volume(spec);
}

}  // namespace testing
