#pragma once

// Domain decomposition: an I x J x K brick grid over the volume, one model per
// brick trained independently on its ghost-padded crop, and hashed inference.

#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "apmg/model.hpp"
#include "apmg/trainer.hpp"
#include "apmg/volume.hpp"

namespace apmg {

class DecompositionError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Brick {
  int index = 0;        // i + I*j + I*J*k
  Index3 ijk{0, 0, 0};
  Extent core;          // disjoint tiling
  Extent ghost;         // core grown by the ghost width, clamped to the volume
  Vec3d owner_lo{}, owner_hi{};    // normalized cell-fraction bounds of the core
  Vec3d domain_lo{}, domain_hi{};  // normalized coordinates of the ghost extent's end vertices
};

struct DecompositionPlan {
  Index3 dims{0, 0, 0};
  Index3 grid{1, 1, 1};  // I, J, K
  int ghost = 1;
  std::vector<Brick> bricks;  // C-order, x fastest

  int brick_count() const { return grid[0] * grid[1] * grid[2]; }
};

/// Splits each axis into contiguous runs whose lengths differ by at most one
/// (longer runs first) and grows every run by `ghost` voxels on both sides.
DecompositionPlan plan_partition(const Index3& dims, int i_count, int j_count, int k_count, int ghost = 1);

/// Floor/clamp hash of a [-1,1]^3 coordinate to its brick's flat index.
int spatial_hash(const Vec3d& p, int i_count, int j_count, int k_count);

/// Maps a global coordinate into a brick's local [-1,1]^3 (clamped).
Vec3f brick_local(const Brick& brick, const Vec3d& global);

struct BrickRecord {
  Extent core, ghost;
  std::string model_path;
  float vmin = 0.f, vmax = 0.f;
  double psnr = 0.0;
  double train_seconds = 0.0;
  int iterations = 0;
  std::optional<std::string> error;
};

struct DecompositionManifest {
  Index3 grid{1, 1, 1};
  int ghost = 1;
  VolumeHeader volume_header;
  ModelConfig model_config;
  std::vector<BrickRecord> bricks;

  DecompositionPlan plan() const;
  float vmin() const;
  float vmax() const;
};

std::string manifest_to_json(const DecompositionManifest& m);
DecompositionManifest manifest_from_json(const std::string& text);
void save_manifest(const std::filesystem::path& path, const DecompositionManifest& m);
DecompositionManifest load_manifest(const std::filesystem::path& path);

struct DecomposedTraining {
  DecompositionManifest manifest;
  std::vector<Model> models;
  std::vector<TrainLog> logs;
};

/// Trains one model per brick on a pool of `workers` threads. Brick b uses
/// seeds (model_cfg.seed ^ b) and (train_cfg.seed ^ b). When `out_dir` is
/// given, models, logs and manifest.json are written there.
DecomposedTraining train_decomposed(const Volume& volume, const DecompositionPlan& plan,
                                    const ModelConfig& model_cfg, const TrainConfig& train_cfg, int workers,
                                    const std::optional<std::filesystem::path>& out_dir = std::nullopt);

/// Loaded brick models ready for inference.
class DecomposedModel {
 public:
  DecomposedModel(DecompositionPlan plan, std::vector<Model> models);
  static DecomposedModel load(const std::filesystem::path& manifest_path);

  const DecompositionPlan& plan() const { return plan_; }
  const std::vector<Model>& models() const { return models_; }
  float vmin() const { return vmin_; }
  float vmax() const { return vmax_; }

  void infer(std::span<const Vec3d> coords, std::span<float> out, Exec exec = Exec::parallel) const;

 private:
  DecompositionPlan plan_;
  std::vector<Model> models_;
  float vmin_ = 0.f, vmax_ = 0.f;
};

/// PSNR of a decomposition against the full volume.
double psnr(const DecomposedModel& model, const Volume& volume, Exec exec = Exec::parallel);

}  // namespace apmg
