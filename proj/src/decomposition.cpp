#include "apmg/decomposition.hpp"

#include <atomic>
#include <chrono>
#include <cmath>
#include <fstream>
#include <mutex>
#include <thread>

#include <json.hpp>

namespace apmg {

using json = nlohmann::json;

namespace {

struct Run {
  int lo, hi;
};

std::vector<Run> split_axis(int n, int parts) {
  if (parts < 1) throw DecompositionError("brick counts must be positive");
  if (parts > n) throw DecompositionError("more bricks than voxels along an axis");
  std::vector<Run> runs;
  const int base = n / parts, extra = n % parts;
  int start = 0;
  for (int p = 0; p < parts; ++p) {
    const int len = base + (p < extra ? 1 : 0);
    runs.push_back({start, start + len - 1});
    start += len;
  }
  return runs;
}

double vertex(int i, int n) { return n == 1 ? 0.0 : 2.0 * i / (n - 1) - 1.0; }

}  // namespace

DecompositionPlan plan_partition(const Index3& dims, int i_count, int j_count, int k_count, int ghost) {
  if (ghost < 0) throw DecompositionError("ghost width must be non-negative");
  for (int d : dims)
    if (d <= 0) throw DecompositionError("volume dims must be positive");
  DecompositionPlan plan;
  plan.dims = dims;
  plan.grid = {i_count, j_count, k_count};
  plan.ghost = ghost;
  const std::array<std::vector<Run>, 3> runs{split_axis(dims[0], i_count), split_axis(dims[1], j_count),
                                             split_axis(dims[2], k_count)};
  for (int k = 0; k < k_count; ++k)
    for (int j = 0; j < j_count; ++j)
      for (int i = 0; i < i_count; ++i) {
        Brick b;
        b.index = i + i_count * (j + j_count * k);
        b.ijk = {i, j, k};
        const Index3 at{i, j, k};
        for (int d = 0; d < 3; ++d) {
          const Run r = runs[d][at[d]];
          const int n = dims[d];
          b.core.lo[d] = r.lo;
          b.core.hi[d] = r.hi;
          b.ghost.lo[d] = std::max(0, r.lo - ghost);
          b.ghost.hi[d] = std::min(n - 1, r.hi + ghost);
          b.owner_lo[d] = -1.0 + 2.0 * r.lo / n;
          b.owner_hi[d] = -1.0 + 2.0 * (r.hi + 1) / n;
          b.domain_lo[d] = vertex(b.ghost.lo[d], n);
          b.domain_hi[d] = vertex(b.ghost.hi[d], n);
        }
        plan.bricks.push_back(b);
      }
  return plan;
}

int spatial_hash(const Vec3d& p, int i_count, int j_count, int k_count) {
  const int counts[3] = {i_count, j_count, k_count};
  int idx[3];
  for (int d = 0; d < 3; ++d) {
    if (!(p[d] >= -1.0 && p[d] <= 1.0)) throw DecompositionError("hash coordinate outside [-1,1]^3");
    const int v = static_cast<int>(std::floor(counts[d] * (p[d] + 1.0) / 2.0));
    idx[d] = std::min(v, counts[d] - 1);
  }
  return idx[0] + i_count * idx[1] + i_count * j_count * idx[2];
}

Vec3f brick_local(const Brick& b, const Vec3d& g) {
  Vec3f out;
  for (int d = 0; d < 3; ++d) {
    const double lo = b.domain_lo[d], hi = b.domain_hi[d];
    double v;
    if (lo == -1.0 && hi == 1.0)
      v = g[d];
    else if (hi == lo)
      v = 0.0;
    else
      v = -1.0 + 2.0 * (g[d] - lo) / (hi - lo);
    out[d] = static_cast<float>(std::clamp(v, -1.0, 1.0));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Manifest

namespace {

json header_json(const VolumeHeader& h) {
  json j;
  j["dims"] = h.dims;
  j["dtype"] = h.dtype;
  j["endianness"] = h.endianness;
  if (h.name) j["name"] = *h.name;
  return j;
}

}  // namespace

DecompositionPlan DecompositionManifest::plan() const {
  return plan_partition(volume_header.dims, grid[0], grid[1], grid[2], ghost);
}

float DecompositionManifest::vmin() const {
  float v = bricks.empty() ? 0.f : bricks[0].vmin;
  for (const auto& b : bricks) v = std::min(v, b.vmin);
  return v;
}

float DecompositionManifest::vmax() const {
  float v = bricks.empty() ? 0.f : bricks[0].vmax;
  for (const auto& b : bricks) v = std::max(v, b.vmax);
  return v;
}

std::string manifest_to_json(const DecompositionManifest& m) {
  json j;
  j["I"] = m.grid[0];
  j["J"] = m.grid[1];
  j["K"] = m.grid[2];
  j["ghost"] = m.ghost;
  j["volume_header"] = header_json(m.volume_header);
  j["model_config"] = json::parse(model_config_json(m.model_config));
  j["bricks"] = json::array();
  for (const auto& b : m.bricks) {
    json e;
    e["core_lo"] = b.core.lo;
    e["core_hi"] = b.core.hi;
    e["ghost_lo"] = b.ghost.lo;
    e["ghost_hi"] = b.ghost.hi;
    e["model_path"] = b.model_path;
    e["vmin"] = b.vmin;
    e["vmax"] = b.vmax;
    e["psnr"] = b.psnr;
    e["train_seconds"] = b.train_seconds;
    e["iterations"] = b.iterations;
    if (b.error) e["error"] = *b.error;
    j["bricks"].push_back(e);
  }
  return j.dump(2);
}

DecompositionManifest manifest_from_json(const std::string& text) {
  DecompositionManifest m;
  try {
    const json j = json::parse(text);
    m.grid = {j.at("I").get<int>(), j.at("J").get<int>(), j.at("K").get<int>()};
    m.ghost = j.at("ghost").get<int>();
    m.volume_header = parse_header(j.at("volume_header").dump());
    if (j.contains("model_config")) m.model_config = parse_model_config(j["model_config"].dump());
    for (const auto& e : j.at("bricks")) {
      BrickRecord b;
      b.core.lo = e.at("core_lo").get<Index3>();
      b.core.hi = e.at("core_hi").get<Index3>();
      b.ghost.lo = e.at("ghost_lo").get<Index3>();
      b.ghost.hi = e.at("ghost_hi").get<Index3>();
      b.model_path = e.at("model_path").get<std::string>();
      b.vmin = e.value("vmin", 0.f);
      b.vmax = e.value("vmax", 0.f);
      b.psnr = e.value("psnr", 0.0);
      b.train_seconds = e.value("train_seconds", 0.0);
      b.iterations = e.value("iterations", 0);
      if (e.contains("error")) b.error = e["error"].get<std::string>();
      m.bricks.push_back(b);
    }
  } catch (const json::exception& e) {
    throw DecompositionError(std::string("malformed manifest: ") + e.what());
  }
  if (static_cast<int>(m.bricks.size()) != m.grid[0] * m.grid[1] * m.grid[2])
    throw DecompositionError("manifest brick count does not match I*J*K");
  return m;
}

void save_manifest(const std::filesystem::path& path, const DecompositionManifest& m) {
  std::ofstream out(path);
  if (!out) throw DecompositionError("cannot write manifest " + path.string());
  out << manifest_to_json(m) << '\n';
}

DecompositionManifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DecompositionError("cannot open manifest " + path.string());
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return manifest_from_json(text);
}

// ---------------------------------------------------------------------------
// Training

namespace {

std::string brick_name(int index, const char* ext) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "brick_%04d%s", index, ext);
  return buf;
}

}  // namespace

DecomposedTraining train_decomposed(const Volume& volume, const DecompositionPlan& plan,
                                    const ModelConfig& model_cfg, const TrainConfig& train_cfg, int workers,
                                    const std::optional<std::filesystem::path>& out_dir) {
  if (workers < 1) throw DecompositionError("worker count must be at least 1");
  if (plan.dims != volume.dims()) throw DecompositionError("plan dims do not match the volume");
  model_cfg.validate();
  train_cfg.validate();
  if (out_dir) std::filesystem::create_directories(*out_dir);

  const int count = plan.brick_count();
  DecomposedTraining result;
  result.models.resize(count);
  result.logs.resize(count);
  result.manifest.grid = plan.grid;
  result.manifest.ghost = plan.ghost;
  result.manifest.volume_header.dims = volume.dims();
  result.manifest.model_config = model_cfg;
  result.manifest.bricks.resize(count);

  TrainConfig job_cfg = train_cfg;
  // Kernels are bit-identical across policies; avoid nested thread teams.
  if (workers > 1) job_cfg.exec = Exec::serial;

  std::atomic<int> next{0};
  auto worker = [&] {
    for (int b = next++; b < count; b = next++) {
      const Brick& brick = plan.bricks[b];
      BrickRecord& rec = result.manifest.bricks[b];
      rec.core = brick.core;
      rec.ghost = brick.ghost;
      rec.model_path = brick_name(b, ".apmg");
      try {
        const auto t0 = std::chrono::steady_clock::now();
        const Volume local = crop(volume, brick.ghost);
        Model model = init_model(model_cfg, model_cfg.seed ^ static_cast<std::uint64_t>(b));
        fit_range(model, local);
        TrainConfig cfg = job_cfg;
        cfg.seed = train_cfg.seed ^ static_cast<std::uint64_t>(b);
        TrainLog log = train_single(model, local, cfg);
        rec.vmin = local.vmin();
        rec.vmax = local.vmax();
        rec.psnr = psnr(model, local, job_cfg.exec);
        rec.iterations = static_cast<int>(log.iterations_run());
        if (out_dir) {
          save_model(*out_dir / rec.model_path, model);
          std::ofstream lf(*out_dir / brick_name(b, ".jsonl"));
          log.write_jsonl(lf);
        }
        rec.train_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        result.models[b] = std::move(model);
        result.logs[b] = std::move(log);
      } catch (const std::exception& e) {
        rec.error = e.what();
      }
    }
  };
  std::vector<std::thread> pool;
  for (int w = 0; w < std::min(workers, count); ++w) pool.emplace_back(worker);
  for (auto& t : pool) t.join();

  if (out_dir) save_manifest(*out_dir / "manifest.json", result.manifest);
  std::string failures;
  for (int b = 0; b < count; ++b)
    if (result.manifest.bricks[b].error)
      failures += "brick " + std::to_string(b) + ": " + *result.manifest.bricks[b].error + "; ";
  if (!failures.empty()) throw DecompositionError("decomposed training failed: " + failures);
  return result;
}

// ---------------------------------------------------------------------------
// Inference

DecomposedModel::DecomposedModel(DecompositionPlan plan, std::vector<Model> models)
    : plan_(std::move(plan)), models_(std::move(models)) {
  if (static_cast<int>(models_.size()) != plan_.brick_count())
    throw DecompositionError("model count does not match the brick grid");
  vmin_ = models_.front().vmin;
  vmax_ = models_.front().vmax;
  for (const auto& m : models_) {
    vmin_ = std::min(vmin_, m.vmin);
    vmax_ = std::max(vmax_, m.vmax);
  }
}

DecomposedModel DecomposedModel::load(const std::filesystem::path& manifest_path) {
  const DecompositionManifest m = load_manifest(manifest_path);
  const auto dir = manifest_path.parent_path();
  std::vector<Model> models;
  for (const auto& b : m.bricks) models.push_back(load_model(dir / b.model_path));
  DecompositionPlan plan = m.plan();
  for (std::size_t b = 0; b < plan.bricks.size(); ++b)
    if (!(plan.bricks[b].core == m.bricks[b].core) || !(plan.bricks[b].ghost == m.bricks[b].ghost))
      throw DecompositionError("manifest extents disagree with the brick plan");
  return DecomposedModel(std::move(plan), std::move(models));
}

void DecomposedModel::infer(std::span<const Vec3d> coords, std::span<float> out, Exec exec) const {
  if (out.size() != coords.size()) throw DecompositionError("output buffer has the wrong length");
  const int count = plan_.brick_count();
  std::vector<std::vector<std::size_t>> groups(count);
  for (std::size_t i = 0; i < coords.size(); ++i)
    groups[spatial_hash(coords[i], plan_.grid[0], plan_.grid[1], plan_.grid[2])].push_back(i);
  std::vector<Vec3f> local;
  std::vector<float> values;
  for (int b = 0; b < count; ++b) {
    const auto& idx = groups[b];
    if (idx.empty()) continue;
    local.resize(idx.size());
    values.resize(idx.size());
    for (std::size_t k = 0; k < idx.size(); ++k) local[k] = brick_local(plan_.bricks[b], coords[idx[k]]);
    forward_batch<float>(models_[b], local, values, exec);
    for (std::size_t k = 0; k < idx.size(); ++k) out[idx[k]] = values[k];
  }
}

double psnr(const DecomposedModel& model, const Volume& volume, Exec exec) {
  if (model.plan().dims != volume.dims()) throw DecompositionError("decomposition dims do not match the volume");
  const auto [w, h, d] = volume.dims();
  const std::size_t slice = static_cast<std::size_t>(w) * h;
  std::vector<Vec3d> coords(slice);
  std::vector<float> out(slice);
  double sq = 0.0;
  for (int z = 0; z < d; ++z) {
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        coords[x + static_cast<std::size_t>(w) * y] = {volume.vertex_coord(0, x), volume.vertex_coord(1, y),
                                                       volume.vertex_coord(2, z)};
    model.infer(coords, out, exec);
    const float* truth = volume.data().data() + slice * z;
    for (std::size_t i = 0; i < slice; ++i) {
      const double e = double(out[i]) - double(truth[i]);
      sq += e * e;
    }
  }
  return psnr_from_mse(sq / static_cast<double>(volume.size()), double(volume.vmax()) - double(volume.vmin()));
}

}  // namespace apmg
