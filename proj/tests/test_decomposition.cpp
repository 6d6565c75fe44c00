#include <doctest.h>

#include <fstream>
#include <json.hpp>

#include "apmg/decomposition.hpp"
#include "helpers.hpp"
#include "oracles.hpp"

using namespace apmg;

namespace {

std::vector<Extent> cores_of(const DecompositionPlan& p) {
  std::vector<Extent> out;
  for (const auto& b : p.bricks) out.push_back(b.core);
  return out;
}

TrainConfig quick_train(int iters = 120) {
  TrainConfig c;
  c.iterations = iters;
  c.batch_size = 128;
  c.delay_start = 40;
  c.transform_ma_window = 20;
  c.plateau_window = 50;
  c.seed = 9;
  return c;
}

ModelConfig tiny_model() {
  ModelConfig m;
  m.grids = 2;
  m.resolution = {4, 4, 4};
  m.seed = 4;
  return m;
}

}  // namespace

TEST_SUITE("decomposition") {

TEST_CASE("axis runs differ by at most one voxel, longer runs first") {
  const auto plan = plan_partition({10, 8, 7}, 3, 2, 1, 0);
  REQUIRE(plan.bricks.size() == 6);
  CHECK(plan.bricks[0].core.lo == Index3{0, 0, 0});
  CHECK(plan.bricks[0].core.hi == Index3{3, 3, 6});
  CHECK(plan.bricks[1].core.lo[0] == 4);
  CHECK(plan.bricks[1].core.hi[0] == 6);
  CHECK(plan.bricks[2].core.lo[0] == 7);
  CHECK(plan.bricks[2].core.hi[0] == 9);
  CHECK(plan.bricks[3].ijk == Index3{0, 1, 0});
  CHECK(plan.bricks[3].core.lo[1] == 4);
  for (const auto& b : plan.bricks) CHECK(b.index == b.ijk[0] + 3 * (b.ijk[1] + 2 * b.ijk[2]));
}

TEST_CASE("cores tile the volume exactly once and ghosts are clamped") {
  const Index3 dims{13, 9, 11};
  for (int g : {0, 1, 3}) {
    const auto plan = plan_partition(dims, 3, 2, 4, g);
    std::vector<int> owner(13 * 9 * 11, 0);
    for (const auto& b : plan.bricks) {
      for (int z = b.core.lo[2]; z <= b.core.hi[2]; ++z)
        for (int y = b.core.lo[1]; y <= b.core.hi[1]; ++y)
          for (int x = b.core.lo[0]; x <= b.core.hi[0]; ++x) ++owner[x + 13 * (y + 9 * z)];
      for (int d = 0; d < 3; ++d) {
        CHECK(b.ghost.lo[d] == std::max(0, b.core.lo[d] - g));
        CHECK(b.ghost.hi[d] == std::min(dims[d] - 1, b.core.hi[d] + g));
      }
    }
    for (int c : owner) CHECK(c == 1);
  }
}

TEST_CASE("invalid partitions are rejected") {
  CHECK_THROWS_AS(plan_partition({4, 4, 4}, 0, 1, 1), DecompositionError);
  CHECK_THROWS_AS(plan_partition({4, 4, 4}, 5, 1, 1), DecompositionError);
  CHECK_THROWS_AS(plan_partition({4, 4, 4}, 1, 1, 1, -1), DecompositionError);
}

TEST_CASE("spatial hash agrees with brute-force core ownership") {
  std::mt19937_64 rng(42);
  const Index3 dims{48, 24, 36};
  int mismatches = 0;
  for (int i = 1; i <= 4; ++i)
    for (int j = 1; j <= 4; ++j)
      for (int k = 1; k <= 4; ++k) {
        const auto plan = plan_partition(dims, i, j, k, 2);
        const auto cores = cores_of(plan);
        for (int n = 0; n < 300; ++n) {
          const auto p = oracle::random_point(rng);
          if (spatial_hash(p, i, j, k) != oracle::owning_brick(cores, dims, p)) ++mismatches;
        }
      }
  CHECK(mismatches == 0);
  CHECK(spatial_hash({1, 1, 1}, 2, 3, 4) == 23);
  CHECK(spatial_hash({-1, -1, -1}, 2, 3, 4) == 0);
  CHECK(spatial_hash({0, 0, 0}, 2, 2, 2) == 7);
  CHECK_THROWS_AS(spatial_hash({1.5, 0, 0}, 2, 2, 2), DecompositionError);
}

TEST_CASE("brick-local coordinates") {
  const auto one = plan_partition({9, 9, 9}, 1, 1, 1, 1);
  const Vec3d p{0.123456789, -0.987654321, 0.5};
  const Vec3f l = brick_local(one.bricks[0], p);
  CHECK(l == Vec3f{float(p[0]), float(p[1]), float(p[2])});

  // 2x1x1 split of 9 voxels: cores [0,4] and [5,8], ghost 1 -> [0,5] and [4,8].
  const auto two = plan_partition({9, 9, 9}, 2, 1, 1, 1);
  const Brick& left = two.bricks[0];
  CHECK(left.domain_lo[0] == -1.0);
  CHECK(left.domain_hi[0] == doctest::Approx(0.25));
  const Vec3f at_edge = brick_local(left, {0.25, 0.0, 0.0});
  CHECK(at_edge[0] == doctest::Approx(1.0));
  const Vec3f mid = brick_local(left, {-0.375, 0.3, 0.0});
  CHECK(mid[0] == doctest::Approx(0.0));
  CHECK(mid[1] == doctest::Approx(0.3));
  CHECK(brick_local(left, {0.9, 0, 0})[0] == 1.f);  // clamped
  // Global lattice vertices land exactly on local lattice vertices of the crop.
  const Brick& right = two.bricks[1];
  for (int x = right.ghost.lo[0]; x <= right.ghost.hi[0]; ++x) {
    const double g = 2.0 * x / 8 - 1.0;
    const double local = -1.0 + 2.0 * (x - right.ghost.lo[0]) / (right.ghost.size()[0] - 1);
    CHECK(brick_local(right, {g, 0, 0})[0] == doctest::Approx(local).epsilon(1e-7));
  }
}

TEST_CASE("manifest JSON round-trip") {
  DecompositionManifest m;
  m.grid = {2, 1, 1};
  m.ghost = 3;
  m.volume_header.dims = {10, 6, 6};
  m.model_config = tiny_model();
  const auto plan = plan_partition({10, 6, 6}, 2, 1, 1, 3);
  for (const auto& b : plan.bricks) {
    BrickRecord r;
    r.core = b.core;
    r.ghost = b.ghost;
    r.model_path = "brick_" + std::to_string(b.index) + ".apmg";
    r.vmin = -1.f - b.index;
    r.vmax = 2.f + b.index;
    r.psnr = 40.5;
    r.iterations = 7;
    m.bricks.push_back(r);
  }
  const auto back = manifest_from_json(manifest_to_json(m));
  CHECK(back.grid == m.grid);
  CHECK(back.ghost == 3);
  CHECK(back.model_config == m.model_config);
  CHECK(back.bricks.size() == 2);
  CHECK(back.bricks[1].core == m.bricks[1].core);
  CHECK(back.bricks[1].ghost == m.bricks[1].ghost);
  CHECK(back.vmin() == -2.f);
  CHECK(back.vmax() == 3.f);
  CHECK(manifest_to_json(back) == manifest_to_json(m));
  CHECK_THROWS_AS(manifest_from_json("{}"), DecompositionError);
  auto j = nlohmann::json::parse(manifest_to_json(m));
  j["I"] = 3;
  CHECK_THROWS_AS(manifest_from_json(j.dump()), DecompositionError);
}

TEST_CASE("a 1x1x1 decomposition reproduces single-model training exactly") {
  const Volume v = testing::blob_volume({12, 12, 12});
  const auto plan = plan_partition(v.dims(), 1, 1, 1, 1);
  const auto res = train_decomposed(v, plan, tiny_model(), quick_train(), 1);
  Model single = init_model(tiny_model());
  fit_range(single, v);
  train_single(single, v, quick_train());
  CHECK(serialize_model(res.models[0]) == serialize_model(single));
  const DecomposedModel dm(plan, res.models);
  CHECK(std::abs(psnr(dm, v) - psnr(single, v)) <= 1e-6);
  CHECK(res.manifest.bricks[0].psnr == doctest::Approx(psnr(single, v)));
}

TEST_CASE("decomposed training is independent of the worker count and writes artifacts") {
  const Volume v = testing::blob_volume({14, 10, 10});
  const auto plan = plan_partition(v.dims(), 2, 2, 1, 1);
  testing::TempDir d1("dec"), d3("dec");
  const auto a = train_decomposed(v, plan, tiny_model(), quick_train(), 1, d1.path);
  const auto b = train_decomposed(v, plan, tiny_model(), quick_train(), 3, d3.path);
  for (int k = 0; k < 4; ++k) {
    CHECK(serialize_model(a.models[k]) == serialize_model(b.models[k]));
    CHECK(a.manifest.bricks[k].psnr == b.manifest.bricks[k].psnr);
  }
  // Different seeds per brick.
  CHECK(a.models[0].transforms != a.models[1].transforms);

  for (const char* f : {"manifest.json", "brick_0000.apmg", "brick_0003.apmg", "brick_0002.jsonl"})
    CHECK(std::filesystem::exists(d1 / f));
  std::ifstream l1(d1 / "brick_0001.jsonl"), l3(d3 / "brick_0001.jsonl");
  const std::string s1((std::istreambuf_iterator<char>(l1)), {}), s3((std::istreambuf_iterator<char>(l3)), {});
  CHECK(!s1.empty());
  CHECK(s1 == s3);

  const auto loaded = DecomposedModel::load(d1 / "manifest.json");
  CHECK(psnr(loaded, v) == psnr(DecomposedModel(plan, a.models), v));
  const auto m = load_manifest(d1 / "manifest.json");
  CHECK(m.bricks[3].model_path == "brick_0003.apmg");
  CHECK(m.bricks[3].iterations == 120);
}

TEST_CASE("inference routes each point to its brick") {
  const Volume v = testing::blob_volume({8, 8, 8});
  const auto plan = plan_partition(v.dims(), 2, 1, 1, 1);
  std::vector<Model> models;
  for (int b = 0; b < 2; ++b) {
    Model m = init_model(tiny_model(), b);
    std::fill(m.w3.begin(), m.w3.end(), 0.f);
    m.vmin = m.vmax = float(b + 1);  // constant output identifies the brick
    models.push_back(m);
  }
  const DecomposedModel dm(plan, models);
  std::vector<Vec3d> pts{{-0.9, 0, 0}, {-0.01, 0.5, 0.5}, {0.0, 0, 0}, {0.99, -1, 1}};
  std::vector<float> out(pts.size());
  dm.infer(pts, out);
  CHECK(out == std::vector<float>{1.f, 1.f, 2.f, 2.f});
  CHECK_THROWS_AS(DecomposedModel(plan, std::vector<Model>(1, models[0])), DecompositionError);
  CHECK_THROWS_AS(psnr(dm, testing::blob_volume({9, 8, 8})), DecompositionError);
}

TEST_CASE("mismatched inputs are rejected") {
  const Volume v = testing::blob_volume({8, 8, 8});
  CHECK_THROWS_AS(train_decomposed(v, plan_partition({9, 8, 8}, 1, 1, 1), tiny_model(), quick_train(), 1),
                  DecompositionError);
  CHECK_THROWS_AS(train_decomposed(v, plan_partition({8, 8, 8}, 1, 1, 1), tiny_model(), quick_train(), 0),
                  DecompositionError);
}

}
