#include <doctest.h>

#include <cmath>

#include "apmg/density.hpp"
#include "apmg/kernels.hpp"
#include "gradient_suite.hpp"
#include "helpers.hpp"
#include "oracles.hpp"

using namespace apmg;

namespace {

Transform<double> diag_transform(double s, Vec3d t = {0, 0, 0}) {
  return {s, 0, 0, t[0], 0, s, 0, t[1], 0, 0, s, t[2], 0, 0, 0, 1};
}

}  // namespace

TEST_SUITE("density") {

TEST_CASE("flat-top kernel") {
  CHECK(flat_top(0.0, 10) == 1.0);
  CHECK(flat_top(1.0, 10) == doctest::Approx(std::exp(-0.5)));
  CHECK(flat_top(-1.0, 10) == flat_top(1.0, 10));
  CHECK(flat_top(0.9, 10) > 0.93);  // flat inside
  CHECK(flat_top(1.2, 10) < 1e-8);  // sharp outside
  CHECK(flat_top(0.5, 1) == doctest::Approx(std::exp(-0.125)));
  CHECK_THROWS_AS(flat_top(0.5, 0), DensityError);
  CHECK(even_power(1.1, 10) == doctest::Approx(std::pow(1.1, 20)).epsilon(1e-14));
}

TEST_CASE("density at the center of a scaled grid equals its determinant") {
  const std::vector<Transform<double>> gs{diag_transform(2.0)};
  CHECK(std::abs(feature_density<double>(gs, {0, 0, 0}, 10) - 8.0) <= 1e-9);
  // Offset grid: center is where G x = 0.
  const std::vector<Transform<double>> shifted{diag_transform(2.0, {0.4, -0.2, 1.0})};
  CHECK(std::abs(feature_density<double>(shifted, {-0.2, 0.1, -0.5}, 10) - 8.0) <= 1e-9);
}

TEST_CASE("a reflected grid keeps a positive density and a consistent gradient") {
  Transform<double> g = diag_transform(2.0, {0.1, 0.0, -0.2});
  g[0] = -2.0;
  g[6] = 0.3;
  const std::vector<Transform<double>> gs{g};
  CHECK(feature_density<double>(gs, {0.05, 0.0, 0.1}, 10) > 0.0);
  const std::array<double, 3> x{0.2, -0.1, 0.15};
  std::array<double, 16> grad{};
  accumulate_density_term_grad(g, x, 3, 1.0, grad);
  for (int k = 0; k < 12; ++k) {
    Transform<double> up = g, down = g;
    up[k] += 1e-6;
    down[k] -= 1e-6;
    const double fd = (density_term(up, x, 3) - density_term(down, x, 3)) / 2e-6;
    CHECK(grad[k] == doctest::Approx(fd).epsilon(1e-6));
  }
}

TEST_CASE("density terms match the Eigen-determinant oracle") {
  const Model m = testing::random_model(6, 1, {2, 2, 2}, 4);
  const auto md = m.cast<double>();
  std::mt19937_64 rng(5);
  for (int n = 0; n < 200; ++n) {
    const auto x = oracle::random_point(rng, -1.3, 1.3);
    const double ref = oracle::density(md.transforms, x, 10);
    CHECK(feature_density<double>(md.transforms, x, 10) == doctest::Approx(ref).epsilon(1e-12));
  }
  // Far outside every grid the exponent is clamped to an exact zero.
  CHECK(feature_density<double>(md.transforms, {40, 0, 0}, 10) == 0.0);
}

TEST_CASE("uniform errors leave the target unchanged and the loss at zero") {
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> u(1e-6, 1.0);
  for (int n = 0; n < 100; ++n) {
    const double s = u(rng), h = u(rng);
    CHECK(target_exponent(h, h) == 1.0);
    CHECK(target_density(s, h, h) == s + kDensityEps);
  }
  const Model m = testing::random_model(4, 1, {4, 4, 4}, 2);
  std::vector<Vec3f> xs(256);
  for (auto& x : xs) {
    const auto p = oracle::random_point(rng);
    x = {float(p[0]), float(p[1]), float(p[2])};
  }
  const std::vector<float> errors(xs.size(), 0.37f);
  auto g = GradientSet<float>::zeros_like(m);
  const double loss = density_loss_and_grads<float>(m, xs, errors, g, Exec::serial);
  CHECK(std::abs(loss) <= 1e-6);
}

TEST_CASE("higher error raises the target relative to the current density") {
  const double s = 0.01;
  CHECK(target_density(s, 2.0, 1.0) > s + kDensityEps);
  CHECK(target_density(s, 0.5, 1.0) < s + kDensityEps);
}

TEST_CASE("scaled density and loss helpers") {
  const std::vector<double> rho{1.0, 3.0};
  const auto s = scale_density(rho);
  CHECK(s[0] == 0.25);
  CHECK(s[1] == 0.75);
  CHECK_THROWS_AS(scale_density(std::vector<double>{0.0, 0.0}), DensityError);
  const std::vector<double> same{0.25 + kDensityEps, 0.75 + kDensityEps};
  CHECK(density_loss(s, same) == doctest::Approx(0.0).epsilon(1e-15));
}

TEST_CASE("density loss agrees with the oracle and rejects tiny or empty batches") {
  const Model m = testing::random_model(3, 1, {3, 3, 3}, 12);
  const auto md = m.cast<double>();
  std::mt19937_64 rng(6);
  std::vector<std::array<double, 3>> xs(40);
  std::vector<double> h(40);
  for (std::size_t i = 0; i < xs.size(); ++i) {
    xs[i] = oracle::random_point(rng);
    h[i] = std::uniform_real_distribution<double>(0, 1)(rng);
  }
  auto g = GradientSet<double>::zeros_like(md);
  const double loss = density_loss_and_grads<double>(md, xs, h, g, Exec::serial);
  CHECK(loss == doctest::Approx(oracle::density_loss(md.transforms, xs, h, 10)).epsilon(1e-12));

  std::vector<std::array<double, 3>> one(1, {0, 0, 0});
  std::vector<double> h1(1, 0.0);
  CHECK_THROWS_AS(density_loss_and_grads<double>(md, one, h1, g), DensityError);
  std::vector<std::array<double, 3>> far(4, {50, 50, 50});
  std::vector<double> h4(4, 0.1);
  CHECK_THROWS_AS(density_loss_and_grads<double>(md, far, h4, g), DensityError);
}

}

TEST_SUITE("gradients") {

TEST_CASE("analytic gradients match central differences") {
  for (std::uint64_t seed : {1u, 2u}) {
    const auto rep = testing::run_gradient_suite(seed);
    INFO("seed " << seed);
    CHECK(rep.checked_grids >= 50);
    CHECK(rep.checked_w1 >= 50);
    CHECK(rep.checked_w2 >= 50);
    CHECK(rep.checked_w3 >= 50);
    CHECK(rep.checked_transforms >= 50);
    CHECK(rep.grids <= 1e-3);
    CHECK(rep.w1 <= 1e-3);
    CHECK(rep.w2 <= 1e-3);
    CHECK(rep.w3 <= 1e-3);
    CHECK(rep.transforms <= 1e-3);
  }
}

TEST_CASE("gradient kernels are bit-identical across execution policies") {
  const Model m = testing::random_model(6, 2, {5, 5, 5}, 31);
  std::mt19937_64 rng(8);
  std::vector<Vec3f> xs(1500);
  std::vector<float> t(xs.size());
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const auto p = oracle::random_point(rng);
    xs[i] = {float(p[0]), float(p[1]), float(p[2])};
    t[i] = float(p[0] * p[1]);
  }
  auto a = GradientSet<float>::zeros_like(m), b = GradientSet<float>::zeros_like(m);
  std::vector<float> ea(xs.size()), eb(xs.size());
  const float la = recon_loss_and_grads<float>(m, xs, t, a, ea, Exec::serial);
  const float lb = recon_loss_and_grads<float>(m, xs, t, b, eb, Exec::parallel);
  CHECK(la == lb);
  CHECK(ea == eb);
  CHECK(a.d_grids == b.d_grids);
  CHECK(a.d_w1 == b.d_w1);
  CHECK(a.d_w2 == b.d_w2);
  CHECK(a.d_w3 == b.d_w3);
  const double da = density_loss_and_grads<float>(m, xs, ea, a, Exec::serial);
  const double db = density_loss_and_grads<float>(m, xs, eb, b, Exec::parallel);
  CHECK(da == db);
  CHECK(a.d_transforms == b.d_transforms);
}

TEST_CASE("single-precision gradients track the double-precision ones") {
  const Model m = testing::random_model(4, 1, {4, 4, 4}, 77);
  const auto md = m.cast<double>();
  std::mt19937_64 rng(4);
  std::vector<Vec3f> xf(64);
  std::vector<std::array<double, 3>> xd(64);
  std::vector<float> tf(64);
  std::vector<double> td(64);
  for (int i = 0; i < 64; ++i) {
    const auto p = oracle::random_point(rng);
    xf[i] = {float(p[0]), float(p[1]), float(p[2])};
    xd[i] = {xf[i][0], xf[i][1], xf[i][2]};
    tf[i] = float(0.3 * p[2]);
    td[i] = tf[i];
  }
  auto gf = GradientSet<float>::zeros_like(m);
  auto gd = GradientSet<double>::zeros_like(md);
  recon_loss_and_grads<float>(m, xf, tf, gf);
  recon_loss_and_grads<double>(md, xd, td, gd);
  double scale = 0, diff = 0;
  for (std::size_t k = 0; k < gd.d_w2.size(); ++k) {
    scale = std::max(scale, std::abs(gd.d_w2[k]));
    diff = std::max(diff, std::abs(gd.d_w2[k] - double(gf.d_w2[k])));
  }
  CHECK(diff <= 1e-4 * scale);
}

TEST_CASE("mismatched buffers are rejected") {
  const Model m = testing::random_model(2, 1, {2, 2, 2}, 1);
  auto g = GradientSet<float>::zeros_like(m);
  std::vector<Vec3f> xs(4, Vec3f{0, 0, 0});
  std::vector<float> t(3);
  CHECK_THROWS_AS(recon_loss_and_grads<float>(m, xs, t, g), ModelError);
  CHECK_THROWS_AS(recon_loss_and_grads<float>(m, {}, {}, g), ModelError);
}

}
