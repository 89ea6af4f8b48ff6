#include <Eigen/Dense>
#include <algorithm>
#include <cmath>

#include "doctest.h"
#include "wmlab/metrics.hpp"
#include "wmlab/rng.hpp"
#include "wmlab/scene.hpp"

using namespace wmlab;

namespace {

GaussianMoments random_gaussian(Rng& rng, int d) {
  GaussianMoments g;
  g.mean.resize(d);
  for (auto& m : g.mean) m = rng.normal();
  Eigen::MatrixXd a(d, d);
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j) a(i, j) = 0.5 * rng.normal();
  Eigen::MatrixXd cov = a * a.transpose() + 0.2 * Eigen::MatrixXd::Identity(d, d);
  g.covariance.assign(d, Vec(d));
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j) g.covariance[i][j] = cov(i, j);
  return g;
}

std::vector<Vec> sample_gaussian(const GaussianMoments& g, int n, Rng& rng) {
  const int d = int(g.mean.size());
  Eigen::MatrixXd cov(d, d);
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j) cov(i, j) = g.covariance[i][j];
  Eigen::LLT<Eigen::MatrixXd> llt(cov);
  const Eigen::MatrixXd l = llt.matrixL();
  std::vector<Vec> out;
  out.reserve(n);
  for (int s = 0; s < n; ++s) {
    Eigen::VectorXd z(d);
    for (int i = 0; i < d; ++i) z(i) = rng.normal();
    const Eigen::VectorXd x = l * z;
    Vec v(d);
    for (int i = 0; i < d; ++i) v[i] = g.mean[i] + x(i);
    out.push_back(std::move(v));
  }
  return out;
}

}  // namespace

TEST_CASE("frechet distance basics") {
  Rng rng(3);
  const GaussianMoments g = random_gaussian(rng, 5);
  CHECK(frechet_distance(g, g) == doctest::Approx(0.0).epsilon(1e-9));

  const GaussianMoments h = random_gaussian(rng, 5);
  CHECK(frechet_distance(g, h) == doctest::Approx(frechet_distance(h, g)).epsilon(1e-9));
  CHECK(frechet_distance(g, h) >= 0.0);

  SUBCASE("mean shift only") {
    GaussianMoments shifted = g;
    for (auto& m : shifted.mean) m += 1.0;
    CHECK(frechet_distance(g, shifted) == doctest::Approx(5.0).epsilon(1e-9));
  }
  SUBCASE("diagonal covariances have the scalar closed form") {
    const int d = 4;
    GaussianMoments a, b;
    a.mean.assign(d, 0.0);
    b.mean.assign(d, 0.0);
    a.covariance.assign(d, Vec(d, 0.0));
    b.covariance.assign(d, Vec(d, 0.0));
    Vec va = {0.5, 1.0, 2.0, 0.1}, vb = {1.5, 0.3, 2.0, 0.9};
    double want = 0.0;
    for (int i = 0; i < d; ++i) {
      a.covariance[i][i] = va[i];
      b.covariance[i][i] = vb[i];
      const double s = std::sqrt(va[i]) - std::sqrt(vb[i]);
      want += s * s;
    }
    CHECK(frechet_distance(a, b) == doctest::Approx(want).epsilon(1e-9));
  }
}

TEST_CASE("fit_moments reproduces hand-computed statistics") {
  std::vector<Vec> data = {{1.0, 2.0}, {3.0, 4.0}, {5.0, 0.0}};
  const GaussianMoments g = fit_moments(data);
  CHECK(g.mean[0] == doctest::Approx(3.0));
  CHECK(g.mean[1] == doctest::Approx(2.0));
  // unbiased covariance over the 3 points: sum of squared devs 8, divided by 2
  CHECK(g.covariance[0][0] == doctest::Approx(4.0));
  CHECK(g.covariance[1][1] == doctest::Approx(4.0));
  CHECK(g.covariance[0][1] == doctest::Approx(g.covariance[1][0]));
}

TEST_CASE("closed form agrees with a sampled estimate on random pairs") {
  Rng rng(17);
  for (int pair = 0; pair < 3; ++pair) {
    const GaussianMoments a = random_gaussian(rng, 4);
    const GaussianMoments b = random_gaussian(rng, 4);
    const double exact = frechet_distance(a, b);
    const auto sa = sample_gaussian(a, 20000, rng);
    const auto sb = sample_gaussian(b, 20000, rng);
    const double sampled = frechet_distance(fit_moments(sa), fit_moments(sb));
    CHECK(std::abs(sampled - exact) / std::max(exact, 1e-9) < 0.02);
  }
}

TEST_CASE("fid analog: noise floor and sensitivity") {
  FrozenEmbedding emb(11);
  const auto va = rollout_dataset(40, 8, 3);
  const auto vb = rollout_dataset(40, 8, 4);
  auto frames_of = [](const std::vector<Video>& vs) {
    std::vector<Latent> out;
    for (const auto& v : vs)
      for (const auto& f : v.frames) out.push_back(f);
    return out;
  };
  const auto fa = frames_of(va);
  const auto fb = frames_of(vb);
  const double floor = fid_analog(fa, fb, emb);
  CHECK(floor >= 0.0);

  // corrupt one slot per frame and the statistic moves well above the floor
  auto corrupted = fb;
  for (auto& f : corrupted) {
    f.values[kMapCells + 5] = 1.0;  // force a phantom object
    f.values[kMapCells + 7] = 3.9;
    f.values[kMapCells + 8] = 0.1;
  }
  CHECK(fid_analog(fa, corrupted, emb) > 3.0 * floor);
}

TEST_CASE("fvd analog reacts to temporal shuffling") {
  FrozenEmbedding emb(11);
  const auto va = rollout_dataset(500, 8, 5);
  const auto vb = rollout_dataset(500, 8, 6);
  const double floor = fvd_analog(va, vb, emb);

  auto reversed = vb;
  for (auto& v : reversed) {
    // frame-set preserved, time direction destroyed
    std::reverse(v.frames.begin(), v.frames.end());
  }
  CHECK(fvd_analog(va, reversed, emb) > 2.0 * floor);
}

TEST_CASE("degenerate inputs throw") {
  CHECK_THROWS(fit_moments({}));
  std::vector<Vec> ragged = {{1.0, 2.0}, {1.0}};
  CHECK_THROWS(fit_moments(ragged));
}
