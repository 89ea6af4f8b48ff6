#include <cmath>

#include "doctest.h"
#include "wmlab/rng.hpp"
#include "wmlab/schedule.hpp"

using namespace wmlab;

TEST_CASE("linear beta schedule matches extended-precision oracle") {
  const int T = 25;
  const double b0 = 0.005, b1 = 0.05;
  const NoiseSchedule s = make_schedule(T, b0, b1);

  REQUIRE(s.num_steps == T);
  REQUIRE(int(s.betas.size()) == T);
  REQUIRE(int(s.alpha_bars.size()) == T);

  long double abar = 1.0L;
  for (int t = 1; t <= T; ++t) {
    const long double beta =
        (long double)(b0) + (long double)(b1 - b0) * (t - 1) / (T - 1);
    abar *= (1.0L - beta);
    CHECK(s.beta(t) == doctest::Approx(double(beta)).epsilon(1e-14));
    CHECK(s.alpha_bar(t) == doctest::Approx(double(abar)).epsilon(1e-13));
    CHECK(s.beta(t) > 0.0);
    CHECK(s.beta(t) < 1.0);
    // reverse variance rule: sigma_t^2 = beta_t
    CHECK(s.sigma(t) * s.sigma(t) == doctest::Approx(s.beta(t)).epsilon(1e-14));
  }
  CHECK(s.alpha_bar(0) == 1.0);
}

TEST_CASE("forward_sample closed form") {
  const NoiseSchedule s = make_schedule(25, 0.005, 0.05);
  Rng rng(42);
  Latent x0{rng.normal_vec(81), 0};
  NoisePrediction eps{rng.normal_vec(81)};
  for (int t : {1, 13, 25}) {
    const Latent xt = forward_sample(x0, t, eps, s);
    const double ra = std::sqrt(s.alpha_bar(t));
    const double rb = std::sqrt(1.0 - s.alpha_bar(t));
    REQUIRE(xt.timestep == t);
    for (std::size_t i = 0; i < x0.values.size(); ++i) {
      CHECK(xt.values[i] ==
            doctest::Approx(ra * x0.values[i] + rb * eps.values[i]).epsilon(1e-14));
    }
  }
}

TEST_CASE("reverse_step suppresses noise at t = 1") {
  const NoiseSchedule s = make_schedule(25, 0.005, 0.05);
  Rng rng(7);
  Latent x1{rng.normal_vec(81), 1};
  NoisePrediction eps{rng.normal_vec(81)};
  NoisePrediction za{rng.normal_vec(81)};
  NoisePrediction zb{rng.normal_vec(81)};
  const Latent a = reverse_step(x1, eps, s, za);
  const Latent b = reverse_step(x1, eps, s, zb);
  REQUIRE(a.timestep == 0);
  for (std::size_t i = 0; i < a.values.size(); ++i) CHECK(a.values[i] == b.values[i]);
}

TEST_CASE("reverse_step posterior mean closed form") {
  const NoiseSchedule s = make_schedule(25, 0.005, 0.05);
  Rng rng(9);
  const int t = 12;
  Latent xt{rng.normal_vec(81), t};
  NoisePrediction eps{rng.normal_vec(81)};
  NoisePrediction z{rng.normal_vec(81)};
  const Latent next = reverse_step(xt, eps, s, z);
  const double beta = s.beta(t);
  const double alpha = 1.0 - beta;
  const double abar = s.alpha_bar(t);
  for (std::size_t i = 0; i < xt.values.size(); ++i) {
    const double mean =
        (xt.values[i] - beta / std::sqrt(1.0 - abar) * eps.values[i]) / std::sqrt(alpha);
    CHECK(next.values[i] ==
          doctest::Approx(mean + s.sigma(t) * z.values[i]).epsilon(1e-12));
  }
}

TEST_CASE("loss and norm helpers") {
  CHECK(mse({1.0, 2.0}, {1.0, 2.0}) == 0.0);
  CHECK(mse({0.0, 0.0}, {3.0, 4.0}) == doctest::Approx(12.5));
  CHECK(l2_norm({3.0, 4.0}) == doctest::Approx(5.0));
  NoisePrediction a{{1.0, 1.0}}, b{{0.0, 0.0}};
  CHECK(diffusion_loss(a, b) == doctest::Approx(1.0));
}

TEST_CASE("schedule json round trip") {
  const NoiseSchedule s = make_schedule(25, 0.005, 0.05);
  const NoiseSchedule r = NoiseSchedule::from_json(s.to_json());
  CHECK(r.num_steps == s.num_steps);
  for (int t = 1; t <= 25; ++t) {
    CHECK(r.beta(t) == s.beta(t));
    CHECK(r.alpha_bar(t) == s.alpha_bar(t));
  }
}
