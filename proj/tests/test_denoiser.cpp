#include <cmath>

#include "doctest.h"
#include "wmlab/denoiser.hpp"
#include "wmlab/rng.hpp"
#include "wmlab/scene.hpp"

using namespace wmlab;

namespace {

struct World {
  NoiseSchedule schedule = make_schedule(25, 0.005, 0.05);
  ConditionalMixture mixture = make_world_mixture(4, 0.0009, 7);
  Scene scene;
  PhysicalCondition R;
  InputCondition C;

  explicit World(std::uint64_t seed) {
    Rng rng(seed);
    scene = random_rollout_scene(rng, 8);
    R = encode_condition(scene);
    C = encode_context(scene);
  }
};

Latent noised_probe(const World& w, int t, std::uint64_t seed) {
  Rng rng(seed);
  const Latent x0 = encode_frame(w.scene);
  const NoisePrediction eps{rng.normal_vec(kLatentDim)};
  return forward_sample(x0, t, eps, w.schedule);
}

double rel_err(const Vec& got, const Vec& want) {
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < got.size(); ++i) {
    const double d = got[i] - want[i];
    num += d * d;
    den += want[i] * want[i];
  }
  return std::sqrt(num) / std::max(std::sqrt(den), 1e-12);
}

}  // namespace

TEST_CASE("analytic eps matches the score of the noised mixture") {
  World w(11);
  const double h = 1e-4;
  for (int t : {1, 13, 25}) {
    for (int probe = 0; probe < 20; ++probe) {
      const Latent x_t = noised_probe(w, t, 1000 + probe);
      const NoisePrediction eps =
          analytic_eps(x_t, t, w.R, w.C, w.mixture, w.schedule);
      // eps*(x) = -sqrt(1 - abar) * grad log p_t(x), via central differences
      const double scale = -std::sqrt(1.0 - w.schedule.alpha_bar(t));
      Vec fd(kLatentDim);
      for (int i = 0; i < kLatentDim; ++i) {
        Vec xp = x_t.values, xm = x_t.values;
        xp[i] += h;
        xm[i] -= h;
        const double lp = mixture_log_density(xp, t, w.R, w.C, w.mixture, w.schedule);
        const double lm = mixture_log_density(xm, t, w.R, w.C, w.mixture, w.schedule);
        fd[i] = scale * (lp - lm) / (2.0 * h);
      }
      CHECK(rel_err(eps.values, fd) < 1e-5);
    }
  }
}

TEST_CASE("single-component mixture has the Gaussian posterior closed form") {
  const NoiseSchedule schedule = make_schedule(25, 0.005, 0.05);
  const ConditionalMixture mix = make_world_mixture(1, 0.0009, 3);
  World w(13);
  const Vec cond = flatten_condition(w.R, w.C);
  const Vec mu = mix.component_mean(0, cond);
  for (int t : {1, 13, 25}) {
    const Latent x_t = noised_probe(w, t, 55 + t);
    const NoisePrediction eps = analytic_eps(x_t, t, w.R, w.C, mix, schedule);
    const double abar = schedule.alpha_bar(t);
    const double c = abar * mix.s2 + (1.0 - abar);
    for (int i = 0; i < kLatentDim; ++i) {
      const double post =
          mu[i] + std::sqrt(abar) * mix.s2 / c * (x_t.values[i] - std::sqrt(abar) * mu[i]);
      const double want = (x_t.values[i] - std::sqrt(abar) * post) / std::sqrt(1.0 - abar);
      CHECK(eps.values[i] == doctest::Approx(want).epsilon(1e-10));
    }
  }
}

TEST_CASE("discrepancy latent gradient matches finite differences") {
  World w(17);
  Rng rng(21);
  const Scene att_scene = random_rollout_scene(rng, 8);
  const DenoiserHandle clean = analytic_handle(w.mixture, w.R, w.C);
  const DenoiserHandle att =
      analytic_handle(w.mixture, encode_condition(att_scene), encode_context(att_scene));
  const double h = 1e-5;
  for (DiscrepancyMode mode : {DiscrepancyMode::kNoisePred, DiscrepancyMode::kLatent}) {
    for (int probe = 0; probe < 20; ++probe) {
      const int t = 1 + (probe * 7) % 25;
      const Latent x_t = noised_probe(w, t, 300 + probe);
      Latent x_att = noised_probe(w, t, 600 + probe);
      const Vec g = grad_discrepancy_latent(x_t, x_att, clean, att, t, w.schedule, mode);
      Vec fd(kLatentDim);
      for (int i = 0; i < kLatentDim; ++i) {
        Latent xp = x_att, xm = x_att;
        xp.values[i] += h;
        xm.values[i] -= h;
        fd[i] = (branch_discrepancy(x_t, xp, clean, att, t, w.schedule, mode) -
                 branch_discrepancy(x_t, xm, clean, att, t, w.schedule, mode)) /
                (2.0 * h);
      }
      CHECK(rel_err(g, fd) < 1e-4);
    }
  }
}

TEST_CASE("discrepancy condition gradient matches finite differences") {
  World w(19);
  const DenoiserHandle clean = analytic_handle(w.mixture, w.R, w.C);
  const double h = 1e-5;
  for (int probe = 0; probe < 20; ++probe) {
    const int t = 1 + (probe * 5) % 25;
    const Latent x_t = noised_probe(w, t, 900 + probe);
    const Latent x_att = noised_probe(w, t, 1200 + probe);
    const DenoiserHandle att = analytic_handle(w.mixture, w.R, w.C);
    const Vec g = grad_discrepancy_condition(x_t, x_att, clean, att, t, w.schedule,
                                             CondChannel::kBoth);
    REQUIRE(int(g.size()) == kMapCells + kBoxDim);
    Vec fd(kMapCells + kBoxDim);
    for (int i = 0; i < kMapCells + kBoxDim; ++i) {
      auto eval = [&](double delta) {
        PhysicalCondition rp = w.R;
        if (i < kMapCells) rp.map_embed[i] += delta;
        else rp.box_embed[i - kMapCells] += delta;
        const DenoiserHandle hp = analytic_handle(w.mixture, rp, w.C);
        return branch_discrepancy(x_t, x_att, clean, hp, t, w.schedule);
      };
      fd[i] = (eval(h) - eval(-h)) / (2.0 * h);
    }
    CHECK(rel_err(g, fd) < 1e-4);
  }
}

TEST_CASE("channel masks zero the other channel") {
  World w(29);
  const DenoiserHandle clean = analytic_handle(w.mixture, w.R, w.C);
  const Latent x_t = noised_probe(w, 13, 71);
  const Latent x_att = noised_probe(w, 13, 72);
  const Vec gm = grad_discrepancy_condition(x_t, x_att, clean, clean, 13, w.schedule,
                                            CondChannel::kMap);
  const Vec gb = grad_discrepancy_condition(x_t, x_att, clean, clean, 13, w.schedule,
                                            CondChannel::kBox);
  for (int i = kMapCells; i < kMapCells + kBoxDim; ++i) CHECK(gm[i] == 0.0);
  for (int i = 0; i < kMapCells; ++i) CHECK(gb[i] == 0.0);
}

TEST_CASE("similarity gradient matches finite differences") {
  World w(31);
  FrozenEmbedding emb(11);
  Rng rng(37);
  const Scene tscene = random_rollout_scene(rng, 8);
  const InputCondition target = encode_context(tscene);
  const double h = 1e-5;
  for (int probe = 0; probe < 20; ++probe) {
    const Latent x = noised_probe(w, 13, 2000 + probe);
    const Vec g = emb.grad_similarity(x, target);
    Vec fd(kLatentDim);
    for (int i = 0; i < kLatentDim; ++i) {
      Latent xp = x, xm = x;
      xp.values[i] += h;
      xm.values[i] -= h;
      fd[i] = (emb.similarity(xp, target) - emb.similarity(xm, target)) / (2.0 * h);
    }
    CHECK(rel_err(g, fd) < 1e-4);
  }
}

TEST_CASE("eps_vjp agrees with directional finite differences") {
  World w(41);
  const DenoiserHandle handle = analytic_handle(w.mixture, w.R, w.C);
  Rng rng(43);
  const Latent x_t = noised_probe(w, 13, 77);
  const Vec vbar = rng.normal_vec(kLatentDim);
  const EpsVjp vjp = eps_vjp(handle, x_t, 13, w.schedule, vbar);
  auto dot_eps = [&](const Latent& x, const PhysicalCondition& R) {
    const DenoiserHandle h2 = analytic_handle(w.mixture, R, w.C);
    const NoisePrediction e = predict_noise(h2, x, 13, w.schedule);
    double acc = 0.0;
    for (int i = 0; i < kLatentDim; ++i) acc += vbar[i] * e.values[i];
    return acc;
  };
  const double h = 1e-5;
  for (int i = 0; i < 10; ++i) {
    Latent xp = x_t, xm = x_t;
    xp.values[i] += h;
    xm.values[i] -= h;
    const double fd = (dot_eps(xp, w.R) - dot_eps(xm, w.R)) / (2.0 * h);
    CHECK(vjp.d_x[i] == doctest::Approx(fd).epsilon(1e-4));
  }
  for (int i = 0; i < 6; ++i) {
    PhysicalCondition rp = w.R, rm = w.R;
    rp.map_embed[i] += h;
    rm.map_embed[i] -= h;
    const double fd = (dot_eps(x_t, rp) - dot_eps(x_t, rm)) / (2.0 * h);
    CHECK(vjp.d_map[i] == doctest::Approx(fd).epsilon(1e-4));
  }
}

TEST_CASE("reverse sampling is deterministic per rng state") {
  World w(47);
  const DenoiserHandle handle = analytic_handle(w.mixture, w.R, w.C);
  Rng a(5), b(5);
  const Latent sa = sample_reverse(handle, w.schedule, a);
  const Latent sb = sample_reverse(handle, w.schedule, b);
  REQUIRE(sa.timestep == 0);
  CHECK(sa.values == sb.values);
}

TEST_CASE("mixture moments match brute-force sampling") {
  World w(53);
  Vec mean, var;
  mixture_moments(w.mixture, w.R, w.C, &mean, &var);
  REQUIRE(int(mean.size()) == kLatentDim);
  Rng rng(59);
  Vec emp_mean(kLatentDim, 0.0);
  const int n = 4000;
  for (int i = 0; i < n; ++i) {
    const Latent x = sample_mixture_x0(w.mixture, w.R, w.C, rng);
    for (int d = 0; d < kLatentDim; ++d) emp_mean[d] += x.values[d] / n;
  }
  double err = 0.0;
  for (int d = 0; d < kLatentDim; ++d) err = std::max(err, std::abs(emp_mean[d] - mean[d]));
  CHECK(err < 0.05);
}

TEST_CASE("mlp denoiser: deterministic init and training") {
  const auto p1 = init_denoiser(32, 9);
  const auto p2 = init_denoiser(32, 9);
  CHECK(p1.w1 == p2.w1);
  CHECK(p1.b3 == p2.b3);

  const auto videos = rollout_dataset(4, 4, 77);
  const NoiseSchedule schedule = make_schedule(25, 0.005, 0.05);
  TrainConfig tc;
  tc.steps = 60;
  tc.batch_size = 4;
  tc.hidden_dim = 32;
  tc.seed = 5;
  tc.checkpoint_every = 20;
  const auto ta = train_denoiser(videos, schedule, tc);
  const auto tb = train_denoiser(videos, schedule, tc);
  CHECK(ta.w2 == tb.w2);
  CHECK(ta.final_loss == tb.final_loss);
  CHECK(std::isfinite(ta.final_loss));
  CHECK_FALSE(ta.checkpoint_losses.empty());

  World w(61);
  const Latent x_t = noised_probe(w, 13, 88);
  const NoisePrediction e = mlp_eps(ta, x_t, 13, w.R, w.C, schedule);
  REQUIRE(int(e.values.size()) == kLatentDim);
  const auto r = DenoiserParams::from_json(ta.to_json());
  const NoisePrediction e2 = mlp_eps(r, x_t, 13, w.R, w.C, schedule);
  CHECK(e.values == e2.values);
}
