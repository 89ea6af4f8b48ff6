#include <benchmark/benchmark.h>

#include "wmlab/experiment.hpp"
#include "wmlab/metrics.hpp"

using namespace wmlab;

namespace {

struct BenchWorld {
  NoiseSchedule schedule = make_schedule(25, 0.005, 0.05);
  ConditionalMixture mixture = make_world_mixture(4, 0.0009, 7);
  FrozenEmbedding embedding{11};
  Scene scene;
  PhysicalCondition R;
  InputCondition C;

  BenchWorld() {
    Rng rng(5);
    scene = random_rollout_scene(rng, 8);
    R = encode_condition(scene);
    C = encode_context(scene);
  }
};

BenchWorld& world() {
  static BenchWorld w;
  return w;
}

void BM_AnalyticEps(benchmark::State& state) {
  BenchWorld& w = world();
  Rng rng(9);
  const Latent x0 = encode_frame(w.scene);
  const Latent x_t = forward_sample(x0, 13, NoisePrediction{rng.normal_vec(kLatentDim)}, w.schedule);
  for (auto _ : state) {
    benchmark::DoNotOptimize(analytic_eps(x_t, 13, w.R, w.C, w.mixture, w.schedule));
  }
}
BENCHMARK(BM_AnalyticEps);

void BM_DiscrepancyGradient(benchmark::State& state) {
  BenchWorld& w = world();
  Rng rng(11);
  const DenoiserHandle h = analytic_handle(w.mixture, w.R, w.C);
  const Latent x0 = encode_frame(w.scene);
  const Latent xa = forward_sample(x0, 13, NoisePrediction{rng.normal_vec(kLatentDim)}, w.schedule);
  const Latent xb = forward_sample(x0, 13, NoisePrediction{rng.normal_vec(kLatentDim)}, w.schedule);
  for (auto _ : state) {
    benchmark::DoNotOptimize(grad_discrepancy_latent(xa, xb, h, h, 13, w.schedule));
  }
}
BENCHMARK(BM_DiscrepancyGradient);

void BM_SampleReverse(benchmark::State& state) {
  BenchWorld& w = world();
  const DenoiserHandle h = analytic_handle(w.mixture, w.R, w.C);
  Rng rng(13);
  for (auto _ : state) {
    benchmark::DoNotOptimize(sample_reverse(h, w.schedule, rng));
  }
}
BENCHMARK(BM_SampleReverse);

void BM_RunAttackFrame(benchmark::State& state) {
  BenchWorld& w = world();
  WorldModel model;
  model.variant = DenoiserHandle::Variant::kAnalytic;
  model.mixture = &w.mixture;
  Rng rng(17);
  const Scene scene0 = random_rollout_scene(rng, 2);
  const auto edits = pick_target_edits(scene0, rng, 3);
  AttackConfig cfg;
  for (auto _ : state) {
    benchmark::DoNotOptimize(
        run_attack(scene0, edits, model, w.embedding, cfg, w.schedule, 2, 21));
  }
}
BENCHMARK(BM_RunAttackFrame);

void BM_JudgeVideo(benchmark::State& state) {
  const auto videos = rollout_dataset(1, 8, 31);
  const JudgeRules rules;
  for (auto _ : state) {
    benchmark::DoNotOptimize(judge_video(videos[0], rules));
  }
}
BENCHMARK(BM_JudgeVideo);

void BM_FrechetDistance(benchmark::State& state) {
  const auto videos = rollout_dataset(80, 2, 41);
  std::vector<Latent> a, b;
  for (std::size_t i = 0; i < videos.size(); ++i) {
    for (const auto& f : videos[i].frames) (i % 2 == 0 ? a : b).push_back(f);
  }
  BenchWorld& w = world();
  for (auto _ : state) {
    benchmark::DoNotOptimize(fid_analog(a, b, w.embedding));
  }
}
BENCHMARK(BM_FrechetDistance);

}  // namespace

BENCHMARK_MAIN();
