#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "wmlab/alignment.hpp"
#include "wmlab/scene.hpp"
#include "wmlab/schedule.hpp"

namespace wmlab {

inline constexpr int kCondDim = kMapCells + kBoxDim + kContextDim;  // 158

// Ground-truth data law: a Gaussian mixture over frame latents whose component
// means shift linearly with the conditioning vector [map; box; context]. The
// linear map encodes one kinematic step, so the conditional mean is the
// expected next frame. Isotropic covariance keeps the posterior mean (and
// therefore the exact noise predictor) in closed form.
struct ConditionalMixture {
  int num_components = 1;
  Vec weights;                   // simplex, length K
  std::vector<Vec> base_means;   // K x kLatentDim
  Vec cond_weight;               // row-major kLatentDim x kCondDim
  double s2 = 1e-2;              // component variance

  Vec component_mean(int k, const Vec& cond) const;
  std::string to_json() const;
  static ConditionalMixture from_json(const std::string& text);
};

// Mixture whose linear conditioning map is the world's kinematic step; base
// offsets perturb only continuous coordinates so clean samples decode to valid
// scenes.
ConditionalMixture make_world_mixture(int K, double s2, std::uint64_t seed,
                                      double base_offset_scale = 0.03);

Vec flatten_condition(const PhysicalCondition& R, const InputCondition& C);

// Exact noise predictor for the mixture: eps*(x_t) = (x_t - sqrt(abar) E[x0|x_t])
// / sqrt(1-abar), with responsibilities evaluated in log space under the noised
// component law N(sqrt(abar) mu_k, (abar s^2 + 1 - abar) I).
NoisePrediction analytic_eps(const Latent& x_t, int t, const PhysicalCondition& R,
                             const InputCondition& C, const ConditionalMixture& mixture,
                             const NoiseSchedule& schedule);

// log p_t(x) up to an additive constant; the score oracle for finite-difference
// checks of analytic_eps.
double mixture_log_density(const Vec& x, int t, const PhysicalCondition& R,
                           const InputCondition& C, const ConditionalMixture& mixture,
                           const NoiseSchedule& schedule);

Latent sample_mixture_x0(const ConditionalMixture& mixture, const PhysicalCondition& R,
                         const InputCondition& C, Rng& rng);

// Per-dimension mean and variance of the mixture (law of total variance).
void mixture_moments(const ConditionalMixture& mixture, const PhysicalCondition& R,
                     const InputCondition& C, Vec* mean, Vec* var);

// ---------------------------------------------------------------------------
// Trainable noise predictor: two-hidden-layer perceptron over
// [x_t, sinusoidal t-embedding, map, box, context].

inline constexpr int kTimeEmbedDim = 8;
inline constexpr int kMlpInputDim = kLatentDim + kTimeEmbedDim + kCondDim;

struct DenoiserParams {
  int input_dim = kMlpInputDim;
  int hidden_dim = 128;
  int output_dim = kLatentDim;
  Vec w1, b1, w2, b2, w3, b3;
  double final_loss = 0.0;
  Vec checkpoint_losses;

  std::string to_json() const;
  static DenoiserParams from_json(const std::string& text);
};

DenoiserParams init_denoiser(int hidden_dim, std::uint64_t seed);
Vec time_embedding(int t, int T);

NoisePrediction mlp_eps(const DenoiserParams& params, const Latent& x_t, int t,
                        const PhysicalCondition& R, const InputCondition& C,
                        const NoiseSchedule& schedule);

struct TrainConfig {
  int steps = 2000;
  int batch_size = 16;
  double learning_rate = 1e-3;
  int hidden_dim = 128;
  std::uint64_t seed = 0;
  int checkpoint_every = 100;
};

DenoiserParams train_denoiser(const std::vector<Video>& dataset, const NoiseSchedule& schedule,
                              const TrainConfig& hyper);

// ---------------------------------------------------------------------------
// Handles and gradients.

struct DenoiserHandle {
  enum class Variant { kAnalytic, kTrained };
  Variant variant = Variant::kAnalytic;
  const ConditionalMixture* mixture = nullptr;
  const DenoiserParams* params = nullptr;
  PhysicalCondition cond;    // bound R (delta already applied on the attacked branch)
  InputCondition context;    // bound C
};

DenoiserHandle analytic_handle(const ConditionalMixture& mixture, PhysicalCondition R,
                               InputCondition C);
DenoiserHandle trained_handle(const DenoiserParams& params, PhysicalCondition R,
                              InputCondition C);

NoisePrediction predict_noise(const DenoiserHandle& handle, const Latent& x_t, int t,
                              const NoiseSchedule& schedule);

// Full reverse-diffusion sample: x_T drawn from the moment-matched noised
// marginal (analytic variant), then denoised to x_0 with the bound predictor.
Latent sample_reverse(const DenoiserHandle& handle, const NoiseSchedule& schedule, Rng& rng);

// Gradients of <vbar, eps_theta(x_t, t, R, C)> with respect to the latent and
// the conditioning channels; exact for both variants (closed form for the
// mixture, reverse-mode for the perceptron).
struct EpsVjp {
  Vec d_x;     // kLatentDim
  Vec d_map;   // kMapCells
  Vec d_box;   // kBoxDim
  Vec d_ctx;   // kContextDim
};

EpsVjp eps_vjp(const DenoiserHandle& handle, const Latent& x_t, int t,
               const NoiseSchedule& schedule, const Vec& vbar);

enum class DiscrepancyMode { kNoisePred, kLatent };
enum class CondChannel { kMap, kBox, kBoth };

// L_diff between the clean and attacked branches at a shared timestep: MSE of
// the two noise predictions by default, plain latent MSE in the alternative
// mode.
double branch_discrepancy(const Latent& x_t, const Latent& x_t_att,
                          const DenoiserHandle& clean, const DenoiserHandle& att, int t,
                          const NoiseSchedule& schedule,
                          DiscrepancyMode mode = DiscrepancyMode::kNoisePred);

// d L_diff / d x_att
Vec grad_discrepancy_latent(const Latent& x_t, const Latent& x_t_att,
                            const DenoiserHandle& clean, const DenoiserHandle& att, int t,
                            const NoiseSchedule& schedule,
                            DiscrepancyMode mode = DiscrepancyMode::kNoisePred);

// d L_diff / d (attacked R), masked to the selected channel. Layout:
// [map (12) | box (64)].
Vec grad_discrepancy_condition(const Latent& x_t, const Latent& x_t_att,
                               const DenoiserHandle& clean, const DenoiserHandle& att, int t,
                               const NoiseSchedule& schedule, CondChannel channel,
                               DiscrepancyMode mode = DiscrepancyMode::kNoisePred);

// Alignment evaluated on the denoised estimate x0_hat = (x_t - sqrt(1-abar)
// eps) / sqrt(abar); its condition gradient drives the delta updates in the
// targeted mode.
double alignment_xhat0(const DenoiserHandle& handle, const Latent& x_t, int t,
                       const NoiseSchedule& schedule, const FrozenEmbedding& embedding,
                       const InputCondition& target);

Vec grad_alignment_condition(const DenoiserHandle& handle, const Latent& x_t, int t,
                             const NoiseSchedule& schedule, const FrozenEmbedding& embedding,
                             const InputCondition& target, CondChannel channel);

}  // namespace wmlab
