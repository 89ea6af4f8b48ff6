#pragma once

#include <optional>
#include <string>
#include <vector>

#include "wmlab/alignment.hpp"
#include "wmlab/denoiser.hpp"
#include "wmlab/scene.hpp"
#include "wmlab/schedule.hpp"

namespace wmlab {

enum class AttackMode { kUntargeted, kTargeted };
enum class StageVariant { kFull, kStage1Only, kStage2Only };

// Sign convention (frozen against the analytic denoiser): the reverse update
// moves the latent by -(beta_t / sqrt(alpha_t (1-abar_t))) times whatever is
// injected into the noise prediction, so a scalar objective f is *increased*
// by injecting -grad f and *decreased* by injecting +grad f. Stage 1 injects
// +alpha_A grad L_diff (keeps the discrepancy trending down), the stage-2
// fidelity term injects +beta grad L_diff, the stage-2 alignment term injects
// -grad A (drives alignment up), and the untargeted stage-2 term injects
// -grad L_diff (pushes the branch away from the clean anchor).
struct AttackConfig {
  double alpha_guidance = 0.1;    // alpha_A, stage-1 gradient scale
  double lambda_momentum = 0.9;   // EMA factor, (0,1); 1.0 = no-attack identity
  double beta_fidelity = 0.6;     // stage-2 fidelity weight
  double tau = 0.15;              // stage-1 termination threshold
  AttackMode mode = AttackMode::kTargeted;
  CondChannel channel = CondChannel::kBoth;
  double delta_step = 0.01;       // eta_R, signed-gradient step on delta
  double delta_budget = 0.5;      // rho, per-channel L2 cap on delta
  double lambda_obj_reg = 1.0;    // Eq-6 style diagnostic weights; telemetry only
  double lambda_obj_diff = 1.0;
  double lambda_obj_target = 1.0;
  DiscrepancyMode discrepancy_mode = DiscrepancyMode::kNoisePred;
  StageVariant stage_variant = StageVariant::kFull;
  // Fraction of the target latent mixed into the attacked branch's chain seed.
  // The seed mismatch against the branch's own conditioning is what lifts the
  // initial branch discrepancy; left undefended it mostly washes out during
  // denoising. Inactive at lambda = 1 and in the stage-1-only ablation.
  double target_blend = 1.0;
  // Per-step pull rate toward the noised target during stage-2 targeted
  // updates, scaled down by the current branch discrepancy (steering is only
  // reliable once the branches agree). The dose a frame receives therefore
  // depends on how early stage 2 starts and how small L is once it does.
  double target_pull = 0.3;
};

void validate_attack_config(const AttackConfig& config);

struct StepTelemetry {
  int frame = 0;
  int t = 0;
  int stage = 1;
  double l_diff = 0.0;
  double alignment = 0.0;
  double eps_delta_norm = 0.0;  // ||eps_tilde - eps||
  double delta_norm = 0.0;      // ||delta|| over both channels
  double objective = 0.0;       // diagnostic Eq-6 style value
};

struct AttackResult {
  Video clean_video;
  Video attacked_video;
  Vec delta_map;  // kMapCells
  Vec delta_box;  // kBoxDim
  std::vector<StepTelemetry> telemetry;
  // Reverse timestep at which each frame's chain switched to stage 2 (-1 if
  // the threshold was never reached).
  std::vector<int> stage_switch_steps;
  std::optional<int> stage_switch_step;  // first frame's switch, if any

  std::string telemetry_csv() const;
};

struct WorldModel {
  DenoiserHandle::Variant variant = DenoiserHandle::Variant::kAnalytic;
  const ConditionalMixture* mixture = nullptr;
  const DenoiserParams* params = nullptr;

  DenoiserHandle bind(PhysicalCondition R, InputCondition C) const;
};

// One stage-1 update: eps_tilde = eps + alpha_A grad_x L_diff, then the shared
// reverse step. Returns the next latent and L_diff evaluated before the update.
std::pair<Latent, double> stage1_step(const Latent& x_t_att, const Latent& x_t_clean,
                                      const DenoiserHandle& clean, const DenoiserHandle& att,
                                      const AttackConfig& config, const NoiseSchedule& schedule,
                                      const NoisePrediction& noise,
                                      double* eps_delta_norm = nullptr);

bool check_stage1_termination(double l_diff, const AttackConfig& config);

Latent stage2_step_targeted(const Latent& x_t_att, const Latent& x_t_clean,
                            const InputCondition& target, const DenoiserHandle& clean,
                            const DenoiserHandle& att, const FrozenEmbedding& embedding,
                            const AttackConfig& config, const NoiseSchedule& schedule,
                            const NoisePrediction& noise, double* eps_delta_norm = nullptr);

Latent stage2_step_untargeted(const Latent& x_t_att, const Latent& x_t_clean,
                              const DenoiserHandle& clean, const DenoiserHandle& att,
                              const AttackConfig& config, const NoiseSchedule& schedule,
                              const NoisePrediction& noise, double* eps_delta_norm = nullptr);

struct DeltaState {
  Vec map;  // kMapCells
  Vec box;  // kBoxDim
  double norm() const;
};

// Signed-gradient ascent on the selected channels followed by an L2 projection
// of each channel onto the budget ball.
DeltaState update_delta(const DeltaState& delta, const Vec& grad_R, const AttackConfig& config);

// target_edits are applied to scene0 in order to form the target scene; an
// empty list means no target (required empty in untargeted mode's semantics,
// ignored there).
AttackResult run_attack(const Scene& scene0, const std::vector<SceneEdit>& target_edits,
                        const WorldModel& model, const FrozenEmbedding& embedding,
                        const AttackConfig& config, const NoiseSchedule& schedule, int M,
                        std::uint64_t seed);

}  // namespace wmlab
