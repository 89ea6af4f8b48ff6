#pragma once

#include <string>
#include <vector>

namespace wmlab {

using Vec = std::vector<double>;

// Linear-beta DDPM noise schedule. Index t runs 1..T; alpha_bar(0) == 1 so
// that x_0 is noiseless. Reverse variance uses sigma_t^2 = beta_t.
struct NoiseSchedule {
  int num_steps = 0;
  double beta_start = 0.0;
  double beta_end = 0.0;
  Vec betas;       // betas[t-1] = beta_t
  Vec alpha_bars;  // alpha_bars[t-1] = prod_{s<=t} (1 - beta_s)
  Vec sigmas;      // sigmas[t-1] = sqrt(beta_t)

  double beta(int t) const { return betas.at(t - 1); }
  double alpha_bar(int t) const { return t == 0 ? 1.0 : alpha_bars.at(t - 1); }
  double sigma(int t) const { return sigmas.at(t - 1); }

  std::string to_json() const;
  static NoiseSchedule from_json(const std::string& text);
};

struct Latent {
  Vec values;
  int timestep = 0;
};

struct NoisePrediction {
  Vec values;
};

NoiseSchedule make_schedule(int T, double beta_start, double beta_end);

// x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) noise
Latent forward_sample(const Latent& x0, int t, const NoisePrediction& noise,
                      const NoiseSchedule& schedule);

// DDPM posterior-mean step from t to t-1 using eps_hat; the stochastic term
// sigma_t * noise is suppressed at t = 1 so terminal frames are reproducible.
Latent reverse_step(const Latent& x_t, const NoisePrediction& eps_hat,
                    const NoiseSchedule& schedule, const NoisePrediction& noise);

// Mean squared error between two noise predictions.
double diffusion_loss(const NoisePrediction& eps_true,
                      const NoisePrediction& eps_pred);

double mse(const Vec& a, const Vec& b);
double l2_norm(const Vec& v);

}  // namespace wmlab
