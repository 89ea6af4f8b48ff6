#include "wmlab/schedule.hpp"

#include <cmath>
#include <stdexcept>

#include "json.hpp"

namespace wmlab {

NoiseSchedule make_schedule(int T, double beta_start, double beta_end) {
  if (T < 1) throw std::invalid_argument("make_schedule: T must be >= 1");
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0)) {
    throw std::invalid_argument("make_schedule: need 0 < beta_start <= beta_end < 1");
  }
  NoiseSchedule s;
  s.num_steps = T;
  s.beta_start = beta_start;
  s.beta_end = beta_end;
  s.betas.resize(T);
  s.alpha_bars.resize(T);
  s.sigmas.resize(T);
  double abar = 1.0;
  for (int t = 1; t <= T; ++t) {
    const double frac = (T == 1) ? 0.0 : double(t - 1) / double(T - 1);
    const double beta = beta_start + frac * (beta_end - beta_start);
    abar *= (1.0 - beta);
    s.betas[t - 1] = beta;
    s.alpha_bars[t - 1] = abar;
    s.sigmas[t - 1] = std::sqrt(beta);
  }
  return s;
}

Latent forward_sample(const Latent& x0, int t, const NoisePrediction& noise,
                      const NoiseSchedule& schedule) {
  if (x0.timestep != 0) throw std::invalid_argument("forward_sample: x0 must be at timestep 0");
  if (t < 1 || t > schedule.num_steps) throw std::invalid_argument("forward_sample: t out of range");
  if (noise.values.size() != x0.values.size()) {
    throw std::invalid_argument("forward_sample: dimension mismatch");
  }
  const double abar = schedule.alpha_bar(t);
  const double a = std::sqrt(abar);
  const double b = std::sqrt(1.0 - abar);
  Latent out;
  out.timestep = t;
  out.values.resize(x0.values.size());
  for (std::size_t i = 0; i < x0.values.size(); ++i) {
    out.values[i] = a * x0.values[i] + b * noise.values[i];
  }
  return out;
}

Latent reverse_step(const Latent& x_t, const NoisePrediction& eps_hat,
                    const NoiseSchedule& schedule, const NoisePrediction& noise) {
  const int t = x_t.timestep;
  if (t < 1 || t > schedule.num_steps) throw std::invalid_argument("reverse_step: t out of range");
  if (eps_hat.values.size() != x_t.values.size() || noise.values.size() != x_t.values.size()) {
    throw std::invalid_argument("reverse_step: dimension mismatch");
  }
  const double beta = schedule.beta(t);
  const double alpha = 1.0 - beta;
  const double abar = schedule.alpha_bar(t);
  const double inv_sqrt_alpha = 1.0 / std::sqrt(alpha);
  const double eps_coeff = beta / std::sqrt(1.0 - abar);
  const double sigma = (t == 1) ? 0.0 : schedule.sigma(t);
  Latent out;
  out.timestep = t - 1;
  out.values.resize(x_t.values.size());
  for (std::size_t i = 0; i < x_t.values.size(); ++i) {
    out.values[i] = inv_sqrt_alpha * (x_t.values[i] - eps_coeff * eps_hat.values[i]) +
                    sigma * noise.values[i];
  }
  return out;
}

double mse(const Vec& a, const Vec& b) {
  if (a.size() != b.size()) throw std::invalid_argument("mse: dimension mismatch");
  if (a.empty()) return 0.0;
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    acc += d * d;
  }
  return acc / double(a.size());
}

double l2_norm(const Vec& v) {
  double acc = 0.0;
  for (double x : v) acc += x * x;
  return std::sqrt(acc);
}

double diffusion_loss(const NoisePrediction& eps_true, const NoisePrediction& eps_pred) {
  return mse(eps_true.values, eps_pred.values);
}

std::string to_json_impl(const NoiseSchedule& s) {
  nlohmann::json j;
  j["T"] = s.num_steps;
  j["beta_start"] = s.beta_start;
  j["beta_end"] = s.beta_end;
  j["kind"] = "linear";
  return j.dump();
}

std::string NoiseSchedule::to_json() const { return to_json_impl(*this); }

NoiseSchedule NoiseSchedule::from_json(const std::string& text) {
  auto j = nlohmann::json::parse(text);
  if (j.at("kind").get<std::string>() != "linear") {
    throw std::invalid_argument("NoiseSchedule::from_json: unsupported kind");
  }
  return make_schedule(j.at("T").get<int>(), j.at("beta_start").get<double>(),
                       j.at("beta_end").get<double>());
}

}  // namespace wmlab
