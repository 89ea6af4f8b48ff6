#include "wmlab/denoiser.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "json.hpp"

namespace wmlab {
namespace {

constexpr int kLightOff = kMapCells;
constexpr int kEgoOff = kMapCells + 1;
constexpr int kSlotOff = kEgoOff + 4;

struct MixtureState {
  double abar = 0.0, sqab = 0.0, v = 0.0;
  std::vector<Vec> diffs;  // d_k = x - sqrt(abar) mu_k
  Vec resp;                // responsibilities
};

MixtureState mixture_state(const Vec& x, int t, const Vec& cond,
                           const ConditionalMixture& mix, const NoiseSchedule& schedule) {
  if (t < 1 || t > schedule.num_steps) throw std::invalid_argument("mixture: t out of range");
  for (double xi : x) {
    if (!std::isfinite(xi)) throw std::invalid_argument("mixture: non-finite latent");
  }
  MixtureState st;
  st.abar = schedule.alpha_bar(t);
  st.sqab = std::sqrt(st.abar);
  st.v = st.abar * mix.s2 + (1.0 - st.abar);
  const int K = mix.num_components;
  st.diffs.resize(K);
  Vec logits(K);
  double max_logit = -std::numeric_limits<double>::infinity();
  for (int k = 0; k < K; ++k) {
    const Vec mu = mix.component_mean(k, cond);
    Vec d(x.size());
    double sq = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      d[i] = x[i] - st.sqab * mu[i];
      sq += d[i] * d[i];
    }
    st.diffs[k] = std::move(d);
    logits[k] = std::log(std::max(mix.weights[k], 1e-300)) - sq / (2.0 * st.v);
    max_logit = std::max(max_logit, logits[k]);
  }
  if (!std::isfinite(max_logit)) {
    throw std::runtime_error("mixture: degenerate responsibilities");
  }
  st.resp.resize(K);
  double z = 0.0;
  for (int k = 0; k < K; ++k) {
    st.resp[k] = std::exp(logits[k] - max_logit);
    z += st.resp[k];
  }
  for (auto& r : st.resp) r /= z;
  return st;
}

}  // namespace

Vec ConditionalMixture::component_mean(int k, const Vec& cond) const {
  Vec mu = base_means.at(k);
  for (int r = 0; r < kLatentDim; ++r) {
    const double* row = cond_weight.data() + std::size_t(r) * kCondDim;
    double acc = 0.0;
    for (int c = 0; c < kCondDim; ++c) acc += row[c] * cond[c];
    mu[r] += acc;
  }
  return mu;
}

Vec flatten_condition(const PhysicalCondition& R, const InputCondition& C) {
  Vec u;
  u.reserve(kCondDim);
  u.insert(u.end(), R.map_embed.begin(), R.map_embed.end());
  u.insert(u.end(), R.box_embed.begin(), R.box_embed.end());
  u.insert(u.end(), C.context_embed.begin(), C.context_embed.end());
  if (int(u.size()) != kCondDim) throw std::invalid_argument("flatten_condition: bad dims");
  return u;
}

ConditionalMixture make_world_mixture(int K, double s2, std::uint64_t seed,
                                      double base_offset_scale) {
  if (K < 1 || s2 <= 0.0) throw std::invalid_argument("make_world_mixture: bad parameters");
  ConditionalMixture mix;
  mix.num_components = K;
  mix.s2 = s2;
  mix.weights.assign(K, 1.0 / K);
  mix.cond_weight.assign(std::size_t(kLatentDim) * kCondDim, 0.0);

  const int map_off = 0;
  const int box_off = kMapCells;
  const int ctx_off = kMapCells + kBoxDim;
  const int brake_off = ctx_off + kLatentDim;
  auto W = [&](int row, int col) -> double& {
    return mix.cond_weight[std::size_t(row) * kCondDim + col];
  };
  // Map cells persist from the map channel of R.
  for (int i = 0; i < kMapCells; ++i) W(i, map_off + i) = 1.0;
  // Light persists from the previous frame.
  W(kLightOff, ctx_off + kLightOff) = 1.0;
  // Ego advances by velocity; forward speed sheds the brake feature.
  W(kEgoOff + 0, ctx_off + kEgoOff + 0) = 1.0;
  W(kEgoOff + 0, ctx_off + kEgoOff + 2) = 1.0;
  W(kEgoOff + 1, ctx_off + kEgoOff + 1) = 1.0;
  W(kEgoOff + 1, ctx_off + kEgoOff + 3) = 1.0;
  W(kEgoOff + 2, ctx_off + kEgoOff + 2) = 1.0;
  W(kEgoOff + 2, brake_off) = -1.0;
  W(kEgoOff + 3, ctx_off + kEgoOff + 3) = 1.0;
  // Object slots come from the box channel; positions advance by slot velocity.
  for (int s = 0; s < kMaxObjects; ++s) {
    const int lat = kSlotOff + s * kSlotFeat;
    const int box = box_off + s * kSlotFeat;
    for (int f = 0; f < kSlotFeat; ++f) W(lat + f, box + f) = 1.0;
    W(lat + 2, box + 6) = 1.0;  // x += vx
    W(lat + 3, box + 7) = 1.0;  // y += vy
  }

  // Component base offsets live on continuous coordinates only, so they never
  // flip a discrete decode.
  Rng rng(seed ^ 0x5eedULL);
  mix.base_means.assign(K, Vec(kLatentDim, 0.0));
  for (int k = 1; k < K; ++k) {
    auto& b = mix.base_means[k];
    for (int i = 0; i < 4; ++i) b[kEgoOff + i] = base_offset_scale * rng.normal();
    for (int s = 0; s < kMaxObjects; ++s) {
      for (int f = 2; f < kSlotFeat; ++f) {
        b[kSlotOff + s * kSlotFeat + f] = base_offset_scale * rng.normal();
      }
    }
  }
  return mix;
}

NoisePrediction analytic_eps(const Latent& x_t, int t, const PhysicalCondition& R,
                             const InputCondition& C, const ConditionalMixture& mixture,
                             const NoiseSchedule& schedule) {
  const Vec cond = flatten_condition(R, C);
  const MixtureState st = mixture_state(x_t.values, t, cond, mixture, schedule);
  const double scale = std::sqrt(1.0 - st.abar) / st.v;
  NoisePrediction out;
  out.values.assign(x_t.values.size(), 0.0);
  for (int k = 0; k < mixture.num_components; ++k) {
    for (std::size_t i = 0; i < out.values.size(); ++i) {
      out.values[i] += st.resp[k] * st.diffs[k][i];
    }
  }
  for (auto& e : out.values) e *= scale;
  return out;
}

double mixture_log_density(const Vec& x, int t, const PhysicalCondition& R,
                           const InputCondition& C, const ConditionalMixture& mixture,
                           const NoiseSchedule& schedule) {
  const Vec cond = flatten_condition(R, C);
  const double abar = schedule.alpha_bar(t);
  const double sqab = std::sqrt(abar);
  const double v = abar * mixture.s2 + (1.0 - abar);
  double max_logit = -std::numeric_limits<double>::infinity();
  Vec logits(mixture.num_components);
  for (int k = 0; k < mixture.num_components; ++k) {
    const Vec mu = mixture.component_mean(k, cond);
    double sq = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double d = x[i] - sqab * mu[i];
      sq += d * d;
    }
    logits[k] = std::log(std::max(mixture.weights[k], 1e-300)) - sq / (2.0 * v);
    max_logit = std::max(max_logit, logits[k]);
  }
  double z = 0.0;
  for (double l : logits) z += std::exp(l - max_logit);
  return max_logit + std::log(z) - 0.5 * double(x.size()) * std::log(v);
}

Latent sample_mixture_x0(const ConditionalMixture& mixture, const PhysicalCondition& R,
                         const InputCondition& C, Rng& rng) {
  const Vec cond = flatten_condition(R, C);
  const double u = rng.uniform();
  int k = 0;
  double acc = 0.0;
  for (; k < mixture.num_components - 1; ++k) {
    acc += mixture.weights[k];
    if (u < acc) break;
  }
  Vec mu = mixture.component_mean(k, cond);
  const double s = std::sqrt(mixture.s2);
  Latent x0;
  x0.timestep = 0;
  x0.values.resize(mu.size());
  for (std::size_t i = 0; i < mu.size(); ++i) x0.values[i] = mu[i] + s * rng.normal();
  return x0;
}

void mixture_moments(const ConditionalMixture& mixture, const PhysicalCondition& R,
                     const InputCondition& C, Vec* mean, Vec* var) {
  const Vec cond = flatten_condition(R, C);
  mean->assign(kLatentDim, 0.0);
  var->assign(kLatentDim, mixture.s2);
  std::vector<Vec> mus(mixture.num_components);
  for (int k = 0; k < mixture.num_components; ++k) {
    mus[k] = mixture.component_mean(k, cond);
    for (int i = 0; i < kLatentDim; ++i) (*mean)[i] += mixture.weights[k] * mus[k][i];
  }
  for (int k = 0; k < mixture.num_components; ++k) {
    for (int i = 0; i < kLatentDim; ++i) {
      const double d = mus[k][i] - (*mean)[i];
      (*var)[i] += mixture.weights[k] * d * d;
    }
  }
}

Latent sample_reverse(const DenoiserHandle& handle, const NoiseSchedule& schedule, Rng& rng) {
  const int T = schedule.num_steps;
  const double abar_T = schedule.alpha_bar(T);
  Latent x;
  x.timestep = T;
  x.values.resize(kLatentDim);
  if (handle.variant == DenoiserHandle::Variant::kAnalytic) {
    // exact terminal marginal: pick a component, then its noised Gaussian
    const ConditionalMixture& mix = *handle.mixture;
    const Vec cond = flatten_condition(handle.cond, handle.context);
    double u = rng.uniform();
    int k = 0;
    for (; k + 1 < mix.num_components; ++k) {
      u -= mix.weights[k];
      if (u <= 0.0) break;
    }
    const Vec mu = mix.component_mean(k, cond);
    const double v = abar_T * mix.s2 + (1.0 - abar_T);
    for (int i = 0; i < kLatentDim; ++i) {
      x.values[i] = std::sqrt(abar_T) * mu[i] + std::sqrt(v) * rng.normal();
    }
  } else {
    // no closed-form marginal for the trained predictor; fall back to the
    // standard-normal init, acceptable when abar_T is small
    for (int i = 0; i < kLatentDim; ++i) x.values[i] = rng.normal();
  }
  const double s2 =
      (handle.variant == DenoiserHandle::Variant::kAnalytic) ? handle.mixture->s2 : 0.0;
  for (int t = T; t >= 1; --t) {
    const NoisePrediction eps = predict_noise(handle, x, t, schedule);
    // posterior mean, exact for any data density when eps is the exact score.
    // The noise scale is the per-component conditional variance: the usual
    // clean-anchor term plus the anchor's own posterior spread, which makes
    // the step exact for a single Gaussian component and near-exact for a
    // tight mixture.
    const double beta = schedule.beta(t);
    const double abar = schedule.alpha_bar(t);
    const double abar_prev = schedule.alpha_bar(t - 1);
    const double eps_coeff = beta / std::sqrt(1.0 - abar);
    const double inv_sqrt_alpha = 1.0 / std::sqrt(1.0 - beta);
    const double beta_tilde = (1.0 - abar_prev) / (1.0 - abar) * beta;
    const double anchor_coeff = std::sqrt(abar_prev) * beta / (1.0 - abar);
    const double anchor_var = s2 * (1.0 - abar) / (abar * s2 + 1.0 - abar);
    const double sigma = std::sqrt(beta_tilde + anchor_coeff * anchor_coeff * anchor_var);
    Latent next;
    next.timestep = t - 1;
    next.values.resize(kLatentDim);
    for (int i = 0; i < kLatentDim; ++i) {
      next.values[i] = inv_sqrt_alpha * (x.values[i] - eps_coeff * eps.values[i]) +
                       sigma * rng.normal();
    }
    x = std::move(next);
  }
  return x;
}

// ---------------------------------------------------------------------------
// Perceptron denoiser.

Vec time_embedding(int t, int T) {
  Vec e(kTimeEmbedDim);
  const double tn = double(t) / double(std::max(T, 1));
  for (int i = 0; i < kTimeEmbedDim / 2; ++i) {
    const double f = std::pow(2.0, i) * M_PI;
    e[2 * i] = std::sin(f * tn);
    e[2 * i + 1] = std::cos(f * tn);
  }
  return e;
}

DenoiserParams init_denoiser(int hidden_dim, std::uint64_t seed) {
  DenoiserParams p;
  p.hidden_dim = hidden_dim;
  Rng rng(seed ^ 0x3141ULL);
  auto init = [&](Vec& w, int rows, int cols) {
    w.resize(std::size_t(rows) * cols);
    const double s = 1.0 / std::sqrt(double(cols));
    for (auto& x : w) x = s * rng.normal();
  };
  init(p.w1, hidden_dim, p.input_dim);
  p.b1.assign(hidden_dim, 0.0);
  init(p.w2, hidden_dim, hidden_dim);
  p.b2.assign(hidden_dim, 0.0);
  init(p.w3, p.output_dim, hidden_dim);
  p.b3.assign(p.output_dim, 0.0);
  return p;
}

namespace {

struct MlpCache {
  Vec in, h1, h2, out;
};

void mlp_forward(const DenoiserParams& p, const Vec& in, MlpCache* cache) {
  cache->in = in;
  cache->h1.assign(p.hidden_dim, 0.0);
  for (int r = 0; r < p.hidden_dim; ++r) {
    double acc = p.b1[r];
    const double* row = p.w1.data() + std::size_t(r) * p.input_dim;
    for (int c = 0; c < p.input_dim; ++c) acc += row[c] * in[c];
    cache->h1[r] = std::tanh(acc);
  }
  cache->h2.assign(p.hidden_dim, 0.0);
  for (int r = 0; r < p.hidden_dim; ++r) {
    double acc = p.b2[r];
    const double* row = p.w2.data() + std::size_t(r) * p.hidden_dim;
    for (int c = 0; c < p.hidden_dim; ++c) acc += row[c] * cache->h1[c];
    cache->h2[r] = std::tanh(acc);
  }
  cache->out.assign(p.output_dim, 0.0);
  for (int r = 0; r < p.output_dim; ++r) {
    double acc = p.b3[r];
    const double* row = p.w3.data() + std::size_t(r) * p.hidden_dim;
    for (int c = 0; c < p.hidden_dim; ++c) acc += row[c] * cache->h2[c];
    cache->out[r] = acc;
  }
}

// Backward pass for <vbar, out>. Weight gradients are accumulated into *grads
// when non-null; the returned vector is the gradient with respect to the input.
Vec mlp_backward(const DenoiserParams& p, const MlpCache& cache, const Vec& vbar,
                 DenoiserParams* grads) {
  Vec dh2(p.hidden_dim, 0.0);
  for (int r = 0; r < p.output_dim; ++r) {
    const double* row = p.w3.data() + std::size_t(r) * p.hidden_dim;
    for (int c = 0; c < p.hidden_dim; ++c) dh2[c] += vbar[r] * row[c];
    if (grads) {
      grads->b3[r] += vbar[r];
      double* grow = grads->w3.data() + std::size_t(r) * p.hidden_dim;
      for (int c = 0; c < p.hidden_dim; ++c) grow[c] += vbar[r] * cache.h2[c];
    }
  }
  Vec dz2(p.hidden_dim);
  for (int r = 0; r < p.hidden_dim; ++r) dz2[r] = dh2[r] * (1.0 - cache.h2[r] * cache.h2[r]);
  Vec dh1(p.hidden_dim, 0.0);
  for (int r = 0; r < p.hidden_dim; ++r) {
    const double* row = p.w2.data() + std::size_t(r) * p.hidden_dim;
    for (int c = 0; c < p.hidden_dim; ++c) dh1[c] += dz2[r] * row[c];
    if (grads) {
      grads->b2[r] += dz2[r];
      double* grow = grads->w2.data() + std::size_t(r) * p.hidden_dim;
      for (int c = 0; c < p.hidden_dim; ++c) grow[c] += dz2[r] * cache.h1[c];
    }
  }
  Vec dz1(p.hidden_dim);
  for (int r = 0; r < p.hidden_dim; ++r) dz1[r] = dh1[r] * (1.0 - cache.h1[r] * cache.h1[r]);
  Vec din(p.input_dim, 0.0);
  for (int r = 0; r < p.hidden_dim; ++r) {
    const double* row = p.w1.data() + std::size_t(r) * p.input_dim;
    for (int c = 0; c < p.input_dim; ++c) din[c] += dz1[r] * row[c];
    if (grads) {
      grads->b1[r] += dz1[r];
      double* grow = grads->w1.data() + std::size_t(r) * p.input_dim;
      for (int c = 0; c < p.input_dim; ++c) grow[c] += dz1[r] * cache.in[c];
    }
  }
  return din;
}

Vec assemble_mlp_input(const Latent& x_t, int t, const PhysicalCondition& R,
                       const InputCondition& C, const NoiseSchedule& schedule) {
  Vec in;
  in.reserve(kMlpInputDim);
  in.insert(in.end(), x_t.values.begin(), x_t.values.end());
  const Vec temb = time_embedding(t, schedule.num_steps);
  in.insert(in.end(), temb.begin(), temb.end());
  const Vec cond = flatten_condition(R, C);
  in.insert(in.end(), cond.begin(), cond.end());
  return in;
}

}  // namespace

NoisePrediction mlp_eps(const DenoiserParams& params, const Latent& x_t, int t,
                        const PhysicalCondition& R, const InputCondition& C,
                        const NoiseSchedule& schedule) {
  MlpCache cache;
  mlp_forward(params, assemble_mlp_input(x_t, t, R, C, schedule), &cache);
  return NoisePrediction{std::move(cache.out)};
}

DenoiserParams train_denoiser(const std::vector<Video>& dataset, const NoiseSchedule& schedule,
                              const TrainConfig& hyper) {
  if (dataset.empty()) throw std::invalid_argument("train_denoiser: empty dataset");
  DenoiserParams p = init_denoiser(hyper.hidden_dim, hyper.seed);
  if (hyper.steps == 0) return p;

  Rng rng(hyper.seed ^ 0x7a21bULL);
  DenoiserParams g = p;  // gradient buffer with matching shapes
  double window_loss = 0.0;
  int window_n = 0;
  for (int step = 0; step < hyper.steps; ++step) {
    std::fill(g.w1.begin(), g.w1.end(), 0.0);
    std::fill(g.b1.begin(), g.b1.end(), 0.0);
    std::fill(g.w2.begin(), g.w2.end(), 0.0);
    std::fill(g.b2.begin(), g.b2.end(), 0.0);
    std::fill(g.w3.begin(), g.w3.end(), 0.0);
    std::fill(g.b3.begin(), g.b3.end(), 0.0);
    double batch_loss = 0.0;
    for (int b = 0; b < hyper.batch_size; ++b) {
      const Video& vid = dataset[rng.below(dataset.size())];
      if (vid.frames.size() < 2) continue;
      const int m = 1 + int(rng.below(vid.frames.size() - 1));
      const Latent& x0 = vid.frames[m];
      const PhysicalCondition& R = vid.conditions[m - 1];
      const InputCondition C = encode_context(vid.scenes[m - 1]);
      const int t = 1 + int(rng.below(std::uint64_t(schedule.num_steps)));
      NoisePrediction eps{rng.normal_vec(x0.values.size())};
      const Latent x_t = forward_sample(x0, t, eps, schedule);
      MlpCache cache;
      mlp_forward(p, assemble_mlp_input(x_t, t, R, C, schedule), &cache);
      Vec vbar(p.output_dim);
      double loss = 0.0;
      for (int i = 0; i < p.output_dim; ++i) {
        const double d = cache.out[i] - eps.values[i];
        loss += d * d;
        vbar[i] = 2.0 * d / double(p.output_dim * hyper.batch_size);
      }
      batch_loss += loss / double(p.output_dim * hyper.batch_size);
      mlp_backward(p, cache, vbar, &g);
    }
    if (!std::isfinite(batch_loss)) {
      throw std::runtime_error("train_denoiser: loss diverged at step " + std::to_string(step));
    }
    const double lr = hyper.learning_rate;
    auto apply = [lr](Vec& w, const Vec& gw) {
      for (std::size_t i = 0; i < w.size(); ++i) w[i] -= lr * gw[i];
    };
    apply(p.w1, g.w1);
    apply(p.b1, g.b1);
    apply(p.w2, g.w2);
    apply(p.b2, g.b2);
    apply(p.w3, g.w3);
    apply(p.b3, g.b3);
    window_loss += batch_loss;
    ++window_n;
    if ((step + 1) % hyper.checkpoint_every == 0) {
      p.checkpoint_losses.push_back(window_loss / window_n);
      window_loss = 0.0;
      window_n = 0;
    }
    p.final_loss = batch_loss;
  }
  return p;
}

// ---------------------------------------------------------------------------
// Handles and gradients.

DenoiserHandle analytic_handle(const ConditionalMixture& mixture, PhysicalCondition R,
                               InputCondition C) {
  DenoiserHandle h;
  h.variant = DenoiserHandle::Variant::kAnalytic;
  h.mixture = &mixture;
  h.cond = std::move(R);
  h.context = std::move(C);
  return h;
}

DenoiserHandle trained_handle(const DenoiserParams& params, PhysicalCondition R,
                              InputCondition C) {
  DenoiserHandle h;
  h.variant = DenoiserHandle::Variant::kTrained;
  h.params = &params;
  h.cond = std::move(R);
  h.context = std::move(C);
  return h;
}

NoisePrediction predict_noise(const DenoiserHandle& handle, const Latent& x_t, int t,
                              const NoiseSchedule& schedule) {
  switch (handle.variant) {
    case DenoiserHandle::Variant::kAnalytic:
      if (!handle.mixture) throw std::invalid_argument("predict_noise: unpopulated handle");
      return analytic_eps(x_t, t, handle.cond, handle.context, *handle.mixture, schedule);
    case DenoiserHandle::Variant::kTrained:
      if (!handle.params) throw std::invalid_argument("predict_noise: unpopulated handle");
      return mlp_eps(*handle.params, x_t, t, handle.cond, handle.context, schedule);
  }
  throw std::logic_error("predict_noise: bad variant");
}

EpsVjp eps_vjp(const DenoiserHandle& handle, const Latent& x_t, int t,
               const NoiseSchedule& schedule, const Vec& vbar) {
  EpsVjp out;
  out.d_x.assign(kLatentDim, 0.0);
  out.d_map.assign(kMapCells, 0.0);
  out.d_box.assign(kBoxDim, 0.0);
  out.d_ctx.assign(kContextDim, 0.0);

  if (handle.variant == DenoiserHandle::Variant::kAnalytic) {
    const ConditionalMixture& mix = *handle.mixture;
    const Vec cond = flatten_condition(handle.cond, handle.context);
    const MixtureState st = mixture_state(x_t.values, t, cond, mix, schedule);
    const double root = std::sqrt(1.0 - st.abar);

    // Shared intermediates: p_k = d_k . vbar, dbar = sum r_k d_k,
    // q = sum p_k r_k (d_k - dbar).
    Vec dbar(kLatentDim, 0.0);
    Vec p(mix.num_components, 0.0);
    for (int k = 0; k < mix.num_components; ++k) {
      double pk = 0.0;
      for (int i = 0; i < kLatentDim; ++i) {
        pk += st.diffs[k][i] * vbar[i];
        dbar[i] += st.resp[k] * st.diffs[k][i];
      }
      p[k] = pk;
    }
    Vec q(kLatentDim, 0.0);
    for (int k = 0; k < mix.num_components; ++k) {
      for (int i = 0; i < kLatentDim; ++i) {
        q[i] += p[k] * st.resp[k] * (st.diffs[k][i] - dbar[i]);
      }
    }
    // d<vbar, eps>/dx = sqrt(1-abar)/v * (vbar - q/v)
    for (int i = 0; i < kLatentDim; ++i) {
      out.d_x[i] = root / st.v * (vbar[i] - q[i] / st.v);
    }
    // d<vbar, eps>/du = sqrt(abar(1-abar))/v * W^T (q/v - vbar)
    Vec y(kLatentDim);
    for (int i = 0; i < kLatentDim; ++i) y[i] = q[i] / st.v - vbar[i];
    Vec du(kCondDim, 0.0);
    const double cscale = st.sqab * root / st.v;
    for (int r = 0; r < kLatentDim; ++r) {
      const double* row = mix.cond_weight.data() + std::size_t(r) * kCondDim;
      const double yr = cscale * y[r];
      if (yr == 0.0) continue;
      for (int c = 0; c < kCondDim; ++c) du[c] += yr * row[c];
    }
    std::copy(du.begin(), du.begin() + kMapCells, out.d_map.begin());
    std::copy(du.begin() + kMapCells, du.begin() + kMapCells + kBoxDim, out.d_box.begin());
    std::copy(du.begin() + kMapCells + kBoxDim, du.end(), out.d_ctx.begin());
    return out;
  }

  // Trained variant: reverse mode through the perceptron, split by segment.
  MlpCache cache;
  mlp_forward(*handle.params,
              assemble_mlp_input(x_t, t, handle.cond, handle.context, schedule), &cache);
  const Vec din = mlp_backward(*handle.params, cache, vbar, nullptr);
  int off = 0;
  std::copy(din.begin(), din.begin() + kLatentDim, out.d_x.begin());
  off = kLatentDim + kTimeEmbedDim;  // time embedding carries no gradient target
  std::copy(din.begin() + off, din.begin() + off + kMapCells, out.d_map.begin());
  off += kMapCells;
  std::copy(din.begin() + off, din.begin() + off + kBoxDim, out.d_box.begin());
  off += kBoxDim;
  std::copy(din.begin() + off, din.end(), out.d_ctx.begin());
  return out;
}

double branch_discrepancy(const Latent& x_t, const Latent& x_t_att,
                          const DenoiserHandle& clean, const DenoiserHandle& att, int t,
                          const NoiseSchedule& schedule, DiscrepancyMode mode) {
  if (x_t.timestep != x_t_att.timestep) {
    throw std::invalid_argument("branch_discrepancy: timestep mismatch");
  }
  if (mode == DiscrepancyMode::kLatent) return mse(x_t.values, x_t_att.values);
  const NoisePrediction eps_c = predict_noise(clean, x_t, t, schedule);
  const NoisePrediction eps_a = predict_noise(att, x_t_att, t, schedule);
  return mse(eps_c.values, eps_a.values);
}

Vec grad_discrepancy_latent(const Latent& x_t, const Latent& x_t_att,
                            const DenoiserHandle& clean, const DenoiserHandle& att, int t,
                            const NoiseSchedule& schedule, DiscrepancyMode mode) {
  if (mode == DiscrepancyMode::kLatent) {
    Vec g(x_t_att.values.size());
    for (std::size_t i = 0; i < g.size(); ++i) {
      g[i] = 2.0 * (x_t_att.values[i] - x_t.values[i]) / double(g.size());
    }
    return g;
  }
  const NoisePrediction eps_c = predict_noise(clean, x_t, t, schedule);
  const NoisePrediction eps_a = predict_noise(att, x_t_att, t, schedule);
  Vec vbar(eps_a.values.size());
  for (std::size_t i = 0; i < vbar.size(); ++i) {
    vbar[i] = 2.0 * (eps_a.values[i] - eps_c.values[i]) / double(vbar.size());
  }
  Vec g = eps_vjp(att, x_t_att, t, schedule, vbar).d_x;
  for (double v : g) {
    if (!std::isfinite(v)) throw std::runtime_error("grad_discrepancy_latent: non-finite");
  }
  return g;
}

namespace {

Vec masked_condition_grad(const EpsVjp& vjp, CondChannel channel) {
  Vec g(kMapCells + kBoxDim, 0.0);
  if (channel == CondChannel::kMap || channel == CondChannel::kBoth) {
    std::copy(vjp.d_map.begin(), vjp.d_map.end(), g.begin());
  }
  if (channel == CondChannel::kBox || channel == CondChannel::kBoth) {
    std::copy(vjp.d_box.begin(), vjp.d_box.end(), g.begin() + kMapCells);
  }
  return g;
}

}  // namespace

Vec grad_discrepancy_condition(const Latent& x_t, const Latent& x_t_att,
                               const DenoiserHandle& clean, const DenoiserHandle& att, int t,
                               const NoiseSchedule& schedule, CondChannel channel,
                               DiscrepancyMode mode) {
  if (mode == DiscrepancyMode::kLatent) return Vec(kMapCells + kBoxDim, 0.0);
  const NoisePrediction eps_c = predict_noise(clean, x_t, t, schedule);
  const NoisePrediction eps_a = predict_noise(att, x_t_att, t, schedule);
  Vec vbar(eps_a.values.size());
  for (std::size_t i = 0; i < vbar.size(); ++i) {
    vbar[i] = 2.0 * (eps_a.values[i] - eps_c.values[i]) / double(vbar.size());
  }
  return masked_condition_grad(eps_vjp(att, x_t_att, t, schedule, vbar), channel);
}

namespace {

Latent denoised_estimate(const DenoiserHandle& handle, const Latent& x_t, int t,
                         const NoiseSchedule& schedule, NoisePrediction* eps_out) {
  const NoisePrediction eps = predict_noise(handle, x_t, t, schedule);
  const double abar = schedule.alpha_bar(t);
  const double a = std::sqrt(abar);
  const double b = std::sqrt(1.0 - abar);
  Latent x0;
  x0.timestep = 0;
  x0.values.resize(x_t.values.size());
  for (std::size_t i = 0; i < x0.values.size(); ++i) {
    x0.values[i] = (x_t.values[i] - b * eps.values[i]) / a;
  }
  if (eps_out) *eps_out = eps;
  return x0;
}

}  // namespace

double alignment_xhat0(const DenoiserHandle& handle, const Latent& x_t, int t,
                       const NoiseSchedule& schedule, const FrozenEmbedding& embedding,
                       const InputCondition& target) {
  const Latent x0 = denoised_estimate(handle, x_t, t, schedule, nullptr);
  return embedding.similarity(x0, target);
}

Vec grad_alignment_condition(const DenoiserHandle& handle, const Latent& x_t, int t,
                             const NoiseSchedule& schedule, const FrozenEmbedding& embedding,
                             const InputCondition& target, CondChannel channel) {
  NoisePrediction eps;
  const Latent x0 = denoised_estimate(handle, x_t, t, schedule, &eps);
  const Vec gA = embedding.grad_similarity(x0, target);
  const double abar = schedule.alpha_bar(t);
  const double scale = -std::sqrt(1.0 - abar) / std::sqrt(abar);
  Vec vbar(gA.size());
  for (std::size_t i = 0; i < vbar.size(); ++i) vbar[i] = scale * gA[i];
  return masked_condition_grad(eps_vjp(handle, x_t, t, schedule, vbar), channel);
}

// ---------------------------------------------------------------------------
// Serialization.

std::string ConditionalMixture::to_json() const {
  nlohmann::json j;
  j["version"] = 1;
  j["num_components"] = num_components;
  j["weights"] = weights;
  j["base_means"] = base_means;
  j["cond_weight"] = cond_weight;
  j["s2"] = s2;
  return j.dump();
}

ConditionalMixture ConditionalMixture::from_json(const std::string& text) {
  auto j = nlohmann::json::parse(text);
  ConditionalMixture m;
  m.num_components = j.at("num_components").get<int>();
  m.weights = j.at("weights").get<Vec>();
  m.base_means = j.at("base_means").get<std::vector<Vec>>();
  m.cond_weight = j.at("cond_weight").get<Vec>();
  m.s2 = j.at("s2").get<double>();
  return m;
}

std::string DenoiserParams::to_json() const {
  nlohmann::json j;
  j["version"] = 1;
  j["input_dim"] = input_dim;
  j["hidden_dim"] = hidden_dim;
  j["output_dim"] = output_dim;
  j["w1"] = w1;
  j["b1"] = b1;
  j["w2"] = w2;
  j["b2"] = b2;
  j["w3"] = w3;
  j["b3"] = b3;
  j["final_loss"] = final_loss;
  j["checkpoint_losses"] = checkpoint_losses;
  return j.dump();
}

DenoiserParams DenoiserParams::from_json(const std::string& text) {
  auto j = nlohmann::json::parse(text);
  DenoiserParams p;
  p.input_dim = j.at("input_dim").get<int>();
  p.hidden_dim = j.at("hidden_dim").get<int>();
  p.output_dim = j.at("output_dim").get<int>();
  p.w1 = j.at("w1").get<Vec>();
  p.b1 = j.at("b1").get<Vec>();
  p.w2 = j.at("w2").get<Vec>();
  p.b2 = j.at("b2").get<Vec>();
  p.w3 = j.at("w3").get<Vec>();
  p.b3 = j.at("b3").get<Vec>();
  p.final_loss = j.at("final_loss").get<double>();
  p.checkpoint_losses = j.at("checkpoint_losses").get<Vec>();
  return p;
}

}  // namespace wmlab
