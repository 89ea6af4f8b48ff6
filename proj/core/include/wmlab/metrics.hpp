#pragma once

#include <vector>

#include "wmlab/alignment.hpp"
#include "wmlab/scene.hpp"
#include "wmlab/schedule.hpp"

namespace wmlab {

struct GaussianMoments {
  Vec mean;
  std::vector<Vec> covariance;  // d_feat x d_feat, symmetric PSD
};

GaussianMoments fit_moments(const std::vector<Vec>& samples);

// ||mu_a - mu_b||^2 + tr(Sa + Sb - 2 (Sa Sb)^{1/2}); the cross term uses the
// symmetric eigendecomposition of Sa^{1/2} Sb Sa^{1/2} with eigenvalues
// clamped at zero.
double frechet_distance(const GaussianMoments& a, const GaussianMoments& b);

// Frame-level quality analog: embed all frames, fit Gaussians, take the
// Fréchet distance.
double fid_analog(const std::vector<Latent>& frames_real,
                  const std::vector<Latent>& frames_gen, const FrozenEmbedding& embedding);

// Video-level feature: mean of frame embeddings concatenated with the mean of
// first-difference embeddings, so temporal discontinuities move the statistic.
Vec video_feature(const Video& video, const FrozenEmbedding& embedding);

double fvd_analog(const std::vector<Video>& videos_real, const std::vector<Video>& videos_gen,
                  const FrozenEmbedding& embedding);

}  // namespace wmlab
