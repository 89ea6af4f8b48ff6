#include "wmlab/metrics.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <stdexcept>

namespace wmlab {
namespace {

Eigen::MatrixXd to_eigen(const std::vector<Vec>& m) {
  const int n = int(m.size());
  Eigen::MatrixXd out(n, n);
  for (int r = 0; r < n; ++r) {
    if (int(m[r].size()) != n) throw std::invalid_argument("covariance: not square");
    for (int c = 0; c < n; ++c) out(r, c) = m[r][c];
  }
  return out;
}

void check_symmetric(const Eigen::MatrixXd& m, const char* what) {
  const double scale = std::max(1.0, m.cwiseAbs().maxCoeff());
  if ((m - m.transpose()).cwiseAbs().maxCoeff() > 1e-8 * scale) {
    throw std::invalid_argument(std::string(what) + ": covariance not symmetric");
  }
}

// Symmetric PSD square root with eigenvalue clamp at zero.
Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& m, const char* what) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m);
  const double lmax = std::max(1.0, es.eigenvalues().cwiseAbs().maxCoeff());
  if (es.eigenvalues().minCoeff() < -1e-6 * lmax) {
    throw std::invalid_argument(std::string(what) + ": covariance not PSD");
  }
  Eigen::VectorXd d = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * d.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace

GaussianMoments fit_moments(const std::vector<Vec>& samples) {
  if (samples.size() < 2) throw std::invalid_argument("fit_moments: need >= 2 samples");
  const int n = int(samples.size());
  const int d = int(samples[0].size());
  GaussianMoments out;
  out.mean.assign(d, 0.0);
  for (const auto& s : samples) {
    if (int(s.size()) != d) throw std::invalid_argument("fit_moments: ragged samples");
    for (int i = 0; i < d; ++i) out.mean[i] += s[i];
  }
  for (auto& m : out.mean) m /= n;
  out.covariance.assign(d, Vec(d, 0.0));
  for (const auto& s : samples) {
    for (int r = 0; r < d; ++r) {
      const double dr = s[r] - out.mean[r];
      for (int c = r; c < d; ++c) {
        out.covariance[r][c] += dr * (s[c] - out.mean[c]);
      }
    }
  }
  for (int r = 0; r < d; ++r) {
    for (int c = r; c < d; ++c) {
      out.covariance[r][c] /= (n - 1);
      out.covariance[c][r] = out.covariance[r][c];
    }
  }
  return out;
}

double frechet_distance(const GaussianMoments& a, const GaussianMoments& b) {
  if (a.mean.size() != b.mean.size()) throw std::invalid_argument("frechet: dimension mismatch");
  const Eigen::MatrixXd sa = to_eigen(a.covariance);
  const Eigen::MatrixXd sb = to_eigen(b.covariance);
  check_symmetric(sa, "frechet");
  check_symmetric(sb, "frechet");

  double mean_sq = 0.0;
  for (std::size_t i = 0; i < a.mean.size(); ++i) {
    const double d = a.mean[i] - b.mean[i];
    mean_sq += d * d;
  }

  const Eigen::MatrixXd sa_half = psd_sqrt(sa, "frechet");
  Eigen::MatrixXd inner = sa_half * sb * sa_half;
  inner = 0.5 * (inner + inner.transpose().eval());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(inner);
  const double cross = es.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();

  const double val = mean_sq + sa.trace() + sb.trace() - 2.0 * cross;
  return std::max(val, 0.0);
}

double fid_analog(const std::vector<Latent>& frames_real,
                  const std::vector<Latent>& frames_gen, const FrozenEmbedding& embedding) {
  const std::size_t need = std::size_t(embedding.feature_dim()) + 1;
  if (frames_real.size() < need || frames_gen.size() < need) {
    throw std::invalid_argument("fid_analog: insufficient samples for covariance rank");
  }
  std::vector<Vec> er, eg;
  er.reserve(frames_real.size());
  eg.reserve(frames_gen.size());
  for (const auto& f : frames_real) er.push_back(embedding.embed(f.values));
  for (const auto& f : frames_gen) eg.push_back(embedding.embed(f.values));
  return frechet_distance(fit_moments(er), fit_moments(eg));
}

Vec video_feature(const Video& video, const FrozenEmbedding& embedding) {
  const int M = int(video.frames.size());
  if (M < 1) throw std::invalid_argument("video_feature: empty video");
  const int df = embedding.feature_dim();
  Vec mean_frame(df, 0.0), mean_diff(df, 0.0);
  for (const auto& f : video.frames) {
    const Vec e = embedding.embed(f.values);
    for (int i = 0; i < df; ++i) mean_frame[i] += e[i];
  }
  for (auto& v : mean_frame) v /= M;
  if (M > 1) {
    for (int m = 1; m < M; ++m) {
      Vec diff(video.frames[m].values.size());
      for (std::size_t i = 0; i < diff.size(); ++i) {
        diff[i] = video.frames[m].values[i] - video.frames[m - 1].values[i];
      }
      const Vec e = embedding.embed(diff);
      for (int i = 0; i < df; ++i) mean_diff[i] += e[i];
    }
    for (auto& v : mean_diff) v /= (M - 1);
  }
  Vec out;
  out.reserve(2 * df);
  out.insert(out.end(), mean_frame.begin(), mean_frame.end());
  out.insert(out.end(), mean_diff.begin(), mean_diff.end());
  return out;
}

double fvd_analog(const std::vector<Video>& videos_real, const std::vector<Video>& videos_gen,
                  const FrozenEmbedding& embedding) {
  if (videos_real.size() < 2 || videos_gen.size() < 2) {
    throw std::invalid_argument("fvd_analog: insufficient videos");
  }
  std::vector<Vec> fr, fg;
  fr.reserve(videos_real.size());
  fg.reserve(videos_gen.size());
  for (const auto& v : videos_real) fr.push_back(video_feature(v, embedding));
  for (const auto& v : videos_gen) fg.push_back(video_feature(v, embedding));
  return frechet_distance(fit_moments(fr), fit_moments(fg));
}

}  // namespace wmlab
