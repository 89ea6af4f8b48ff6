#include "wmlab/alignment.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <stdexcept>

#include "json.hpp"
#include "wmlab/rng.hpp"

namespace wmlab {

FrozenEmbedding::FrozenEmbedding(std::uint64_t seed, int input_dim, int hidden_dim,
                                 int feature_dim)
    : seed_(seed), input_dim_(input_dim), hidden_dim_(hidden_dim), feature_dim_(feature_dim) {
  if (hidden_dim < feature_dim) {
    throw std::invalid_argument("FrozenEmbedding: hidden_dim must be >= feature_dim");
  }
  Rng rng(seed ^ 0xa11c0dedULL);
  const double s1 = 0.35 / std::sqrt(double(input_dim));
  const double s2 = 1.0 / std::sqrt(double(hidden_dim));
  w1_.resize(std::size_t(hidden_dim) * input_dim);
  b1_.resize(hidden_dim);
  w2_.resize(std::size_t(feature_dim) * hidden_dim);
  b2_.resize(feature_dim);
  for (auto& w : w1_) w = s1 * rng.normal();
  for (auto& b : b1_) b = 0.1 * rng.normal();
  for (auto& w : w2_) w = s2 * rng.normal();
  for (auto& b : b2_) b = 0.05 * rng.normal();

  // The output projection must have full row rank, otherwise the similarity
  // landscape collapses along some feature directions.
  Eigen::MatrixXd m(feature_dim, hidden_dim);
  for (int r = 0; r < feature_dim; ++r)
    for (int c = 0; c < hidden_dim; ++c) m(r, c) = w2_[std::size_t(r) * hidden_dim + c];
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(m);
  if (qr.rank() < feature_dim) {
    throw std::runtime_error("FrozenEmbedding: output projection is rank deficient");
  }
}

Vec FrozenEmbedding::frame_part(const Vec& x) const {
  if (int(x.size()) == input_dim_) return x;
  if (int(x.size()) > input_dim_) return Vec(x.begin(), x.begin() + input_dim_);
  throw std::invalid_argument("FrozenEmbedding: input too small");
}

void FrozenEmbedding::raw_forward(const Vec& in, Vec* hidden, Vec* feat) const {
  hidden->assign(hidden_dim_, 0.0);
  for (int h = 0; h < hidden_dim_; ++h) {
    double acc = b1_[h];
    const double* row = w1_.data() + std::size_t(h) * input_dim_;
    for (int i = 0; i < input_dim_; ++i) acc += row[i] * in[i];
    (*hidden)[h] = std::tanh(acc);
  }
  feat->assign(feature_dim_, 0.0);
  for (int f = 0; f < feature_dim_; ++f) {
    double acc = b2_[f];
    const double* row = w2_.data() + std::size_t(f) * hidden_dim_;
    for (int h = 0; h < hidden_dim_; ++h) acc += row[h] * (*hidden)[h];
    (*feat)[f] = acc;
  }
}

Vec FrozenEmbedding::embed(const Vec& x) const {
  const Vec in = frame_part(x);
  Vec hidden, feat;
  raw_forward(in, &hidden, &feat);
  const double n = l2_norm(feat);
  if (n <= 0.0) throw std::runtime_error("FrozenEmbedding: zero feature vector");
  for (auto& f : feat) f /= n;
  return feat;
}

Vec FrozenEmbedding::embed_vjp(const Vec& x, const Vec& vbar) const {
  const Vec in = frame_part(x);
  Vec hidden, feat;
  raw_forward(in, &hidden, &feat);
  const double n = l2_norm(feat);
  if (n <= 0.0) throw std::runtime_error("FrozenEmbedding: zero feature vector");

  // d<vbar, f/|f|>/df = (vbar - <vbar,u> u) / |f|  with u = f/|f|
  double dot = 0.0;
  for (int f = 0; f < feature_dim_; ++f) dot += vbar[f] * feat[f] / n;
  Vec dfeat(feature_dim_);
  for (int f = 0; f < feature_dim_; ++f) dfeat[f] = (vbar[f] - dot * feat[f] / n) / n;

  Vec dhidden(hidden_dim_, 0.0);
  for (int f = 0; f < feature_dim_; ++f) {
    const double* row = w2_.data() + std::size_t(f) * hidden_dim_;
    for (int h = 0; h < hidden_dim_; ++h) dhidden[h] += dfeat[f] * row[h];
  }
  Vec dx(input_dim_, 0.0);
  for (int h = 0; h < hidden_dim_; ++h) {
    const double g = dhidden[h] * (1.0 - hidden[h] * hidden[h]);
    const double* row = w1_.data() + std::size_t(h) * input_dim_;
    for (int i = 0; i < input_dim_; ++i) dx[i] += g * row[i];
  }
  return dx;
}

double FrozenEmbedding::similarity(const Latent& x, const InputCondition& target) const {
  const Vec a = embed(x.values);
  const Vec b = embed(target.context_embed);
  double dot = 0.0;
  for (int f = 0; f < feature_dim_; ++f) dot += a[f] * b[f];
  return dot;
}

Vec FrozenEmbedding::grad_similarity(const Latent& x, const InputCondition& target) const {
  const Vec b = embed(target.context_embed);
  Vec g = embed_vjp(x.values, b);
  for (double v : g) {
    if (!std::isfinite(v)) throw std::runtime_error("grad_similarity: non-finite gradient");
  }
  // x may be longer than the frame part (never the case for latents, but keep
  // the output aligned with the input dimension).
  if (int(x.values.size()) > input_dim_) g.resize(x.values.size(), 0.0);
  return g;
}

std::string FrozenEmbedding::to_json() const {
  nlohmann::json j;
  j["seed"] = seed_;
  j["input_dim"] = input_dim_;
  j["hidden_dim"] = hidden_dim_;
  j["feature_dim"] = feature_dim_;
  j["w1"] = w1_;
  j["b1"] = b1_;
  j["w2"] = w2_;
  j["b2"] = b2_;
  return j.dump();
}

FrozenEmbedding FrozenEmbedding::from_json(const std::string& text) {
  auto j = nlohmann::json::parse(text);
  FrozenEmbedding e(j.at("seed").get<std::uint64_t>(), j.at("input_dim").get<int>(),
                    j.at("hidden_dim").get<int>(), j.at("feature_dim").get<int>());
  e.w1_ = j.at("w1").get<Vec>();
  e.b1_ = j.at("b1").get<Vec>();
  e.w2_ = j.at("w2").get<Vec>();
  e.b2_ = j.at("b2").get<Vec>();
  return e;
}

}  // namespace wmlab
