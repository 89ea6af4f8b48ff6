#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "wmlab/scene.hpp"
#include "wmlab/schedule.hpp"

namespace wmlab {

// Frozen two-layer feature map with tanh activations and L2-normalized output.
// Stands in for a pretrained semantic embedding: smooth everywhere, immutable
// after construction, cosine similarity has its maximum at the target itself.
class FrozenEmbedding {
 public:
  FrozenEmbedding() = default;
  FrozenEmbedding(std::uint64_t seed, int input_dim = kLatentDim, int hidden_dim = 96,
                  int feature_dim = 64);

  int input_dim() const { return input_dim_; }
  int feature_dim() const { return feature_dim_; }
  std::uint64_t seed() const { return seed_; }

  // Accepts a frame latent or a context vector; context vectors are truncated
  // to the frame part.
  Vec embed(const Vec& x) const;

  // Gradient of <vbar, embed(x)> with respect to x.
  Vec embed_vjp(const Vec& x, const Vec& vbar) const;

  double similarity(const Latent& x, const InputCondition& target) const;
  Vec grad_similarity(const Latent& x, const InputCondition& target) const;

  std::string to_json() const;
  static FrozenEmbedding from_json(const std::string& text);

 private:
  Vec frame_part(const Vec& x) const;
  void raw_forward(const Vec& in, Vec* hidden, Vec* feat) const;

  std::uint64_t seed_ = 0;
  int input_dim_ = 0;
  int hidden_dim_ = 0;
  int feature_dim_ = 0;
  Vec w1_, b1_;  // hidden x input, hidden
  Vec w2_, b2_;  // feature x hidden, feature
};

}  // namespace wmlab
