#include "wmlab/downstream.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "json.hpp"
#include "wmlab/rng.hpp"

namespace wmlab {
namespace {

constexpr int kSlotOffset = kMapCells + 1 + 4;
constexpr int kDetFeat = kSlotFeat + 1;       // slot features + bias
constexpr int kDetClasses = kNumClasses + 1;  // object classes + "none"
constexpr double kDetNoise = 0.05;

struct SlotSample {
  double feat[kDetFeat];
  int label;       // 0..4 class, 5 none
  double tx, ty;   // annotated center (valid when label < kNumClasses)
};

std::vector<SlotSample> slot_samples(const std::vector<LabeledFrame>& frames, Rng& noise) {
  std::vector<SlotSample> out;
  out.reserve(frames.size() * kMaxObjects);
  for (const auto& lf : frames) {
    if (lf.latent.values.size() != kLatentDim) {
      throw std::invalid_argument("detector_eval: bad latent dimension");
    }
    const PhysicalCondition ann = encode_condition(lf.annotation);
    for (int s = 0; s < kMaxObjects; ++s) {
      SlotSample smp{};
      const double* f = lf.latent.values.data() + kSlotOffset + s * kSlotFeat;
      for (int k = 0; k < kSlotFeat; ++k) smp.feat[k] = f[k] + kDetNoise * noise.normal();
      smp.feat[kSlotFeat] = 1.0;
      const double* a = ann.box_embed.data() + s * kSlotFeat;
      if (a[0] >= kThetaSlot) {
        smp.label = int(std::lround(a[1] / kCodeScale));
        smp.label = std::clamp(smp.label, 0, kNumClasses - 1);
        smp.tx = a[2];
        smp.ty = a[3];
      } else {
        smp.label = kNumClasses;
      }
      out.push_back(smp);
    }
  }
  return out;
}

void softmax_probs(const Vec& w, const double* feat, double* probs) {
  double logits[kDetClasses];
  double m = -1e300;
  for (int c = 0; c < kDetClasses; ++c) {
    double z = 0.0;
    for (int k = 0; k < kDetFeat; ++k) z += w[c * kDetFeat + k] * feat[k];
    logits[c] = z;
    m = std::max(m, z);
  }
  double sum = 0.0;
  for (int c = 0; c < kDetClasses; ++c) {
    probs[c] = std::exp(logits[c] - m);
    sum += probs[c];
  }
  for (int c = 0; c < kDetClasses; ++c) probs[c] /= sum;
}

Vec train_softmax(const std::vector<SlotSample>& samples, Rng& rng) {
  Vec w(kDetClasses * kDetFeat, 0.0);
  if (samples.empty()) throw std::invalid_argument("detector_eval: empty training set");
  const int epochs = 4;
  const double lr = 0.1;
  std::vector<std::size_t> order(samples.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  for (int e = 0; e < epochs; ++e) {
    for (std::size_t i = order.size(); i > 1; --i) {
      std::swap(order[i - 1], order[rng.below(i)]);
    }
    for (std::size_t idx : order) {
      const SlotSample& s = samples[idx];
      double probs[kDetClasses];
      softmax_probs(w, s.feat, probs);
      for (int c = 0; c < kDetClasses; ++c) {
        const double g = probs[c] - (c == s.label ? 1.0 : 0.0);
        for (int k = 0; k < kDetFeat; ++k) w[c * kDetFeat + k] -= lr * g * s.feat[k];
      }
    }
  }
  return w;
}

int argmax_class(const Vec& w, const double* feat) {
  double probs[kDetClasses];
  softmax_probs(w, feat, probs);
  int best = 0;
  for (int c = 1; c < kDetClasses; ++c) {
    if (probs[c] > probs[best]) best = c;
  }
  return best;
}

// Ridge regression of slot centers on noisy features, existing slots only.
Eigen::MatrixXd fit_center_regressor(const std::vector<SlotSample>& samples) {
  std::vector<const SlotSample*> pos;
  for (const auto& s : samples) {
    if (s.label < kNumClasses) pos.push_back(&s);
  }
  Eigen::MatrixXd X(std::max<std::size_t>(pos.size(), 1), kDetFeat);
  Eigen::MatrixXd Y(X.rows(), 2);
  X.setZero();
  Y.setZero();
  for (std::size_t i = 0; i < pos.size(); ++i) {
    for (int k = 0; k < kDetFeat; ++k) X(i, k) = pos[i]->feat[k];
    Y(i, 0) = pos[i]->tx;
    Y(i, 1) = pos[i]->ty;
  }
  Eigen::MatrixXd A = X.transpose() * X;
  A.diagonal().array() += 1e-3;
  return A.ldlt().solve(X.transpose() * Y);  // kDetFeat x 2
}

}  // namespace

std::vector<LabeledFrame> self_labeled(const std::vector<Video>& videos) {
  std::vector<LabeledFrame> out;
  for (const auto& v : videos) {
    for (std::size_t m = 0; m < v.frames.size(); ++m) {
      const Scene ann =
          m < v.scenes.size() ? v.scenes[m] : decode_frame(v.frames[m]);
      out.push_back({v.frames[m], ann});
    }
  }
  return out;
}

std::vector<LabeledFrame> cross_labeled(const std::vector<Video>& videos,
                                        const std::vector<Video>& annotations) {
  if (videos.size() != annotations.size()) {
    throw std::invalid_argument("cross_labeled: video count mismatch");
  }
  std::vector<LabeledFrame> out;
  for (std::size_t v = 0; v < videos.size(); ++v) {
    if (videos[v].frames.size() != annotations[v].frames.size()) {
      throw std::invalid_argument("cross_labeled: frame count mismatch");
    }
    for (std::size_t m = 0; m < videos[v].frames.size(); ++m) {
      const Scene ann = m < annotations[v].scenes.size()
                            ? annotations[v].scenes[m]
                            : decode_frame(annotations[v].frames[m]);
      out.push_back({videos[v].frames[m], ann});
    }
  }
  return out;
}

DetectorScores detector_eval(const std::vector<LabeledFrame>& train,
                             const std::vector<LabeledFrame>& augment,
                             const std::vector<LabeledFrame>& test, std::uint64_t seed) {
  Rng train_noise(seed);
  Rng test_noise(seed ^ 0x5eedf00dULL);
  Rng shuffle(seed ^ 0xabcdefULL);

  std::vector<LabeledFrame> all_train = train;
  all_train.insert(all_train.end(), augment.begin(), augment.end());
  const auto train_samples = slot_samples(all_train, train_noise);
  const auto test_samples = slot_samples(test, test_noise);
  if (test_samples.empty()) throw std::invalid_argument("detector_eval: empty test set");

  const Vec w = train_softmax(train_samples, shuffle);
  const Eigen::MatrixXd reg = fit_center_regressor(train_samples);

  // per-class F1 over the object classes
  int tp[kNumClasses] = {}, fp[kNumClasses] = {}, fn[kNumClasses] = {};
  double loc_err = 0.0;
  int loc_n = 0;
  for (const auto& s : test_samples) {
    const int pred = argmax_class(w, s.feat);
    if (pred < kNumClasses) {
      if (pred == s.label) ++tp[pred];
      else ++fp[pred];
    }
    if (s.label < kNumClasses) {
      if (pred != s.label) ++fn[s.label];
      double px = 0.0, py = 0.0;
      for (int k = 0; k < kDetFeat; ++k) {
        px += s.feat[k] * reg(k, 0);
        py += s.feat[k] * reg(k, 1);
      }
      loc_err += std::hypot(px - s.tx, py - s.ty);
      ++loc_n;
    }
  }

  double f1_sum = 0.0;
  int f1_n = 0;
  for (int c = 0; c < kNumClasses; ++c) {
    if (tp[c] + fn[c] == 0) continue;  // class absent from test set
    const double denom = 2.0 * tp[c] + fp[c] + fn[c];
    f1_sum += denom > 0.0 ? 2.0 * tp[c] / denom : 0.0;
    ++f1_n;
  }
  DetectorScores out;
  out.map_analog = f1_n > 0 ? f1_sum / f1_n : 0.0;
  const double mean_loc = loc_n > 0 ? loc_err / loc_n : 1.0;
  out.nds_analog = 0.5 * out.map_analog + 0.5 * std::max(0.0, 1.0 - mean_loc);
  return out;
}

namespace {

constexpr int kPlanFeat = 8;

void plan_features(const Scene& s, double* f) {
  f[0] = 1.0;
  f[1] = s.ego.x;
  f[2] = s.ego.y;
  f[3] = s.ego.vx;
  f[4] = s.ego.vy;
  f[5] = (s.light == LightState::kRed) ? 1.0 : 0.0;
  f[6] = brake_feature(s);
  double gap = kGridW;
  for (const auto& o : s.objects) {
    if (o.cls == ObjectClass::kSign) continue;
    const double dx = o.x - s.ego.x;
    if (dx > 0.0 && std::abs(o.y - s.ego.y) <= kLaneTol) gap = std::min(gap, dx);
  }
  f[7] = gap;
}

const Scene& scene_at(const Video& v, std::size_t m, std::vector<Scene>& cache) {
  if (m < v.scenes.size()) return v.scenes[m];
  if (cache.empty()) {
    for (const auto& fr : v.frames) cache.push_back(decode_frame(fr));
  }
  return cache[m];
}

}  // namespace

PlannerParams train_planner(const std::vector<Video>& clean, int horizon) {
  if (horizon < 1) throw std::invalid_argument("train_planner: horizon must be >= 1");
  std::vector<std::array<double, kPlanFeat>> feats;
  std::vector<Vec> targets;
  for (const auto& v : clean) {
    std::vector<Scene> cache;
    const int M = int(v.frames.size());
    if (M <= horizon) throw std::invalid_argument("train_planner: horizon too long for video");
    for (int m = 0; m + horizon < M; ++m) {
      const Scene& s = scene_at(v, m, cache);
      std::array<double, kPlanFeat> f{};
      plan_features(s, f.data());
      feats.push_back(f);
      Vec y(2 * horizon);
      for (int k = 1; k <= horizon; ++k) {
        const Scene& sk = scene_at(v, m + k, cache);
        y[2 * (k - 1)] = sk.ego.x - s.ego.x;
        y[2 * (k - 1) + 1] = sk.ego.y - s.ego.y;
      }
      targets.push_back(std::move(y));
    }
  }
  if (feats.empty()) throw std::invalid_argument("train_planner: no training anchors");

  Eigen::MatrixXd X(feats.size(), kPlanFeat);
  Eigen::MatrixXd Y(feats.size(), 2 * horizon);
  for (std::size_t i = 0; i < feats.size(); ++i) {
    for (int k = 0; k < kPlanFeat; ++k) X(i, k) = feats[i][k];
    for (int k = 0; k < 2 * horizon; ++k) Y(i, k) = targets[i][k];
  }
  Eigen::MatrixXd A = X.transpose() * X;
  A.diagonal().array() += 1e-6;
  const Eigen::MatrixXd W = A.ldlt().solve(X.transpose() * Y);  // kPlanFeat x 2h

  PlannerParams p;
  p.horizon = horizon;
  p.feature_dim = kPlanFeat;
  p.weights.resize(2 * horizon * kPlanFeat);
  for (int r = 0; r < 2 * horizon; ++r) {
    for (int c = 0; c < kPlanFeat; ++c) p.weights[r * kPlanFeat + c] = W(c, r);
  }
  return p;
}

PlanEval open_loop_plan_eval(const std::vector<Video>& videos, const PlannerParams& planner,
                             int horizon) {
  PlanEval out;
  if (horizon == 0) {
    out.degenerate = true;
    return out;
  }
  if (horizon < 0 || horizon > planner.horizon) {
    throw std::invalid_argument("open_loop_plan_eval: horizon exceeds planner's");
  }
  double l2 = 0.0;
  int l2_n = 0;
  int collisions = 0;
  int positions = 0;
  for (const auto& v : videos) {
    std::vector<Scene> cache;
    const int M = int(v.frames.size());
    if (M <= horizon) throw std::invalid_argument("open_loop_plan_eval: horizon too long");
    for (int m = 0; m + horizon < M; ++m) {
      const Scene& s = scene_at(v, m, cache);
      double f[kPlanFeat];
      plan_features(s, f);
      for (int k = 1; k <= horizon; ++k) {
        double dx = 0.0, dy = 0.0;
        for (int c = 0; c < kPlanFeat; ++c) {
          dx += planner.weights[(2 * (k - 1)) * kPlanFeat + c] * f[c];
          dy += planner.weights[(2 * (k - 1) + 1) * kPlanFeat + c] * f[c];
        }
        const double px = s.ego.x + dx;
        const double py = s.ego.y + dy;
        const Scene& sk = scene_at(v, m + k, cache);
        l2 += std::hypot(px - sk.ego.x, py - sk.ego.y);
        ++l2_n;
        ++positions;
        for (const auto& o : sk.objects) {
          if (o.cls == ObjectClass::kSign) continue;
          if (std::abs(px - o.x) <= o.w / 2.0 && std::abs(py - o.y) <= o.h / 2.0) {
            ++collisions;
            break;
          }
        }
      }
    }
  }
  if (l2_n == 0) throw std::invalid_argument("open_loop_plan_eval: no anchors");
  out.l2_avg = l2 / l2_n;
  out.collision_rate = double(collisions) / positions;
  return out;
}

std::string PlannerParams::to_json() const {
  nlohmann::json j;
  j["horizon"] = horizon;
  j["feature_dim"] = feature_dim;
  j["weights"] = weights;
  return j.dump();
}

PlannerParams PlannerParams::from_json(const std::string& text) {
  auto j = nlohmann::json::parse(text);
  PlannerParams p;
  p.horizon = j.at("horizon").get<int>();
  p.feature_dim = j.at("feature_dim").get<int>();
  p.weights = j.at("weights").get<Vec>();
  return p;
}

}  // namespace wmlab
