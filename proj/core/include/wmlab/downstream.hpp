#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "wmlab/scene.hpp"

namespace wmlab {

// A frame paired with the annotation it is trained against. For clean data the
// annotation is the frame's own decode; for attacked data the annotation comes
// from the clean branch, which is where the label mismatch enters.
struct LabeledFrame {
  Latent latent;
  Scene annotation;
};

std::vector<LabeledFrame> self_labeled(const std::vector<Video>& videos);
// Frames from `videos`, annotations taken from the matching frame of
// `annotations` (same video/frame counts required).
std::vector<LabeledFrame> cross_labeled(const std::vector<Video>& videos,
                                        const std::vector<Video>& annotations);

struct DetectorScores {
  double map_analog = 0.0;  // macro-F1 over object classes
  double nds_analog = 0.0;  // composite of F1 and localization error
};

// Slot-wise detector: a linear softmax over noisy slot features predicts the
// class (or absence), a ridge regressor predicts the slot center. Deterministic
// per seed; augment may be empty.
DetectorScores detector_eval(const std::vector<LabeledFrame>& train,
                             const std::vector<LabeledFrame>& augment,
                             const std::vector<LabeledFrame>& test, std::uint64_t seed);

struct PlannerParams {
  int horizon = 0;
  int feature_dim = 0;
  Vec weights;  // (2 * horizon) x feature_dim, row-major

  std::string to_json() const;
  static PlannerParams from_json(const std::string& text);
};

// Least-squares fit predicting the ego's next `horizon` positions from the
// current decoded scene context.
PlannerParams train_planner(const std::vector<Video>& clean, int horizon);

struct PlanEval {
  double l2_avg = 0.0;
  double collision_rate = 0.0;
  bool degenerate = false;  // horizon 0 convention
};

PlanEval open_loop_plan_eval(const std::vector<Video>& videos, const PlannerParams& planner,
                             int horizon);

}  // namespace wmlab
