#pragma once

#include <string>
#include <vector>

#include "wmlab/scene.hpp"

namespace wmlab {

// Rule parameters for the three-level video judge. Frozen defaults; the
// resolved rules are echoed into every report for auditability.
struct JudgeRules {
  // Violation-fraction thresholds and the discrete score assigned at each bin.
  Vec bin_edges = {0.05, 0.15, 0.3, 0.5, 0.75};
  Vec bin_scores = {0.0, 0.2, 0.4, 0.6, 0.8, 1.0};
  double teleport_margin = 0.1;   // on top of the per-axis speed cap
  double boundary_margin = 0.6;   // appearance/disappearance allowed this close to an edge
  double decel_tol = 0.06;        // slack on the expected braking amount
  double min_risk_speed = 0.05;   // ego slower than this is not expected to brake
  double brake_rate = kBrakeRate;
  double no_risk_dec = 0.2;       // decision score when no risk frame appears

  std::string to_json() const;
  static JudgeRules from_json(const std::string& text);
};

struct LevelScores {
  double sem = 0.0;
  double log = 0.0;
  double dec = 0.0;

  double overall() const { return (sem + log + dec) / 3.0; }
  bool success() const { return overall() > 0.5; }
};

// Maps a violation fraction onto the discrete score set.
double bin_fraction(double fraction, const JudgeRules& rules);

// Three-level rule-based judge.
//  semantic: per-frame decode validity (clipping, ambiguous codes, near-threshold
//            slots, dropped slot content);
//  logical:  per-transition teleportation, object count jumps without a boundary
//            exit, and placement on off-road cells;
//  decision: over risk-triggered frames, failure to shed the expected speed.
LevelScores judge_video(const Video& video, const JudgeRules& rules);

double asr(const std::vector<Video>& videos, const JudgeRules& rules);

}  // namespace wmlab
