#include "wmlab/judge.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "json.hpp"

namespace wmlab {
namespace {

bool near_edge(const SceneObject& o, double margin) {
  return o.x < margin || o.x > kGridW - margin || o.y < margin || o.y > kGridH - margin;
}

bool off_road(const Scene& s, double x, double y) {
  int cx = int(std::floor(x));
  int cy = int(std::floor(y));
  cx = std::clamp(cx, 0, kGridW - 1);
  cy = std::clamp(cy, 0, kGridH - 1);
  return s.lane_layout[cy * kGridW + cx] == int(CellType::kOffRoad);
}

bool placement_violation(const Scene& s) {
  for (const auto& o : s.objects) {
    if (off_road(s, o.x, o.y)) return true;
  }
  return false;
}

double axis_displacement(double ax, double ay, double bx, double by) {
  return std::max(std::abs(ax - bx), std::abs(ay - by));
}

// Greedy same-class matching under the teleport limit; leftovers are treated
// as appearances/disappearances.
bool transition_violation(const Scene& prev, const Scene& next, const JudgeRules& rules) {
  const double limit = kVMax + rules.teleport_margin;

  if (axis_displacement(prev.ego.x, prev.ego.y, next.ego.x, next.ego.y) > limit) return true;
  if (placement_violation(next)) return true;

  struct Pair {
    double d;
    std::size_t i, j;
  };
  std::vector<Pair> pairs;
  for (std::size_t i = 0; i < prev.objects.size(); ++i) {
    for (std::size_t j = 0; j < next.objects.size(); ++j) {
      if (prev.objects[i].cls != next.objects[j].cls) continue;
      const double d = axis_displacement(prev.objects[i].x, prev.objects[i].y,
                                         next.objects[j].x, next.objects[j].y);
      if (d <= limit) pairs.push_back({d, i, j});
    }
  }
  std::sort(pairs.begin(), pairs.end(), [](const Pair& a, const Pair& b) {
    if (a.d != b.d) return a.d < b.d;
    if (a.i != b.i) return a.i < b.i;
    return a.j < b.j;
  });
  std::vector<bool> used_prev(prev.objects.size(), false);
  std::vector<bool> used_next(next.objects.size(), false);
  for (const auto& p : pairs) {
    if (used_prev[p.i] || used_next[p.j]) continue;
    used_prev[p.i] = true;
    used_next[p.j] = true;
  }
  for (std::size_t i = 0; i < prev.objects.size(); ++i) {
    if (!used_prev[i] && !near_edge(prev.objects[i], rules.boundary_margin)) return true;
  }
  for (std::size_t j = 0; j < next.objects.size(); ++j) {
    if (!used_next[j] && !near_edge(next.objects[j], rules.boundary_margin)) return true;
  }
  return false;
}

}  // namespace

double bin_fraction(double fraction, const JudgeRules& rules) {
  if (rules.bin_scores.size() != rules.bin_edges.size() + 1) {
    throw std::invalid_argument("JudgeRules: scores must have one more entry than edges");
  }
  for (std::size_t i = 0; i < rules.bin_edges.size(); ++i) {
    if (fraction <= rules.bin_edges[i]) return rules.bin_scores[i];
  }
  return rules.bin_scores.back();
}

LevelScores judge_video(const Video& video, const JudgeRules& rules) {
  if (video.frames.empty()) return LevelScores{};
  const int M = int(video.frames.size());

  std::vector<Scene> scenes;
  scenes.reserve(M);
  int sem_violations = 0;
  for (const auto& frame : video.frames) {
    DecodeDiag diag;
    scenes.push_back(decode_frame_diag(frame, &diag));
    const bool bad =
        diag.clipped || diag.ambiguous_code || diag.ambiguous_slot || diag.dropped_slots > 0;
    if (bad) ++sem_violations;
  }

  LevelScores out;
  out.sem = bin_fraction(double(sem_violations) / M, rules);

  if (M > 1) {
    int log_violations = 0;
    for (int m = 0; m + 1 < M; ++m) {
      bool bad = transition_violation(scenes[m], scenes[m + 1], rules);
      if (m == 0 && placement_violation(scenes[0])) bad = true;
      if (bad) ++log_violations;
    }
    out.log = bin_fraction(double(log_violations) / (M - 1), rules);
  } else {
    out.log = bin_fraction(placement_violation(scenes[0]) ? 1.0 : 0.0, rules);
  }

  int risk_frames = 0;
  int dec_violations = 0;
  for (int m = 0; m + 1 < M; ++m) {
    const Scene& s = scenes[m];
    if (!risk_triggered(s) || s.ego.vx <= rules.min_risk_speed) continue;
    ++risk_frames;
    const double expected = std::min(s.ego.vx, rules.brake_rate);
    const double actual = s.ego.vx - scenes[m + 1].ego.vx;
    if (actual < expected - rules.decel_tol) ++dec_violations;
  }
  out.dec = (risk_frames == 0) ? rules.no_risk_dec
                               : bin_fraction(double(dec_violations) / risk_frames, rules);
  return out;
}

double asr(const std::vector<Video>& videos, const JudgeRules& rules) {
  if (videos.empty()) throw std::invalid_argument("asr: empty batch");
  int hits = 0;
  for (const auto& v : videos) {
    if (judge_video(v, rules).success()) ++hits;
  }
  return double(hits) / double(videos.size());
}

std::string JudgeRules::to_json() const {
  nlohmann::json j;
  j["bin_edges"] = bin_edges;
  j["bin_scores"] = bin_scores;
  j["teleport_margin"] = teleport_margin;
  j["boundary_margin"] = boundary_margin;
  j["decel_tol"] = decel_tol;
  j["min_risk_speed"] = min_risk_speed;
  j["brake_rate"] = brake_rate;
  j["no_risk_dec"] = no_risk_dec;
  return j.dump(2);
}

JudgeRules JudgeRules::from_json(const std::string& text) {
  auto j = nlohmann::json::parse(text);
  JudgeRules r;
  r.bin_edges = j.at("bin_edges").get<Vec>();
  r.bin_scores = j.at("bin_scores").get<Vec>();
  r.teleport_margin = j.at("teleport_margin").get<double>();
  r.boundary_margin = j.at("boundary_margin").get<double>();
  r.decel_tol = j.at("decel_tol").get<double>();
  r.min_risk_speed = j.at("min_risk_speed").get<double>();
  r.brake_rate = j.at("brake_rate").get<double>();
  r.no_risk_dec = j.at("no_risk_dec").get<double>();
  return r;
}

}  // namespace wmlab
