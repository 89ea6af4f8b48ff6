#include "wmlab/scene.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace wmlab {
namespace {

constexpr int kLightOff = kMapCells;       // latent offset of the light code
constexpr int kEgoOff = kMapCells + 1;     // ego x, y, vx, vy
constexpr int kSlotOff = kEgoOff + 4;

constexpr double kAmbiguityMargin = 0.1;   // distance past which a code reads as ambiguous
constexpr double kClipMargin = 0.1;  // generous against sampler noise at the bounds

double clip(double v, double lo, double hi, bool* clipped) {
  if (v < lo) {
    if (clipped && lo - v > kClipMargin) *clipped = true;
    return lo;
  }
  if (v > hi) {
    if (clipped && v - hi > kClipMargin) *clipped = true;
    return hi;
  }
  return v;
}

// Nearest code index for a feature stored as index * kCodeScale.
int nearest_code(double v, int n_codes, bool* ambiguous) {
  int best = 0;
  double best_d = 1e30;
  for (int k = 0; k < n_codes; ++k) {
    const double d = std::abs(v - k * kCodeScale);
    if (d < best_d) {
      best_d = d;
      best = k;
    }
  }
  if (ambiguous && best_d > kAmbiguityMargin) *ambiguous = true;
  return best;
}

bool slot_less(const SceneObject& a, const SceneObject& b) {
  if (a.cls != b.cls) return static_cast<int>(a.cls) < static_cast<int>(b.cls);
  if (a.x != b.x) return a.x < b.x;
  return a.y < b.y;
}

std::vector<SceneObject> canonical_objects(const Scene& scene) {
  std::vector<SceneObject> objs = scene.objects;
  std::sort(objs.begin(), objs.end(), slot_less);
  return objs;
}

bool is_obstacle(ObjectClass cls) { return cls != ObjectClass::kSign; }

}  // namespace

void validate_scene(const Scene& scene) {
  if (scene.objects.size() > kMaxObjects) {
    throw std::invalid_argument("scene: too many objects");
  }
  auto check_pos = [](double x, double y, const char* what) {
    if (x < 0.0 || x > kGridW || y < 0.0 || y > kGridH) {
      throw std::invalid_argument(std::string("scene: ") + what + " out of bounds");
    }
  };
  check_pos(scene.ego.x, scene.ego.y, "ego");
  for (const auto& o : scene.objects) {
    check_pos(o.x, o.y, "object");
    if (o.w <= 0.0 || o.h <= 0.0) throw std::invalid_argument("scene: non-positive size");
  }
  for (int c : scene.lane_layout) {
    if (c < 0 || c > 2) throw std::invalid_argument("scene: bad cell code");
  }
}

PhysicalCondition encode_condition(const Scene& scene) {
  validate_scene(scene);
  PhysicalCondition cond;
  cond.map_embed.resize(kMapCells);
  for (int i = 0; i < kMapCells; ++i) cond.map_embed[i] = scene.lane_layout[i] * kCodeScale;
  cond.box_embed.assign(kBoxDim, 0.0);
  const auto objs = canonical_objects(scene);
  for (std::size_t s = 0; s < objs.size(); ++s) {
    double* f = cond.box_embed.data() + s * kSlotFeat;
    f[0] = 1.0;
    f[1] = static_cast<int>(objs[s].cls) * kCodeScale;
    f[2] = objs[s].x;
    f[3] = objs[s].y;
    f[4] = objs[s].w;
    f[5] = objs[s].h;
    f[6] = objs[s].vx;
    f[7] = objs[s].vy;
  }
  return cond;
}

Latent encode_frame(const Scene& scene) {
  const PhysicalCondition cond = encode_condition(scene);
  Latent lat;
  lat.timestep = 0;
  lat.values.assign(kLatentDim, 0.0);
  std::copy(cond.map_embed.begin(), cond.map_embed.end(), lat.values.begin());
  lat.values[kLightOff] = static_cast<int>(scene.light) * kCodeScale;
  lat.values[kEgoOff + 0] = scene.ego.x;
  lat.values[kEgoOff + 1] = scene.ego.y;
  lat.values[kEgoOff + 2] = scene.ego.vx;
  lat.values[kEgoOff + 3] = scene.ego.vy;
  std::copy(cond.box_embed.begin(), cond.box_embed.end(), lat.values.begin() + kSlotOff);
  return lat;
}

InputCondition encode_context(const Scene& scene) {
  const Latent lat = encode_frame(scene);
  InputCondition c;
  c.context_embed = lat.values;
  c.context_embed.push_back(brake_feature(scene));
  return c;
}

Scene decode_frame_diag(const Latent& latent, DecodeDiag* diag) {
  if (latent.timestep != 0) throw std::invalid_argument("decode_frame: latent must be at timestep 0");
  if (latent.values.size() != kLatentDim) throw std::invalid_argument("decode_frame: bad dimension");
  DecodeDiag local;
  const Vec& v = latent.values;
  Scene s;
  for (int i = 0; i < kMapCells; ++i) {
    s.lane_layout[i] = nearest_code(v[i], 3, &local.ambiguous_code);
  }
  s.light = static_cast<LightState>(nearest_code(v[kLightOff], 4, &local.ambiguous_code));
  s.ego.x = clip(v[kEgoOff + 0], 0.0, kGridW, &local.clipped);
  s.ego.y = clip(v[kEgoOff + 1], 0.0, kGridH, &local.clipped);
  s.ego.vx = clip(v[kEgoOff + 2], -kVMax, kVMax, &local.clipped);
  s.ego.vy = clip(v[kEgoOff + 3], -kVMax, kVMax, &local.clipped);
  for (int slot = 0; slot < kMaxObjects; ++slot) {
    const double* f = v.data() + kSlotOff + slot * kSlotFeat;
    if (std::abs(f[0] - kThetaSlot) <= kAmbiguityMargin) local.ambiguous_slot = true;
    if (f[0] < kThetaSlot) {
      // a suppressed slot that still carries real content reads as a dropped
      // object; small sampler noise does not count as content
      double content = 0.0;
      for (int k = 1; k < kSlotFeat; ++k) content = std::max(content, std::abs(f[k]));
      if (content > 0.25 && f[0] > kAmbiguityMargin) ++local.dropped_slots;
      continue;
    }
    SceneObject o;
    o.cls = static_cast<ObjectClass>(nearest_code(f[1], kNumClasses, &local.ambiguous_code));
    o.x = clip(f[2], 0.0, kGridW, &local.clipped);
    o.y = clip(f[3], 0.0, kGridH, &local.clipped);
    o.w = clip(f[4], kMinSize, kMaxSize, &local.clipped);
    o.h = clip(f[5], kMinSize, kMaxSize, &local.clipped);
    o.vx = clip(f[6], -kVMax, kVMax, &local.clipped);
    o.vy = clip(f[7], -kVMax, kVMax, &local.clipped);
    s.objects.push_back(o);
  }
  if (diag) *diag = local;
  return s;
}

Scene decode_frame(const Latent& latent) { return decode_frame_diag(latent, nullptr); }

bool risk_triggered(const Scene& scene) {
  if (scene.light == LightState::kRed && scene.ego.vx > 1e-9) return true;
  for (const auto& o : scene.objects) {
    if (!is_obstacle(o.cls)) continue;
    const double dx = o.x - scene.ego.x;
    if (dx > 0.0 && dx <= kBrakeDist && std::abs(o.y - scene.ego.y) <= kLaneTol) return true;
  }
  return false;
}

double brake_feature(const Scene& scene) {
  if (!risk_triggered(scene)) return 0.0;
  return std::min(std::max(scene.ego.vx, 0.0), kBrakeRate);
}

Scene kinematic_step(const Scene& scene) {
  Scene next = scene;
  const double bf = brake_feature(scene);
  for (auto& o : next.objects) {
    o.x += o.vx;
    o.y += o.vy;
  }
  next.ego.x += scene.ego.vx;
  next.ego.y += scene.ego.vy;
  next.ego.vx = scene.ego.vx - bf;
  next.objects = canonical_objects(next);
  return next;
}

std::pair<Scene, InputCondition> make_target(const Scene& scene, const SceneEdit& edit) {
  Scene t = scene;
  using Kind = SceneEdit::Kind;
  switch (edit.kind) {
    case Kind::kFlipLight:
      t.light = (t.light == LightState::kRed) ? LightState::kGreen : LightState::kRed;
      break;
    case Kind::kAddObject: {
      if (t.objects.size() >= kMaxObjects) throw std::invalid_argument("make_target: scene full");
      SceneObject o;
      o.cls = edit.cls;
      o.x = edit.x;
      o.y = edit.y;
      o.w = 0.6;
      o.h = 0.4;
      t.objects.push_back(o);
      break;
    }
    case Kind::kRemoveObject:
      if (t.objects.empty()) throw std::invalid_argument("make_target: no object to remove");
      if (edit.object_index < 0 || edit.object_index >= int(t.objects.size())) {
        throw std::invalid_argument("make_target: bad object index");
      }
      t.objects.erase(t.objects.begin() + edit.object_index);
      break;
    case Kind::kChangeClass:
      if (t.objects.empty()) throw std::invalid_argument("make_target: no object to edit");
      if (edit.object_index < 0 || edit.object_index >= int(t.objects.size())) {
        throw std::invalid_argument("make_target: bad object index");
      }
      t.objects[edit.object_index].cls = edit.cls;
      break;
    case Kind::kShiftObject:
      if (t.objects.empty()) throw std::invalid_argument("make_target: no object to shift");
      if (edit.object_index < 0 || edit.object_index >= int(t.objects.size())) {
        throw std::invalid_argument("make_target: bad object index");
      }
      t.objects[edit.object_index].x += edit.dx;
      t.objects[edit.object_index].y += edit.dy;
      break;
    case Kind::kSetEgoSpeed:
      if (edit.x < 0.0 || edit.x > kVMax) {
        throw std::invalid_argument("make_target: ego speed out of range");
      }
      t.ego.vx = edit.x;
      break;
  }
  t.objects = canonical_objects(t);
  validate_scene(t);
  return {t, encode_context(t)};
}

namespace {

// Rows every cell of which is drivable; objects are confined to these rows so
// ground-truth rollouts never place anything on an off-road cell.
std::vector<int> safe_rows(const Scene& s) {
  std::vector<int> rows;
  for (int r = 0; r < kGridH; ++r) {
    bool ok = true;
    for (int c = 0; c < kGridW; ++c) {
      if (s.lane_layout[r * kGridW + c] == int(CellType::kOffRoad)) ok = false;
    }
    if (ok) rows.push_back(r);
  }
  return rows;
}

}  // namespace

Scene random_scene(Rng& rng, int max_objects) {
  Scene s;
  for (int i = 0; i < kMapCells; ++i) {
    const double u = rng.uniform();
    s.lane_layout[i] = (u < 0.25) ? 0 : (u < 0.85 ? 1 : 2);
  }
  // middle row stays drivable so the ego always has a lane
  for (int x = 0; x < kGridW; ++x) s.lane_layout[kGridW + x] = 1;
  s.light = static_cast<LightState>(rng.below(4));
  s.ego.x = 0.2 + rng.uniform() * 1.0;
  s.ego.y = 1.5;
  s.ego.vx = 0.1 + rng.uniform() * 0.3;
  s.ego.vy = 0.0;
  const std::vector<int> rows = safe_rows(s);
  const int n = int(rng.below(std::uint64_t(max_objects) + 1));
  for (int i = 0; i < n; ++i) {
    SceneObject o;
    o.cls = static_cast<ObjectClass>(rng.below(kNumClasses));
    const int row = rows[rng.below(rows.size())];
    o.x = 0.3 + rng.uniform() * (kGridW - 0.6);
    o.y = row + 0.25 + rng.uniform() * 0.5;
    o.w = kMinSize + rng.uniform() * (kMaxSize - kMinSize);
    o.h = kMinSize + rng.uniform() * (kMaxSize - kMinSize);
    o.vx = (rng.uniform() - 0.5) * 2.0 * kVMax;
    o.vy = (rng.uniform() - 0.5) * 0.2;
    s.objects.push_back(o);
  }
  s.objects = canonical_objects(s);
  return s;
}

Scene random_rollout_scene(Rng& rng, int horizon, int max_objects) {
  Scene s = random_scene(rng, max_objects);
  const double margin = 0.2;
  const int h = std::max(1, horizon);
  auto bound_vel = [&](double pos, double vel, double lo, double hi) {
    const double vmax = (hi - margin - pos) / h;
    const double vmin = (lo + margin - pos) / h;
    return std::clamp(vel, std::max(-kVMax, vmin), std::min(kVMax, vmax));
  };
  for (auto& o : s.objects) {
    // keep each object inside its starting row so cells stay drivable
    const double row = std::floor(o.y);
    o.vx = bound_vel(o.x, o.vx, 0.0, kGridW);
    o.vy = bound_vel(o.y, o.vy, row, row + 1.0);
  }
  s.ego.vx = std::max(0.0, bound_vel(s.ego.x, s.ego.vx, 0.0, kGridW));
  s.objects = canonical_objects(s);
  return s;
}

std::vector<Video> rollout_dataset(int n_videos, int M, std::uint64_t seed) {
  if (n_videos < 0 || M < 1) throw std::invalid_argument("rollout_dataset: bad sizes");
  std::vector<Video> out;
  out.reserve(n_videos);
  Rng root(seed);
  for (int v = 0; v < n_videos; ++v) {
    Rng rng = root.fork(v);
    Video video;
    video.video_id = v;
    Scene scene = random_rollout_scene(rng, M);
    video.context = encode_context(scene);
    for (int m = 0; m < M; ++m) {
      video.frames.push_back(encode_frame(scene));
      video.scenes.push_back(scene);
      video.conditions.push_back(encode_condition(scene));
      if (m + 1 < M) scene = kinematic_step(scene);
    }
    out.push_back(std::move(video));
  }
  return out;
}

std::string frame_to_jsonl(int video_id, int frame_idx, const Scene& scene) {
  nlohmann::json j;
  j["video_id"] = video_id;
  j["frame_idx"] = frame_idx;
  j["lane_layout"] = scene.lane_layout;
  nlohmann::json objs = nlohmann::json::array();
  for (const auto& o : scene.objects) {
    objs.push_back({{"cls", static_cast<int>(o.cls)},
                    {"x", o.x},
                    {"y", o.y},
                    {"w", o.w},
                    {"h", o.h},
                    {"vx", o.vx},
                    {"vy", o.vy}});
  }
  j["objects"] = objs;
  j["light_state"] = static_cast<int>(scene.light);
  j["ego"] = {{"x", scene.ego.x}, {"y", scene.ego.y}, {"vx", scene.ego.vx}, {"vy", scene.ego.vy}};
  return j.dump();
}

Scene frame_from_jsonl(const std::string& line, int* video_id, int* frame_idx) {
  auto j = nlohmann::json::parse(line);
  if (video_id) *video_id = j.at("video_id").get<int>();
  if (frame_idx) *frame_idx = j.at("frame_idx").get<int>();
  Scene s;
  auto layout = j.at("lane_layout");
  for (int i = 0; i < kMapCells; ++i) s.lane_layout[i] = layout.at(i).get<int>();
  for (const auto& jo : j.at("objects")) {
    SceneObject o;
    o.cls = static_cast<ObjectClass>(jo.at("cls").get<int>());
    o.x = jo.at("x").get<double>();
    o.y = jo.at("y").get<double>();
    o.w = jo.at("w").get<double>();
    o.h = jo.at("h").get<double>();
    o.vx = jo.at("vx").get<double>();
    o.vy = jo.at("vy").get<double>();
    s.objects.push_back(o);
  }
  s.light = static_cast<LightState>(j.at("light_state").get<int>());
  s.ego.x = j.at("ego").at("x").get<double>();
  s.ego.y = j.at("ego").at("y").get<double>();
  s.ego.vx = j.at("ego").at("vx").get<double>();
  s.ego.vy = j.at("ego").at("vy").get<double>();
  return s;
}

std::string dataset_to_jsonl(const std::vector<Video>& videos) {
  std::ostringstream out;
  for (const auto& v : videos) {
    for (std::size_t m = 0; m < v.scenes.size(); ++m) {
      out << frame_to_jsonl(v.video_id, int(m), v.scenes[m]) << "\n";
    }
  }
  return out.str();
}

}  // namespace wmlab
