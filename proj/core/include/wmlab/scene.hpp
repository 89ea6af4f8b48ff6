#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "wmlab/rng.hpp"
#include "wmlab/schedule.hpp"

namespace wmlab {

// Lane-grid world geometry and latent layout. The frame latent is a direct
// concatenation of the map cells, light code, ego state and object slots, so
// encode/decode round-trips are exact and brute-force oracles stay cheap.
inline constexpr int kGridW = 4;
inline constexpr int kGridH = 3;
inline constexpr int kMapCells = kGridW * kGridH;  // 12
inline constexpr int kNumClasses = 5;
inline constexpr int kMaxObjects = 8;
inline constexpr int kSlotFeat = 8;  // exist, class, x, y, w, h, vx, vy
inline constexpr int kBoxDim = kMaxObjects * kSlotFeat;  // 64
inline constexpr int kLatentDim = kMapCells + 1 + 4 + kBoxDim;  // 81
inline constexpr int kContextDim = kLatentDim + 1;  // + brake feature

// Discrete codes are spread by 0.5 so nearest-code decoding tolerates the
// sampler's residual noise.
inline constexpr double kCodeScale = 0.5;
inline constexpr double kThetaSlot = 0.5;   // slot existence threshold
inline constexpr double kVMax = 0.5;        // per-frame displacement cap
inline constexpr double kMinSize = 0.2;
inline constexpr double kMaxSize = 1.5;
inline constexpr double kBrakeRate = 0.15;  // ego deceleration per risky frame
inline constexpr double kBrakeDist = 1.5;   // obstacle look-ahead distance
inline constexpr double kLaneTol = 0.5;     // same-lane tolerance in y

enum class ObjectClass : int { kCar = 0, kTruck, kBus, kPedestrian, kSign };
enum class LightState : int { kGreen = 0, kYellow, kRed, kNone };
enum class CellType : int { kOffRoad = 0, kLane, kCrosswalk };

struct SceneObject {
  ObjectClass cls = ObjectClass::kCar;
  double x = 0.0, y = 0.0;   // grid units
  double w = 0.5, h = 0.5;
  double vx = 0.0, vy = 0.0; // grid units per frame
};

struct EgoState {
  double x = 0.0, y = 0.0;
  double vx = 0.0, vy = 0.0;
};

struct Scene {
  std::array<int, kMapCells> lane_layout{};  // CellType codes
  std::vector<SceneObject> objects;
  LightState light = LightState::kNone;
  EgoState ego;
};

// Physical condition R: map channel + fixed-slot box channel.
struct PhysicalCondition {
  Vec map_embed;  // kMapCells
  Vec box_embed;  // kBoxDim
};

// Input condition C: frame latent plus the brake feature, so the world model's
// linear dynamics can express deceleration under risk.
struct InputCondition {
  Vec context_embed;  // kContextDim
};

struct Video {
  int video_id = 0;
  std::vector<Latent> frames;               // timestep 0
  std::vector<Scene> scenes;                // decoded frames
  std::vector<PhysicalCondition> conditions;
  InputCondition context;                   // condition for the first frame
};

struct SceneEdit {
  enum class Kind { kAddObject, kRemoveObject, kChangeClass, kFlipLight, kShiftObject,
                    kSetEgoSpeed };
  Kind kind = Kind::kFlipLight;
  ObjectClass cls = ObjectClass::kCar;      // add/change target class
  int object_index = 0;                     // remove/change/shift target
  double dx = 0.0, dy = 0.0;                // shift offset
  double x = 0.0, y = 0.0;                  // add position; x doubles as ego speed
};

// Per-frame decode diagnostics consumed by the rule-based judge.
struct DecodeDiag {
  bool clipped = false;           // continuous field outside bounds
  bool ambiguous_code = false;    // discrete feature far from every code
  bool ambiguous_slot = false;    // existence activation near the threshold
  int dropped_slots = 0;
};

void validate_scene(const Scene& scene);

PhysicalCondition encode_condition(const Scene& scene);
InputCondition encode_context(const Scene& scene);
Latent encode_frame(const Scene& scene);
Scene decode_frame(const Latent& latent);
Scene decode_frame_diag(const Latent& latent, DecodeDiag* diag);

// Brake feature: how much the ego is expected to slow this frame. Nonzero only
// when a risk trigger (red light while moving, obstacle ahead in lane) is
// active; bounded by the current forward speed so speed never goes negative.
double brake_feature(const Scene& scene);
bool risk_triggered(const Scene& scene);

// One step of ground-truth dynamics: objects and ego advance by velocity, ego
// sheds brake_feature from its forward speed. Positions are assumed to stay in
// bounds (rollout_dataset samples initial states that guarantee this).
Scene kinematic_step(const Scene& scene);

std::pair<Scene, InputCondition> make_target(const Scene& scene, const SceneEdit& edit);

Scene random_scene(Rng& rng, int max_objects = 4);
// Random scene whose objects and ego stay in bounds for `horizon` kinematic steps.
Scene random_rollout_scene(Rng& rng, int horizon, int max_objects = 4);

std::vector<Video> rollout_dataset(int n_videos, int M, std::uint64_t seed);

std::string frame_to_jsonl(int video_id, int frame_idx, const Scene& scene);
Scene frame_from_jsonl(const std::string& line, int* video_id = nullptr,
                       int* frame_idx = nullptr);
std::string dataset_to_jsonl(const std::vector<Video>& videos);

}  // namespace wmlab
