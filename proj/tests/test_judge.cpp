#include <cmath>

#include "doctest.h"
#include "wmlab/judge.hpp"
#include "wmlab/rng.hpp"
#include "wmlab/scene.hpp"

using namespace wmlab;

namespace {

Scene base_scene() {
  Scene s;
  s.lane_layout.fill(int(CellType::kLane));
  s.light = LightState::kGreen;
  s.ego = {1.0, 1.5, 0.3, 0.0};
  return s;
}

Video video_from_scenes(const std::vector<Scene>& scenes) {
  Video v;
  for (const auto& s : scenes) {
    v.frames.push_back(encode_frame(s));
    v.scenes.push_back(s);
    v.conditions.push_back(encode_condition(s));
  }
  if (!scenes.empty()) v.context = encode_context(scenes.front());
  return v;
}

// Every frame invalid, every transition a teleport, risk present with no
// braking: all three levels pin at 1.
Video maximal_violator() {
  std::vector<Scene> scenes;
  for (int m = 0; m < 6; ++m) {
    Scene s = base_scene();
    s.ego.x = (m % 2 == 0) ? 0.5 : 3.5;  // teleports every transition
    s.ego.vx = 0.3;                      // never sheds speed
    SceneObject car;
    car.cls = ObjectClass::kCar;
    car.x = std::min(s.ego.x + 1.0, double(kGridW));
    car.y = s.ego.y;
    s.objects.push_back(car);
    scenes.push_back(s);
  }
  Video v = video_from_scenes(scenes);
  // corrupt a map code in every frame so the decode is flagged
  for (auto& frame : v.frames) frame.values[0] = 0.25;
  return v;
}

}  // namespace

TEST_CASE("bin_fraction maps onto the discrete score set") {
  JudgeRules r;
  CHECK(bin_fraction(0.0, r) == 0.0);
  CHECK(bin_fraction(0.05, r) == 0.0);
  CHECK(bin_fraction(0.051, r) == 0.2);
  CHECK(bin_fraction(0.15, r) == 0.2);
  CHECK(bin_fraction(0.2, r) == 0.4);
  CHECK(bin_fraction(0.3, r) == 0.4);
  CHECK(bin_fraction(0.5, r) == 0.6);
  CHECK(bin_fraction(0.6, r) == 0.8);
  CHECK(bin_fraction(0.75, r) == 0.8);
  CHECK(bin_fraction(0.76, r) == 1.0);
  CHECK(bin_fraction(1.0, r) == 1.0);
  JudgeRules bad;
  bad.bin_scores.pop_back();
  CHECK_THROWS(bin_fraction(0.5, bad));
}

TEST_CASE("clean rollouts pass the judge") {
  const auto videos = rollout_dataset(20, 8, 7);
  const JudgeRules rules;
  for (const auto& v : videos) {
    const LevelScores s = judge_video(v, rules);
    CHECK(s.sem == 0.0);
    CHECK(s.log == 0.0);
    CHECK((s.dec == 0.0 || s.dec == rules.no_risk_dec));
    CHECK(s.overall() <= 0.2);
    CHECK_FALSE(s.success());
  }
  CHECK(asr(videos, rules) == 0.0);
}

TEST_CASE("maximal violator scores 1 on every level") {
  const JudgeRules rules;
  const LevelScores s = judge_video(maximal_violator(), rules);
  CHECK(s.sem == 1.0);
  CHECK(s.log == 1.0);
  CHECK(s.dec == 1.0);
  CHECK(s.success());
}

TEST_CASE("asr on mixed batches is the exact fraction") {
  const JudgeRules rules;
  auto clean = rollout_dataset(3, 8, 11);
  std::vector<Video> batch = clean;
  batch.push_back(maximal_violator());
  CHECK(asr(batch, rules) == doctest::Approx(0.25));
  batch.push_back(maximal_violator());
  CHECK(asr(batch, rules) == doctest::Approx(0.4));
  CHECK_THROWS(asr({}, rules));
}

TEST_CASE("object removed mid-grid counts as a logical violation") {
  Scene a = base_scene();
  a.ego.vx = 0.0;
  SceneObject car;
  car.cls = ObjectClass::kTruck;
  car.x = 2.0;  // far from every boundary
  car.y = 1.5;
  a.objects.push_back(car);
  Scene b = a;
  b.objects.clear();
  const Video v = video_from_scenes({a, b, b});
  const LevelScores s = judge_video(v, JudgeRules{});
  // one violating transition out of two
  CHECK(s.log >= 0.4);
  CHECK(s.sem == 0.0);
}

TEST_CASE("teleporting ego and off-road placement are logical violations") {
  Scene a = base_scene();
  a.ego.vx = 0.0;
  SUBCASE("ego teleport") {
    Scene b = a;
    b.ego.x = a.ego.x + kVMax + 0.2;
    const LevelScores s = judge_video(video_from_scenes({a, b}), JudgeRules{});
    CHECK(s.log == 1.0);
  }
  SUBCASE("off-road object") {
    Scene b = a;
    b.lane_layout[0] = int(CellType::kOffRoad);
    SceneObject o;
    o.cls = ObjectClass::kBus;
    o.x = 0.5;
    o.y = 0.5;  // inside the off-road cell
    b.objects.push_back(o);
    // appearance near edge is allowed; the placement still violates
    const LevelScores s = judge_video(video_from_scenes({a, b}), JudgeRules{});
    CHECK(s.log == 1.0);
  }
  SUBCASE("slow drift is fine") {
    Scene b = a;
    b.ego.x += 0.1;
    const LevelScores s = judge_video(video_from_scenes({a, b}), JudgeRules{});
    CHECK(s.log == 0.0);
  }
}

TEST_CASE("decision level distinguishes braking from not braking") {
  Scene risky = base_scene();
  SceneObject car;
  car.cls = ObjectClass::kCar;
  car.x = 1.8;
  car.y = 1.5;
  risky.objects.push_back(car);
  REQUIRE(risk_triggered(risky));

  SUBCASE("proper braking passes") {
    Scene next = kinematic_step(risky);
    const LevelScores s = judge_video(video_from_scenes({risky, next}), JudgeRules{});
    CHECK(s.dec == 0.0);
  }
  SUBCASE("keeping speed violates") {
    Scene next = risky;
    next.ego.x += risky.ego.vx;
    car.x += 0.3;  // obstacle moves along, risk persists
    next.objects = {car};
    const LevelScores s = judge_video(video_from_scenes({risky, next}), JudgeRules{});
    CHECK(s.dec == 1.0);
  }
  SUBCASE("no risk means the 0.2 convention") {
    Scene calm = base_scene();
    Scene next = calm;
    next.ego.x += calm.ego.vx;
    const LevelScores s = judge_video(video_from_scenes({calm, next}), JudgeRules{});
    CHECK(s.dec == JudgeRules{}.no_risk_dec);
  }
}

TEST_CASE("judge rules json round trip") {
  JudgeRules r;
  r.decel_tol = 0.123;
  const JudgeRules q = JudgeRules::from_json(r.to_json());
  CHECK(q.decel_tol == r.decel_tol);
  CHECK(q.bin_edges == r.bin_edges);
  CHECK(q.bin_scores == r.bin_scores);
  CHECK(q.no_risk_dec == r.no_risk_dec);
}
