#include <cmath>

#include "doctest.h"
#include "wmlab/rng.hpp"
#include "wmlab/scene.hpp"

using namespace wmlab;

namespace {

void check_scene_equal(const Scene& a, const Scene& b) {
  CHECK(a.lane_layout == b.lane_layout);
  CHECK(a.light == b.light);
  CHECK(a.ego.x == b.ego.x);
  CHECK(a.ego.y == b.ego.y);
  CHECK(a.ego.vx == b.ego.vx);
  CHECK(a.ego.vy == b.ego.vy);
  REQUIRE(a.objects.size() == b.objects.size());
  for (std::size_t i = 0; i < a.objects.size(); ++i) {
    CHECK(a.objects[i].cls == b.objects[i].cls);
    CHECK(a.objects[i].x == b.objects[i].x);
    CHECK(a.objects[i].y == b.objects[i].y);
    CHECK(a.objects[i].w == b.objects[i].w);
    CHECK(a.objects[i].h == b.objects[i].h);
    CHECK(a.objects[i].vx == b.objects[i].vx);
    CHECK(a.objects[i].vy == b.objects[i].vy);
  }
}

}  // namespace

TEST_CASE("encode/decode round trip is exact on valid scenes") {
  Rng rng(101);
  for (int i = 0; i < 50; ++i) {
    const Scene s = random_scene(rng);
    DecodeDiag diag;
    const Scene r = decode_frame_diag(encode_frame(s), &diag);
    check_scene_equal(s, r);
    CHECK_FALSE(diag.clipped);
    CHECK_FALSE(diag.ambiguous_code);
    CHECK(diag.dropped_slots == 0);
  }
}

TEST_CASE("latent layout: map cells, light, ego, slots") {
  Rng rng(5);
  const Scene s = random_scene(rng);
  const Latent lat = encode_frame(s);
  REQUIRE(int(lat.values.size()) == kLatentDim);
  for (int i = 0; i < kMapCells; ++i) {
    CHECK(lat.values[i] == s.lane_layout[i] * kCodeScale);
  }
  CHECK(lat.values[kMapCells] == int(s.light) * kCodeScale);
  CHECK(lat.values[kMapCells + 1] == s.ego.x);
  CHECK(lat.values[kMapCells + 4] == s.ego.vy);
  const PhysicalCondition cond = encode_condition(s);
  for (std::size_t i = 0; i < s.objects.size(); ++i) {
    const double* f = cond.box_embed.data() + i * kSlotFeat;
    CHECK(f[0] == 1.0);
    CHECK(f[1] == int(s.objects[i].cls) * kCodeScale);
    CHECK(f[2] == s.objects[i].x);
  }
  // context = frame latent + brake feature
  const InputCondition ctx = encode_context(s);
  REQUIRE(int(ctx.context_embed.size()) == kContextDim);
  CHECK(ctx.context_embed.back() == brake_feature(s));
}

TEST_CASE("decode diagnostics flag corrupted latents") {
  Rng rng(17);
  const Scene s = random_scene(rng);
  Latent lat = encode_frame(s);

  SUBCASE("ambiguous map code") {
    lat.values[0] = 0.25;  // half way between two codes
    DecodeDiag diag;
    decode_frame_diag(lat, &diag);
    CHECK(diag.ambiguous_code);
  }
  SUBCASE("clipped ego position") {
    lat.values[kMapCells + 1] = kGridW + 1.0;
    DecodeDiag diag;
    const Scene r = decode_frame_diag(lat, &diag);
    CHECK(diag.clipped);
    CHECK(r.ego.x == kGridW);
  }
  SUBCASE("near-threshold slot") {
    lat.values[kMapCells + 5] = kThetaSlot + 0.05;
    DecodeDiag diag;
    decode_frame_diag(lat, &diag);
    CHECK(diag.ambiguous_slot);
  }
  SUBCASE("dropped slot content") {
    // suppressed existence but substantial feature content
    lat.values[kMapCells + 5] = 0.3;
    lat.values[kMapCells + 5 + 2] = 2.0;
    DecodeDiag diag;
    decode_frame_diag(lat, &diag);
    CHECK(diag.dropped_slots >= 1);
  }
}

TEST_CASE("risk trigger and braking dynamics") {
  Scene s;
  s.lane_layout.fill(int(CellType::kLane));
  s.ego = {1.0, 1.5, 0.3, 0.0};
  s.light = LightState::kGreen;
  CHECK_FALSE(risk_triggered(s));
  CHECK(brake_feature(s) == 0.0);

  SceneObject car;
  car.cls = ObjectClass::kCar;
  car.x = 2.0;  // ahead, within kBrakeDist
  car.y = 1.6;  // same lane
  s.objects.push_back(car);
  CHECK(risk_triggered(s));
  CHECK(brake_feature(s) == doctest::Approx(std::min(0.3, kBrakeRate)));

  const Scene next = kinematic_step(s);
  CHECK(next.ego.vx == doctest::Approx(0.3 - kBrakeRate));
  CHECK(next.ego.x == doctest::Approx(1.3));

  SUBCASE("sign class is not an obstacle") {
    s.objects[0].cls = ObjectClass::kSign;
    CHECK_FALSE(risk_triggered(s));
  }
  SUBCASE("object behind does not trigger") {
    s.objects[0].x = 0.5;
    CHECK_FALSE(risk_triggered(s));
  }
  SUBCASE("red light triggers while moving") {
    s.objects.clear();
    s.light = LightState::kRed;
    CHECK(risk_triggered(s));
    s.ego.vx = 0.0;
    CHECK_FALSE(risk_triggered(s));
  }
}

TEST_CASE("make_target edit kinds") {
  Rng rng(23);
  Scene s = random_rollout_scene(rng, 4);

  SUBCASE("add object") {
    if (s.objects.size() < kMaxObjects) {
      SceneEdit e;
      e.kind = SceneEdit::Kind::kAddObject;
      e.cls = ObjectClass::kBus;
      e.x = 2.0;
      e.y = 1.5;
      auto [t, cond] = make_target(s, e);
      CHECK(t.objects.size() == s.objects.size() + 1);
      CHECK(int(cond.context_embed.size()) == kContextDim);
    }
  }
  SUBCASE("flip light twice restores") {
    SceneEdit e;
    e.kind = SceneEdit::Kind::kFlipLight;
    auto [t1, c1] = make_target(s, e);
    auto [t2, c2] = make_target(t1, e);
    CHECK((t2.light == LightState::kRed || t2.light == LightState::kGreen));
    CHECK(t1.light != t2.light);
  }
  SUBCASE("set ego speed") {
    SceneEdit e;
    e.kind = SceneEdit::Kind::kSetEgoSpeed;
    e.x = 0.4;
    auto [t, cond] = make_target(s, e);
    CHECK(t.ego.vx == 0.4);
    e.x = kVMax + 0.1;
    CHECK_THROWS(make_target(s, e));
    e.x = -0.1;
    CHECK_THROWS(make_target(s, e));
  }
  SUBCASE("bad indices throw") {
    SceneEdit e;
    e.kind = SceneEdit::Kind::kRemoveObject;
    e.object_index = int(s.objects.size());
    CHECK_THROWS(make_target(s, e));
  }
}

TEST_CASE("rollouts are valid and deterministic") {
  const auto a = rollout_dataset(5, 8, 99);
  const auto b = rollout_dataset(5, 8, 99);
  REQUIRE(a.size() == 5);
  for (std::size_t v = 0; v < a.size(); ++v) {
    REQUIRE(a[v].frames.size() == 8);
    for (std::size_t m = 0; m < 8; ++m) {
      validate_scene(a[v].scenes[m]);
      CHECK(a[v].frames[m].values == b[v].frames[m].values);
      // frames are exact encodings of the rolled-out scenes
      CHECK(a[v].frames[m].values == encode_frame(a[v].scenes[m]).values);
    }
  }
}

TEST_CASE("jsonl round trip") {
  Rng rng(31);
  const Scene s = random_scene(rng);
  int vid = -1, fidx = -1;
  const Scene r = frame_from_jsonl(frame_to_jsonl(3, 7, s), &vid, &fidx);
  CHECK(vid == 3);
  CHECK(fidx == 7);
  check_scene_equal(s, r);
}
