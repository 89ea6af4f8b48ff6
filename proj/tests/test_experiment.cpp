#include <cstdio>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "wmlab/experiment.hpp"

using namespace wmlab;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(bool(in));
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

struct TempDir {
  fs::path path;
  explicit TempDir(const char* tag) {
    path = fs::temp_directory_path() / (std::string("wmlab-test-") + tag);
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

}  // namespace

TEST_CASE("default config resolves into a working setup") {
  const Config cfg = default_config();
  CHECK(cfg.get_int("schedule.steps") == 25);
  CHECK(cfg.get("attack.mode") == "targeted");
  CHECK_THROWS(cfg.get("no.such.key"));
  const AttackSetup s = make_setup(cfg);
  CHECK(s.schedule.num_steps == 25);
  CHECK(s.frames == cfg.get_int("data.frames"));
  CHECK(s.world().variant == DenoiserHandle::Variant::kAnalytic);
}

TEST_CASE("config hash is stable and sensitive") {
  const Config a = default_config();
  Config b = default_config();
  CHECK(config_hash(a) == config_hash(b));
  CHECK(config_hash(a).size() == 16);
  b.set("attack.tau", "0.175");
  CHECK(config_hash(a) != config_hash(b));
  // known vector for the underlying hash
  CHECK(fnv1a64("") == 0xcbf29ce484222325ULL);
}

TEST_CASE("ini merge handles sections and comments") {
  Config cfg = default_config();
  merge_config_text(cfg,
                    "# comment\n"
                    "[attack]\n"
                    "tau = 0.2\n"
                    "; another comment\n"
                    "mode=untargeted\n"
                    "[schedule]\n"
                    "steps = 10\n");
  CHECK(cfg.get("attack.tau") == "0.2");
  CHECK(cfg.get("attack.mode") == "untargeted");
  CHECK(cfg.get_int("schedule.steps") == 10);
  CHECK_THROWS(merge_config_text(cfg, "[attack\ntau=1\n"));
  CHECK_THROWS(merge_config_text(cfg, "not a key value line\n"));
}

TEST_CASE("override parsing") {
  Config cfg = default_config();
  apply_override(cfg, "attack.runs=7");
  CHECK(cfg.get_int("attack.runs") == 7);
  CHECK_THROWS(apply_override(cfg, "attack.runs"));
  CHECK_THROWS(apply_override(cfg, "=5"));
}

TEST_CASE("metrics csv formatting") {
  CHECK(metrics_csv_header() ==
        "config_hash,fid,fvd,asr,sem_mean,log_mean,dec_mean,l2_avg,col_rate\n");
  const std::string row = metrics_csv_row("abc", {{"fid", 0.5}, {"col_rate", 0.25}});
  CHECK(row == "abc,0.5,,,,,,,0.25\n");
  CHECK(format_double(0.1) == "0.1");
  CHECK(format_double(2.0) == "2");
}

TEST_CASE("target edits: hazard first, held speed second") {
  Scene s;
  s.lane_layout.fill(int(CellType::kLane));
  s.light = LightState::kGreen;
  s.ego = {1.0, 1.5, 0.3, 0.0};
  Rng rng(77);
  const auto edits = pick_target_edits(s, rng, 3);
  REQUIRE(edits.size() == 3);
  CHECK((edits[0].kind == SceneEdit::Kind::kAddObject ||
         edits[0].kind == SceneEdit::Kind::kShiftObject));
  CHECK(edits[1].kind == SceneEdit::Kind::kSetEgoSpeed);
  CHECK(edits[1].x >= 0.75 * kVMax);
  CHECK(edits[1].x <= kVMax);

  // the stacked target is a scene where the judge's risk condition holds
  Scene cur = s;
  for (const auto& e : edits) cur = make_target(cur, e).first;
  CHECK(risk_triggered(cur));
  CHECK(cur.ego.vx >= 0.75 * kVMax);
}

TEST_CASE("attack command writes byte-identical artifacts per config") {
  Config cfg = default_config();
  // frame statistics need more samples than the embedding dimension
  cfg.set("attack.runs", "17");
  cfg.set("data.frames", "4");

  TempDir da("attack-a"), db("attack-b");
  Config ca = cfg, cb = cfg;
  ca.set("run.out", da.path.string());
  cb.set("run.out", db.path.string());
  const fs::path ra = cmd_attack(ca);
  const fs::path rb = cmd_attack(cb);

  for (const char* name :
       {"clean.jsonl", "attacked.jsonl", "telemetry.csv", "delta.csv", "judge_rules.json"}) {
    CHECK(slurp(ra / name) == slurp(rb / name));
  }
  // metrics rows differ only in the leading config hash (run.out is hashed)
  const std::string ma = slurp(ra / "metrics.csv");
  const std::string mb = slurp(rb / "metrics.csv");
  CHECK(ma.rfind(metrics_csv_header(), 0) == 0);
  const std::string row_a = ma.substr(ma.rfind('\n', ma.size() - 2) + 1);
  const std::string row_b = mb.substr(mb.rfind('\n', mb.size() - 2) + 1);
  CHECK(row_a.substr(row_a.find(',')) == row_b.substr(row_b.find(',')));
}

TEST_CASE("batch metrics line up with a direct judge pass") {
  Config cfg = default_config();
  cfg.set("attack.runs", "17");
  cfg.set("data.frames", "4");
  const AttackBatch batch = run_attack_batch(cfg);
  REQUIRE(batch.results.size() == 17);
  const AttackSetup setup = make_setup(cfg);
  std::vector<Video> att;
  for (const auto& r : batch.results) att.push_back(r.attacked_video);
  CHECK(batch.metrics.asr_value == asr(att, setup.rules));
  CHECK(batch.metrics.fid >= 0.0);
  CHECK(batch.metrics.fvd >= 0.0);
}
