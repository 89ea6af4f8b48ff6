#include "wmlab/experiment.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>

#include "json.hpp"
#include "wmlab/metrics.hpp"

namespace fs = std::filesystem;

namespace wmlab {
namespace {

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

void write_file(const fs::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << content;
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

fs::path make_run_dir(const Config& cfg, const std::string& suffix) {
  fs::path dir = cfg.get("run.out");
  dir /= config_hash(cfg) + suffix;
  fs::create_directories(dir);
  return dir;
}

std::string manifest_json(const Config& cfg, const std::string& command,
                          const std::vector<std::uint64_t>& seeds,
                          const std::vector<std::string>& outputs) {
  nlohmann::json j;
  j["command"] = command;
  j["config_hash"] = config_hash(cfg);
  j["config"] = nlohmann::json::parse(cfg.to_json());
  j["seeds"] = seeds;
  j["embedding_seed"] = cfg.get_int("embedding.seed");
  j["schedule"] = nlohmann::json::parse(
      make_schedule(cfg.get_int("schedule.steps"), cfg.get_double("schedule.beta_start"),
                    cfg.get_double("schedule.beta_end"))
          .to_json());
  j["denoiser"] = cfg.get("denoiser.kind");
  j["outputs"] = outputs;
  return j.dump(2) + "\n";
}

AttackMode parse_mode(const std::string& s) {
  if (s == "targeted") return AttackMode::kTargeted;
  if (s == "untargeted") return AttackMode::kUntargeted;
  throw std::invalid_argument("bad attack.mode: " + s);
}

CondChannel parse_channel(const std::string& s) {
  if (s == "map") return CondChannel::kMap;
  if (s == "box") return CondChannel::kBox;
  if (s == "both") return CondChannel::kBoth;
  throw std::invalid_argument("bad attack.channel: " + s);
}

StageVariant parse_stage(const std::string& s) {
  if (s == "full") return StageVariant::kFull;
  if (s == "stage1") return StageVariant::kStage1Only;
  if (s == "stage2") return StageVariant::kStage2Only;
  throw std::invalid_argument("bad attack.stage: " + s);
}

DiscrepancyMode parse_discrepancy(const std::string& s) {
  if (s == "noise") return DiscrepancyMode::kNoisePred;
  if (s == "latent") return DiscrepancyMode::kLatent;
  throw std::invalid_argument("bad attack.discrepancy: " + s);
}

}  // namespace

bool Config::has(const std::string& key) const { return values.count(key) != 0; }

std::string Config::get(const std::string& key) const {
  auto it = values.find(key);
  if (it == values.end()) throw std::invalid_argument("unknown config key: " + key);
  return it->second;
}

int Config::get_int(const std::string& key) const {
  const std::string v = get(key);
  std::size_t pos = 0;
  const int out = std::stoi(v, &pos);
  if (pos != v.size()) throw std::invalid_argument("config key " + key + " is not an integer");
  return out;
}

double Config::get_double(const std::string& key) const {
  const std::string v = get(key);
  std::size_t pos = 0;
  const double out = std::stod(v, &pos);
  if (pos != v.size()) throw std::invalid_argument("config key " + key + " is not a number");
  return out;
}

void Config::set(const std::string& key, const std::string& value) { values[key] = value; }

std::string Config::canonical() const {
  std::ostringstream out;
  for (const auto& [k, v] : values) out << k << '=' << v << '\n';
  return out.str();
}

std::string Config::to_json() const {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [k, v] : values) j[k] = v;
  return j.dump(2);
}

Config default_config() {
  Config c;
  c.values = {
      {"schedule.steps", "25"},
      {"schedule.beta_start", "0.005"},
      {"schedule.beta_end", "0.05"},
      {"world.components", "4"},
      {"world.s2", "0.0009"},
      {"world.seed", "7"},
      {"world.base_offset", "0.03"},
      {"data.videos", "100"},
      {"data.frames", "8"},
      {"data.seed", "1"},
      {"embedding.seed", "11"},
      {"denoiser.kind", "analytic"},
      {"denoiser.hidden", "128"},
      {"denoiser.steps", "2000"},
      {"denoiser.batch", "16"},
      {"denoiser.lr", "0.001"},
      {"denoiser.seed", "3"},
      {"denoiser.checkpoint", ""},
      {"attack.alpha", "0.1"},
      {"attack.lambda", "0.9"},
      {"attack.beta", "0.6"},
      {"attack.tau", "0.15"},
      {"attack.mode", "targeted"},
      {"attack.channel", "both"},
      {"attack.stage", "full"},
      {"attack.discrepancy", "noise"},
      {"attack.delta_step", "0.01"},
      {"attack.delta_budget", "0.5"},
      {"attack.target_blend", "1.0"},
      {"attack.target_pull", "0.3"},
      {"attack.target_edits", "3"},
      {"attack.obj_reg", "1"},
      {"attack.obj_diff", "1"},
      {"attack.obj_target", "1"},
      {"attack.runs", "100"},
      {"attack.seed", "101"},
      {"downstream.horizon", "3"},
      {"downstream.test_videos", "40"},
      {"downstream.seeds", "5"},
      {"downstream.seed", "21"},
      {"run.out", "runs"},
  };
  return c;
}

void merge_config_text(Config& cfg, const std::string& text) {
  std::istringstream in(text);
  std::string line, section;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#' || t[0] == ';') continue;
    if (t.front() == '[') {
      if (t.back() != ']') throw std::invalid_argument("config line " + std::to_string(lineno) +
                                                       ": unterminated section");
      section = trim(t.substr(1, t.size() - 2));
      continue;
    }
    const auto eq = t.find('=');
    if (eq == std::string::npos) {
      throw std::invalid_argument("config line " + std::to_string(lineno) + ": expected key = value");
    }
    const std::string key = trim(t.substr(0, eq));
    const std::string value = trim(t.substr(eq + 1));
    if (key.empty()) throw std::invalid_argument("config line " + std::to_string(lineno) + ": empty key");
    cfg.set(section.empty() ? key : section + "." + key, value);
  }
}

void merge_config_file(Config& cfg, const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read config file " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  merge_config_text(cfg, buf.str());
}

void apply_override(Config& cfg, const std::string& spec) {
  const auto eq = spec.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw std::invalid_argument("override must be key=value: " + spec);
  }
  cfg.set(trim(spec.substr(0, eq)), trim(spec.substr(eq + 1)));
}

Config resolve_config(const std::string& file_path, const std::vector<std::string>& overrides) {
  Config cfg = default_config();
  if (!file_path.empty()) merge_config_file(cfg, file_path);
  for (const auto& o : overrides) apply_override(cfg, o);
  return cfg;
}

std::uint64_t fnv1a64(const std::string& text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string config_hash(const Config& cfg) {
  std::ostringstream out;
  out << std::hex << std::setw(16) << std::setfill('0') << fnv1a64(cfg.canonical());
  return out.str();
}

WorldModel AttackSetup::world() const {
  WorldModel m;
  if (trained) {
    m.variant = DenoiserHandle::Variant::kTrained;
    m.params = &*trained;
  } else {
    m.variant = DenoiserHandle::Variant::kAnalytic;
    m.mixture = &mixture;
  }
  return m;
}

AttackSetup make_setup(const Config& cfg) {
  AttackSetup s;
  s.schedule = make_schedule(cfg.get_int("schedule.steps"), cfg.get_double("schedule.beta_start"),
                             cfg.get_double("schedule.beta_end"));
  s.mixture = make_world_mixture(cfg.get_int("world.components"), cfg.get_double("world.s2"),
                                 std::uint64_t(cfg.get_int("world.seed")),
                                 cfg.get_double("world.base_offset"));
  const std::string kind = cfg.get("denoiser.kind");
  if (kind == "trained") {
    const std::string ckpt = cfg.get("denoiser.checkpoint");
    if (ckpt.empty()) throw std::invalid_argument("denoiser.kind=trained needs denoiser.checkpoint");
    std::ifstream in(ckpt, std::ios::binary);
    if (!in) throw std::runtime_error("missing denoiser checkpoint " + ckpt);
    std::ostringstream buf;
    buf << in.rdbuf();
    s.trained = DenoiserParams::from_json(buf.str());
  } else if (kind != "analytic") {
    throw std::invalid_argument("bad denoiser.kind: " + kind);
  }
  s.embedding = FrozenEmbedding(std::uint64_t(cfg.get_int("embedding.seed")));

  s.attack.alpha_guidance = cfg.get_double("attack.alpha");
  s.attack.lambda_momentum = cfg.get_double("attack.lambda");
  s.attack.beta_fidelity = cfg.get_double("attack.beta");
  s.attack.tau = cfg.get_double("attack.tau");
  s.attack.mode = parse_mode(cfg.get("attack.mode"));
  s.attack.channel = parse_channel(cfg.get("attack.channel"));
  s.attack.stage_variant = parse_stage(cfg.get("attack.stage"));
  s.attack.discrepancy_mode = parse_discrepancy(cfg.get("attack.discrepancy"));
  s.attack.delta_step = cfg.get_double("attack.delta_step");
  s.attack.delta_budget = cfg.get_double("attack.delta_budget");
  s.attack.target_blend = cfg.get_double("attack.target_blend");
  s.attack.target_pull = cfg.get_double("attack.target_pull");
  s.attack.lambda_obj_reg = cfg.get_double("attack.obj_reg");
  s.attack.lambda_obj_diff = cfg.get_double("attack.obj_diff");
  s.attack.lambda_obj_target = cfg.get_double("attack.obj_target");
  validate_attack_config(s.attack);

  s.frames = cfg.get_int("data.frames");
  return s;
}

SceneEdit pick_target_edit(const Scene& scene, Rng& rng) {
  SceneEdit edit;
  const int kind = int(rng.below(4));
  const bool has_objects = !scene.objects.empty();
  if (kind == 1 && has_objects) {
    edit.kind = SceneEdit::Kind::kRemoveObject;
    edit.object_index = int(rng.below(scene.objects.size()));
    return edit;
  }
  if (kind == 2 && has_objects) {
    edit.kind = SceneEdit::Kind::kShiftObject;
    edit.object_index = int(rng.below(scene.objects.size()));
    const SceneObject& o = scene.objects[edit.object_index];
    // move to the far side of the grid and into the middle lane row so the
    // target differs substantially
    const double nx = o.x < kGridW / 2.0 ? kGridW - 0.2 - rng.uniform() * 0.8
                                         : 0.2 + rng.uniform() * 0.8;
    edit.dx = nx - o.x;
    edit.dy = (1.25 + rng.uniform() * 0.5) - o.y;
    return edit;
  }
  if (kind == 3 && has_objects) {
    edit.kind = SceneEdit::Kind::kChangeClass;
    edit.object_index = int(rng.below(scene.objects.size()));
    const SceneObject& o = scene.objects[edit.object_index];
    edit.cls = static_cast<ObjectClass>((int(o.cls) + 2 + int(rng.below(2))) % kNumClasses);
    return edit;
  }
  if (scene.objects.size() < kMaxObjects) {
    edit.kind = SceneEdit::Kind::kAddObject;
    edit.cls = static_cast<ObjectClass>(rng.below(kNumClasses));
    edit.x = 0.3 + rng.uniform() * (kGridW - 0.6);
    edit.y = 1.25 + rng.uniform() * 0.5;  // middle lane row
    return edit;
  }
  edit.kind = SceneEdit::Kind::kFlipLight;
  return edit;
}

// The lead edit plants an obstacle in the ego lane inside braking range, the
// canonical hazard the attack tries to materialize; the judge's decision level
// reacts to it when the generated ego keeps its speed.
SceneEdit pick_hazard_edit(const Scene& scene, Rng& rng) {
  SceneEdit edit;
  const double hx = std::min(scene.ego.x + 0.4 + rng.uniform() * (kBrakeDist - 0.6),
                             kGridW - 0.3);
  const double hy = std::clamp(scene.ego.y + (rng.uniform() - 0.5) * 0.6, 0.3, kGridH - 0.3);
  if (scene.objects.size() < kMaxObjects) {
    edit.kind = SceneEdit::Kind::kAddObject;
    edit.cls = static_cast<ObjectClass>(rng.below(4));  // any obstacle class
    edit.x = hx;
    edit.y = hy;
    return edit;
  }
  edit.kind = SceneEdit::Kind::kShiftObject;
  edit.object_index = int(rng.below(scene.objects.size()));
  const SceneObject& o = scene.objects[edit.object_index];
  edit.dx = hx - o.x;
  edit.dy = hy - o.y;
  return edit;
}

std::vector<SceneEdit> pick_target_edits(const Scene& scene, Rng& rng, int count) {
  std::vector<SceneEdit> edits;
  Scene cur = scene;
  for (int i = 0; i < count; ++i) {
    SceneEdit e;
    if (i == 0) {
      e = pick_hazard_edit(cur, rng);
    } else if (i == 1) {
      // Second half of the hazard: the ego keeps cruise speed into the
      // obstacle instead of braking.
      e.kind = SceneEdit::Kind::kSetEgoSpeed;
      e.x = kVMax * (0.75 + rng.uniform() * 0.25);
    } else {
      e = pick_target_edit(cur, rng);
    }
    cur = make_target(cur, e).first;
    edits.push_back(e);
  }
  return edits;
}

AttackBatch run_attack_batch(const Config& cfg) {
  const AttackSetup setup = make_setup(cfg);
  const WorldModel model = setup.world();
  const int n = cfg.get_int("attack.runs");
  const std::uint64_t seed0 = std::uint64_t(cfg.get_int("attack.seed"));
  if (n < 1) throw std::invalid_argument("attack.runs must be >= 1");

  AttackBatch batch;
  batch.results.reserve(n);
  for (int i = 0; i < n; ++i) {
    const std::uint64_t seed = seed0 + std::uint64_t(i);
    Rng scene_rng(seed ^ 0x5ce9e5eedULL);
    const Scene scene0 = random_rollout_scene(scene_rng, setup.frames);
    std::vector<SceneEdit> edits;
    if (setup.attack.mode == AttackMode::kTargeted) {
      edits = pick_target_edits(scene0, scene_rng, cfg.get_int("attack.target_edits"));
    }
    batch.results.push_back(run_attack(scene0, edits, model, setup.embedding, setup.attack,
                                       setup.schedule, setup.frames, seed));
  }

  std::vector<Latent> clean_frames, att_frames;
  std::vector<Video> clean_videos, att_videos;
  for (const auto& r : batch.results) {
    clean_videos.push_back(r.clean_video);
    att_videos.push_back(r.attacked_video);
    for (const auto& f : r.clean_video.frames) clean_frames.push_back(f);
    for (const auto& f : r.attacked_video.frames) att_frames.push_back(f);
  }
  batch.metrics.fid = fid_analog(clean_frames, att_frames, setup.embedding);
  batch.metrics.fvd = fvd_analog(clean_videos, att_videos, setup.embedding);
  batch.metrics.asr_value = asr(att_videos, setup.rules);
  for (const auto& v : att_videos) {
    const LevelScores ls = judge_video(v, setup.rules);
    batch.metrics.sem_mean += ls.sem;
    batch.metrics.log_mean += ls.log;
    batch.metrics.dec_mean += ls.dec;
  }
  batch.metrics.sem_mean /= n;
  batch.metrics.log_mean /= n;
  batch.metrics.dec_mean /= n;
  return batch;
}

std::string format_double(double v) {
  std::ostringstream out;
  out << std::setprecision(10) << v;
  return out.str();
}

std::string metrics_csv_header() {
  return "config_hash,fid,fvd,asr,sem_mean,log_mean,dec_mean,l2_avg,col_rate\n";
}

std::string metrics_csv_row(const std::string& hash, const std::map<std::string, double>& cells) {
  static const char* cols[] = {"fid",      "fvd",      "asr",    "sem_mean",
                               "log_mean", "dec_mean", "l2_avg", "col_rate"};
  std::ostringstream out;
  out << hash;
  for (const char* col : cols) {
    out << ',';
    auto it = cells.find(col);
    if (it != cells.end()) out << format_double(it->second);
  }
  out << '\n';
  return out.str();
}

std::string cmd_gen_data(const Config& cfg) {
  const fs::path dir = make_run_dir(cfg, "");
  const int n = cfg.get_int("data.videos");
  const int m = cfg.get_int("data.frames");
  const std::uint64_t seed = std::uint64_t(cfg.get_int("data.seed"));
  const auto videos = rollout_dataset(n, m, seed);
  write_file(dir / "data.jsonl", dataset_to_jsonl(videos));
  write_file(dir / "config.json", cfg.to_json() + "\n");
  write_file(dir / "manifest.json",
             manifest_json(cfg, "gen-data", {seed}, {"data.jsonl", "config.json"}));
  return dir.string();
}

std::string cmd_train(const Config& cfg) {
  const fs::path dir = make_run_dir(cfg, "");
  const auto videos = rollout_dataset(cfg.get_int("data.videos"), cfg.get_int("data.frames"),
                                      std::uint64_t(cfg.get_int("data.seed")));
  const NoiseSchedule schedule =
      make_schedule(cfg.get_int("schedule.steps"), cfg.get_double("schedule.beta_start"),
                    cfg.get_double("schedule.beta_end"));
  TrainConfig tc;
  tc.steps = cfg.get_int("denoiser.steps");
  tc.batch_size = cfg.get_int("denoiser.batch");
  tc.learning_rate = cfg.get_double("denoiser.lr");
  tc.hidden_dim = cfg.get_int("denoiser.hidden");
  tc.seed = std::uint64_t(cfg.get_int("denoiser.seed"));
  const DenoiserParams params = train_denoiser(videos, schedule, tc);
  write_file(dir / "denoiser.json", params.to_json() + "\n");
  write_file(dir / "config.json", cfg.to_json() + "\n");
  write_file(dir / "manifest.json",
             manifest_json(cfg, "train", {tc.seed}, {"denoiser.json", "config.json"}));
  return dir.string();
}

namespace {

std::string batch_telemetry_csv(const AttackBatch& batch) {
  std::ostringstream out;
  out << "run,frame,t,stage,l_diff,alignment,eps_delta_norm,delta_norm,objective\n";
  for (std::size_t r = 0; r < batch.results.size(); ++r) {
    for (const auto& tel : batch.results[r].telemetry) {
      out << r << ',' << tel.frame << ',' << tel.t << ',' << (tel.stage == 3 ? 1 : tel.stage)
          << ',' << format_double(tel.l_diff) << ',' << format_double(tel.alignment) << ','
          << format_double(tel.eps_delta_norm) << ',' << format_double(tel.delta_norm) << ','
          << format_double(tel.objective) << '\n';
    }
  }
  return out.str();
}

std::string batch_delta_csv(const AttackBatch& batch) {
  std::ostringstream out;
  out << "run,delta_map_norm,delta_box_norm,stage_switch_step\n";
  for (std::size_t r = 0; r < batch.results.size(); ++r) {
    const auto& res = batch.results[r];
    out << r << ',' << format_double(l2_norm(res.delta_map)) << ','
        << format_double(l2_norm(res.delta_box)) << ','
        << (res.stage_switch_step ? std::to_string(*res.stage_switch_step) : std::string())
        << '\n';
  }
  return out.str();
}

void write_attack_artifacts(const fs::path& dir, const Config& cfg, const AttackBatch& batch) {
  std::vector<Video> clean, attacked;
  for (const auto& r : batch.results) {
    clean.push_back(r.clean_video);
    attacked.push_back(r.attacked_video);
  }
  write_file(dir / "clean.jsonl", dataset_to_jsonl(clean));
  write_file(dir / "attacked.jsonl", dataset_to_jsonl(attacked));
  write_file(dir / "telemetry.csv", batch_telemetry_csv(batch));
  write_file(dir / "delta.csv", batch_delta_csv(batch));
  write_file(dir / "judge_rules.json", JudgeRules{}.to_json() + "\n");
  write_file(dir / "metrics.csv",
             metrics_csv_header() +
                 metrics_csv_row(config_hash(cfg), {{"fid", batch.metrics.fid},
                                                    {"fvd", batch.metrics.fvd},
                                                    {"asr", batch.metrics.asr_value},
                                                    {"sem_mean", batch.metrics.sem_mean},
                                                    {"log_mean", batch.metrics.log_mean},
                                                    {"dec_mean", batch.metrics.dec_mean}}));
  write_file(dir / "config.json", cfg.to_json() + "\n");
}

}  // namespace

std::string cmd_attack(const Config& cfg) {
  const fs::path dir = make_run_dir(cfg, "");
  const AttackBatch batch = run_attack_batch(cfg);
  write_attack_artifacts(dir, cfg, batch);
  std::vector<std::uint64_t> seeds;
  const std::uint64_t seed0 = std::uint64_t(cfg.get_int("attack.seed"));
  for (int i = 0; i < cfg.get_int("attack.runs"); ++i) seeds.push_back(seed0 + i);
  write_file(dir / "manifest.json",
             manifest_json(cfg, "attack", seeds,
                           {"clean.jsonl", "attacked.jsonl", "telemetry.csv", "delta.csv",
                            "metrics.csv", "judge_rules.json", "config.json"}));
  return dir.string();
}

std::string cmd_ablate(const std::string& kind, const Config& cfg) {
  std::vector<std::pair<std::string, std::string>> cells;  // key, value
  if (kind == "tau") {
    for (const char* v : {"0.1", "0.125", "0.15", "0.175", "0.2"}) cells.push_back({"attack.tau", v});
  } else if (kind == "stage") {
    for (const char* v : {"stage1", "stage2", "full"}) cells.push_back({"attack.stage", v});
  } else if (kind == "channel") {
    for (const char* v : {"map", "box", "both"}) cells.push_back({"attack.channel", v});
  } else {
    throw std::invalid_argument("bad ablation kind: " + kind);
  }

  const fs::path dir = make_run_dir(cfg, "-ablate-" + kind);
  std::string report = metrics_csv_header();
  for (const auto& [key, value] : cells) {
    Config cell = cfg;
    cell.set(key, value);
    const AttackBatch batch = run_attack_batch(cell);
    report += metrics_csv_row(config_hash(cell), {{"fid", batch.metrics.fid},
                                                  {"fvd", batch.metrics.fvd},
                                                  {"asr", batch.metrics.asr_value},
                                                  {"sem_mean", batch.metrics.sem_mean},
                                                  {"log_mean", batch.metrics.log_mean},
                                                  {"dec_mean", batch.metrics.dec_mean}});
  }
  write_file(dir / "report.csv", report);
  write_file(dir / "config.json", cfg.to_json() + "\n");
  write_file(dir / "manifest.json",
             manifest_json(cfg, "ablate-" + kind, {std::uint64_t(cfg.get_int("attack.seed"))},
                           {"report.csv", "config.json"}));
  return dir.string();
}

std::string cmd_downstream(const Config& cfg) {
  const fs::path dir = make_run_dir(cfg, "-downstream");
  const int frames = cfg.get_int("data.frames");
  const auto train_videos = rollout_dataset(cfg.get_int("data.videos"), frames,
                                            std::uint64_t(cfg.get_int("data.seed")));
  const auto test_videos = rollout_dataset(cfg.get_int("downstream.test_videos"), frames,
                                           std::uint64_t(cfg.get_int("data.seed")) + 9999);

  const AttackBatch batch = run_attack_batch(cfg);
  std::vector<Video> clean_gen, attacked;
  for (const auto& r : batch.results) {
    clean_gen.push_back(r.clean_video);
    attacked.push_back(r.attacked_video);
  }

  const auto train_set = self_labeled(train_videos);
  const auto test_set = self_labeled(test_videos);
  const auto augment_clean = self_labeled(clean_gen);
  // attacked frames keep the clean branch's annotations, which is where the
  // image/label mismatch comes from
  const auto augment_attacked = cross_labeled(attacked, clean_gen);

  std::ostringstream csv;
  csv << "config_hash,variant,seed,map_analog,nds_analog,l2_avg,col_rate\n";
  const std::string hash = config_hash(cfg);
  const int n_seeds = cfg.get_int("downstream.seeds");
  const std::uint64_t seed0 = std::uint64_t(cfg.get_int("downstream.seed"));
  const std::vector<LabeledFrame> empty;
  for (int i = 0; i < n_seeds; ++i) {
    const std::uint64_t seed = seed0 + std::uint64_t(i);
    struct Variant {
      const char* name;
      const std::vector<LabeledFrame>* augment;
    } variants[] = {{"no_augment", &empty},
                    {"clean_augment", &augment_clean},
                    {"attacked_augment", &augment_attacked}};
    for (const auto& v : variants) {
      const DetectorScores ds = detector_eval(train_set, *v.augment, test_set, seed);
      csv << hash << ',' << v.name << ',' << seed << ',' << format_double(ds.map_analog) << ','
          << format_double(ds.nds_analog) << ",,\n";
    }
  }

  const int horizon = cfg.get_int("downstream.horizon");
  const PlannerParams planner = train_planner(train_videos, horizon);
  const PlanEval on_clean = open_loop_plan_eval(clean_gen, planner, horizon);
  const PlanEval on_attacked = open_loop_plan_eval(attacked, planner, horizon);
  csv << hash << ",planner_clean,,,," << format_double(on_clean.l2_avg) << ','
      << format_double(on_clean.collision_rate) << '\n';
  csv << hash << ",planner_attacked,,,," << format_double(on_attacked.l2_avg) << ','
      << format_double(on_attacked.collision_rate) << '\n';

  write_file(dir / "downstream.csv", csv.str());
  write_file(dir / "planner.json", planner.to_json() + "\n");
  write_file(dir / "metrics.csv",
             metrics_csv_header() +
                 metrics_csv_row(hash, {{"fid", batch.metrics.fid},
                                        {"fvd", batch.metrics.fvd},
                                        {"asr", batch.metrics.asr_value},
                                        {"sem_mean", batch.metrics.sem_mean},
                                        {"log_mean", batch.metrics.log_mean},
                                        {"dec_mean", batch.metrics.dec_mean},
                                        {"l2_avg", on_attacked.l2_avg},
                                        {"col_rate", on_attacked.collision_rate}}));
  write_file(dir / "config.json", cfg.to_json() + "\n");
  write_file(dir / "manifest.json",
             manifest_json(cfg, "downstream", {seed0},
                           {"downstream.csv", "planner.json", "metrics.csv", "config.json"}));
  return dir.string();
}

std::string cmd_report(const std::vector<std::string>& csv_paths, const std::string& out_path) {
  struct Row {
    std::string hash;
    std::vector<std::string> cells;
  };
  std::vector<Row> rows;
  for (const auto& path : csv_paths) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read " + path);
    std::string line;
    bool first = true;
    while (std::getline(in, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line.empty()) continue;
      if (first) {
        first = false;
        if (line != trim(metrics_csv_header())) {
          throw std::runtime_error("malformed metrics CSV header in " + path);
        }
        continue;
      }
      Row row;
      std::istringstream ls(line);
      std::string cell;
      while (std::getline(ls, cell, ',')) row.cells.push_back(cell);
      // a trailing empty cell is dropped by getline; pad to 9 columns
      while (row.cells.size() < 9) row.cells.push_back("");
      if (row.cells.size() != 9) throw std::runtime_error("malformed metrics row in " + path);
      row.hash = row.cells[0];
      rows.push_back(std::move(row));
    }
  }
  std::sort(rows.begin(), rows.end(), [](const Row& a, const Row& b) { return a.hash < b.hash; });

  static const char* names[] = {"fid",      "fvd",      "asr",    "sem_mean",
                                "log_mean", "dec_mean", "l2_avg", "col_rate"};
  std::ostringstream out;
  out << "| config_hash | fid | fvd | asr | sem_mean | log_mean | dec_mean | l2_avg | col_rate |\n";
  out << "|---|---|---|---|---|---|---|---|---|\n";
  double sums[8] = {};
  int counts[8] = {};
  for (const auto& row : rows) {
    out << "| " << row.hash;
    for (int c = 0; c < 8; ++c) {
      out << " | " << row.cells[c + 1];
      if (!row.cells[c + 1].empty()) {
        sums[c] += std::stod(row.cells[c + 1]);
        ++counts[c];
      }
    }
    out << " |\n";
  }
  out << "| mean";
  for (int c = 0; c < 8; ++c) {
    out << " | ";
    if (counts[c] > 0) out << format_double(sums[c] / counts[c]);
  }
  out << " |\n";
  (void)names;
  write_file(out_path, out.str());
  return out_path;
}

}  // namespace wmlab
