#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "wmlab/attack.hpp"
#include "wmlab/denoiser.hpp"
#include "wmlab/downstream.hpp"
#include "wmlab/judge.hpp"

namespace wmlab {

// Flat key-value configuration; keys are "section.key". Resolution order is
// defaults, then file, then command-line overrides.
struct Config {
  std::map<std::string, std::string> values;

  bool has(const std::string& key) const;
  std::string get(const std::string& key) const;  // throws on unknown key
  int get_int(const std::string& key) const;
  double get_double(const std::string& key) const;
  void set(const std::string& key, const std::string& value);

  std::string canonical() const;  // sorted key=value lines
  std::string to_json() const;
};

Config default_config();
// INI-style sections: [section] then key = value lines; # and ; comments.
void merge_config_text(Config& cfg, const std::string& text);
void merge_config_file(Config& cfg, const std::string& path);
void apply_override(Config& cfg, const std::string& spec);  // "section.key=value"
Config resolve_config(const std::string& file_path, const std::vector<std::string>& overrides);

std::uint64_t fnv1a64(const std::string& text);
std::string config_hash(const Config& cfg);  // 16 hex digits over canonical form

// Everything needed to run attacks under a resolved config. The world model
// points at the mixture (or trained params) owned here, so fetch it through
// world() rather than copying the struct.
struct AttackSetup {
  NoiseSchedule schedule;
  ConditionalMixture mixture;
  std::optional<DenoiserParams> trained;
  FrozenEmbedding embedding;
  AttackConfig attack;
  JudgeRules rules;
  int frames = 8;

  WorldModel world() const;
};

AttackSetup make_setup(const Config& cfg);

// A feasible per-seed semantic edit used as the attack target.
SceneEdit pick_target_edit(const Scene& scene, Rng& rng);
// A few stacked edits; a larger semantic footprint than a single edit.
std::vector<SceneEdit> pick_target_edits(const Scene& scene, Rng& rng, int count);

struct BatchMetrics {
  double fid = 0.0;
  double fvd = 0.0;
  double asr_value = 0.0;
  double sem_mean = 0.0;
  double log_mean = 0.0;
  double dec_mean = 0.0;
};

struct AttackBatch {
  std::vector<AttackResult> results;
  BatchMetrics metrics;
};

AttackBatch run_attack_batch(const Config& cfg);

std::string metrics_csv_header();
// Columns: config_hash,fid,fvd,asr,sem_mean,log_mean,dec_mean,l2_avg,col_rate.
// Missing entries render as empty cells.
std::string metrics_csv_row(const std::string& hash, const std::map<std::string, double>& cells);
std::string format_double(double v);

// Commands. Each writes its artifacts under <run.out>/<config_hash>/ and
// returns the run directory; errors are reported by throwing.
std::string cmd_gen_data(const Config& cfg);
std::string cmd_train(const Config& cfg);
std::string cmd_attack(const Config& cfg);
std::string cmd_ablate(const std::string& kind, const Config& cfg);
std::string cmd_downstream(const Config& cfg);
// Aggregates metric CSVs into a plain-text summary; returns the output path.
std::string cmd_report(const std::vector<std::string>& csv_paths, const std::string& out_path);

}  // namespace wmlab
