// Command-line driver for the world-model attack lab.

#include <cstdio>
#include <exception>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "wmlab/experiment.hpp"

namespace {

struct CommonOpts {
  std::string config_file;
  std::vector<std::string> overrides;
  std::string out_dir;
};

void add_common(CLI::App* cmd, CommonOpts* opts) {
  cmd->add_option("-c,--config", opts->config_file, "config file (INI sections)")
      ->check(CLI::ExistingFile);
  cmd->add_option("-s,--set", opts->overrides, "override, e.g. attack.tau=0.2");
  cmd->add_option("-o,--out", opts->out_dir, "output root (default from run.out)");
}

wmlab::Config resolve(const CommonOpts& opts) {
  wmlab::Config cfg = wmlab::resolve_config(opts.config_file, opts.overrides);
  if (!opts.out_dir.empty()) cfg.set("run.out", opts.out_dir);
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"conditional diffusion world-model attack lab"};
  app.require_subcommand(1);

  CommonOpts gen_opts, train_opts, attack_opts, ablate_opts, down_opts;
  std::string ablate_kind = "tau";
  std::vector<std::string> report_inputs;
  std::string report_out = "report.md";

  auto* gen = app.add_subcommand("gen-data", "generate ground-truth rollouts");
  add_common(gen, &gen_opts);

  auto* train = app.add_subcommand("train", "train the perceptron noise predictor");
  add_common(train, &train_opts);

  auto* attack = app.add_subcommand("attack", "run a batch of attacks and score them");
  add_common(attack, &attack_opts);

  auto* ablate = app.add_subcommand("ablate", "run an ablation grid");
  add_common(ablate, &ablate_opts);
  ablate->add_option("-k,--kind", ablate_kind, "grid: tau, stage or channel")
      ->check(CLI::IsMember({"tau", "stage", "channel"}));

  auto* down = app.add_subcommand("downstream", "detector and planner evaluations");
  add_common(down, &down_opts);

  auto* report = app.add_subcommand("report", "aggregate metric CSVs into a summary");
  report->add_option("inputs", report_inputs, "metrics.csv files")->required();
  report->add_option("-o,--out", report_out, "summary output path");

  CLI11_PARSE(app, argc, argv);

  try {
    std::string dir;
    if (gen->parsed()) dir = wmlab::cmd_gen_data(resolve(gen_opts));
    else if (train->parsed()) dir = wmlab::cmd_train(resolve(train_opts));
    else if (attack->parsed()) dir = wmlab::cmd_attack(resolve(attack_opts));
    else if (ablate->parsed()) dir = wmlab::cmd_ablate(ablate_kind, resolve(ablate_opts));
    else if (down->parsed()) dir = wmlab::cmd_downstream(resolve(down_opts));
    else if (report->parsed()) dir = wmlab::cmd_report(report_inputs, report_out);
    std::printf("%s\n", dir.c_str());
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
