#include <cstdint>
#include <exception>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "pfsm/cli.hpp"
#include "pfsm/config.hpp"

namespace {

struct CommonOpts {
  std::string config_path;
  std::string preset;
  std::string out_dir;
  std::uint64_t seed = 0;
  bool seed_set = false;
  int rounds = 0;
  bool rounds_set = false;
};

void add_common(CLI::App* cmd, CommonOpts& o, bool with_preset) {
  cmd->add_option("--config", o.config_path, "experiment config file (TOML subset)");
  if (with_preset) {
    cmd->add_option("--preset", o.preset, "protocol preset: A, B, C, D, E or ours");
  }
  cmd->add_option("--out", o.out_dir, "output directory");
  cmd->add_option("--seed", o.seed, "root seed for model init and training streams")
      ->each([&o](const std::string&) { o.seed_set = true; });
  cmd->add_option("--rounds", o.rounds, "number of federated rounds")
      ->each([&o](const std::string&) { o.rounds_set = true; });
}

pfsm::ExperimentConfig resolve_config(const CommonOpts& o) {
  pfsm::ExperimentConfig cfg =
      o.config_path.empty() ? pfsm::default_config() : pfsm::parse_config_file(o.config_path);
  if (!o.preset.empty()) cfg.preset = pfsm::preset_from_name(o.preset);
  if (o.seed_set) {
    cfg.seed = o.seed;
    cfg.fed.seed = o.seed;
  }
  if (!o.out_dir.empty()) cfg.out_dir = o.out_dir;
  if (o.rounds_set) cfg.fed.rounds = o.rounds;
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"personalized federated segmentation sandbox"};
  app.require_subcommand(1);

  CommonOpts run_opts, ablate_opts, gendata_opts, eval_opts;
  std::string gendata_out = "data";
  std::string eval_checkpoint, eval_data_dir;

  CLI::App* run = app.add_subcommand("run", "run one federated experiment");
  add_common(run, run_opts, true);

  CLI::App* ablate = app.add_subcommand("ablate", "run every preset on the same data");
  add_common(ablate, ablate_opts, false);

  app.add_subcommand("gradcheck", "finite-difference audit of every tensor op");

  CLI::App* gendata = app.add_subcommand("gendata", "write the synthetic datasets to disk");
  add_common(gendata, gendata_opts, false);
  gendata->add_option("--data-out", gendata_out, "directory for the dataset folders");

  CLI::App* eval = app.add_subcommand("eval", "evaluate a checkpoint on a stored dataset");
  add_common(eval, eval_opts, false);
  eval->add_option("--checkpoint", eval_checkpoint, "model checkpoint (.pfsm)")->required();
  eval->add_option("--data", eval_data_dir, "dataset directory (spec.json + samples)")
      ->required();

  CLI11_PARSE(app, argc, argv);

  try {
    int threads = pfsm::threads_from_env();
    if (run->parsed()) {
      return pfsm::cmd_run(resolve_config(run_opts), threads, std::cout);
    }
    if (ablate->parsed()) {
      return pfsm::cmd_ablate(resolve_config(ablate_opts), threads, std::cout);
    }
    if (app.get_subcommand("gradcheck")->parsed()) {
      return pfsm::cmd_gradcheck(std::cout);
    }
    if (gendata->parsed()) {
      return pfsm::cmd_gendata(resolve_config(gendata_opts), gendata_out, std::cout);
    }
    if (eval->parsed()) {
      pfsm::ExperimentConfig cfg = eval_opts.config_path.empty()
                                       ? pfsm::default_config()
                                       : pfsm::parse_config_file(eval_opts.config_path);
      if (eval_opts.seed_set) cfg.seed = eval_opts.seed;
      return pfsm::cmd_eval(eval_checkpoint, eval_data_dir, cfg, std::cout);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return 1;
  }
  return 0;
}
