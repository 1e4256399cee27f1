#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "ugeforge/ugeforge.hpp"

namespace {

struct Common {
  std::string config;
  std::string preset;
  std::string resume;
  std::string out;
  std::vector<std::string> stages;
  std::vector<std::string> scenarios{"ablation"};
  bool quiet = false;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "run configuration (TOML)");
  cmd->add_option("--preset", c.preset, "defaults preset")->check(CLI::IsMember(ugeforge::preset_names()));
  cmd->add_option("--resume", c.resume, "existing run directory to continue");
  cmd->add_option("--out", c.out, "runs root (default $UGEFORGE_RUNS_DIR or ./run)");
  cmd->add_flag("--quiet", c.quiet, "no progress output");
}

int run(const Common& c, std::vector<std::string> stages, bool print_config_only = false) {
  if (c.config.empty() && c.preset.empty()) throw ugeforge::Error("need --config or --preset");
  const ugeforge::RunConfig cfg = c.config.empty() ? ugeforge::parse_config_text("", c.preset, "preset")
                                                   : ugeforge::parse_config(c.config, c.preset);
  if (print_config_only) {
    std::cout << cfg.materialized << "# hash " << cfg.hash << "\n";
    return 0;
  }
  std::filesystem::path dir;
  if (!c.resume.empty()) {
    dir = c.resume;
    if (!std::filesystem::is_directory(dir)) throw ugeforge::Error("--resume: " + dir.string() + " is not a directory");
  } else {
    dir = (c.out.empty() ? ugeforge::runs_root() : std::filesystem::path(c.out)) / cfg.run_name;
  }
  ugeforge::PipelineOptions opt;
  opt.stages = std::move(stages);
  opt.scenarios = c.scenarios;
  if (!c.quiet) opt.progress = [](const std::string& m) { std::cerr << "[ugeforge] " << m << "\n"; };
  const auto res = ugeforge::execute_pipeline(cfg, dir, opt);
  for (const auto& s : res.skipped) std::cout << "up to date: " << s << "\n";
  for (const auto& s : res.ran) std::cout << "done: " << s << " (" << res.seconds.at(s) << " s)\n";
  std::cout << "run directory: " << res.root.string() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ugeforge: generate and evaluate ungeneralizable examples"};
  app.require_subcommand(1);
  Common c;

  auto* traj = app.add_subcommand("train-trajectory", "train the authorized network(s) and record snapshots");
  auto* embed = app.add_subcommand("fit-embedding", "fit the embedding-space surrogate");
  auto* gen = app.add_subcommand("generate", "train the generator and export D_u");
  auto* eval = app.add_subcommand("evaluate", "train authorized and hacker networks and write reports");
  auto* all = app.add_subcommand("run-all", "run the pipeline stages in order");
  auto* show = app.add_subcommand("show-config", "print the resolved configuration and its hash");
  for (auto* cmd : {traj, embed, gen, eval, all, show}) add_common(cmd, c);
  eval->add_option("--scenario", c.scenarios, "ablation | rho-sweep | multi-auth | federated")
      ->check(CLI::IsMember(ugeforge::scenario_names()));
  all->add_option("--stages", c.stages, "subset of trajectory,embed,generate,evaluate")
      ->delimiter(',')
      ->check(CLI::IsMember(ugeforge::stage_names()));
  all->add_option("--scenario", c.scenarios, "evaluation scenarios")->check(CLI::IsMember(ugeforge::scenario_names()));

  CLI11_PARSE(app, argc, argv);
  try {
    if (traj->parsed()) return run(c, {"trajectory"});
    if (embed->parsed()) return run(c, {"embed"});
    if (gen->parsed()) return run(c, {"generate"});
    if (eval->parsed()) return run(c, {"evaluate"});
    if (show->parsed()) return run(c, {}, true);
    return run(c, c.stages.empty() ? ugeforge::stage_names() : c.stages);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
