#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "excessmtl/cli.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Multi-task training with excess-risk task weighting"};
  app.require_subcommand(1);

  std::string run_config;
  auto* run = app.add_subcommand("run", "Train one experiment from a config file");
  run->add_option("config", run_config, "Experiment config (JSON)")->required();

  std::string sweep_config;
  std::vector<double> levels;
  std::vector<std::string> strategies;
  auto* sweep = app.add_subcommand("sweep", "Run every noise level x strategy combination");
  sweep->add_option("config", sweep_config, "Base experiment config (JSON)")->required();
  sweep->add_option("--noise-levels", levels, "Comma-separated noise levels")
      ->delimiter(',')
      ->required();
  sweep->add_option("--strategies", strategies,
                    "Comma-separated strategies (excess_mtl, uniform, groupdro, mgda)")
      ->delimiter(',')
      ->required();

  std::vector<std::string> dirs;
  std::string compare_csv = "compare.csv";
  auto* compare = app.add_subcommand("compare", "Tabulate finished runs and flag Pareto dominance");
  compare->add_option("dirs", dirs, "Run directories holding summary.json")->required();
  compare->add_option("--out", compare_csv, "Where to write the comparison CSV");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  }

  if (*run) return excessmtl::cmd_run(run_config, std::cout, std::cerr);
  if (*sweep) return excessmtl::cmd_sweep(sweep_config, levels, strategies, std::cout, std::cerr);
  std::vector<std::filesystem::path> paths(dirs.begin(), dirs.end());
  return excessmtl::cmd_compare(paths, compare_csv, std::cout, std::cerr);
}
