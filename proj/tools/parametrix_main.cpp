#include <iostream>

#include "CLI11.hpp"
#include "parametrix/cli.hpp"

int main(int argc, char** argv) {
  CLI::App app{"parametrix: transition densities by parametrix series and their stability under perturbation"};
  app.require_subcommand(1);

  std::string config;
  parametrix::cli::RunOptions opts;
  std::uint64_t seed = 0;
  auto* run = app.add_subcommand("run", "run one experiment from a config file");
  run->add_option("--config", config, "experiment config")->required();
  run->add_option("--out", opts.out_dir, "output directory");
  auto* seed_opt = run->add_option("--seed", seed, "overrides the config seed");
  run->add_option("--threads", opts.threads, "worker threads")->check(CLI::PositiveNumber);

  app.add_subcommand("catalog", "list coefficient families, perturbations, payoffs and innovation laws");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  if (app.got_subcommand("catalog")) {
    std::cout << parametrix::cli::list_catalog();
    return 0;
  }
  if (seed_opt->count()) opts.seed = seed;
  return parametrix::cli::run(config, opts, std::cerr);
}
