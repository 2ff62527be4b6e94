#include <cstdio>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "shield/checkpoint.hpp"
#include "shield/errors.hpp"
#include "shield/eval.hpp"

namespace {

int run(int argc, char** argv) {
  CLI::App app{"Stochastic multi-expert patching for text classifiers"};
  app.require_subcommand(1);
  app.fallthrough();

  std::string config_path;
  uint64_t seed = 0;
  std::string out_dir;
  size_t workers = 0;
  std::string noise;
  std::string select;
  bool tau_grid = false;

  auto* config_opt =
      app.add_option("--config", config_path, "experiment config JSON file");
  auto* seed_opt =
      app.add_option("--seed", seed, "single seed override for the seeds list");
  auto* out_opt = app.add_option("--out", out_dir, "output directory");
  auto* workers_opt = app.add_option("--workers", workers, "attack worker threads");
  auto* noise_opt =
      app.add_option("--noise", noise, "inference noise mode")
          ->check(CLI::IsMember({"fresh", "input-seeded", "zero"}));

  CLI::App* c_gen = app.add_subcommand("gen-data", "write a synthetic corpus as CSV");
  CLI::App* c_train = app.add_subcommand("train-base", "train base classifiers");
  CLI::App* c_patch =
      app.add_subcommand("patch", "train defense patches on saved base models");
  c_patch->add_flag("--tau-grid", tau_grid,
                    "grid-search the gate temperature on validation data");
  CLI::App* c_attack =
      app.add_subcommand("attack", "run query-budgeted attacks against saved models");
  c_attack->add_option("--select", select, "seed aggregation: mean or best")
      ->check(CLI::IsMember({"mean", "best"}));
  CLI::App* c_curve =
      app.add_subcommand("budget-curve", "sweep attack budgets and tabulate accuracy");
  CLI::App* c_ablate =
      app.add_subcommand("ablate", "compare full defense against single-module variants");
  CLI::App* c_report =
      app.add_subcommand("report", "consolidate result tables already on disk");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  }

  try {
    shield::ExperimentConfig config;
    if (config_opt->count() > 0) config = shield::load_experiment(config_path);
    if (seed_opt->count() > 0) config.seeds = {seed};
    if (out_opt->count() > 0) config.out_dir = out_dir;
    if (workers_opt->count() > 0) config.workers = workers;
    if (noise_opt->count() > 0) config.shield.noise = shield::noise_from_name(noise);
    if (!select.empty()) config.select_best = select == "best";
    if (tau_grid) config.tau_grid = true;
    shield::validate_experiment(config);

    std::string report;
    if (c_gen->parsed()) report = shield::cmd_gen_data(config);
    else if (c_train->parsed()) report = shield::cmd_train_base(config);
    else if (c_patch->parsed()) report = shield::cmd_patch(config);
    else if (c_attack->parsed()) report = shield::cmd_attack(config);
    else if (c_curve->parsed()) report = shield::cmd_budget_curve(config);
    else if (c_ablate->parsed()) report = shield::cmd_ablate(config);
    else if (c_report->parsed()) report = shield::cmd_report(config);
    std::cout << report;
    return 0;
  } catch (const shield::NumericError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return 3;
  } catch (const shield::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const shield::ShapeError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const shield::IoError& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return 2;
  }
}

}  // namespace

int main(int argc, char** argv) { return run(argc, argv); }
