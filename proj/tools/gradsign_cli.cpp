#include <cstdint>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "gradsign/harness.hpp"

namespace harness = gradsign::harness;

int main(int argc, char** argv) {
  CLI::App app{"fast-gradient-sign attack toolkit"};
  app.require_subcommand(1);

  std::string config_path;
  uint64_t seed_value = 0;
  int workers_value = 1;
  std::string out_dir;
  app.add_option("--config", config_path, "run configuration file")
      ->check(CLI::ExistingFile);
  CLI::Option* seed_opt =
      app.add_option("--seed", seed_value, "master seed (overrides run.seed)");
  CLI::Option* workers_opt =
      app.add_option("--workers", workers_value, "worker thread count")
          ->check(CLI::PositiveNumber);
  CLI::Option* out_opt =
      app.add_option("--out", out_dir, "output directory (overrides paths.output)");

  struct Command {
    const char* name;
    const char* help;
    int (*run)(const harness::RunConfig&);
  };
  const Command commands[] = {
      {"generate", "render the procedural face dataset", harness::cmd_generate},
      {"train-victim", "train the victim (or oracle) classifier",
       harness::cmd_train_victim},
      {"train-substitute", "distill a substitute from oracle queries",
       harness::cmd_train_substitute},
      {"attack", "run the perturbation campaign on the attack sources",
       harness::cmd_attack},
      {"evaluate", "re-score saved adversarial images against the originals",
       harness::cmd_evaluate},
      {"sweep", "run every configured attack cell and tabulate the results",
       harness::cmd_sweep},
      {"report", "verify a saved report and print its aggregates",
       harness::cmd_report},
  };
  for (const Command& c : commands) app.add_subcommand(c.name, c.help)->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? harness::kExitOk : harness::kExitOperational;
  }

  try {
    harness::RunConfig config = config_path.empty()
                                    ? harness::RunConfig{}
                                    : harness::RunConfig::from_file(config_path);
    if (seed_opt->count()) config.seed = seed_value;
    if (workers_opt->count()) config.workers = workers_value;
    if (out_opt->count()) config.output_dir = out_dir;
    for (const Command& c : commands)
      if (app.got_subcommand(c.name)) return c.run(config);
    std::cerr << "error: no subcommand selected\n";
    return harness::kExitOperational;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return harness::kExitOperational;
  }
}
