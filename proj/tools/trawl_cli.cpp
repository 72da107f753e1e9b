// trawl: staged pipeline for knowledge-enhanced CTR experiments.
//
// Stages: ingest -> link -> generate -> encode -> mine -> train -> evaluate
// -> sweep, all driven by one config file with cached intermediate artifacts.

#include <cstdint>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "trawl/config.hpp"
#include "trawl/pipeline.hpp"

namespace {

struct CommonArgs {
  std::string config_path = "trawl.ini";
  bool force = false;
  std::optional<std::uint64_t> seed;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
  cmd->add_option("-c,--config", args.config_path, "pipeline configuration file")
      ->capture_default_str();
  cmd->add_flag("--force", args.force, "recompute even when cached artifacts are fresh");
  cmd->add_option("--seed", args.seed, "override the configured seeds for this run");
}

int run_stages(const CommonArgs& args, const std::vector<std::string>& stages, bool all) {
  auto cfg = trawl::config::validate_config(args.config_path);
  trawl::pipeline::Runner runner(cfg, args.force, args.seed, &std::cerr);
  auto print = [](const trawl::pipeline::StageOutcome& o) {
    if (o.skipped)
      std::cout << o.stage << ": up to date (skipped)\n";
    else {
      std::cout << o.stage << ": ok";
      if (!o.outputs.empty()) {
        std::cout << " ->";
        for (const auto& f : o.outputs) std::cout << ' ' << f;
      }
      std::cout << "\n";
    }
  };
  if (all) {
    for (const auto& outcome : runner.run_all()) print(outcome);
  } else {
    for (const auto& stage : stages) print(runner.run_stage(stage));
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"knowledge-enhanced CTR recommendation pipeline"};
  app.require_subcommand(1);

  std::map<std::string, CommonArgs> args;
  const std::vector<std::pair<std::string, std::string>> stages{
      {"synth", "generate the bundled synthetic dataset into the dataset directory"},
      {"ingest", "parse interactions, binarize labels, split users"},
      {"link", "link items to knowledge docs by title edit distance"},
      {"generate", "produce recommendation knowledge texts via the configured provider"},
      {"encode", "encode knowledge texts into embedding tables"},
      {"mine", "mine swing-similarity positive pairs from the training split"},
      {"train", "train the default arm and write a checkpoint"},
      {"evaluate", "train and evaluate every configured arm across seeds"},
      {"sweep", "hyperparameter sensitivity sweep on the validation split"},
      {"run-all", "run every stage in order"},
  };
  for (const auto& [name, help] : stages) add_common(app.add_subcommand(name, help), args[name]);

  auto* defaults =
      app.add_subcommand("print-defaults", "print the fully normalized default configuration");
  std::string defaults_config;
  defaults->add_option("-c,--config", defaults_config,
                       "render this config with defaults filled in");

  CLI11_PARSE(app, argc, argv);

  try {
    if (defaults->parsed()) {
      auto cfg = defaults_config.empty() ? trawl::config::validate_config_text("")
                                         : trawl::config::validate_config(defaults_config);
      std::cout << trawl::config::render(cfg);
      std::cout << "# config digest: " << trawl::config::digest(cfg) << "\n";
      return 0;
    }
    for (const auto& [name, help] : stages) {
      auto* sub = app.get_subcommand(name);
      if (sub->parsed())
        return run_stages(args[name], {name}, name == "run-all");
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
