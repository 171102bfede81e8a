// adapruner: train a small causal LM, search calibration data and importance
// metric with TPE, prune, recover with LoRA, and evaluate.
#include "adapruner/commands.hpp"
#include "adapruner/common.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using namespace adapruner;

namespace {

struct Common {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out_dir;
  std::vector<std::string> overrides;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config_path, "run configuration file");
  cmd->add_option("--seed", c.seed, "master seed");
  cmd->add_option("--out", c.out_dir, "output directory");
  cmd->add_option("--set", c.overrides, "override a config key (key=value), repeatable");
}

RunConfig resolve(const Common& c) {
  RunConfig config = c.config_path.empty() ? RunConfig{} : load_run_config(c.config_path);
  for (const auto& kv : c.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
    config.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (c.seed) config.seed = *c.seed;
  if (!c.out_dir.empty()) config.out_dir = c.out_dir;
  return config;
}

std::optional<fs::path> optional_path(const std::string& s) {
  if (s.empty()) return std::nullopt;
  return fs::path(s);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"AdaPruner desk reproduction: search-driven structured pruning of a small LM"};
  app.require_subcommand(1);

  Common common;
  std::string checkpoint, trial, split = "eval", fix_metric;
  std::optional<std::string> strategy;
  std::optional<double> ratio;
  bool random_calib = false, sequential = false;
  std::vector<std::string> histories;

  auto* train = app.add_subcommand("train", "train the base model and build the vocabulary");
  add_common(train, common);

  auto* search = app.add_subcommand("search", "search calibration data and importance metric");
  add_common(search, common);
  search->add_option("--checkpoint", checkpoint, "model to prune (default <out>/model.ckpt)");
  search->add_option("--strategy", strategy, "tpe or random")->check(CLI::IsMember({"tpe", "random"}));
  search->add_option("--ratio", ratio, "target parameter reduction");
  search->add_option("--fix-metric", fix_metric, "fix the metric to element-wise Taylor")
      ->check(CLI::IsMember({"first", "second"}));
  search->add_flag("--random-calib", random_calib, "fix a random calibration set; search I only");
  search->add_flag("--sequential-opt", sequential, "search I, then D, instead of jointly");

  auto* prune = app.add_subcommand("prune", "prune with the best trial");
  add_common(prune, common);
  prune->add_option("--checkpoint", checkpoint, "model to prune (default <out>/model.ckpt)");
  prune->add_option("--trial", trial, "best-trial file (default <out>/best_trial.txt)");
  prune->add_option("--ratio", ratio, "target parameter reduction");

  auto* recover = app.add_subcommand("recover", "LoRA fine-tune the pruned model and merge");
  add_common(recover, common);
  recover->add_option("--checkpoint", checkpoint, "pruned model (default <out>/pruned.ckpt)");

  auto* eval = app.add_subcommand("eval", "perplexity of a checkpoint");
  add_common(eval, common);
  eval->add_option("--checkpoint", checkpoint, "model to evaluate")->required();
  eval->add_option("--split", split, "eval or train")->check(CLI::IsMember({"eval", "train"}));

  auto* report = app.add_subcommand("report", "best-so-far curves of search histories as CSV");
  report->add_option("--history", histories, "history file, repeatable")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }

  try {
    if (*report) {
      std::vector<fs::path> paths(histories.begin(), histories.end());
      commands::report(std::cout, paths);
      return 0;
    }
    RunConfig config = resolve(common);
    if (strategy) config.search.strategy = tpe::parse_strategy(*strategy);
    if (ratio) config.search.ratio = *ratio;
    if (!fix_metric.empty()) config.search.fix_metric = fix_metric;
    if (random_calib) config.search.random_calib = true;
    if (sequential) config.search.sequential = true;
    config.validate();

    if (*train) {
      commands::train(config, std::cout);
    } else if (*search) {
      commands::search(config, std::cout, optional_path(checkpoint));
    } else if (*prune) {
      commands::prune(config, std::cout, optional_path(checkpoint), optional_path(trial), ratio);
    } else if (*recover) {
      commands::recover(config, std::cout, optional_path(checkpoint));
    } else if (*eval) {
      commands::evaluate(config, std::cout, checkpoint, split);
    }
    return 0;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
