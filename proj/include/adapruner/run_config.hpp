#pragma once

#include "adapruner/importance.hpp"
#include "adapruner/model.hpp"
#include "adapruner/tpe.hpp"

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

namespace adapruner {

// Every pipeline knob. The file format is flat "section.key = value" lines;
// '#' starts a comment; unknown keys are rejected.
struct RunConfig {
  ModelConfig model{.vocab_size = 2048, .d_model = 128, .n_layers = 4, .n_heads = 4,
                    .d_ff = 512, .max_seq_len = 64, .prune_begin = 1, .prune_end = 3};

  struct Data {
    std::string corpus = "data/sotu_1790_1829.txt";
    int min_tokens = 64;
    int calib_len = 64;
    int eval_every = 10;
    int n_eval_sets = 2;
    int eval_tokens = 2048;  // per evaluation set, 0 = whole split
  } data;

  struct Train {
    int steps = 1500;
    int batch_size = 8;
    double lr = 3e-3;
  } train;

  struct Search {
    int k = 10;
    double ratio = 0.2;
    int budget = 50;
    tpe::Strategy strategy = tpe::Strategy::tpe;
    double gamma = 0.25;
    int n_startup = 10;
    int n_candidates = 24;
    double min_bandwidth = 0.05;
    tpe::Bandwidth bandwidth = tpe::Bandwidth::neighbor;
    int width = 1;
    std::vector<double> align1 = {std::exp(5.0), std::exp(6.0), std::exp(7.0)};
    std::vector<double> align2 = {std::exp(-2.0), std::exp(-3.0), 1e-4};
    std::vector<Aggregation> agg = {Aggregation::sum, Aggregation::prod, Aggregation::max,
                                    Aggregation::last};
    Composition composition = Composition::granularity;
    std::string fix_metric;  // "", "first" or "second"
    bool random_calib = false;
    bool sequential = false;
  } search;

  struct Recovery {
    int rank = 4;
    int epochs = 2;
    double lr = 1e-4;
    int batch_size = 8;
    bool attention = true;
    bool mlp = true;
  } recovery;

  std::filesystem::path out_dir = "runs/default";
  std::uint64_t seed = 0;

  // Stage seeds derive from the master seed by fixed offsets.
  std::uint64_t init_seed() const { return seed; }
  std::uint64_t train_seed() const { return seed + 1; }
  std::uint64_t search_seed() const { return seed + 2; }
  std::uint64_t recover_seed() const { return seed + 3; }
  std::uint64_t calib_seed() const { return seed + 4; }

  // Applies one "key = value" assignment; throws ConfigError on unknown keys
  // or unparsable values.
  void set(std::string_view key, std::string_view value);
  void validate() const;
};

RunConfig parse_run_config(std::istream& in, const std::string& source = "<config>");
RunConfig load_run_config(const std::filesystem::path& path);
// Every key with its current value, one per line, in parseable form.
void write_run_config(std::ostream& out, const RunConfig& config);

}  // namespace adapruner
