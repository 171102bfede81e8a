// Acceptance runner: one PASS/FAIL line per criterion, nonzero exit if any
// criterion fails. Usage: acceptance [work_dir]. Without a work directory the
// desk-scale artifacts go to a scratch directory that is removed at exit.

#include "adapruner/checkpoint.hpp"
#include "adapruner/commands.hpp"
#include "adapruner/common.hpp"
#include "adapruner/groups.hpp"
#include "adapruner/importance.hpp"
#include "adapruner/lora.hpp"
#include "adapruner/pruner.hpp"
#include "adapruner/run_config.hpp"
#include "adapruner/search.hpp"
#include "adapruner/tpe.hpp"

#include "finite_difference.hpp"
#include "reference_model.hpp"
#include "support.hpp"

#include <chrono>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>

using namespace adapruner;
using namespace testsupport;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double minutes_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count() / 60.0;
}

int failures = 0;

void verdict(const std::string& name, bool pass, const std::string& detail) {
  if (!pass) ++failures;
  std::cout << (pass ? "PASS " : "FAIL ") << name << ": " << detail << std::endl;
}

std::string fmt(double v, int precision = 4) {
  std::ostringstream out;
  out << std::setprecision(precision) << v;
  return out.str();
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Zeroes a head or channel by its position in the layer, independently of
// the slice bookkeeping in the library.
TransformerLM masked(const TransformerLM& model, const std::vector<StructureGroup>& groups,
                     const std::vector<int>& ids) {
  TransformerLM out = model;
  const int head_dim = model.config.d_model / model.config.n_heads;
  for (int id : ids) {
    const StructureGroup& g = groups.at(static_cast<std::size_t>(id));
    auto& layer = out.params.layers[static_cast<std::size_t>(g.layer)];
    if (g.kind == GroupKind::attention_head) {
      const int c0 = g.unit * head_dim;
      for (Matrix* w : {&layer.w_q, &layer.w_k, &layer.w_v}) w->middleCols(c0, head_dim).setZero();
      layer.w_o.middleRows(c0, head_dim).setZero();
    } else {
      layer.w_up.col(g.unit).setZero();
      layer.w_down.row(g.unit).setZero();
    }
  }
  return out;
}

double reference_batch_loss(const TransformerLM& model, const std::vector<Sequence>& batch) {
  double total = 0.0;
  for (const auto& s : batch) total += reference_loss(model, s);
  return total / static_cast<double>(batch.size());
}

PruningPlan plan_for(const TransformerLM& model, std::size_t group_count, std::vector<int> ids) {
  PruningPlan plan;
  plan.removed_group_ids = std::move(ids);
  plan.group_count = group_count;
  plan.model_fingerprint = model_fingerprint(model);
  return plan;
}

void gradient_oracle() {
  const auto start = Clock::now();
  TransformerLM model = init_model(tiny_config(0));
  Rng rng(0);
  const auto batch = uniform_batch(rng, 32, 4, 16);
  const GradientCheck check = check_model_gradients(model, batch, 1e-4, 1e-4, 1e-6);
  const double minutes = minutes_since(start);
  verdict("gradient-oracle", check.passed == check.checked && minutes < 2.0,
          std::to_string(check.passed) + "/" + std::to_string(check.checked) + " parameters within 1e-4, worst " +
              fmt(check.worst) + " (" + check.worst_name + "), " + fmt(minutes * 60.0, 3) + " s");
}

void importance_fidelity() {
  const auto start = Clock::now();
  std::vector<double> rhos;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const TransformerLM model = trained_tiny_model(seed);
    Rng rng(mix_seed(seed, 0xca1b));
    const auto calib = synthetic_batch(rng, 32, 8, 16);
    const auto groups = build_groups(model);
    const auto grads = gradients(model, calib, true);
    const auto report = combined_importance(model, grads, groups, MetricConfig{});
    const double base = reference_batch_loss(model, calib);
    std::vector<double> oracle;
    for (const auto& g : groups) oracle.push_back(std::abs(base - reference_batch_loss(masked(model, groups, {g.id}), calib)));
    rhos.push_back(spearman(report.per_group, oracle));
  }
  const double minutes = minutes_since(start);
  std::string per_seed;
  for (double r : rhos) per_seed += (per_seed.empty() ? "" : " ") + fmt(r, 3);
  verdict("importance-fidelity", median(rhos) >= 0.8 && minutes < 5.0,
          "median Spearman " + fmt(median(rhos), 3) + " (seeds: " + per_seed + "), " + fmt(minutes * 60.0, 3) + " s");
}

void prune_mask_equivalence() {
  const TransformerLM model = trained_tiny_model(7, 100);
  const auto groups = build_groups(model);
  Rng rng(7);
  const auto inputs = uniform_batch(rng, 32, 16, 16);
  double worst = 0.0;
  int subsets = 0;
  for (int s = 0; s < 20; ++s) {
    std::vector<int> ids;
    const double keep = rng.uniform();
    for (const auto& g : groups) {
      if (rng.uniform() > keep) ids.push_back(g.id);
    }
    const TransformerLM pruned = apply_plan(model, plan_for(model, groups.size(), ids));
    const TransformerLM zeroed = masked(model, groups, ids);
    for (const auto& x : inputs) {
      worst = std::max(worst, max_relative_difference(forward_logits(pruned, x), to_matrix(reference_logits(zeroed, x))));
    }
    ++subsets;
  }
  verdict("prune-mask-equivalence", worst < 1e-9,
          std::to_string(subsets) + " subsets x 16 inputs, worst relative difference " + fmt(worst, 3));
}

void ratio_accounting() {
  RunConfig defaults;
  ModelConfig mc = defaults.model;
  mc.vocab_size = 2048;
  mc.prune_begin = 0;
  mc.prune_end = mc.n_layers;
  std::vector<std::pair<std::string, TransformerLM>> models;
  models.emplace_back("tiny", trained_tiny_model(3));
  models.emplace_back("desk", init_model(mc));
  bool pass = true;
  std::string detail;
  for (const auto& [name, model] : models) {
    const auto groups = build_groups(model);
    Rng rng(3);
    const auto calib = uniform_batch(rng, model.config.vocab_size, 4, model.config.max_seq_len);
    const auto report = combined_importance(model, gradients(model, calib, true), groups, MetricConfig{});
    const double total = static_cast<double>(count_params(model));
    std::int64_t largest = 0;
    for (const auto& g : groups) largest = std::max(largest, g.size);
    std::vector<int> previous;
    for (double lambda : {0.1, 0.2, 0.5}) {
      const PruningPlan plan = make_plan(report, model, lambda);
      const TransformerLM pruned = apply_plan(model, plan);
      const double achieved = 1.0 - static_cast<double>(count_params(pruned)) / total;
      const bool within = achieved <= lambda && lambda - achieved <= static_cast<double>(largest) / total;
      const bool nested = plan.removed_group_ids.size() >= previous.size() &&
                          std::equal(previous.begin(), previous.end(), plan.removed_group_ids.begin());
      pass = pass && within && nested && !plan.exhausted;
      detail += name + " " + fmt(lambda, 2) + "->" + fmt(achieved, 4) + (nested ? "" : " not-nested") + "; ";
      previous = plan.removed_group_ids;
    }
  }
  verdict("ratio-accounting", pass, detail + "tolerance one largest group");
}

void tpe_vs_random() {
  const auto start = Clock::now();
  const tpe::Space space{{tpe::Continuous{"a", 0.0, 1.0}, tpe::Categorical{"c", 4}}};
  const tpe::Objective f = [](const tpe::Point& p, std::size_t) {
    const double a = std::get<double>(p[0]);
    return (a - 0.3) * (a - 0.3) + (std::get<int>(p[1]) == 1 ? 0.0 : 0.05);
  };
  std::vector<double> tpe_best, random_best;
  int wins = 0, losses = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    tpe::RunOptions opts;
    opts.seed = seed;
    opts.budget = 40;
    const double t = tpe::best_so_far(tpe::optimize(space, f, opts)).back();
    opts.strategy = tpe::Strategy::random;
    const double r = tpe::best_so_far(tpe::optimize(space, f, opts)).back();
    tpe_best.push_back(t);
    random_best.push_back(r);
    if (t < r) ++wins;
    else if (r < t) ++losses;
  }
  const double p = sign_test_p(wins, losses);
  const double minutes = minutes_since(start);
  verdict("tpe-beats-random", median(tpe_best) < median(random_best) && p < 0.05 && minutes < 1.0,
          "median best TPE " + fmt(median(tpe_best), 3) + " vs random " + fmt(median(random_best), 3) + ", wins " +
              std::to_string(wins) + "/" + std::to_string(wins + losses) + ", sign test p=" + fmt(p, 3) + ", " +
              fmt(minutes * 60.0, 3) + " s");
}

RunConfig desk_config(const fs::path& dir, std::uint64_t seed) {
  RunConfig c;
  c.data.corpus = fs::path(ADAPRUNER_SOURCE_DIR) / "data" / "sotu_1790_1829.txt";
  c.out_dir = dir;
  c.seed = seed;
  return c;
}

void copy_base(const fs::path& from, const fs::path& to) {
  fs::create_directories(to);
  fs::copy_file(from / "model.ckpt", to / "model.ckpt", fs::copy_options::overwrite_existing);
  fs::copy_file(from / "vocab.txt", to / "vocab.txt", fs::copy_options::overwrite_existing);
}

void desk_scale(const fs::path& work) {
  std::ofstream log(work / "acceptance.log");
  const auto start = Clock::now();
  const RunConfig base_config = desk_config(work / "base", 0);
  const fs::path base_dir = base_config.out_dir;
  if (!fs::exists(base_dir / "model.ckpt")) commands::train(base_config, log);
  const double train_minutes = minutes_since(start);
  const TransformerLM base = load_model(base_dir / "model.ckpt");
  std::cout << "desk model: " << count_params(base) << " parameters, trained in " << fmt(train_minutes, 3)
            << " min" << std::endl;

  // End-to-end: searched trial against random (D, I) trials, per seed.
  int seeds_won = 0;
  std::string detail;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    RunConfig searched = desk_config(work / ("tpe" + std::to_string(seed)), seed);
    copy_base(base_dir, searched.out_dir);
    const double best = commands::search(searched, log).history.best().objective;

    RunConfig rnd = desk_config(work / ("random" + std::to_string(seed)), seed);
    rnd.search.strategy = tpe::Strategy::random;
    rnd.search.budget = 20;
    copy_base(base_dir, rnd.out_dir);
    std::vector<double> objectives;
    for (const auto& t : commands::search(rnd, log).history.trials) objectives.push_back(t.objective);
    const double med = median(objectives);
    if (best <= med) ++seeds_won;
    detail += fmt(best, 5) + (best <= med ? "<=" : ">") + fmt(med, 5) + "; ";
  }
  const double e2e_minutes = minutes_since(start);
  verdict("end-to-end", seeds_won >= 4 && e2e_minutes < 60.0,
          std::to_string(seeds_won) + "/5 seeds searched <= random median (" + detail + "), " + fmt(e2e_minutes, 3) +
              " min including training");

  // Recovery on the searched trials of the first three seeds.
  const auto recover_start = Clock::now();
  int reduced = 0;
  double merge_worst = 0.0;
  std::string rdetail;
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    const RunConfig c = desk_config(work / ("tpe" + std::to_string(seed)), seed);
    const auto pruned = commands::prune(c, log);
    const auto rec = commands::recover(c, log);
    if (rec.ppl_after < rec.ppl_before) ++reduced;
    rdetail += fmt(rec.ppl_before, 5) + "->" + fmt(rec.ppl_after, 5) + "; ";

    LoraModel adapted = LoraModel::attach(pruned.pruned, c.recovery.rank,
                                          {.attention = c.recovery.attention, .mlp = c.recovery.mlp}, 0);
    load_adapter(adapted, c.out_dir / "adapter.lora");
    const TransformerLM merged = load_model(c.out_dir / "recovered.ckpt");
    Rng rng(seed);
    for (const auto& x : uniform_batch(rng, base.config.vocab_size, 16, base.config.max_seq_len)) {
      merge_worst = std::max(merge_worst, max_relative_difference(forward_logits(merged, x), adapted.logits(x)));
    }
  }
  verdict("recovery", reduced >= 2 && merge_worst < 1e-9,
          "eval PPL reduced in " + std::to_string(reduced) + "/3 seeds (" + rdetail + "), merge difference " +
              fmt(merge_worst, 3) + ", " + fmt(minutes_since(recover_start), 3) + " min");

  // Replay: the same search again into a fresh directory.
  RunConfig replay = desk_config(work / "replay", 0);
  copy_base(base_dir, replay.out_dir);
  fs::remove(replay.out_dir / "history.txt");
  commands::search(replay, log);
  const std::string first = slurp(work / "tpe0" / "history.txt");
  const bool same = !first.empty() && first == slurp(replay.out_dir / "history.txt");
  verdict("replay-determinism", same,
          std::string(same ? "identical" : "different") + " history (" + std::to_string(first.size()) + " bytes)");
}

}  // namespace

int main(int argc, char** argv) {
  std::optional<TempDir> scratch;
  fs::path work;
  if (argc > 1) {
    work = argv[1];
    fs::create_directories(work);
  } else {
    scratch.emplace("acceptance");
    work = scratch->path();
  }

  const std::vector<std::pair<const char*, std::function<void()>>> steps{
      {"gradient-oracle", gradient_oracle},
      {"importance-fidelity", importance_fidelity},
      {"prune-mask-equivalence", prune_mask_equivalence},
      {"ratio-accounting", ratio_accounting},
      {"tpe-beats-random", tpe_vs_random},
      {"desk-scale", [&] { desk_scale(work); }},
  };
  for (const auto& [name, step] : steps) {
    try {
      step();
    } catch (const std::exception& e) {
      verdict(name, false, std::string("threw: ") + e.what());
    }
  }
  std::cout << (failures == 0 ? "all criteria passed" : std::to_string(failures) + " criteria failed") << std::endl;
  return failures == 0 ? 0 : 1;
}
