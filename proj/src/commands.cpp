#include "adapruner/commands.hpp"

#include "adapruner/checkpoint.hpp"
#include "adapruner/common.hpp"
#include "adapruner/groups.hpp"
#include "adapruner/importance.hpp"
#include "adapruner/train.hpp"

#include <cmath>
#include <fstream>
#include <map>
#include <ostream>
#include <sstream>

namespace adapruner::commands {

namespace fs = std::filesystem;

namespace {

std::ofstream open_out(const fs::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw RuntimeError("cannot write " + path.string());
  return out;
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw RuntimeError("cannot create output directory " + dir.string() + ": " + ec.message());
}

TransformerLM load_checked(const fs::path& path) {
  if (!fs::exists(path)) throw ConfigError("checkpoint not found: " + path.string());
  return load_model(path);
}

Vocabulary load_vocab(const Artifacts& art) {
  if (!fs::exists(art.vocab())) {
    throw ConfigError("vocabulary not found: " + art.vocab().string() + " (run 'train' first)");
  }
  return Vocabulary::load(art.vocab());
}

}  // namespace

PreparedData prepare_data(const RunConfig& config, std::optional<Vocabulary> vocab) {
  if (!fs::exists(config.data.corpus)) throw ConfigError("corpus not found: " + config.data.corpus);
  PreparedData d;
  d.corpus = Corpus::load(config.data.corpus);
  if (d.corpus.documents.empty()) throw ConfigError("corpus is empty: " + config.data.corpus);
  d.split = split_corpus(d.corpus, config.data.eval_every, config.data.n_eval_sets);
  d.vocab = vocab ? std::move(vocab) : Vocabulary::build(d.corpus, d.split.train, config.model.vocab_size);
  for (const auto& doc : d.corpus.documents) d.encoded.push_back(d.vocab->encode(doc));
  for (std::size_t i = 0; i < d.split.eval.size(); ++i) {
    d.evals.push_back(make_eval_set("eval" + std::to_string(i), d.encoded, d.split.eval[i],
                                    config.model.max_seq_len, config.data.eval_tokens));
  }
  return d;
}

TrainOutcome train(const RunConfig& config, std::ostream& log) {
  config.validate();
  const Artifacts art{config.out_dir};
  PreparedData data = prepare_data(config);
  ensure_dir(art.dir);

  ModelConfig mc = config.model;
  mc.vocab_size = data.vocab->size();
  mc.seed = config.init_seed();
  TransformerLM model = init_model(mc);
  const auto windows = make_windows(data.encoded, data.split.train, mc.max_seq_len);
  log << "train: " << count_params(model) << " parameters, " << windows.size() << " windows, "
      << config.train.steps << " steps\n";

  TrainResult result = train_model(model, windows,
                                   {.steps = config.train.steps, .batch_size = config.train.batch_size,
                                    .lr = config.train.lr, .seed = config.train_seed()});
  save_model(model, art.model());
  data.vocab->save(art.vocab());
  {
    auto out = open_out(art.dir / "train_loss.csv");
    out << "step,loss\n";
    for (std::size_t i = 0; i < result.step_losses.size(); ++i) {
      out << i << ',' << format_double(result.step_losses[i]) << '\n';
    }
  }
  {
    auto out = open_out(art.dir / "run_config.txt");
    write_run_config(out, config);
  }
  if (!result.step_losses.empty()) {
    log << "train: loss " << result.step_losses.front() << " -> " << result.step_losses.back() << '\n';
  }
  log << "train: wrote " << art.model().string() << " (" << model_fingerprint(model) << ")\n";
  return {std::move(model), std::move(result.step_losses)};
}

namespace {

SolutionSpace make_space(const RunConfig& config, const PreparedData& data) {
  SolutionSpace space;
  space.pool = build_pool(data.encoded, data.split.train, config.data.min_tokens, config.search.k);
  space.k = config.search.k;
  space.align1_choices = config.search.align1;
  space.align2_choices = config.search.align2;
  space.agg_choices = config.search.agg;
  space.composition = config.search.composition;
  if (!config.search.fix_metric.empty()) {
    // First- or second-order element-wise Taylor, the fixed-metric ablations.
    MetricConfig fixed;
    fixed.alpha1 = 0.0;
    fixed.alpha2 = 1.0;
    fixed.align1 = 1.0;
    fixed.align2 = 1.0;
    fixed.agg = Aggregation::sum;
    fixed.hessian = config.search.fix_metric == "second";
    fixed.composition = config.search.composition;
    space.fixed_metric = fixed;
  }
  if (config.search.random_calib) {
    space.fixed_calib_ids = random_calibration(space.pool, space.k, config.calib_seed());
  }
  return space;
}

}  // namespace

void write_best_trial(const fs::path& path, const BestTrial& best) {
  auto out = open_out(path);
  out << "# best-trial model=" << best.model_fingerprint << " ratio=" << format_double(best.ratio) << '\n'
      << format_trial(0, best.trial) << '\n';
}

BestTrial read_best_trial(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read best trial " + path.string());
  std::string header, line;
  if (!std::getline(in, header) || header.rfind("# best-trial ", 0) != 0 || !std::getline(in, line)) {
    throw ConfigError("malformed best trial file " + path.string());
  }
  BestTrial best;
  std::istringstream fields(header.substr(13));
  std::string token;
  while (fields >> token) {
    if (token.rfind("model=", 0) == 0) best.model_fingerprint = token.substr(6);
    else if (token.rfind("ratio=", 0) == 0) best.ratio = parse_double(token.substr(6));
  }
  best.trial = parse_trial(line);
  return best;
}

SearchOutcome search(const RunConfig& config, std::ostream& log,
                     const std::optional<fs::path>& checkpoint) {
  config.validate();
  const Artifacts art{config.out_dir};
  const TransformerLM model = load_checked(checkpoint.value_or(art.model()));
  PreparedData data = prepare_data(config, load_vocab(art));
  if (data.vocab->size() != model.config.vocab_size) {
    throw ConfigError("vocabulary size differs from the checkpoint's vocab_size");
  }
  ensure_dir(art.dir);

  SolutionSpace space = make_space(config, data);
  PruningProblem problem{&model, data.encoded, config.data.calib_len, config.search.ratio, data.evals};
  SearchOptions options;
  options.run.strategy = config.search.strategy;
  options.run.settings = {config.search.gamma, config.search.n_startup, config.search.n_candidates,
                          config.search.min_bandwidth, config.search.bandwidth};
  options.run.seed = config.search_seed();
  options.run.budget = static_cast<std::size_t>(config.search.budget);
  options.run.width = static_cast<std::size_t>(config.search.width);
  options.sequential = config.search.sequential;
  options.model_fingerprint = model_fingerprint(model);
  options.history_path = art.history();

  log << "search: pool " << space.pool.size() << " samples, k=" << space.k << ", ratio "
      << config.search.ratio << ", budget " << config.search.budget << ", strategy "
      << tpe::strategy_name(config.search.strategy) << '\n';
  SearchHistory history = run_search(problem, space, options);

  write_best_trial(art.best_trial(), {history.best(), options.model_fingerprint, config.search.ratio});
  {
    auto out = open_out(art.convergence());
    write_convergence_csv(out, history.trials);
  }
  log << "search: best trial " << history.best_index << " objective " << history.best().objective << '\n';
  return {std::move(history), std::move(space)};
}

PruneOutcome prune(const RunConfig& config, std::ostream& log, const std::optional<fs::path>& checkpoint,
                   const std::optional<fs::path>& trial_path, std::optional<double> ratio) {
  config.validate();
  const Artifacts art{config.out_dir};
  const TransformerLM model = load_checked(checkpoint.value_or(art.model()));
  const BestTrial best = read_best_trial(trial_path.value_or(art.best_trial()));
  const std::string fp = model_fingerprint(model);
  if (best.model_fingerprint != fp) {
    throw ConfigError("trial was searched on model " + best.model_fingerprint + " but the checkpoint is " + fp);
  }
  const double lambda = ratio.value_or(config.search.ratio);
  PreparedData data = prepare_data(config, load_vocab(art));
  ensure_dir(art.dir);

  const CalibrationSet calib = make_calibration_set(data.encoded, best.trial.calib_ids, config.data.calib_len);
  const GradientStore grads = gradients(model, calib.sequences, best.trial.metric.hessian);
  const auto groups = build_groups(model);
  const ImportanceReport importance =
      combined_importance(model, grads, groups, best.trial.metric, calib.fingerprint());
  PruningPlan plan = make_plan(importance, model, lambda);
  if (plan.exhausted) log << "prune: warning: removing every group still undershoots the ratio\n";
  TransformerLM pruned = apply_plan(model, plan);
  const PruningStats stats = pruning_stats(model, pruned);

  save_model(pruned, art.pruned());
  {
    auto out = open_out(art.plan());
    write_plan(out, plan);
  }
  {
    auto out = open_out(art.stats());
    write_stats(out, stats);
  }
  {
    auto out = open_out(art.dir / "importance.txt");
    write_report(out, importance);
  }
  {
    auto out = open_out(art.dir / "groups.txt");
    write_groups(out, groups);
  }
  log << "prune: removed " << plan.removed_group_ids.size() << " groups, reduction "
      << 100.0 * stats.reduction << "% (" << stats.params_before << " -> " << stats.params_after << ")\n";
  return {std::move(pruned), std::move(plan), stats};
}

RecoverOutcome recover(const RunConfig& config, std::ostream& log, const std::optional<fs::path>& checkpoint) {
  config.validate();
  const Artifacts art{config.out_dir};
  TransformerLM pruned = load_checked(checkpoint.value_or(art.pruned()));
  PreparedData data = prepare_data(config, load_vocab(art));
  ensure_dir(art.dir);

  RecoverOutcome outcome{pruned, {}, objective_h(pruned, data.evals), 0.0};
  LoraModel adapted = LoraModel::attach(std::move(pruned), config.recovery.rank,
                                        {config.recovery.attention, config.recovery.mlp},
                                        config.recover_seed());
  const auto windows = make_windows(data.encoded, data.split.train, config.model.max_seq_len);
  outcome.finetune = finetune(adapted, windows,
                              {.epochs = config.recovery.epochs, .lr = config.recovery.lr,
                               .batch_size = config.recovery.batch_size, .seed = config.recover_seed()});
  save_adapter(adapted, art.adapter());
  outcome.recovered = adapted.merge();
  outcome.ppl_after = objective_h(outcome.recovered, data.evals);
  save_model(outcome.recovered, art.recovered());
  {
    auto out = open_out(art.dir / "recover_loss.csv");
    out << "step,loss\n";
    for (std::size_t i = 0; i < outcome.finetune.step_losses.size(); ++i) {
      out << i << ',' << format_double(outcome.finetune.step_losses[i]) << '\n';
    }
  }
  {
    auto out = open_out(art.dir / "recover_report.txt");
    out << "ppl_without_tune=" << format_double(outcome.ppl_before) << '\n'
        << "ppl_with_tune=" << format_double(outcome.ppl_after) << '\n';
  }
  log << "recover: mean eval PPL " << outcome.ppl_before << " (w/o tune) -> " << outcome.ppl_after
      << " (w/ tune)\n";
  return outcome;
}

EvalOutcome evaluate(const RunConfig& config, std::ostream& log, const fs::path& checkpoint,
                     const std::string& split) {
  config.validate();
  const Artifacts art{config.out_dir};
  const TransformerLM model = load_checked(checkpoint);
  PreparedData data = prepare_data(config, load_vocab(art));
  std::vector<EvalSet> sets;
  if (split == "eval") {
    sets = data.evals;
  } else if (split == "train") {
    sets.push_back(make_eval_set("train", data.encoded, data.split.train, model.config.max_seq_len,
                                 config.data.eval_tokens));
  } else {
    throw ConfigError("unknown split '" + split + "' (eval|train)");
  }
  EvalOutcome outcome;
  for (const auto& s : sets) {
    outcome.per_set.emplace_back(s.name, perplexity(model, s));
    log << s.name << " ppl=" << format_double(outcome.per_set.back().second) << '\n';
  }
  outcome.mean = objective_h(model, sets);
  log << "mean ppl=" << format_double(outcome.mean) << '\n';
  return outcome;
}

void report(std::ostream& out, const std::vector<fs::path>& histories) {
  if (histories.empty()) throw ConfigError("report needs at least one history");
  std::vector<std::vector<double>> curves;
  std::size_t longest = 0;
  out << "iteration";
  for (const auto& path : histories) {
    const HistoryFile file = read_history(path);
    std::vector<tpe::Observation> obs;
    for (const auto& t : file.trials) obs.push_back({{}, t.objective});
    curves.push_back(tpe::best_so_far(obs));
    longest = std::max(longest, curves.back().size());
    out << ',' << path.parent_path().filename().string() << '/' << path.filename().string();
  }
  out << '\n';
  for (std::size_t i = 0; i < longest; ++i) {
    out << (i + 1);
    for (const auto& c : curves) out << ',' << (i < c.size() ? format_double(c[i]) : "");
    out << '\n';
  }
}

}  // namespace adapruner::commands
