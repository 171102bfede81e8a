#include "adapruner/search.hpp"

#include "adapruner/groups.hpp"
#include "adapruner/pruner.hpp"

#include <algorithm>
#include <chrono>
#include <fstream>
#include <map>
#include <sstream>

namespace adapruner {

void SolutionSpace::validate() const {
  if (k < 1) throw ConfigError("k must be >= 1");
  if (static_cast<int>(pool.size()) < k) {
    throw ConfigError("calibration pool has " + std::to_string(pool.size()) +
                      " samples but k = " + std::to_string(k));
  }
  if (align1_choices.empty() || align2_choices.empty() || agg_choices.empty()) {
    throw ConfigError("metric grids must be non-empty");
  }
  for (double a : align1_choices) {
    if (!(a > 0.0)) throw ConfigError("align1 choices must be positive");
  }
  for (double a : align2_choices) {
    if (!(a > 0.0)) throw ConfigError("align2 choices must be positive");
  }
  if (fixed_metric) fixed_metric->validate();
  if (fixed_calib_ids) {
    if (static_cast<int>(fixed_calib_ids->size()) != k) {
      throw ConfigError("fixed calibration set must hold k ids");
    }
    for (int id : *fixed_calib_ids) {
      if (std::find(pool.begin(), pool.end(), id) == pool.end()) {
        throw ConfigError("fixed calibration id " + std::to_string(id) + " is not in the pool");
      }
    }
  }
  if (fixed_metric && fixed_calib_ids) throw ConfigError("nothing left to search");
}

tpe::Space SolutionSpace::tpe_space() const {
  tpe::Space space;
  if (!fixed_calib_ids) space.dims.push_back(tpe::Subset{"calib", static_cast<int>(pool.size()), k});
  if (!fixed_metric) {
    space.dims.push_back(tpe::Continuous{"alpha1", 0.0, 1.0});
    space.dims.push_back(tpe::Continuous{"alpha2", 0.0, 1.0});
    space.dims.push_back(tpe::Categorical{"align1", static_cast<int>(align1_choices.size())});
    space.dims.push_back(tpe::Categorical{"align2", static_cast<int>(align2_choices.size())});
    space.dims.push_back(tpe::Categorical{"agg", static_cast<int>(agg_choices.size())});
  }
  return space;
}

Trial SolutionSpace::decode(const tpe::Point& point) const {
  Trial trial;
  std::size_t i = 0;
  if (fixed_calib_ids) {
    trial.calib_ids = *fixed_calib_ids;
  } else {
    for (int idx : std::get<std::vector<int>>(point.at(i++))) trial.calib_ids.push_back(pool.at(idx));
  }
  std::sort(trial.calib_ids.begin(), trial.calib_ids.end());
  if (fixed_metric) {
    trial.metric = *fixed_metric;
  } else {
    trial.metric.alpha1 = std::get<double>(point.at(i++));
    trial.metric.alpha2 = std::get<double>(point.at(i++));
    trial.metric.align1 = align1_choices.at(std::get<int>(point.at(i++)));
    trial.metric.align2 = align2_choices.at(std::get<int>(point.at(i++)));
    trial.metric.agg = agg_choices.at(std::get<int>(point.at(i++)));
    trial.metric.hessian = true;
    trial.metric.composition = composition;
  }
  return trial;
}

namespace {

template <typename T>
int index_of(const std::vector<T>& choices, const T& value, const char* what) {
  auto it = std::find(choices.begin(), choices.end(), value);
  if (it == choices.end()) throw ConfigError(std::string("trial ") + what + " is not in the grid");
  return static_cast<int>(it - choices.begin());
}

}  // namespace

tpe::Point SolutionSpace::encode(const Trial& trial) const {
  tpe::Point point;
  if (fixed_calib_ids) {
    if (trial.calib_ids != *fixed_calib_ids) throw ConfigError("trial calibration differs from the fixed set");
  } else {
    std::vector<int> idx;
    for (int id : trial.calib_ids) idx.push_back(index_of(pool, id, "calibration id"));
    std::sort(idx.begin(), idx.end());
    point.emplace_back(std::move(idx));
  }
  if (fixed_metric) {
    if (!(trial.metric == *fixed_metric)) throw ConfigError("trial metric differs from the fixed metric");
  } else {
    point.emplace_back(trial.metric.alpha1);
    point.emplace_back(trial.metric.alpha2);
    point.emplace_back(index_of(align1_choices, trial.metric.align1, "align1"));
    point.emplace_back(index_of(align2_choices, trial.metric.align2, "align2"));
    point.emplace_back(index_of(agg_choices, trial.metric.agg, "agg"));
  }
  return point;
}

std::string SolutionSpace::fingerprint() const {
  Fingerprint fp;
  fp.add(std::span<const int>(pool)).add(static_cast<std::int64_t>(k));
  fp.add(std::span<const double>(align1_choices)).add(std::span<const double>(align2_choices));
  for (auto a : agg_choices) fp.add(aggregation_name(a));
  fp.add(composition_name(composition));
  fp.add(fixed_metric ? format_metric(*fixed_metric) : "-");
  fp.add(fixed_calib_ids ? std::span<const int>(*fixed_calib_ids) : std::span<const int>());
  return fp.hex();
}

TransformerLM prune_with_trial(const Trial& trial, const PruningProblem& problem) {
  const TransformerLM& base = *problem.base;
  const CalibrationSet calib = make_calibration_set(problem.documents, trial.calib_ids, problem.calib_len);
  const GradientStore grads = gradients(base, calib.sequences, trial.metric.hessian);
  const auto groups = build_groups(base);
  const ImportanceReport report = combined_importance(base, grads, groups, trial.metric, calib.fingerprint());
  const PruningPlan plan = make_plan(report, base, problem.ratio);
  return apply_plan(base, plan);
}

double evaluate_trial(const Trial& trial, const PruningProblem& problem) {
  return objective_h(prune_with_trial(trial, problem), problem.evals);
}

std::vector<int> random_calibration(const std::vector<int>& pool, int k, std::uint64_t seed) {
  Rng rng(seed);
  auto point = tpe::sample_uniform(tpe::Space{{tpe::Subset{"calib", static_cast<int>(pool.size()), k}}}, rng);
  std::vector<int> ids;
  for (int idx : std::get<std::vector<int>>(point[0])) ids.push_back(pool.at(idx));
  std::sort(ids.begin(), ids.end());
  return ids;
}

std::string history_header(const SolutionSpace& space, const SearchOptions& options, double ratio) {
  std::ostringstream out;
  out << "# adapruner-history v1 space=" << space.fingerprint()
      << " strategy=" << tpe::strategy_name(options.run.strategy)
      << " sequential=" << (options.sequential ? 1 : 0) << " seed=" << options.run.seed
      << " width=" << options.run.width
      << " gamma=" << format_double(options.run.settings.gamma)
      << " n_startup=" << options.run.settings.n_startup
      << " n_candidates=" << options.run.settings.n_candidates
      << " bandwidth=" << tpe::bandwidth_name(options.run.settings.bandwidth)
      << " ratio=" << format_double(ratio)
      << " model=" << (options.model_fingerprint.empty() ? "-" : options.model_fingerprint);
  return out.str();
}

std::string format_trial(std::size_t index, const Trial& trial) {
  std::ostringstream out;
  out << "trial=" << index << " calib=";
  for (std::size_t i = 0; i < trial.calib_ids.size(); ++i) out << (i ? "," : "") << trial.calib_ids[i];
  out << ' ' << format_metric(trial.metric) << " objective=" << format_double(trial.objective)
      << " seed=" << trial.seed;
  return out.str();
}

Trial parse_trial(const std::string& line, std::size_t* index) {
  std::map<std::string, std::string> f;
  std::istringstream in(line);
  std::string token;
  while (in >> token) {
    const auto eq = token.find('=');
    if (eq == std::string::npos) throw ConfigError("malformed trial field '" + token + "'");
    f[token.substr(0, eq)] = token.substr(eq + 1);
  }
  auto get = [&](const std::string& key) {
    auto it = f.find(key);
    if (it == f.end()) throw ConfigError("trial record missing '" + key + "': " + line);
    return it->second;
  };
  Trial trial;
  if (index) *index = std::stoull(get("trial"));
  std::istringstream ids(get("calib"));
  std::string id;
  while (std::getline(ids, id, ',')) trial.calib_ids.push_back(std::stoi(id));
  trial.metric.alpha1 = parse_double(get("alpha1"));
  trial.metric.alpha2 = parse_double(get("alpha2"));
  trial.metric.align1 = parse_double(get("align1"));
  trial.metric.align2 = parse_double(get("align2"));
  trial.metric.agg = parse_aggregation(get("agg"));
  trial.metric.hessian = get("hessian") == "1";
  trial.metric.composition = parse_composition(get("composition"));
  trial.objective = parse_double(get("objective"));
  trial.seed = std::stoull(get("seed"));
  return trial;
}

HistoryFile read_history(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read history " + path.string());
  HistoryFile file;
  std::string line;
  if (!std::getline(in, line) || line.rfind("# adapruner-history", 0) != 0) {
    throw ConfigError("history " + path.string() + " lacks its header line");
  }
  file.header = line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::size_t index = 0;
    Trial t = parse_trial(line, &index);
    if (index != file.trials.size()) throw ConfigError("history trial indices are not consecutive");
    file.trials.push_back(std::move(t));
  }
  return file;
}

void write_convergence_csv(std::ostream& out, std::span<const Trial> trials) {
  out << "iteration,objective,best_so_far\n";
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < trials.size(); ++i) {
    best = std::min(best, trials[i].objective);
    out << (i + 1) << ',' << format_double(trials[i].objective) << ',' << format_double(best) << '\n';
  }
}

namespace {

constexpr std::uint64_t kSecondPhaseStream = 0x5eed0002;
constexpr std::uint64_t kFixedCalibStream = 0x5eed0001;

class HistoryWriter {
 public:
  HistoryWriter(const std::optional<std::filesystem::path>& path, const std::string& header,
                bool fresh) {
    if (!path) return;
    out_.open(*path, fresh ? std::ios::trunc : std::ios::app);
    timing_.open(path->string() + ".timing.csv", fresh ? std::ios::trunc : std::ios::app);
    if (!out_ || !timing_) throw RuntimeError("cannot write history " + path->string());
    if (fresh) {
      out_ << header << '\n' << std::flush;
      timing_ << "trial,wall_seconds\n" << std::flush;
    }
  }

  void append(std::size_t index, const Trial& trial, double seconds) {
    if (!out_.is_open()) return;
    out_ << format_trial(index, trial) << '\n' << std::flush;
    timing_ << index << ',' << format_double(seconds) << '\n' << std::flush;
  }

 private:
  std::ofstream out_;
  std::ofstream timing_;
};

}  // namespace

SearchHistory run_search(const PruningProblem& problem, const SolutionSpace& space,
                         const SearchOptions& options) {
  space.validate();
  if (options.sequential && (space.fixed_metric || space.fixed_calib_ids)) {
    throw ConfigError("sequential optimization cannot be combined with a frozen metric or calibration set");
  }
  if (!problem.base || problem.evals.empty()) throw ConfigError("search needs a model and evaluation sets");
  const std::size_t budget = options.run.budget;
  if (budget < 1) throw ConfigError("search budget must be >= 1");

  const std::string header = history_header(space, options, problem.ratio);
  std::vector<Trial> trials;
  bool fresh = true;
  if (options.history_path && std::filesystem::exists(*options.history_path) &&
      std::filesystem::file_size(*options.history_path) > 0) {
    HistoryFile existing = read_history(*options.history_path);
    if (existing.header != header) {
      throw ConfigError("cannot resume " + options.history_path->string() +
                        ": its header (space, strategy, seed or model) differs from this run");
    }
    if (existing.trials.size() > budget) throw ConfigError("history already exceeds the budget");
    trials = std::move(existing.trials);
    fresh = false;
  }
  HistoryWriter writer(options.history_path, header, fresh);

  // Phases: joint search is one phase over the full space; sequential search
  // freezes D for the first half and I for the second.
  struct Phase {
    SolutionSpace space;
    std::size_t begin, end;
    std::uint64_t seed;
  };
  std::vector<Phase> phases;
  if (!options.sequential) {
    phases.push_back({space, 0, budget, options.run.seed});
  } else {
    const std::size_t half = std::max<std::size_t>(1, budget / 2);
    SolutionSpace first = space;
    first.fixed_calib_ids = random_calibration(space.pool, space.k, mix_seed(options.run.seed, kFixedCalibStream));
    phases.push_back({first, 0, half, options.run.seed});
    if (budget > half) phases.push_back({space, half, budget, mix_seed(options.run.seed, kSecondPhaseStream)});
  }

  for (auto& phase : phases) {
    if (trials.size() >= phase.end) continue;
    if (options.sequential && phase.begin > 0) {
      // Freeze the best metric of the first phase.
      std::size_t best = 0;
      for (std::size_t i = 1; i < phase.begin; ++i) {
        if (trials[i].objective < trials[best].objective) best = i;
      }
      phase.space.fixed_metric = trials[best].metric;
    }
    const tpe::Space tspace = phase.space.tpe_space();
    std::vector<tpe::Observation> observed;
    for (std::size_t i = phase.begin; i < trials.size(); ++i) {
      observed.push_back({phase.space.encode(trials[i]), trials[i].objective});
    }
    tpe::RunOptions run = options.run;
    run.seed = phase.seed;
    run.budget = phase.end - phase.begin;

    std::vector<double> seconds(run.budget, 0.0);
    auto objective = [&](const tpe::Point& point, std::size_t local) {
      const auto start = std::chrono::steady_clock::now();
      const double h = evaluate_trial(phase.space.decode(point), problem);
      seconds[local] = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      return h;
    };
    auto commit = [&](const tpe::Observation& obs, std::size_t local) {
      Trial t = phase.space.decode(obs.point);
      t.objective = obs.objective;
      t.seed = mix_seed(run.seed, local);
      const std::size_t index = phase.begin + local;
      writer.append(index, t, seconds[local]);
      trials.push_back(std::move(t));
    };
    tpe::optimize(tspace, objective, run, std::move(observed), commit);
  }

  SearchHistory history;
  history.trials = std::move(trials);
  for (std::size_t i = 1; i < history.trials.size(); ++i) {
    if (history.trials[i].objective < history.trials[history.best_index].objective) history.best_index = i;
  }
  return history;
}

}  // namespace adapruner
