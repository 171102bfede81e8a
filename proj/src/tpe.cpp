#include "adapruner/tpe.hpp"

#include <algorithm>
#include <cmath>
#include <future>
#include <limits>
#include <numbers>
#include <numeric>
#include <sstream>

namespace adapruner::tpe {

namespace {

template <class... Ts>
struct overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
overloaded(Ts...) -> overloaded<Ts...>;

double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::numbers::sqrt2); }

double log_normal_pdf(double z) { return -0.5 * z * z - 0.5 * std::log(2.0 * std::numbers::pi); }

double log_sum_exp(std::span<const double> xs) {
  double mx = -std::numeric_limits<double>::infinity();
  for (double x : xs) mx = std::max(mx, x);
  if (!std::isfinite(mx)) return mx;
  double s = 0.0;
  for (double x : xs) s += std::exp(x - mx);
  return mx + std::log(s);
}

std::vector<int> sample_distinct_uniform(int pool_size, int k, Rng& rng) {
  std::vector<int> ids(pool_size);
  std::iota(ids.begin(), ids.end(), 0);
  for (int i = 0; i < k; ++i) {
    const auto j = i + static_cast<int>(rng.below(static_cast<std::size_t>(pool_size - i)));
    std::swap(ids[i], ids[j]);
  }
  ids.resize(k);
  std::sort(ids.begin(), ids.end());
  return ids;
}

std::size_t sample_index(std::span<const double> probs, Rng& rng) {
  const double u = rng.uniform();
  double acc = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    acc += probs[i];
    if (u < acc) return i;
  }
  return probs.size() - 1;
}

}  // namespace

void Space::validate() const {
  if (dims.empty()) throw ConfigError("search space has no dimensions");
  for (const auto& d : dims) {
    std::visit(overloaded{
                   [](const Continuous& c) {
                     if (!(c.lo < c.hi)) throw ConfigError("continuous dimension '" + c.name + "' needs lo < hi");
                   },
                   [](const Categorical& c) {
                     if (c.choices < 1) throw ConfigError("categorical dimension '" + c.name + "' has no choices");
                   },
                   [](const Subset& s) {
                     if (s.k < 1 || s.pool_size < s.k) {
                       throw ConfigError("subset dimension '" + s.name + "' needs 1 <= k (" +
                                         std::to_string(s.k) + ") <= pool size (" +
                                         std::to_string(s.pool_size) + ")");
                     }
                   }},
               d);
  }
}

bool Space::contains(const Point& point) const {
  if (point.size() != dims.size()) return false;
  for (std::size_t i = 0; i < dims.size(); ++i) {
    const bool ok = std::visit(
        overloaded{
            [&](const Continuous& c) {
              const auto* v = std::get_if<double>(&point[i]);
              return v && *v >= c.lo && *v <= c.hi;
            },
            [&](const Categorical& c) {
              const auto* v = std::get_if<int>(&point[i]);
              return v && *v >= 0 && *v < c.choices;
            },
            [&](const Subset& s) {
              const auto* v = std::get_if<std::vector<int>>(&point[i]);
              if (!v || static_cast<int>(v->size()) != s.k) return false;
              for (std::size_t j = 0; j < v->size(); ++j) {
                if ((*v)[j] < 0 || (*v)[j] >= s.pool_size) return false;
                if (j > 0 && (*v)[j - 1] >= (*v)[j]) return false;
              }
              return true;
            }},
        dims[i]);
    if (!ok) return false;
  }
  return true;
}

std::string Space::describe() const {
  std::ostringstream out;
  for (const auto& d : dims) {
    std::visit(overloaded{
                   [&](const Continuous& c) {
                     out << "continuous " << c.name << ' ' << format_double(c.lo) << ' '
                         << format_double(c.hi) << ';';
                   },
                   [&](const Categorical& c) { out << "categorical " << c.name << ' ' << c.choices << ';'; },
                   [&](const Subset& s) { out << "subset " << s.name << ' ' << s.pool_size << ' ' << s.k << ';'; }},
               d);
  }
  return out.str();
}

void Settings::validate() const {
  if (!(gamma > 0.0 && gamma < 1.0)) throw ConfigError("gamma must lie in (0, 1)");
  if (n_startup < 1) throw ConfigError("n_startup must be >= 1");
  if (n_candidates < 1) throw ConfigError("n_candidates must be >= 1");
  if (!(min_bandwidth > 0.0)) throw ConfigError("min_bandwidth must be positive");
}

Split split_history(std::span<const Observation> history, double gamma) {
  if (history.empty()) throw ConfigError("cannot split an empty history");
  std::vector<double> sorted;
  for (const auto& o : history) sorted.push_back(o.objective);
  std::sort(sorted.begin(), sorted.end());
  const auto rank = static_cast<std::size_t>(std::ceil(gamma * static_cast<double>(history.size())));
  Split split;
  split.threshold = sorted[std::clamp<std::size_t>(rank, 1, sorted.size()) - 1];
  for (std::size_t i = 0; i < history.size(); ++i) {
    (history[i].objective < split.threshold ? split.good : split.bad).push_back(i);
  }
  if (split.good.empty()) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < history.size(); ++i) {
      if (history[i].objective < history[best].objective) best = i;
    }
    split.good.push_back(best);
    split.bad.erase(std::find(split.bad.begin(), split.bad.end(), best));
    split.promoted = true;
  }
  return split;
}

ParzenDensity ParzenDensity::fit(const Space& space, std::span<const Observation> history,
                                 std::span<const std::size_t> members, double min_bandwidth,
                                 Bandwidth rule) {
  ParzenDensity density;
  const double n = static_cast<double>(members.size());
  for (std::size_t i = 0; i < space.dims.size(); ++i) {
    DimModel model{space.dims[i], {}, {}, {}};
    std::visit(overloaded{
                   [&](const Continuous& c) {
                     for (std::size_t m : members) model.centers.push_back(std::get<double>(history[m].point[i]));
                     const double range = c.hi - c.lo;
                     const double floor = min_bandwidth * range;
                     if (rule == Bandwidth::scott) {
                       double sd = 0.0;
                       if (model.centers.size() > 1) {
                         const double mean = std::accumulate(model.centers.begin(), model.centers.end(), 0.0) / n;
                         double ss = 0.0;
                         for (double x : model.centers) ss += (x - mean) * (x - mean);
                         sd = std::sqrt(ss / n);
                       }
                       const double scott = n > 0 ? sd * std::pow(n, -0.2) : 0.0;
                       model.widths.assign(model.centers.size(), std::max(scott, floor));
                       return;
                     }
                     std::vector<std::size_t> order(model.centers.size());
                     std::iota(order.begin(), order.end(), 0);
                     std::stable_sort(order.begin(), order.end(),
                                      [&](std::size_t a, std::size_t b) { return model.centers[a] < model.centers[b]; });
                     model.widths.assign(order.size(), 0.0);
                     for (std::size_t r = 0; r < order.size(); ++r) {
                       const double x = model.centers[order[r]];
                       const double left = r == 0 ? c.lo : model.centers[order[r - 1]];
                       const double right = r + 1 == order.size() ? c.hi : model.centers[order[r + 1]];
                       model.widths[order[r]] = std::clamp(std::max(x - left, right - x), floor, range);
                     }
                   },
                   [&](const Categorical& c) {
                     model.probs.assign(c.choices, 1.0);
                     for (std::size_t m : members) model.probs[std::get<int>(history[m].point[i])] += 1.0;
                     for (double& p : model.probs) p /= n + c.choices;
                   },
                   [&](const Subset& s) {
                     model.probs.assign(s.pool_size, 1.0);
                     for (std::size_t m : members) {
                       for (int id : std::get<std::vector<int>>(history[m].point[i])) model.probs[id] += 1.0;
                     }
                     for (double& p : model.probs) p /= n * s.k + s.pool_size;
                   }},
               space.dims[i]);
    density.dims_.push_back(std::move(model));
  }
  return density;
}

double ParzenDensity::log_density(std::size_t i, const Value& value) const {
  const auto& model = dims_.at(i);
  return std::visit(
      overloaded{
          [&](const Continuous& c) {
            const double x = std::get<double>(value);
            if (model.centers.empty()) return -std::log(c.hi - c.lo);
            std::vector<double> terms;
            for (std::size_t k = 0; k < model.centers.size(); ++k) {
              const double mu = model.centers[k];
              const double h = model.widths[k];
              const double mass = normal_cdf((c.hi - mu) / h) - normal_cdf((c.lo - mu) / h);
              terms.push_back(log_normal_pdf((x - mu) / h) - std::log(h) - std::log(mass));
            }
            return log_sum_exp(terms) - std::log(static_cast<double>(model.centers.size()));
          },
          [&](const Categorical&) { return std::log(model.probs[std::get<int>(value)]); },
          [&](const Subset&) {
            double s = 0.0;
            for (int id : std::get<std::vector<int>>(value)) s += std::log(model.probs[id]);
            return s;
          }},
      model.dim);
}

double ParzenDensity::log_density(const Point& point) const {
  double total = 0.0;
  for (std::size_t i = 0; i < dims_.size(); ++i) total += log_density(i, point[i]);
  return total;
}

Value ParzenDensity::sample(std::size_t i, Rng& rng) const {
  const auto& model = dims_.at(i);
  return std::visit(
      overloaded{
          [&](const Continuous& c) -> Value {
            if (model.centers.empty()) return rng.uniform(c.lo, c.hi);
            const std::size_t k = rng.below(model.centers.size());
            const double mu = model.centers[k];
            for (int attempt = 0; attempt < 1000; ++attempt) {
              const double x = mu + model.widths[k] * rng.normal();
              if (x >= c.lo && x <= c.hi) return x;
            }
            return std::clamp(mu, c.lo, c.hi);
          },
          [&](const Categorical&) -> Value { return static_cast<int>(sample_index(model.probs, rng)); },
          [&](const Subset& s) -> Value {
            // Per-slot draws from inclusion frequencies, duplicates rejected.
            std::vector<int> ids;
            std::vector<double> probs = model.probs;
            while (static_cast<int>(ids.size()) < s.k) {
              const int id = static_cast<int>(sample_index(probs, rng));
              if (std::find(ids.begin(), ids.end(), id) != ids.end()) continue;
              ids.push_back(id);
            }
            std::sort(ids.begin(), ids.end());
            return ids;
          }},
      model.dim);
}

Point ParzenDensity::sample(Rng& rng) const {
  Point point;
  for (std::size_t i = 0; i < dims_.size(); ++i) point.push_back(sample(i, rng));
  return point;
}

double ei_score(double good_density, double bad_density, double gamma) {
  return 1.0 / (gamma + (1.0 - gamma) * bad_density / good_density);
}

double ei_score_log(double log_good, double log_bad, double gamma) {
  const double log_ratio = log_bad - log_good;
  if (log_ratio > 700.0) return 0.0;
  return 1.0 / (gamma + (1.0 - gamma) * std::exp(log_ratio));
}

Point sample_uniform(const Space& space, Rng& rng) {
  Point point;
  for (const auto& d : space.dims) {
    point.push_back(std::visit(
        overloaded{[&](const Continuous& c) -> Value { return rng.uniform(c.lo, c.hi); },
                   [&](const Categorical& c) -> Value {
                     return static_cast<int>(rng.below(static_cast<std::size_t>(c.choices)));
                   },
                   [&](const Subset& s) -> Value { return sample_distinct_uniform(s.pool_size, s.k, rng); }},
        d));
  }
  return point;
}

Point suggest(const Space& space, std::span<const Observation> history, const Settings& settings,
              Rng& rng) {
  if (history.size() < static_cast<std::size_t>(settings.n_startup)) return sample_uniform(space, rng);
  const Split split = split_history(history, settings.gamma);
  const auto good = ParzenDensity::fit(space, history, split.good, settings.min_bandwidth, settings.bandwidth);
  const auto bad = ParzenDensity::fit(space, history, split.bad, settings.min_bandwidth, settings.bandwidth);
  // Both densities factor over dimensions, so the ratio is maximized one
  // dimension at a time over that dimension's own candidates.
  Point best;
  for (std::size_t d = 0; d < space.dims.size(); ++d) {
    Value best_value;
    double best_log_ratio = -INFINITY;
    for (int i = 0; i < settings.n_candidates; ++i) {
      Value candidate = good.sample(d, rng);
      const double log_ratio = good.log_density(d, candidate) - bad.log_density(d, candidate);
      if (log_ratio > best_log_ratio || i == 0) {
        best_log_ratio = log_ratio;
        best_value = std::move(candidate);
      }
    }
    best.push_back(std::move(best_value));
  }
  return best;
}

const char* bandwidth_name(Bandwidth b) { return b == Bandwidth::neighbor ? "neighbor" : "scott"; }

Bandwidth parse_bandwidth(std::string_view name) {
  if (name == "neighbor") return Bandwidth::neighbor;
  if (name == "scott") return Bandwidth::scott;
  throw ConfigError("unknown bandwidth rule '" + std::string(name) + "' (neighbor|scott)");
}

const char* strategy_name(Strategy s) { return s == Strategy::tpe ? "tpe" : "random"; }

Strategy parse_strategy(std::string_view name) {
  if (name == "tpe") return Strategy::tpe;
  if (name == "random") return Strategy::random;
  throw ConfigError("unknown strategy '" + std::string(name) + "' (tpe|random)");
}

namespace {

double safe_evaluate(const Objective& objective, const Point& point, std::size_t index) {
  try {
    const double h = objective(point, index);
    return std::isfinite(h) ? h : std::numeric_limits<double>::infinity();
  } catch (const RuntimeError&) {
    return std::numeric_limits<double>::infinity();
  }
}

}  // namespace

std::vector<Observation> optimize(const Space& space, const Objective& objective,
                                  const RunOptions& options, std::vector<Observation> history,
                                  const CommitHook& on_commit) {
  space.validate();
  options.settings.validate();
  if (options.budget < 1) throw ConfigError("search budget must be >= 1");
  if (options.width < 1) throw ConfigError("evaluation width must be >= 1");
  for (const auto& o : history) {
    if (!space.contains(o.point)) throw ConfigError("resumed history contains an out-of-space trial");
  }

  while (history.size() < options.budget) {
    const std::size_t first = history.size();
    const std::size_t batch = std::min(options.width, options.budget - first);
    std::vector<Point> points;
    for (std::size_t b = 0; b < batch; ++b) {
      Rng rng(mix_seed(options.seed, first + b));
      points.push_back(options.strategy == Strategy::random
                           ? sample_uniform(space, rng)
                           : suggest(space, history, options.settings, rng));
    }
    std::vector<double> results(batch);
    if (batch == 1) {
      results[0] = safe_evaluate(objective, points[0], first);
    } else {
      std::vector<std::future<double>> pending;
      for (std::size_t b = 0; b < batch; ++b) {
        pending.push_back(std::async(std::launch::async, [&, b] {
          return safe_evaluate(objective, points[b], first + b);
        }));
      }
      for (std::size_t b = 0; b < batch; ++b) results[b] = pending[b].get();
    }
    for (std::size_t b = 0; b < batch; ++b) {
      history.push_back({std::move(points[b]), results[b]});
      if (on_commit) on_commit(history.back(), first + b);
    }
  }
  return history;
}

std::vector<double> best_so_far(std::span<const Observation> history) {
  std::vector<double> out;
  double best = std::numeric_limits<double>::infinity();
  for (const auto& o : history) {
    best = std::min(best, o.objective);
    out.push_back(best);
  }
  return out;
}

}  // namespace adapruner::tpe
