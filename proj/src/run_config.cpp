#include "adapruner/run_config.hpp"

#include "adapruner/common.hpp"

#include <charconv>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>

namespace adapruner {

namespace {

std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename T>
T parse_integer(std::string_view key, std::string_view value) {
  T out{};
  auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), out);
  if (ec != std::errc() || ptr != value.data() + value.size()) {
    throw ConfigError("config key '" + std::string(key) + "' expects an integer, got '" +
                      std::string(value) + "'");
  }
  return out;
}

double parse_real(std::string_view key, std::string_view value) {
  try {
    return parse_double(value);
  } catch (const ConfigError&) {
    throw ConfigError("config key '" + std::string(key) + "' expects a number, got '" +
                      std::string(value) + "'");
  }
}

bool parse_bool(std::string_view key, std::string_view value) {
  if (value == "true" || value == "1") return true;
  if (value == "false" || value == "0") return false;
  throw ConfigError("config key '" + std::string(key) + "' expects true/false, got '" +
                    std::string(value) + "'");
}

std::vector<std::string_view> split_list(std::string_view value) {
  std::vector<std::string_view> out;
  std::size_t pos = 0;
  while (pos <= value.size()) {
    const auto comma = std::min(value.find(',', pos), value.size());
    const auto item = trim(value.substr(pos, comma - pos));
    if (!item.empty()) out.push_back(item);
    pos = comma + 1;
  }
  return out;
}

template <typename T>
std::string join(const std::vector<T>& values, auto&& fmt) {
  std::string out;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (i) out += ',';
    out += fmt(values[i]);
  }
  return out;
}

}  // namespace

void RunConfig::set(std::string_view key, std::string_view value) {
  const std::string k(key);
  auto integer = [&] { return parse_integer<int>(key, value); };
  auto real = [&] { return parse_real(key, value); };

  if (k == "model.vocab_size") model.vocab_size = integer();
  else if (k == "model.d_model") model.d_model = integer();
  else if (k == "model.n_layers") model.n_layers = integer();
  else if (k == "model.n_heads") model.n_heads = integer();
  else if (k == "model.d_ff") model.d_ff = integer();
  else if (k == "model.max_seq_len") model.max_seq_len = integer();
  else if (k == "model.prune_begin") model.prune_begin = integer();
  else if (k == "model.prune_end") model.prune_end = integer();
  else if (k == "data.corpus") data.corpus = std::string(value);
  else if (k == "data.min_tokens") data.min_tokens = integer();
  else if (k == "data.calib_len") data.calib_len = integer();
  else if (k == "data.eval_every") data.eval_every = integer();
  else if (k == "data.n_eval_sets") data.n_eval_sets = integer();
  else if (k == "data.eval_tokens") data.eval_tokens = integer();
  else if (k == "train.steps") train.steps = integer();
  else if (k == "train.batch_size") train.batch_size = integer();
  else if (k == "train.lr") train.lr = real();
  else if (k == "search.k") search.k = integer();
  else if (k == "search.ratio") search.ratio = real();
  else if (k == "search.budget") search.budget = integer();
  else if (k == "search.strategy") search.strategy = tpe::parse_strategy(value);
  else if (k == "search.gamma") search.gamma = real();
  else if (k == "search.n_startup") search.n_startup = integer();
  else if (k == "search.n_candidates") search.n_candidates = integer();
  else if (k == "search.min_bandwidth") search.min_bandwidth = real();
  else if (k == "search.bandwidth") search.bandwidth = tpe::parse_bandwidth(value);
  else if (k == "search.width") search.width = integer();
  else if (k == "search.align1" || k == "search.align2") {
    std::vector<double> values;
    for (auto item : split_list(value)) values.push_back(parse_real(key, item));
    (k == "search.align1" ? search.align1 : search.align2) = std::move(values);
  } else if (k == "search.agg") {
    search.agg.clear();
    for (auto item : split_list(value)) search.agg.push_back(parse_aggregation(item));
  } else if (k == "search.composition") search.composition = parse_composition(value);
  else if (k == "search.fix_metric") search.fix_metric = std::string(value);
  else if (k == "search.random_calib") search.random_calib = parse_bool(key, value);
  else if (k == "search.sequential") search.sequential = parse_bool(key, value);
  else if (k == "recovery.rank") recovery.rank = integer();
  else if (k == "recovery.epochs") recovery.epochs = integer();
  else if (k == "recovery.lr") recovery.lr = real();
  else if (k == "recovery.batch_size") recovery.batch_size = integer();
  else if (k == "recovery.targets") {
    recovery.attention = recovery.mlp = false;
    for (auto item : split_list(value)) {
      if (item == "attention") recovery.attention = true;
      else if (item == "mlp") recovery.mlp = true;
      else throw ConfigError("recovery.targets accepts attention,mlp; got '" + std::string(item) + "'");
    }
  } else if (k == "output.dir") out_dir = std::string(value);
  else if (k == "seed") seed = parse_integer<std::uint64_t>(key, value);
  else throw ConfigError("unknown config key '" + k + "'");
}

void RunConfig::validate() const {
  ModelConfig m = model;
  m.seed = init_seed();
  m.validate();
  if (data.calib_len < 2 || data.calib_len > model.max_seq_len) {
    throw ConfigError("data.calib_len must lie in [2, model.max_seq_len]");
  }
  if (data.min_tokens < data.calib_len) {
    throw ConfigError("data.min_tokens must be >= data.calib_len so calibration samples fit");
  }
  if (data.n_eval_sets < 1 || data.eval_every <= data.n_eval_sets) {
    throw ConfigError("need 1 <= data.n_eval_sets < data.eval_every");
  }
  if (data.eval_tokens < 0) throw ConfigError("data.eval_tokens must be >= 0");
  if (train.steps < 0 || train.batch_size < 1 || !(train.lr >= 0.0)) {
    throw ConfigError("invalid train.* settings");
  }
  if (search.k < 1 || search.budget < 1 || search.width < 1) {
    throw ConfigError("search.k, search.budget and search.width must be >= 1");
  }
  if (!(search.ratio >= 0.0 && search.ratio < 1.0)) throw ConfigError("search.ratio must lie in [0, 1)");
  tpe::Settings{search.gamma, search.n_startup, search.n_candidates, search.min_bandwidth}.validate();
  if (search.align1.empty() || search.align2.empty() || search.agg.empty()) {
    throw ConfigError("search grids must be non-empty");
  }
  if (!search.fix_metric.empty() && search.fix_metric != "first" && search.fix_metric != "second") {
    throw ConfigError("search.fix_metric must be first or second");
  }
  const int modes = (!search.fix_metric.empty()) + search.random_calib + search.sequential;
  if (modes > 1) throw ConfigError("at most one ablation mode may be enabled");
  if (recovery.rank < 1 || recovery.epochs < 0 || recovery.batch_size < 1 || !(recovery.lr >= 0.0)) {
    throw ConfigError("invalid recovery.* settings");
  }
  if (!recovery.attention && !recovery.mlp) throw ConfigError("recovery.targets must not be empty");
}

RunConfig parse_run_config(std::istream& in, const std::string& source) {
  RunConfig config;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::string_view view = line;
    if (const auto hash = view.find('#'); hash != std::string_view::npos) view = view.substr(0, hash);
    view = trim(view);
    if (view.empty()) continue;
    const auto eq = view.find('=');
    if (eq == std::string_view::npos) {
      throw ConfigError(source + ":" + std::to_string(line_no) + ": expected 'key = value'");
    }
    try {
      config.set(trim(view.substr(0, eq)), trim(view.substr(eq + 1)));
    } catch (const ConfigError& e) {
      throw ConfigError(source + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return config;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  return parse_run_config(in, path.string());
}

void write_run_config(std::ostream& out, const RunConfig& c) {
  auto real = [](double v) { return format_double(v); };
  out << "model.vocab_size = " << c.model.vocab_size << '\n'
      << "model.d_model = " << c.model.d_model << '\n'
      << "model.n_layers = " << c.model.n_layers << '\n'
      << "model.n_heads = " << c.model.n_heads << '\n'
      << "model.d_ff = " << c.model.d_ff << '\n'
      << "model.max_seq_len = " << c.model.max_seq_len << '\n'
      << "model.prune_begin = " << c.model.prune_begin << '\n'
      << "model.prune_end = " << c.model.prune_end << '\n'
      << "data.corpus = " << c.data.corpus << '\n'
      << "data.min_tokens = " << c.data.min_tokens << '\n'
      << "data.calib_len = " << c.data.calib_len << '\n'
      << "data.eval_every = " << c.data.eval_every << '\n'
      << "data.n_eval_sets = " << c.data.n_eval_sets << '\n'
      << "data.eval_tokens = " << c.data.eval_tokens << '\n'
      << "train.steps = " << c.train.steps << '\n'
      << "train.batch_size = " << c.train.batch_size << '\n'
      << "train.lr = " << real(c.train.lr) << '\n'
      << "search.k = " << c.search.k << '\n'
      << "search.ratio = " << real(c.search.ratio) << '\n'
      << "search.budget = " << c.search.budget << '\n'
      << "search.strategy = " << tpe::strategy_name(c.search.strategy) << '\n'
      << "search.gamma = " << real(c.search.gamma) << '\n'
      << "search.n_startup = " << c.search.n_startup << '\n'
      << "search.n_candidates = " << c.search.n_candidates << '\n'
      << "search.min_bandwidth = " << real(c.search.min_bandwidth) << '\n'
      << "search.bandwidth = " << tpe::bandwidth_name(c.search.bandwidth) << '\n'
      << "search.width = " << c.search.width << '\n'
      << "search.align1 = " << join(c.search.align1, real) << '\n'
      << "search.align2 = " << join(c.search.align2, real) << '\n'
      << "search.agg = " << join(c.search.agg, [](Aggregation a) { return std::string(aggregation_name(a)); }) << '\n'
      << "search.composition = " << composition_name(c.search.composition) << '\n'
      << "search.fix_metric = " << c.search.fix_metric << '\n'
      << "search.random_calib = " << (c.search.random_calib ? "true" : "false") << '\n'
      << "search.sequential = " << (c.search.sequential ? "true" : "false") << '\n'
      << "recovery.rank = " << c.recovery.rank << '\n'
      << "recovery.epochs = " << c.recovery.epochs << '\n'
      << "recovery.lr = " << real(c.recovery.lr) << '\n'
      << "recovery.batch_size = " << c.recovery.batch_size << '\n'
      << "recovery.targets = "
      << (c.recovery.attention && c.recovery.mlp ? "attention,mlp" : c.recovery.attention ? "attention" : "mlp")
      << '\n'
      << "output.dir = " << c.out_dir.string() << '\n'
      << "seed = " << c.seed << '\n';
}

}  // namespace adapruner
