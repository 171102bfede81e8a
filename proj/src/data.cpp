#include "adapruner/data.hpp"

#include "adapruner/common.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

namespace adapruner {

namespace {

std::vector<std::string_view> split_words(std::string_view text) {
  std::vector<std::string_view> words;
  std::size_t i = 0;
  auto is_space = [](char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v'; };
  while (i < text.size()) {
    while (i < text.size() && is_space(text[i])) ++i;
    const std::size_t start = i;
    while (i < text.size() && !is_space(text[i])) ++i;
    if (i > start) words.push_back(text.substr(start, i - start));
  }
  return words;
}

}  // namespace

Corpus Corpus::parse(std::string_view text, std::string source) {
  Corpus corpus;
  corpus.source = std::move(source);
  std::string current;
  auto flush = [&] {
    if (!current.empty()) corpus.documents.push_back(std::move(current));
    current.clear();
  };
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const std::size_t nl = std::min(text.find('\n', pos), text.size());
    const std::string_view line = text.substr(pos, nl - pos);
    const auto words = split_words(line);
    if (words.empty()) {
      flush();
    } else {
      for (auto w : words) {
        if (!current.empty()) current.push_back(' ');
        current.append(w);
      }
    }
    pos = nl + 1;
  }
  flush();
  return corpus;
}

Corpus Corpus::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read corpus " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse(buf.str(), path.string());
}

Vocabulary::Vocabulary(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    if (!index_.emplace(tokens_[i], static_cast<int>(i)).second) {
      throw ConfigError("duplicate vocabulary token '" + tokens_[i] + "'");
    }
  }
}

Vocabulary Vocabulary::build(const Corpus& corpus, std::span<const int> doc_ids, int vocab_size) {
  if (vocab_size < 2) throw ConfigError("vocab_size must be >= 2");
  std::map<std::string, std::int64_t, std::less<>> counts;
  for (int id : doc_ids) {
    for (auto w : split_words(corpus.documents.at(id))) {
      if (w == kUnknownToken) continue;
      auto it = counts.find(w);
      if (it == counts.end()) {
        counts.emplace(std::string(w), 1);
      } else {
        ++it->second;
      }
    }
  }
  std::vector<std::pair<std::string, std::int64_t>> ranked(counts.begin(), counts.end());
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  std::vector<std::string> tokens{kUnknownToken};
  for (const auto& [word, n] : ranked) {
    if (static_cast<int>(tokens.size()) >= vocab_size) break;
    tokens.push_back(word);
  }
  return Vocabulary(std::move(tokens));
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read vocabulary " + path.string());
  std::vector<std::string> tokens;
  std::string line;
  while (std::getline(in, line)) tokens.push_back(line);
  if (tokens.empty() || tokens[0] != kUnknownToken) {
    throw ConfigError("vocabulary " + path.string() + " must start with " + kUnknownToken);
  }
  return Vocabulary(std::move(tokens));
}

void Vocabulary::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw RuntimeError("cannot write " + path.string());
  for (const auto& t : tokens_) out << t << '\n';
}

Sequence Vocabulary::encode(std::string_view text) const {
  Sequence ids;
  for (auto w : split_words(text)) {
    auto it = index_.find(std::string(w));
    ids.push_back(it == index_.end() ? kUnknown : it->second);
  }
  return ids;
}

std::string Vocabulary::decode(std::span<const int> ids) const {
  std::string out;
  for (int id : ids) {
    if (!out.empty()) out.push_back(' ');
    out += tokens_.at(id);
  }
  return out;
}

CorpusSplit split_corpus(const Corpus& corpus, int eval_every, int n_eval_sets) {
  if (n_eval_sets < 1 || eval_every <= n_eval_sets) {
    throw ConfigError("need 1 <= n_eval_sets < eval_every (got " + std::to_string(n_eval_sets) +
                      ", " + std::to_string(eval_every) + ")");
  }
  CorpusSplit split;
  split.eval.resize(n_eval_sets);
  for (int i = 0; i < static_cast<int>(corpus.documents.size()); ++i) {
    const int r = i % eval_every;
    if (r < n_eval_sets) {
      split.eval[r].push_back(i);
    } else {
      split.train.push_back(i);
    }
  }
  return split;
}

std::vector<int> build_pool(std::span<const Sequence> encoded, std::span<const int> candidates,
                            int min_tokens, int k) {
  std::vector<int> pool;
  for (int id : candidates) {
    if (static_cast<int>(encoded[id].size()) >= min_tokens) pool.push_back(id);
  }
  if (static_cast<int>(pool.size()) < k) {
    throw ConfigError("calibration pool has " + std::to_string(pool.size()) +
                      " documents with >= " + std::to_string(min_tokens) + " tokens, but k = " +
                      std::to_string(k) + " samples are required");
  }
  return pool;
}

std::string CalibrationSet::fingerprint() const {
  Fingerprint fp;
  fp.add(std::span<const int>(sample_ids));
  for (const auto& s : sequences) fp.add(std::span<const int>(s));
  return fp.hex();
}

CalibrationSet make_calibration_set(std::span<const Sequence> encoded, std::span<const int> ids,
                                    int length) {
  if (ids.empty()) throw ConfigError("calibration set must not be empty");
  CalibrationSet set;
  for (int id : ids) {
    const Sequence& doc = encoded[id];
    if (static_cast<int>(doc.size()) < length) {
      throw ConfigError("calibration document " + std::to_string(id) + " has " +
                        std::to_string(doc.size()) + " tokens, fewer than the calibration length " +
                        std::to_string(length));
    }
    set.sample_ids.push_back(id);
    set.sequences.emplace_back(doc.begin(), doc.begin() + length);
  }
  return set;
}

EvalSet make_eval_set(std::string name, std::span<const Sequence> encoded,
                      std::span<const int> ids, int window_len, int max_tokens) {
  if (window_len < 2) throw ConfigError("evaluation window must hold >= 2 tokens");
  std::vector<int> stream;
  for (int id : ids) {
    stream.insert(stream.end(), encoded[id].begin(), encoded[id].end());
    if (max_tokens > 0 && static_cast<int>(stream.size()) >= max_tokens) break;
  }
  if (max_tokens > 0 && static_cast<int>(stream.size()) > max_tokens) stream.resize(max_tokens);
  EvalSet set{std::move(name), {}};
  for (std::size_t pos = 0; pos < stream.size(); pos += window_len) {
    const std::size_t end = std::min(stream.size(), pos + window_len);
    if (end - pos < 2) break;
    set.windows.emplace_back(stream.begin() + pos, stream.begin() + end);
  }
  if (set.windows.empty()) throw ConfigError("evaluation set '" + set.name + "' is empty");
  return set;
}

double perplexity(const TransformerLM& model, const EvalSet& eval, const AdapterSet* adapters) {
  if (eval.windows.empty()) throw ConfigError("evaluation set '" + eval.name + "' is empty");
  double total = 0.0;
  std::int64_t count = 0;
  for (const auto& w : eval.windows) {
    const NllSum nll = sequence_nll(model, w, adapters);
    total += nll.total;
    count += nll.count;
  }
  return std::exp(total / static_cast<double>(count));
}

double objective_h(const TransformerLM& model, std::span<const EvalSet> evals) {
  if (evals.empty()) throw ConfigError("need at least one evaluation set");
  std::vector<double> values;
  for (const auto& e : evals) values.push_back(perplexity(model, e));
  // Summing in sorted order makes the mean exactly independent of set order.
  std::sort(values.begin(), values.end());
  double total = 0.0;
  for (double v : values) total += v;
  return total / static_cast<double>(values.size());
}

}  // namespace adapruner
