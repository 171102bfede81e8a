#pragma once

#include "adapruner/model.hpp"

#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace adapruner {

// Plain-text corpus: one document per blank-line-separated block, whitespace
// normalized to single spaces.
struct Corpus {
  std::vector<std::string> documents;
  std::string source;

  static Corpus load(const std::filesystem::path& path);
  static Corpus parse(std::string_view text, std::string source = "<memory>");
};

// Word-level vocabulary. Id 0 is reserved for unknown words; remaining ids
// follow descending frequency, ties broken lexicographically.
class Vocabulary {
 public:
  static constexpr int kUnknown = 0;
  static constexpr const char* kUnknownToken = "<unk>";

  static Vocabulary build(const Corpus& corpus, std::span<const int> doc_ids, int vocab_size);
  static Vocabulary load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

  Sequence encode(std::string_view text) const;
  std::string decode(std::span<const int> ids) const;
  int size() const { return static_cast<int>(tokens_.size()); }
  const std::string& token(int id) const { return tokens_.at(id); }

 private:
  explicit Vocabulary(std::vector<std::string> tokens);
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
};

// Deterministic document split: doc i goes to eval set (i % eval_every) when
// that residue is below n_eval_sets, otherwise to training.
struct CorpusSplit {
  std::vector<int> train;
  std::vector<std::vector<int>> eval;
};
CorpusSplit split_corpus(const Corpus& corpus, int eval_every, int n_eval_sets);

// Candidate ids whose encoded length is at least min_tokens, in input order.
// Throws ConfigError naming both numbers when fewer than k remain.
std::vector<int> build_pool(std::span<const Sequence> encoded, std::span<const int> candidates,
                            int min_tokens, int k);

struct CalibrationSet {
  std::vector<int> sample_ids;
  std::vector<Sequence> sequences;  // each truncated to the calibration length

  std::size_t size() const { return sequences.size(); }
  std::string fingerprint() const;
};

CalibrationSet make_calibration_set(std::span<const Sequence> encoded, std::span<const int> ids,
                                    int length);

struct EvalSet {
  std::string name;
  std::vector<Sequence> windows;  // consecutive non-overlapping chunks
};

// Concatenates the documents' tokens (up to max_tokens, 0 = unlimited) and
// chunks the stream into windows of window_len; a trailing chunk shorter
// than 2 tokens is dropped.
EvalSet make_eval_set(std::string name, std::span<const Sequence> encoded,
                      std::span<const int> ids, int window_len, int max_tokens = 0);

// exp of the token-weighted mean next-token NLL over all windows.
double perplexity(const TransformerLM& model, const EvalSet& eval,
                  const AdapterSet* adapters = nullptr);

// Arithmetic mean of per-set perplexities.
double objective_h(const TransformerLM& model, std::span<const EvalSet> evals);

}  // namespace adapruner
