#pragma once

#include <Eigen/Core>

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace adapruner {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;
using Sequence = std::vector<int>;

// Architecture of a pre-norm decoder-only transformer. Layers in
// [prune_begin, prune_end) are eligible for structured pruning; the range is
// half-open so that an empty range is expressible.
struct ModelConfig {
  int vocab_size = 2048;
  int d_model = 128;
  int n_layers = 4;
  int n_heads = 4;
  int d_ff = 512;
  int max_seq_len = 64;
  int prune_begin = 0;
  int prune_end = 4;
  std::uint64_t seed = 0;

  int head_dim() const { return d_model / n_heads; }
  // Throws ConfigError when a dimension or the prune range is invalid.
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

// The six projections that structured pruning can shrink. All weights are
// stored input-major: a projection computes y = x * W with W of shape
// [in x out].
enum class Projection { query, key, value, output, up, down };
inline constexpr std::array<Projection, 6> kProjections = {
    Projection::query, Projection::key, Projection::value,
    Projection::output, Projection::up, Projection::down};
const char* projection_name(Projection p);

struct LayerParams {
  Vector ln1_gain, ln1_bias;
  Matrix w_q, w_k, w_v;  // [d_model x heads*head_dim]
  Matrix w_o;            // [heads*head_dim x d_model]
  Vector ln2_gain, ln2_bias;
  Matrix w_up;    // [d_model x d_ff]
  Matrix w_down;  // [d_ff x d_model]

  Matrix& weight(Projection p);
  const Matrix& weight(Projection p) const;
};

// Mutable view of one parameter tensor, used for generic traversal
// (checkpointing, optimizers, finite differences).
struct TensorRef {
  std::string name;
  double* data;
  Eigen::Index rows;
  Eigen::Index cols;
  Eigen::Index size() const { return rows * cols; }
  std::span<double> values() const { return {data, static_cast<std::size_t>(size())}; }
};

struct Params {
  Matrix tok_emb;  // [vocab x d_model], tied with the output head
  Matrix pos_emb;  // [max_seq_len x d_model]
  std::vector<LayerParams> layers;
  Vector lnf_gain, lnf_bias;

  // Tensors in declaration order; this order defines the checkpoint layout.
  std::vector<TensorRef> tensors();
  std::vector<TensorRef> tensors() const;  // data pointers must not be written
  void set_zero();
  Params& operator+=(const Params& other);
  Params& operator*=(double factor);
};

Params zeros_like(const Params& params);

struct TransformerLM {
  ModelConfig config;
  Params params;

  int heads(int layer) const;
  int ff(int layer) const;
};

// Low-rank additive update y = x W + scale * (x A^T) B^T on one projection;
// A is [rank x in], B is [out x rank].
struct LowRankDelta {
  Matrix a;
  Matrix b;
  double scale = 1.0;
};

// Optional adapter per (layer, projection). The forward pass keeps the
// low-rank path separate from the base weight.
struct AdapterSet {
  std::vector<std::array<std::optional<LowRankDelta>, kProjections.size()>> layers;

  const LowRankDelta* find(int layer, Projection p) const;
  LowRankDelta* find(int layer, Projection p);
};

TransformerLM init_model(const ModelConfig& config);

// Logits for every position of a sequence, shape [len x vocab].
Matrix forward_logits(const TransformerLM& model, std::span<const int> tokens,
                      const AdapterSet* adapters = nullptr);

// Mean next-token cross-entropy over the len-1 predicted positions.
double sequence_loss(const TransformerLM& model, std::span<const int> tokens,
                     const AdapterSet* adapters = nullptr);

// Mean of sequence_loss over the batch.
double loss(const TransformerLM& model, std::span<const Sequence> batch);

// Sum of next-token negative log likelihoods and the number of predicted
// positions, for token-weighted perplexity.
struct NllSum {
  double total = 0.0;
  std::int64_t count = 0;
};
NllSum sequence_nll(const TransformerLM& model, std::span<const int> tokens,
                    const AdapterSet* adapters = nullptr);

struct GradientStore {
  Params batch;                     // d loss / d theta, 1/N averaged
  std::vector<Params> per_sample;   // d F(theta, x_i) / d theta, empty unless requested
};

GradientStore gradients(const TransformerLM& model, std::span<const Sequence> batch,
                        bool per_sample);

// Loss of one sequence plus reverse-mode accumulation: weight * dF/dtheta is
// added into base_grads (if non-null) and weight * dF/d(A,B) into
// adapter_grads (if non-null; must mirror the adapter layout).
double accumulate_gradients(const TransformerLM& model, std::span<const int> tokens,
                            double weight, Params* base_grads,
                            const AdapterSet* adapters = nullptr,
                            AdapterSet* adapter_grads = nullptr);

std::int64_t count_params(const TransformerLM& model, bool prunable_only = false);

// Throws ConfigError unless the batch is non-empty and every sequence has
// 2..max_seq_len tokens drawn from the vocabulary.
void validate_batch(const ModelConfig& config, std::span<const Sequence> batch);

}  // namespace adapruner
