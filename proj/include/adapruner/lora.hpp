#pragma once

#include "adapruner/data.hpp"
#include "adapruner/model.hpp"

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace adapruner {

struct LoraTargets {
  bool attention = true;  // W_Q, W_K, W_V, W_O
  bool mlp = true;        // W_up, W_down
};

// A frozen base model plus trainable low-rank factors per target matrix:
// y = x W + (1/r) * B (A x), with B starting at zero. Matrices with a zero
// dimension (fully pruned blocks) carry no adapter.
class LoraModel {
 public:
  static LoraModel attach(TransformerLM base, int rank, LoraTargets targets, std::uint64_t seed);

  const TransformerLM& base() const { return base_; }
  const AdapterSet& adapters() const { return adapters_; }
  AdapterSet& adapters() { return adapters_; }
  int rank() const { return rank_; }
  bool merged() const { return merged_; }

  Matrix logits(std::span<const int> tokens) const;
  double perplexity(const EvalSet& eval) const;

  // Folds scale * B A into the base weights and consumes the adapter; a
  // second call throws RuntimeError.
  TransformerLM merge();

 private:
  LoraModel(TransformerLM base, AdapterSet adapters, int rank)
      : base_(std::move(base)), adapters_(std::move(adapters)), rank_(rank) {}

  TransformerLM base_;
  AdapterSet adapters_;
  int rank_;
  bool merged_ = false;
};

// Gradients during fine-tuning: only adapter factors receive gradient; the
// frozen base entries stay exactly zero.
struct LoraGradients {
  AdapterSet adapters;
  Params base;
  double loss = 0.0;
};
LoraGradients lora_gradients(const LoraModel& model, std::span<const Sequence> batch);

// Adapter buffers in a stable order (layer, projection, A then B).
std::vector<std::span<double>> adapter_buffers(AdapterSet& adapters);

struct FinetuneOptions {
  int epochs = 2;
  double lr = 1e-4;
  int batch_size = 8;
  std::uint64_t seed = 0;
  double divergence_factor = 10.0;
};

struct FinetuneResult {
  std::vector<double> step_losses;
  std::vector<double> epoch_losses;  // mean step loss per epoch
};

// Adam on the adapter factors only. Throws RuntimeError when a step loss
// exceeds divergence_factor times the first step's loss.
FinetuneResult finetune(LoraModel& model, std::span<const Sequence> train,
                        const FinetuneOptions& options);

// "ADLR" container: version, rank, then per adapted matrix its name and the
// A and B tensors.
void save_adapter(const LoraModel& model, const std::filesystem::path& path);
// Restores factors onto an attach()ed model with the same targets and rank.
void load_adapter(LoraModel& model, const std::filesystem::path& path);

}  // namespace adapruner
