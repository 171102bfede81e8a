#include "adapruner/lora.hpp"

#include "adapruner/checkpoint.hpp"
#include "adapruner/common.hpp"
#include "adapruner/train.hpp"

#include <cmath>
#include <numeric>

namespace adapruner {

namespace {

bool targeted(Projection p, const LoraTargets& t) {
  const bool attention = p == Projection::query || p == Projection::key || p == Projection::value ||
                         p == Projection::output;
  return attention ? t.attention : t.mlp;
}

std::string adapter_name(int layer, Projection p) {
  return "layers." + std::to_string(layer) + "." + projection_name(p);
}

}  // namespace

LoraModel LoraModel::attach(TransformerLM base, int rank, LoraTargets targets, std::uint64_t seed) {
  if (rank < 1) throw ConfigError("LoRA rank must be >= 1");
  Rng rng(seed);
  AdapterSet adapters;
  adapters.layers.resize(base.params.layers.size());
  for (std::size_t l = 0; l < base.params.layers.size(); ++l) {
    for (Projection p : kProjections) {
      if (!targeted(p, targets)) continue;
      const Matrix& w = base.params.layers[l].weight(p);
      const auto in_dim = w.rows();
      const auto out_dim = w.cols();
      if (in_dim == 0 || out_dim == 0) continue;
      if (rank > std::min(in_dim, out_dim)) {
        throw ConfigError("LoRA rank " + std::to_string(rank) + " exceeds min dimension " +
                          std::to_string(std::min(in_dim, out_dim)) + " of " +
                          adapter_name(static_cast<int>(l), p));
      }
      LowRankDelta delta;
      const double bound = 1.0 / std::sqrt(static_cast<double>(in_dim));
      delta.a.resize(rank, in_dim);
      for (Eigen::Index i = 0; i < delta.a.size(); ++i) delta.a.data()[i] = rng.uniform(-bound, bound);
      delta.b = Matrix::Zero(out_dim, rank);
      delta.scale = 1.0 / static_cast<double>(rank);
      adapters.layers[l][static_cast<std::size_t>(p)] = std::move(delta);
    }
  }
  return LoraModel(std::move(base), std::move(adapters), rank);
}

Matrix LoraModel::logits(std::span<const int> tokens) const {
  if (merged_) throw RuntimeError("adapter already merged");
  return forward_logits(base_, tokens, &adapters_);
}

double LoraModel::perplexity(const EvalSet& eval) const {
  if (merged_) throw RuntimeError("adapter already merged");
  return adapruner::perplexity(base_, eval, &adapters_);
}

TransformerLM LoraModel::merge() {
  if (merged_) throw RuntimeError("adapter already merged; merge() consumes it");
  TransformerLM out = base_;
  for (std::size_t l = 0; l < adapters_.layers.size(); ++l) {
    for (Projection p : kProjections) {
      const auto& slot = adapters_.layers[l][static_cast<std::size_t>(p)];
      if (!slot) continue;
      // W is stored [in x out]; the update B A is [out x in].
      out.params.layers[l].weight(p) += slot->scale * (slot->b * slot->a).transpose();
    }
  }
  merged_ = true;
  adapters_.layers.clear();
  return out;
}

namespace {

AdapterSet zero_adapter_grads(const AdapterSet& adapters) {
  AdapterSet grads = adapters;
  for (auto& layer : grads.layers) {
    for (auto& slot : layer) {
      if (!slot) continue;
      slot->a.setZero();
      slot->b.setZero();
    }
  }
  return grads;
}

}  // namespace

LoraGradients lora_gradients(const LoraModel& model, std::span<const Sequence> batch) {
  if (model.merged()) throw RuntimeError("adapter already merged");
  validate_batch(model.base().config, batch);
  LoraGradients out{zero_adapter_grads(model.adapters()), zeros_like(model.base().params), 0.0};
  const double w = 1.0 / static_cast<double>(batch.size());
  for (const auto& seq : batch) {
    out.loss += w * accumulate_gradients(model.base(), seq, w, nullptr, &model.adapters(), &out.adapters);
  }
  return out;
}

std::vector<std::span<double>> adapter_buffers(AdapterSet& adapters) {
  std::vector<std::span<double>> out;
  for (auto& layer : adapters.layers) {
    for (auto& slot : layer) {
      if (!slot) continue;
      out.emplace_back(slot->a.data(), static_cast<std::size_t>(slot->a.size()));
      out.emplace_back(slot->b.data(), static_cast<std::size_t>(slot->b.size()));
    }
  }
  return out;
}

FinetuneResult finetune(LoraModel& model, std::span<const Sequence> train,
                        const FinetuneOptions& options) {
  if (model.merged()) throw RuntimeError("adapter already merged");
  if (train.empty()) throw ConfigError("no fine-tuning data");
  if (options.epochs < 0 || options.batch_size < 1) throw ConfigError("invalid fine-tuning options");
  validate_batch(model.base().config, train);

  Adam adam(adapter_buffers(model.adapters()), {.lr = options.lr});
  Rng rng(options.seed);
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);

  FinetuneResult result;
  double initial = 0.0;
  for (int epoch = 0; epoch < options.epochs; ++epoch) {
    rng.shuffle(order);
    double epoch_total = 0.0;
    int epoch_steps = 0;
    for (std::size_t pos = 0; pos < order.size(); pos += options.batch_size) {
      std::vector<Sequence> batch;
      for (std::size_t i = pos; i < std::min(order.size(), pos + options.batch_size); ++i) {
        batch.push_back(train[order[i]]);
      }
      LoraGradients grads = lora_gradients(model, batch);
      if (!std::isfinite(grads.loss)) {
        throw RuntimeError("fine-tuning loss became non-finite at step " +
                           std::to_string(result.step_losses.size()));
      }
      if (result.step_losses.empty()) initial = grads.loss;
      if (grads.loss > options.divergence_factor * initial) {
        throw RuntimeError("fine-tuning diverged at step " + std::to_string(result.step_losses.size()) +
                           ": loss " + format_double(grads.loss) + " exceeds " +
                           format_double(options.divergence_factor) + "x the initial loss " +
                           format_double(initial));
      }
      result.step_losses.push_back(grads.loss);
      epoch_total += grads.loss;
      ++epoch_steps;
      auto buffers = adapter_buffers(grads.adapters);
      adam.step({buffers.begin(), buffers.end()});
    }
    result.epoch_losses.push_back(epoch_total / std::max(1, epoch_steps));
  }
  return result;
}

void save_adapter(const LoraModel& model, const std::filesystem::path& path) {
  if (model.merged()) throw RuntimeError("adapter already merged");
  ByteWriter w;
  w.magic("ADLR");
  w.u32(1);
  w.i64(model.rank());
  std::int64_t count = 0;
  for (const auto& layer : model.adapters().layers) {
    for (const auto& slot : layer) count += slot ? 1 : 0;
  }
  w.i64(count);
  for (std::size_t l = 0; l < model.adapters().layers.size(); ++l) {
    for (Projection p : kProjections) {
      const auto& slot = model.adapters().layers[l][static_cast<std::size_t>(p)];
      if (!slot) continue;
      w.str(adapter_name(static_cast<int>(l), p));
      w.f64(slot->scale);
      for (const Matrix* m : {&slot->a, &slot->b}) {
        w.i64(m->rows());
        w.i64(m->cols());
        w.f64s({m->data(), static_cast<std::size_t>(m->size())});
      }
    }
  }
  write_file_bytes(path, w.bytes());
}

void load_adapter(LoraModel& model, const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  ByteReader r(bytes);
  r.expect_magic("ADLR");
  if (r.u32() != 1) throw ConfigError("unsupported adapter version");
  if (r.i64() != model.rank()) throw ConfigError("adapter rank differs from the attached model");
  const std::int64_t count = r.i64();
  std::int64_t expected = 0;
  for (std::size_t l = 0; l < model.adapters().layers.size(); ++l) {
    for (Projection p : kProjections) {
      auto& slot = model.adapters().layers[l][static_cast<std::size_t>(p)];
      if (!slot) continue;
      ++expected;
      if (r.str() != adapter_name(static_cast<int>(l), p)) throw ConfigError("adapter target manifest mismatch");
      slot->scale = r.f64();
      for (Matrix* m : {&slot->a, &slot->b}) {
        if (r.i64() != m->rows() || r.i64() != m->cols()) throw ConfigError("adapter tensor shape mismatch");
        r.f64s({m->data(), static_cast<std::size_t>(m->size())});
      }
    }
  }
  if (count != expected || !r.done()) throw ConfigError("adapter target count mismatch");
}

}  // namespace adapruner
