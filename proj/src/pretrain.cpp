#include "hadapt/pretrain.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "hadapt/error.hpp"
#include "hadapt/ops.hpp"
#include "hadapt/optimizer.hpp"
#include "hadapt/rng.hpp"
#include "hadapt/tasks.hpp"

namespace hadapt {
namespace {

struct MlmBatch {
  Batch batch;
  std::vector<int> rows;     // flat (b * seq + s) positions with a target
  std::vector<int> targets;
};

MlmBatch make_mlm_batch(const Dataset& data, std::span<const std::size_t> idx) {
  MlmBatch out{make_batch(data, idx), {}, {}};
  for (std::size_t r = 0; r < idx.size(); ++r) {
    const auto& t = data.examples[idx[r]].mlm_targets;
    for (std::size_t s = 0; s < t.size(); ++s) {
      if (t[s] < 0) continue;
      out.rows.push_back(static_cast<int>(r * out.batch.seq + s));
      out.targets.push_back(t[s]);
    }
  }
  return out;
}

Tensor mlm_loss(Tape& tape, const Model& model, const Tensor& out_bias, const Tensor& ones, const MlmBatch& mb) {
  const std::size_t h = model.config.hidden;
  const Tensor seq = encode(tape, model, mb.batch);
  const Tensor flat = reshape(tape, seq, Shape{mb.batch.batch * mb.batch.seq, h});
  const Tensor picked = embedding(tape, flat, mb.rows, Shape{mb.rows.size()});
  const Tensor logits = matmul(tape, picked, model.params.tensor("embeddings.word"), true);
  return cross_entropy(tape, scale_shift_lastdim(tape, logits, ones, out_bias), mb.targets);
}

}  // namespace

PretrainResult pretrain(const ModelConfig& cfg, const PretrainConfig& pcfg, std::uint64_t seed) {
  if (pcfg.batch_size == 0) throw ConfigError("pretrain.batch_size must be >= 1");
  if (pcfg.corpus_size == 0) throw ConfigError("pretrain.corpus_size must be >= 1");
  PretrainResult result{build_model(cfg, seed), {}};
  Model& model = result.model;
  for (auto& p : model.params.entries()) p.info.trainable = p.info.tag != ModuleTag::POOLER && p.info.tag != ModuleTag::CLASSIFIER;
  model.params.prune_frozen_gradients(true);

  const Dataset corpus = gen_pretrain_corpus(seed, pcfg.corpus_size, cfg.max_seq_len);
  const Dataset held_out = gen_pretrain_corpus(seed ^ 0x9e3779b97f4a7c15ULL, std::max<std::size_t>(pcfg.eval_size, 1),
                                               cfg.max_seq_len);

  ParameterStore head;
  head.add(ParameterInfo{"mlm.bias", Shape{cfg.vocab_size}, ModuleTag::EMB, -1, true}, Tensor(Shape{cfg.vocab_size}));
  const Tensor ones(Shape{cfg.vocab_size}, 1.0);
  const Tensor& out_bias = head.tensor("mlm.bias");

  const auto eval_loss = [&] {
    double total = 0.0;
    std::size_t count = 0;
    std::vector<std::size_t> idx(held_out.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    for (std::size_t start = 0; start < idx.size(); start += 64) {
      const std::size_t end = std::min(idx.size(), start + 64);
      const MlmBatch mb = make_mlm_batch(held_out, std::span<const std::size_t>(idx.data() + start, end - start));
      if (mb.rows.empty()) continue;
      Tape tape = Tape::inference();
      total += mlm_loss(tape, model, out_bias, ones, mb).item() * static_cast<double>(mb.rows.size());
      count += mb.rows.size();
    }
    return count ? total / static_cast<double>(count) : 0.0;
  };

  result.loss_curve.push_back(eval_loss());
  AdamW opt(AdamWConfig{pcfg.lr, 0.9, 0.999, 1e-8, pcfg.weight_decay, false});
  AdamW head_opt(AdamWConfig{pcfg.lr, 0.9, 0.999, 1e-8, pcfg.weight_decay, false});
  Rng order = Rng::stream(seed, "order/pretrain");
  std::vector<std::size_t> idx(corpus.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  for (std::size_t epoch = 0; epoch < pcfg.epochs; ++epoch) {
    order.shuffle(idx);
    for (std::size_t start = 0; start < idx.size(); start += pcfg.batch_size) {
      const std::size_t end = std::min(idx.size(), start + pcfg.batch_size);
      const MlmBatch mb = make_mlm_batch(corpus, std::span<const std::size_t>(idx.data() + start, end - start));
      if (mb.rows.empty()) continue;
      Tape tape;
      const Tensor loss = mlm_loss(tape, model, out_bias, ones, mb);
      if (!std::isfinite(loss.item())) {
        throw NumericError("pretraining loss became non-finite at epoch " + std::to_string(epoch));
      }
      model.params.zero_grads();
      head.zero_grads();
      tape.backward(loss);
      opt.step(model.params);
      head_opt.step(head);
    }
    result.loss_curve.push_back(eval_loss());
  }
  model.params.prune_frozen_gradients(false);
  model.params.clear_grads();
  model.params.freeze_all();
  return result;
}

}  // namespace hadapt
