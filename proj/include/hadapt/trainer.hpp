#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "hadapt/model.hpp"
#include "hadapt/optimizer.hpp"
#include "hadapt/tasks.hpp"

namespace hadapt {

/// Subset of the ablation modules: W adapter weight, B adapter bias,
/// N norm after the feed-forward block, A norm after attention.
struct ModuleSet {
  bool weight = false;
  bool bias = false;
  bool norm = false;
  bool att_norm = false;

  static ModuleSet parse(std::string_view codes);  // e.g. "B,N" or "W+B+N"
  std::string code() const;                        // canonical "W+B+N" order
  bool empty() const { return !weight && !bias && !norm && !att_norm; }
  bool needs_adapters() const { return weight || bias; }
  bool operator==(const ModuleSet&) const = default;
};

enum class RegimeKind { full, classifier_only, hadamard, bias_only, custom };

std::string_view to_string(RegimeKind k);
RegimeKind parse_regime_kind(std::string_view s);

/// Which tensors train. Non-full regimes never unfreeze embeddings,
/// attention or feed-forward weights; hadamard is custom{W,B,N} on all layers.
struct TuningRegime {
  RegimeKind kind = RegimeKind::hadamard;
  ModuleSet modules;                          // used by custom
  std::optional<std::size_t> unfrozen_layers; // all layers when unset
  bool bottom_layers = false;                 // unfreeze the first k layers instead of the last k

  static TuningRegime full() { return {RegimeKind::full, {}, {}, false}; }
  static TuningRegime classifier_only() { return {RegimeKind::classifier_only, {}, {}, false}; }
  static TuningRegime hadamard(std::optional<std::size_t> layers = {}) { return {RegimeKind::hadamard, {}, layers, false}; }
  static TuningRegime bias_only() { return {RegimeKind::bias_only, {}, {}, false}; }
  static TuningRegime custom(ModuleSet m, std::optional<std::size_t> layers = {}) {
    return {RegimeKind::custom, m, layers, false};
  }

  ModuleSet effective_modules() const;
  std::string name() const;
};

/// True when `regime` marks `info` trainable for a model of shape `cfg`.
bool regime_trains(const TuningRegime& regime, const ModelConfig& cfg, const ParameterInfo& info);

/// Sets the freeze mask of `model`. Throws UsageError when the regime needs
/// adapters that are not injected or asks for more layers than exist.
void apply_regime(Model& model, const TuningRegime& regime);
std::vector<ParameterInfo> apply_regime(std::vector<ParameterInfo> layout, const ModelConfig& cfg,
                                        const TuningRegime& regime);

struct TrainConfig {
  double stage1_lr = 2e-3;
  double stage2_lr = 3e-3;
  double full_lr = 3e-5;
  std::size_t epochs = 20;
  std::size_t batch_size = 16;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  bool decay_vectors = false;
  bool joint = false;               // train head together with the regime instead of two stages
  bool prune_frozen_gradients = true;

  AdamWConfig adamw(double lr) const { return {lr, beta1, beta2, eps, weight_decay, decay_vectors}; }
  bool operator==(const TrainConfig&) const = default;
};

struct EvalResult {
  Metric metric = Metric::accuracy;
  double value = 0.0;
  double loss = 0.0;
};

struct EpochLog {
  double loss = 0.0;    // mean training loss over the epoch's steps
  double metric = 0.0;  // dev metric after the epoch
};

struct RunReport {
  std::string task;
  std::string regime;
  std::uint64_t seed = 0;
  std::uint64_t data_seed = 0;
  std::vector<EpochLog> per_epoch;
  EvalResult final_metrics;
  ParameterAccounting accounting;
  std::vector<std::string> trainable_tags;
};

/// Dev-split evaluation; no parameter changes. Throws on an empty split.
EvalResult evaluate(const Model& model, const TaskSpec& spec, const Dataset& data);

/// Predicted class (argmax, lowest index on ties) or regression value per example.
std::vector<double> predict(const Model& model, const Dataset& data);

struct TrainHooks {
  // Called after backward and before the optimizer step.
  std::function<void(std::size_t epoch, std::size_t step, const Model& model)> after_backward;
};

/// Trains the currently trainable tensors of `model` with AdamW.
std::vector<EpochLog> train(Model& model, const TaskData& task, double lr, const TrainConfig& cfg, std::uint64_t seed,
                            const TrainHooks& hooks = {});

/// Stage 1: pooler and classifier only, on a frozen copy of `backbone`
/// whose head is reinitialized for the task. Backbone tensors are untouched.
Model train_stage1_classifier(const Model& backbone, const TaskData& task, const TrainConfig& cfg, std::uint64_t seed,
                              std::vector<EpochLog>* log = nullptr);

struct TuneResult {
  Model model;
  RunReport report;
};

/// Runs one regime end to end. Non-full regimes reuse `stage1` when given
/// (otherwise train it first), reload its pooler and classifier, inject
/// identity adapters and train the regime's tensor set at stage2_lr.
TuneResult tune(const Model& backbone, const TuningRegime& regime, const TaskData& task, const TrainConfig& cfg,
                std::uint64_t seed, const Model* stage1 = nullptr);

std::vector<std::string> trainable_tags(const ParameterStore& store);

}  // namespace hadapt
