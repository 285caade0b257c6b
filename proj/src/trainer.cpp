#include "hadapt/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "hadapt/error.hpp"
#include "hadapt/metrics.hpp"
#include "hadapt/ops.hpp"
#include "hadapt/rng.hpp"

namespace hadapt {
namespace {

constexpr std::size_t kEvalChunk = 64;

std::vector<int> class_labels(const Dataset& data, std::span<const std::size_t> idx) {
  std::vector<int> y;
  y.reserve(idx.size());
  for (std::size_t i : idx) y.push_back(static_cast<int>(data.examples[i].label));
  return y;
}

std::vector<double> real_labels(const Dataset& data, std::span<const std::size_t> idx) {
  std::vector<double> y;
  y.reserve(idx.size());
  for (std::size_t i : idx) y.push_back(data.examples[i].label);
  return y;
}

Tensor task_loss(Tape& tape, const TaskSpec& spec, const Tensor& logits, const Dataset& data,
                 std::span<const std::size_t> idx) {
  if (spec.is_regression()) return mse(tape, logits, real_labels(data, idx));
  return cross_entropy(tape, logits, class_labels(data, idx));
}

std::vector<std::size_t> iota(std::size_t n) {
  std::vector<std::size_t> v(n);
  std::iota(v.begin(), v.end(), std::size_t{0});
  return v;
}

// Per-example predictions from a (n, out) logits tensor.
std::vector<double> decode_predictions(const Tensor& logits, bool regression) {
  const std::size_t n = logits.extent(0), c = logits.extent(1);
  std::vector<double> out(n);
  for (std::size_t r = 0; r < n; ++r) {
    const double* z = logits.values().data() + r * c;
    out[r] = regression ? z[0] : static_cast<double>(std::max_element(z, z + c) - z);
  }
  return out;
}

double metric_value(const TaskSpec& spec, const std::vector<double>& preds, const Dataset& data) {
  std::vector<double> labels;
  labels.reserve(data.size());
  for (const auto& ex : data.examples) labels.push_back(ex.label);
  switch (spec.metric) {
    case Metric::accuracy: return accuracy<double>(preds, labels);
    case Metric::mcc: {
      std::vector<int> p(preds.begin(), preds.end()), y(labels.begin(), labels.end());
      return mcc(p, y);
    }
    case Metric::pearson: return pearson<double>(preds, labels);
  }
  return 0.0;
}

void check_loss(const Tensor& loss, std::size_t epoch, std::size_t step) {
  if (!std::isfinite(loss.item())) {
    throw NumericError("training loss became non-finite at epoch " + std::to_string(epoch) + ", step " +
                       std::to_string(step));
  }
}

Tensor gather_rows(const Tensor& features, std::span<const std::size_t> idx) {
  const std::size_t h = features.extent(1);
  Tensor out(Shape{idx.size(), h});
  auto o = out.mutable_values();
  for (std::size_t r = 0; r < idx.size(); ++r) {
    std::copy_n(features.values().data() + idx[r] * h, h, o.data() + r * h);
  }
  return out;
}

// First-position encoder outputs for every example, computed in fixed chunks.
Tensor encode_first_positions(const Model& model, const Dataset& data) {
  const std::size_t h = model.config.hidden;
  Tensor out(Shape{data.size(), h});
  const auto all = iota(data.size());
  for (std::size_t start = 0; start < data.size(); start += kEvalChunk) {
    const std::size_t end = std::min(data.size(), start + kEvalChunk);
    std::span<const std::size_t> idx(all.data() + start, end - start);
    Tape tape = Tape::inference();
    const Tensor first = select_position(tape, encode(tape, model, make_batch(data, idx)), 0);
    std::copy(first.values().begin(), first.values().end(), out.mutable_values().begin() + static_cast<std::ptrdiff_t>(start * h));
  }
  return out;
}

void copy_head(Model& dst, const Model& src) {
  for (const auto& p : src.params.entries()) {
    if (p.info.tag != ModuleTag::POOLER && p.info.tag != ModuleTag::CLASSIFIER) continue;
    Parameter& d = dst.params.at(p.info.name);
    d.info.shape = p.info.shape;
    d.value = p.value.clone();
    d.value.set_requires_grad(true);
  }
  dst.config.num_labels = src.config.num_labels;
  dst.config.is_regression = src.config.is_regression;
}

void check_task(const Model& model, const TaskSpec& spec) {
  if (model.config.is_regression != spec.is_regression() ||
      (!spec.is_regression() && model.config.num_labels != spec.num_labels())) {
    throw ConfigError("model head (" + std::to_string(model.config.output_dim()) + " outputs) does not match task " +
                      spec.name);
  }
}

}  // namespace

ModuleSet ModuleSet::parse(std::string_view codes) {
  ModuleSet m;
  for (char c : codes) {
    switch (c) {
      case 'W': m.weight = true; break;
      case 'B': m.bias = true; break;
      case 'N': m.norm = true; break;
      case 'A': m.att_norm = true; break;
      case ',': case '+': case ' ': break;
      default: throw ConfigError("unknown module code '" + std::string(1, c) + "' (expected W, B, N, A)");
    }
  }
  if (m.empty()) throw ConfigError("empty module set");
  return m;
}

std::string ModuleSet::code() const {
  std::string out;
  const auto put = [&](bool on, const char* c) {
    if (!on) return;
    if (!out.empty()) out += '+';
    out += c;
  };
  put(weight, "W");
  put(bias, "B");
  put(norm, "N");
  put(att_norm, "A");
  return out;
}

std::string_view to_string(RegimeKind k) {
  switch (k) {
    case RegimeKind::full: return "full";
    case RegimeKind::classifier_only: return "classifier";
    case RegimeKind::hadamard: return "hadamard";
    case RegimeKind::bias_only: return "bias";
    case RegimeKind::custom: return "custom";
  }
  return "?";
}

RegimeKind parse_regime_kind(std::string_view s) {
  if (s == "full") return RegimeKind::full;
  if (s == "classifier" || s == "classifier_only") return RegimeKind::classifier_only;
  if (s == "hadamard") return RegimeKind::hadamard;
  if (s == "bias" || s == "bias_only") return RegimeKind::bias_only;
  if (s == "custom") return RegimeKind::custom;
  throw ConfigError("unknown regime '" + std::string(s) + "'");
}

ModuleSet TuningRegime::effective_modules() const {
  switch (kind) {
    case RegimeKind::hadamard: return ModuleSet{true, true, true, false};
    case RegimeKind::bias_only: return ModuleSet{false, true, false, false};
    case RegimeKind::custom: return modules;
    default: return {};
  }
}

std::string TuningRegime::name() const {
  std::string n(to_string(kind));
  if (kind == RegimeKind::custom) n += "{" + modules.code() + "}";
  if (unfrozen_layers) n += (bottom_layers ? "@bottom" : "@top") + std::to_string(*unfrozen_layers);
  return n;
}

bool regime_trains(const TuningRegime& regime, const ModelConfig& cfg, const ParameterInfo& info) {
  switch (regime.kind) {
    case RegimeKind::full: return true;
    case RegimeKind::classifier_only: return info.tag == ModuleTag::POOLER || info.tag == ModuleTag::CLASSIFIER;
    default: break;
  }
  if (info.layer < 0) return false;
  const std::size_t layer = static_cast<std::size_t>(info.layer);
  const std::size_t k = regime.unfrozen_layers.value_or(cfg.layers);
  const bool in_range = regime.bottom_layers ? layer < k : layer + k >= cfg.layers;
  if (!in_range) return false;
  const ModuleSet m = regime.effective_modules();
  switch (info.tag) {
    case ModuleTag::ADAPTER_W:
    case ModuleTag::ADAPTER_C2:
    case ModuleTag::ADAPTER_C3: return m.weight;
    case ModuleTag::ADAPTER_B: return m.bias;
    case ModuleTag::FFN_NORM: return m.norm;
    case ModuleTag::ATT_NORM: return m.att_norm;
    default: return false;
  }
}

std::vector<ParameterInfo> apply_regime(std::vector<ParameterInfo> layout, const ModelConfig& cfg,
                                        const TuningRegime& regime) {
  if (regime.unfrozen_layers && (*regime.unfrozen_layers < 1 || *regime.unfrozen_layers > cfg.layers)) {
    throw UsageError("regime " + regime.name() + ": unfrozen layer count must be in [1, " + std::to_string(cfg.layers) + "]");
  }
  if (regime.kind == RegimeKind::custom && regime.modules.empty()) throw UsageError("custom regime with empty module set");
  for (auto& info : layout) info.trainable = regime_trains(regime, cfg, info);
  return layout;
}

void apply_regime(Model& model, const TuningRegime& regime) {
  if (regime.effective_modules().needs_adapters() && !has_adapters(model)) {
    throw UsageError("regime " + regime.name() + " trains adapters but none are injected");
  }
  const auto flags = apply_regime(model.params.describe(), model.config, regime);
  for (std::size_t i = 0; i < flags.size(); ++i) model.params.entries()[i].info.trainable = flags[i].trainable;
}

std::vector<double> predict(const Model& model, const Dataset& data) {
  std::vector<double> out;
  out.reserve(data.size());
  const auto all = iota(data.size());
  for (std::size_t start = 0; start < data.size(); start += kEvalChunk) {
    const std::size_t end = std::min(data.size(), start + kEvalChunk);
    std::span<const std::size_t> idx(all.data() + start, end - start);
    Tape tape = Tape::inference();
    const auto preds = decode_predictions(forward(tape, model, make_batch(data, idx)).logits, model.config.is_regression);
    out.insert(out.end(), preds.begin(), preds.end());
  }
  return out;
}

EvalResult evaluate(const Model& model, const TaskSpec& spec, const Dataset& data) {
  if (data.size() == 0) throw ConfigError("evaluate: empty evaluation split for " + spec.name);
  check_task(model, spec);
  std::vector<double> preds;
  preds.reserve(data.size());
  double loss_sum = 0.0;
  const auto all = iota(data.size());
  for (std::size_t start = 0; start < data.size(); start += kEvalChunk) {
    const std::size_t end = std::min(data.size(), start + kEvalChunk);
    std::span<const std::size_t> idx(all.data() + start, end - start);
    Tape tape = Tape::inference();
    const Tensor logits = forward(tape, model, make_batch(data, idx)).logits;
    loss_sum += task_loss(tape, spec, logits, data, idx).item() * static_cast<double>(idx.size());
    const auto p = decode_predictions(logits, spec.is_regression());
    preds.insert(preds.end(), p.begin(), p.end());
  }
  return EvalResult{spec.metric, metric_value(spec, preds, data), loss_sum / static_cast<double>(data.size())};
}

std::vector<EpochLog> train(Model& model, const TaskData& task, double lr, const TrainConfig& cfg, std::uint64_t seed,
                            const TrainHooks& hooks) {
  check_task(model, task.spec);
  if (cfg.batch_size == 0) throw ConfigError("batch_size must be >= 1");
  AdamW opt(cfg.adamw(lr));
  model.params.prune_frozen_gradients(cfg.prune_frozen_gradients);
  Rng order = Rng::stream(seed, "order");
  auto idx = iota(task.train.size());
  std::vector<EpochLog> log;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    order.shuffle(idx);
    double loss_sum = 0.0;
    std::size_t steps = 0;
    for (std::size_t start = 0; start < idx.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(idx.size(), start + cfg.batch_size);
      std::span<const std::size_t> batch_idx(idx.data() + start, end - start);
      Tape tape;
      const Tensor logits = forward(tape, model, make_batch(task.train, batch_idx)).logits;
      const Tensor loss = task_loss(tape, task.spec, logits, task.train, batch_idx);
      check_loss(loss, epoch, steps);
      model.params.zero_grads();
      tape.backward(loss);
      if (hooks.after_backward) hooks.after_backward(epoch, steps, model);
      opt.step(model.params);
      loss_sum += loss.item();
      ++steps;
    }
    log.push_back(EpochLog{steps ? loss_sum / static_cast<double>(steps) : 0.0,
                           evaluate(model, task.spec, task.dev).value});
  }
  model.params.prune_frozen_gradients(false);
  model.params.clear_grads();
  return log;
}

Model train_stage1_classifier(const Model& backbone, const TaskData& task, const TrainConfig& cfg, std::uint64_t seed,
                              std::vector<EpochLog>* log) {
  if (cfg.batch_size == 0) throw ConfigError("batch_size must be >= 1");
  Model model = backbone.clone();
  reset_head(model, task.spec.num_labels(), task.spec.is_regression(), seed);
  apply_regime(model, TuningRegime::classifier_only());
  model.params.prune_frozen_gradients(true);

  // The encoder is frozen, so its first-position outputs are fixed inputs to the head.
  const Tensor train_features = encode_first_positions(model, task.train);
  const Tensor dev_features = encode_first_positions(model, task.dev);

  AdamW opt(cfg.adamw(cfg.stage1_lr));
  Rng order = Rng::stream(seed, "order/stage1");
  auto idx = iota(task.train.size());
  const auto dev_idx = iota(task.dev.size());
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    order.shuffle(idx);
    double loss_sum = 0.0;
    std::size_t steps = 0;
    for (std::size_t start = 0; start < idx.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(idx.size(), start + cfg.batch_size);
      std::span<const std::size_t> batch_idx(idx.data() + start, end - start);
      Tape tape;
      const Tensor logits = classify(tape, model, gather_rows(train_features, batch_idx));
      const Tensor loss = task_loss(tape, task.spec, logits, task.train, batch_idx);
      check_loss(loss, epoch, steps);
      model.params.zero_grads();
      tape.backward(loss);
      opt.step(model.params);
      loss_sum += loss.item();
      ++steps;
    }
    if (log) {
      Tape tape = Tape::inference();
      const Tensor logits = classify(tape, model, dev_features);
      log->push_back(EpochLog{steps ? loss_sum / static_cast<double>(steps) : 0.0,
                              metric_value(task.spec, decode_predictions(logits, task.spec.is_regression()), task.dev)});
    }
  }
  model.params.prune_frozen_gradients(false);
  model.params.clear_grads();
  return model;
}

TuneResult tune(const Model& backbone, const TuningRegime& regime, const TaskData& task, const TrainConfig& cfg,
                std::uint64_t seed, const Model* stage1) {
  TuneResult result;
  std::vector<EpochLog> log;
  Model model;
  switch (regime.kind) {
    case RegimeKind::full: {
      model = backbone.clone();
      reset_head(model, task.spec.num_labels(), task.spec.is_regression(), seed);
      apply_regime(model, regime);
      log = train(model, task, cfg.full_lr, cfg, seed);
      break;
    }
    case RegimeKind::classifier_only: {
      model = stage1 ? stage1->clone() : train_stage1_classifier(backbone, task, cfg, seed, &log);
      apply_regime(model, regime);
      break;
    }
    default: {
      model = backbone.clone();
      if (cfg.joint) {
        reset_head(model, task.spec.num_labels(), task.spec.is_regression(), seed);
      } else if (stage1) {
        copy_head(model, *stage1);
      } else {
        copy_head(model, train_stage1_classifier(backbone, task, cfg, seed));
      }
      if (!has_adapters(model)) inject_adapters(model, 1);
      apply_regime(model, regime);
      if (cfg.joint) {
        for (auto& p : model.params.entries()) {
          if (p.info.tag == ModuleTag::POOLER || p.info.tag == ModuleTag::CLASSIFIER) p.info.trainable = true;
        }
      }
      log = train(model, task, cfg.stage2_lr, cfg, seed);
      break;
    }
  }
  result.report.task = task.spec.name;
  result.report.regime = regime.name();
  result.report.seed = seed;
  result.report.data_seed = task.spec.seed;
  result.report.per_epoch = std::move(log);
  result.report.final_metrics = evaluate(model, task.spec, task.dev);
  result.report.accounting = count_parameters(model.params);
  result.report.trainable_tags = trainable_tags(model.params);
  result.model = std::move(model);
  return result;
}

std::vector<std::string> trainable_tags(const ParameterStore& store) {
  std::set<ModuleTag> tags;
  for (const auto& p : store.entries())
    if (p.info.trainable) tags.insert(p.info.tag);
  std::vector<std::string> out;
  for (ModuleTag t : tags) out.emplace_back(to_string(t));
  return out;
}

}  // namespace hadapt
