#include "hadapt/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "hadapt/adapter.hpp"
#include "hadapt/error.hpp"
#include "hadapt/ops.hpp"
#include "hadapt/rng.hpp"

namespace hadapt {
namespace {

constexpr std::pair<ModuleTag, std::string_view> kTagNames[] = {
    {ModuleTag::EMB, "EMB"},
    {ModuleTag::ATT, "ATT"},
    {ModuleTag::ATT_PROJ, "ATT_PROJ"},
    {ModuleTag::ATT_NORM, "ATT_NORM"},
    {ModuleTag::FFN, "FFN"},
    {ModuleTag::FFN_NORM, "FFN_NORM"},
    {ModuleTag::ADAPTER_W, "ADAPTER_W"},
    {ModuleTag::ADAPTER_B, "ADAPTER_B"},
    {ModuleTag::ADAPTER_C2, "ADAPTER_C2"},
    {ModuleTag::ADAPTER_C3, "ADAPTER_C3"},
    {ModuleTag::POOLER, "POOLER"},
    {ModuleTag::CLASSIFIER, "CLASSIFIER"},
};

std::string layer_prefix(std::size_t l) { return "layer." + std::to_string(l) + "."; }

// Adapter coefficient names, index = polynomial order of the coefficient.
const char* const kAdapterNames[] = {"adapter.bias", "adapter.weight", "adapter.c2", "adapter.c3"};
constexpr ModuleTag kAdapterTags[] = {ModuleTag::ADAPTER_B, ModuleTag::ADAPTER_W, ModuleTag::ADAPTER_C2,
                                      ModuleTag::ADAPTER_C3};

void push(std::vector<ParameterInfo>& out, std::string name, Shape shape, ModuleTag tag, int layer = -1) {
  out.push_back(ParameterInfo{std::move(name), std::move(shape), tag, layer, false});
}

void push_affine(std::vector<ParameterInfo>& out, const std::string& base, std::size_t in, std::size_t outd,
                 ModuleTag tag, int layer = -1) {
  push(out, base + ".weight", {in, outd}, tag, layer);
  push(out, base + ".bias", {outd}, tag, layer);
}

void push_norm(std::vector<ParameterInfo>& out, const std::string& base, std::size_t h, ModuleTag tag,
               int layer = -1) {
  push(out, base + ".gamma", {h}, tag, layer);
  push(out, base + ".beta", {h}, tag, layer);
}

std::vector<ParameterInfo> head_layout(const ModelConfig& cfg) {
  std::vector<ParameterInfo> out;
  push_affine(out, "pooler", cfg.hidden, cfg.hidden, ModuleTag::POOLER);
  push_affine(out, "classifier", cfg.hidden, cfg.output_dim(), ModuleTag::CLASSIFIER);
  return out;
}

std::vector<ParameterInfo> adapter_layout(const ModelConfig& cfg, int order) {
  std::vector<ParameterInfo> out;
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    for (int m = 0; m <= order; ++m) {
      push(out, layer_prefix(l) + kAdapterNames[m], {cfg.hidden}, kAdapterTags[m], static_cast<int>(l));
    }
  }
  return out;
}

Tensor init_tensor(const ParameterInfo& info, Rng& rng) {
  Tensor t(info.shape);
  auto v = t.mutable_values();
  const auto ends_with = [&](std::string_view suffix) {
    return info.name.size() >= suffix.size() && info.name.compare(info.name.size() - suffix.size(), suffix.size(), suffix) == 0;
  };
  if (ends_with(".gamma")) {
    std::fill(v.begin(), v.end(), 1.0);
  } else if (ends_with(".bias") || ends_with(".beta")) {
    // zeros
  } else {
    for (double& x : v) x = rng.truncated_normal(0.02);
  }
  return t;
}

std::optional<PolyAdapter> layer_adapter(const Model& model, std::size_t l) {
  const std::string prefix = layer_prefix(l);
  if (!model.params.contains(prefix + kAdapterNames[0])) return std::nullopt;
  PolyAdapter p;
  for (int m = 0; m <= 3; ++m) {
    const std::string name = prefix + kAdapterNames[m];
    if (!model.params.contains(name)) break;
    p.coeffs.push_back(model.params.tensor(name));
  }
  return p;
}

}  // namespace

std::string_view to_string(AdapterPlacement p) {
  switch (p) {
    case AdapterPlacement::none: return "none";
    case AdapterPlacement::pre_projection: return "pre_projection";
    case AdapterPlacement::post_projection: return "post_projection";
  }
  return "none";
}

AdapterPlacement parse_adapter_placement(std::string_view s) {
  if (s == "none") return AdapterPlacement::none;
  if (s == "pre_projection") return AdapterPlacement::pre_projection;
  if (s == "post_projection") return AdapterPlacement::post_projection;
  throw ConfigError("unknown adapter_placement '" + std::string(s) + "'");
}

std::string_view to_string(ModuleTag tag) {
  for (const auto& [t, name] : kTagNames)
    if (t == tag) return name;
  return "?";
}

ModuleTag parse_module_tag(std::string_view s) {
  for (const auto& [t, name] : kTagNames)
    if (name == s) return t;
  throw FormatError("unknown module tag '" + std::string(s) + "'");
}

bool is_adapter_tag(ModuleTag tag) {
  return tag == ModuleTag::ADAPTER_W || tag == ModuleTag::ADAPTER_B || tag == ModuleTag::ADAPTER_C2 ||
         tag == ModuleTag::ADAPTER_C3;
}

void ModelConfig::validate() const {
  if (vocab_size < 1) throw ConfigError("vocab_size must be >= 1");
  if (hidden < 1) throw ConfigError("hidden must be >= 1");
  if (layers < 1) throw ConfigError("layers must be >= 1");
  if (heads < 1 || hidden % heads != 0) throw ConfigError("hidden must be divisible by heads");
  if (ff_dim < 1) throw ConfigError("ff_dim must be >= 1");
  if (max_seq_len < 1) throw ConfigError("max_seq_len must be >= 1");
  if (type_vocab < 1) throw ConfigError("type_vocab must be >= 1");
  if (!is_regression && num_labels < 2) throw ConfigError("num_labels must be >= 2 for classification");
  if (!(layer_norm_eps >= 0)) throw ConfigError("layer_norm_eps must be >= 0");
}

ModelConfig ModelConfig::bert_base() {
  ModelConfig c;
  c.vocab_size = 30522;
  c.hidden = 768;
  c.layers = 12;
  c.heads = 12;
  c.ff_dim = 3072;
  c.max_seq_len = 512;
  c.num_labels = 2;
  return c;
}

ModelConfig ModelConfig::bert_large() {
  ModelConfig c = bert_base();
  c.hidden = 1024;
  c.layers = 24;
  c.heads = 16;
  c.ff_dim = 4096;
  return c;
}

std::vector<ParameterInfo> parameter_layout(const ModelConfig& cfg, int adapter_order) {
  cfg.validate();
  const std::size_t h = cfg.hidden;
  std::vector<ParameterInfo> out;
  push(out, "embeddings.word", {cfg.vocab_size, h}, ModuleTag::EMB);
  push(out, "embeddings.position", {cfg.max_seq_len, h}, ModuleTag::EMB);
  push(out, "embeddings.segment", {cfg.type_vocab, h}, ModuleTag::EMB);
  push_norm(out, "embeddings.norm", h, ModuleTag::EMB);
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    const std::string p = layer_prefix(l);
    const int li = static_cast<int>(l);
    push_affine(out, p + "attention.query", h, h, ModuleTag::ATT, li);
    push_affine(out, p + "attention.key", h, h, ModuleTag::ATT, li);
    push_affine(out, p + "attention.value", h, h, ModuleTag::ATT, li);
    push_affine(out, p + "attention.output", h, h, ModuleTag::ATT_PROJ, li);
    push_norm(out, p + "attention.norm", h, ModuleTag::ATT_NORM, li);
    push_affine(out, p + "ffn.intermediate", h, cfg.ff_dim, ModuleTag::FFN, li);
    push_affine(out, p + "ffn.output", cfg.ff_dim, h, ModuleTag::FFN, li);
    push_norm(out, p + "ffn.norm", h, ModuleTag::FFN_NORM, li);
  }
  for (auto& info : head_layout(cfg)) out.push_back(std::move(info));
  if (adapter_order > 0) {
    for (auto& info : adapter_layout(cfg, adapter_order)) out.push_back(std::move(info));
  }
  return out;
}

Parameter& ParameterStore::add(ParameterInfo info, Tensor value) {
  if (index_.contains(info.name)) throw UsageError("duplicate parameter name '" + info.name + "'");
  if (value.shape() != info.shape) {
    throw ShapeError("parameter '" + info.name + "' declared " + to_string(info.shape) + " but holds " +
                     to_string(value.shape()));
  }
  value.set_requires_grad(true);
  index_.emplace(info.name, entries_.size());
  entries_.push_back(Parameter{std::move(info), std::move(value)});
  return entries_.back();
}

bool ParameterStore::contains(std::string_view name) const { return index_.contains(std::string(name)); }

Parameter& ParameterStore::at(std::string_view name) {
  auto it = index_.find(std::string(name));
  if (it == index_.end()) throw UsageError("no parameter named '" + std::string(name) + "'");
  return entries_[it->second];
}

const Parameter& ParameterStore::at(std::string_view name) const {
  return const_cast<ParameterStore*>(this)->at(name);
}

std::vector<ParameterInfo> ParameterStore::describe() const {
  std::vector<ParameterInfo> out;
  out.reserve(entries_.size());
  for (const auto& p : entries_) out.push_back(p.info);
  return out;
}

void ParameterStore::freeze_all() {
  for (auto& p : entries_) p.info.trainable = false;
}

void ParameterStore::zero_grads() {
  for (auto& p : entries_) p.value.zero_grad();
}

void ParameterStore::clear_grads() {
  for (auto& p : entries_) p.value.clear_grad();
}

void ParameterStore::prune_frozen_gradients(bool on) {
  for (auto& p : entries_) p.value.set_requires_grad(!on || p.info.trainable);
}

ParameterStore ParameterStore::clone() const {
  ParameterStore out;
  for (const auto& p : entries_) out.add(p.info, p.value.clone());
  return out;
}

ParameterAccounting count_parameters(const std::vector<ParameterInfo>& params) {
  ParameterAccounting acc;
  for (const auto& p : params) {
    const std::size_t n = p.size();
    acc.total += n;
    acc.by_tag[p.tag] += n;
    if (p.trainable) {
      acc.trainable += n;
      acc.trainable_by_tag[p.tag] += n;
    }
  }
  return acc;
}

Model build_model(const ModelConfig& cfg, std::uint64_t seed) {
  Model model{cfg, {}};
  Rng rng = Rng::stream(seed, "init");
  for (auto& info : parameter_layout(cfg)) {
    Tensor t = init_tensor(info, rng);
    model.params.add(std::move(info), std::move(t));
  }
  return model;
}

void reset_head(Model& model, std::size_t num_labels, bool is_regression, std::uint64_t seed) {
  model.config.num_labels = is_regression ? 1 : num_labels;
  model.config.is_regression = is_regression;
  model.config.validate();
  Rng rng = Rng::stream(seed, "head");
  for (auto& info : head_layout(model.config)) {
    Parameter& p = model.params.at(info.name);
    p.info.shape = info.shape;
    p.value = init_tensor(info, rng);
    p.value.set_requires_grad(true);
  }
}

void inject_adapters(Model& model, int order) {
  if (model.config.adapter_placement == AdapterPlacement::none) {
    throw UsageError("inject_adapters: adapter_placement is 'none'");
  }
  if (has_adapters(model)) throw UsageError("inject_adapters: adapters already present");
  const PolyAdapter identity = identity_init(model.config.hidden, order);
  for (auto& info : adapter_layout(model.config, order)) {
    const std::size_t m = static_cast<std::size_t>(
        std::find(std::begin(kAdapterTags), std::end(kAdapterTags), info.tag) - std::begin(kAdapterTags));
    model.params.add(std::move(info), identity.coeffs[m].clone());
  }
}

bool has_adapters(const Model& model) { return model.params.contains(layer_prefix(0) + kAdapterNames[0]); }

int adapter_order(const Model& model) {
  auto a = layer_adapter(model, 0);
  return a ? a->order() : 0;
}

std::size_t Batch::length(std::size_t row) const {
  return static_cast<std::size_t>(
      std::accumulate(mask.begin() + static_cast<std::ptrdiff_t>(row * seq),
                      mask.begin() + static_cast<std::ptrdiff_t>((row + 1) * seq), 0));
}

Tensor self_attention(Tape& tape, const Model& model, std::size_t layer, const Tensor& hidden,
                      std::span<const int> mask) {
  const auto& cfg = model.config;
  const auto& ps = model.params;
  if (hidden.rank() != 3 || hidden.extent(2) != cfg.hidden) {
    throw ShapeError("self_attention: hidden must be (batch, seq, " + std::to_string(cfg.hidden) + "), got " +
                     to_string(hidden.shape()));
  }
  const std::string p = layer_prefix(layer) + "attention.";
  const Tensor q = linear(tape, hidden, ps.tensor(p + "query.weight"), ps.tensor(p + "query.bias"));
  const Tensor k = linear(tape, hidden, ps.tensor(p + "key.weight"), ps.tensor(p + "key.bias"));
  const Tensor v = linear(tape, hidden, ps.tensor(p + "value.weight"), ps.tensor(p + "value.bias"));
  const Tensor qh = split_heads(tape, q, cfg.heads);
  const Tensor kh = split_heads(tape, k, cfg.heads);
  const Tensor vh = split_heads(tape, v, cfg.heads);
  Tensor scores = scale(tape, batched_matmul(tape, qh, kh, true), 1.0 / std::sqrt(static_cast<double>(cfg.head_dim())));
  scores = add_key_mask(tape, scores, mask, cfg.heads);
  const Tensor weights = softmax_lastdim(tape, scores);
  return merge_heads(tape, batched_matmul(tape, weights, vh), cfg.heads);
}

Tensor encode(Tape& tape, const Model& model, const Batch& batch, ForwardTrace* trace) {
  const auto& cfg = model.config;
  const auto& ps = model.params;
  const std::size_t cells = batch.batch * batch.seq;
  if (batch.tokens.size() != cells || batch.segments.size() != cells || batch.mask.size() != cells) {
    throw ShapeError("batch tokens/segments/mask must all be (batch, seq) = " + std::to_string(cells) + " entries");
  }
  if (batch.seq == 0 || batch.seq > cfg.max_seq_len) {
    throw ShapeError("sequence length " + std::to_string(batch.seq) + " outside [1, " +
                     std::to_string(cfg.max_seq_len) + "]");
  }
  std::vector<int> positions(cells);
  for (std::size_t i = 0; i < cells; ++i) positions[i] = static_cast<int>(i % batch.seq);

  const Shape prefix{batch.batch, batch.seq};
  Tensor h = add(tape, embedding(tape, ps.tensor("embeddings.word"), batch.tokens, prefix),
                 embedding(tape, ps.tensor("embeddings.position"), positions, prefix));
  h = add(tape, h, embedding(tape, ps.tensor("embeddings.segment"), batch.segments, prefix));
  h = layer_norm(tape, h, ps.tensor("embeddings.norm.gamma"), ps.tensor("embeddings.norm.beta"), cfg.layer_norm_eps);

  const bool adapters = cfg.adapter_placement != AdapterPlacement::none;
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    const std::string p = layer_prefix(l);
    const auto adapter = adapters ? layer_adapter(model, l) : std::nullopt;

    const Tensor attention = self_attention(tape, model, l, h, batch.mask);
    Tensor adapted = attention;
    if (adapter && cfg.adapter_placement == AdapterPlacement::pre_projection) {
      adapted = poly_apply(tape, *adapter, attention);
    }
    Tensor projected = linear(tape, adapted, ps.tensor(p + "attention.output.weight"), ps.tensor(p + "attention.output.bias"));
    if (adapter && cfg.adapter_placement == AdapterPlacement::post_projection) {
      projected = poly_apply(tape, *adapter, projected);
      adapted = projected;
    }
    if (trace) {
      trace->attention.push_back(attention);
      trace->adapted.push_back(adapted);
    }
    h = layer_norm(tape, add(tape, projected, h), ps.tensor(p + "attention.norm.gamma"),
                   ps.tensor(p + "attention.norm.beta"), cfg.layer_norm_eps);
    const Tensor inner = gelu(tape, linear(tape, h, ps.tensor(p + "ffn.intermediate.weight"),
                                           ps.tensor(p + "ffn.intermediate.bias")));
    const Tensor ffn = linear(tape, inner, ps.tensor(p + "ffn.output.weight"), ps.tensor(p + "ffn.output.bias"));
    h = layer_norm(tape, add(tape, ffn, h), ps.tensor(p + "ffn.norm.gamma"), ps.tensor(p + "ffn.norm.beta"),
                   cfg.layer_norm_eps);
  }
  return h;
}

Tensor classify(Tape& tape, const Model& model, const Tensor& first_position) {
  const auto& ps = model.params;
  const Tensor pooled = tanh(tape, linear(tape, first_position, ps.tensor("pooler.weight"), ps.tensor("pooler.bias")));
  return linear(tape, pooled, ps.tensor("classifier.weight"), ps.tensor("classifier.bias"));
}

ForwardResult forward(Tape& tape, const Model& model, const Batch& batch, bool trace) {
  ForwardResult result;
  if (trace) result.trace.emplace();
  result.sequence = encode(tape, model, batch, trace ? &*result.trace : nullptr);
  result.logits = classify(tape, model, select_position(tape, result.sequence, 0));
  return result;
}

}  // namespace hadapt
