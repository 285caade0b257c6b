#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "hadapt/tensor.hpp"

namespace hadapt {

enum class AdapterPlacement { none, pre_projection, post_projection };

std::string_view to_string(AdapterPlacement p);
AdapterPlacement parse_adapter_placement(std::string_view s);

// Parameter groups. ATT_NORM and FFN_NORM are the "A" and "N" modules of the
// ablation codes; ADAPTER_W / ADAPTER_B are "W" and "B".
enum class ModuleTag {
  EMB,
  ATT,
  ATT_PROJ,
  ATT_NORM,
  FFN,
  FFN_NORM,
  ADAPTER_W,
  ADAPTER_B,
  ADAPTER_C2,
  ADAPTER_C3,
  POOLER,
  CLASSIFIER,
};

std::string_view to_string(ModuleTag tag);
ModuleTag parse_module_tag(std::string_view s);
bool is_adapter_tag(ModuleTag tag);

struct ModelConfig {
  std::size_t vocab_size = 64;
  std::size_t hidden = 64;
  std::size_t layers = 4;
  std::size_t heads = 4;
  std::size_t ff_dim = 256;
  std::size_t max_seq_len = 32;
  std::size_t type_vocab = 2;
  std::size_t num_labels = 2;
  bool is_regression = false;
  AdapterPlacement adapter_placement = AdapterPlacement::pre_projection;
  double layer_norm_eps = 1e-12;

  std::size_t head_dim() const { return hidden / heads; }
  std::size_t output_dim() const { return is_regression ? 1 : num_labels; }
  void validate() const;

  static ModelConfig desk() { return {}; }
  static ModelConfig bert_base();
  static ModelConfig bert_large();

  bool operator==(const ModelConfig&) const = default;
};

/// Name, shape and grouping of one parameter, without storage.
struct ParameterInfo {
  std::string name;
  Shape shape;
  ModuleTag tag;
  int layer = -1;  // -1 for tensors outside the encoder stack
  bool trainable = false;

  std::size_t size() const { return numel(shape); }
};

/// Parameters the encoder builds for `cfg`, in canonical order. Adapter
/// vectors are included for every layer when `adapter_order` > 0.
std::vector<ParameterInfo> parameter_layout(const ModelConfig& cfg, int adapter_order = 0);

struct Parameter {
  ParameterInfo info;
  Tensor value;
};

/// Named parameters in insertion order. Names are unique and tags are fixed
/// at insertion; the trainable flag is the freeze mask.
class ParameterStore {
 public:
  ParameterStore() = default;

  Parameter& add(ParameterInfo info, Tensor value);
  bool contains(std::string_view name) const;
  Parameter& at(std::string_view name);
  const Parameter& at(std::string_view name) const;
  const Tensor& tensor(std::string_view name) const { return at(name).value; }

  std::vector<Parameter>& entries() { return entries_; }
  const std::vector<Parameter>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }

  std::vector<ParameterInfo> describe() const;

  void freeze_all();
  void zero_grads();
  void clear_grads();

  /// When true, frozen tensors stop requesting gradients so backward prunes
  /// them. Trainable tensors always request gradients.
  void prune_frozen_gradients(bool on);

  /// Deep copy of all values; no gradients.
  ParameterStore clone() const;

 private:
  std::vector<Parameter> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

struct ParameterAccounting {
  std::size_t total = 0;
  std::size_t trainable = 0;
  std::map<ModuleTag, std::size_t> by_tag;
  std::map<ModuleTag, std::size_t> trainable_by_tag;

  double trainable_fraction() const {
    return total ? static_cast<double>(trainable) / static_cast<double>(total) : 0.0;
  }
};

ParameterAccounting count_parameters(const std::vector<ParameterInfo>& params);
inline ParameterAccounting count_parameters(const ParameterStore& store) {
  return count_parameters(store.describe());
}

struct Model {
  ModelConfig config;
  ParameterStore params;

  Model clone() const { return Model{config, params.clone()}; }
};

/// Fresh encoder with BERT-style initialization: truncated normal (std 0.02)
/// weights and embeddings, zero biases, unit/zero layer norms.
Model build_model(const ModelConfig& cfg, std::uint64_t seed);

/// Replaces pooler and classifier with freshly initialized tensors for a
/// task with `num_labels` outputs (regression when `is_regression`).
void reset_head(Model& model, std::size_t num_labels, bool is_regression, std::uint64_t seed);

/// Adds identity adapters to every layer: weight = 1, bias = 0 and, for
/// order > 1, zero higher coefficients. All frozen.
void inject_adapters(Model& model, int order = 1);
bool has_adapters(const Model& model);
int adapter_order(const Model& model);  // 0 when none

/// Token ids, segment ids and attention mask, each (batch, seq) row-major.
struct Batch {
  std::size_t batch = 0;
  std::size_t seq = 0;
  std::vector<int> tokens;
  std::vector<int> segments;
  std::vector<int> mask;

  std::size_t length(std::size_t row) const;
};

struct ForwardTrace {
  std::vector<Tensor> attention;  // per layer, concatenated heads before the adapter
  std::vector<Tensor> adapted;    // per layer, after the adapter (same as attention without one)
};

struct ForwardResult {
  Tensor logits;    // (batch, output_dim)
  Tensor sequence;  // (batch, seq, hidden)
  std::optional<ForwardTrace> trace;
};

/// Multi-head self-attention of one layer: per head softmax(Q K^T / sqrt(d_k)) V,
/// heads concatenated to (batch, seq, hidden). Returned before the output
/// projection.
Tensor self_attention(Tape& tape, const Model& model, std::size_t layer, const Tensor& hidden,
                      std::span<const int> mask);

/// Encoder stack only: (batch, seq, hidden).
Tensor encode(Tape& tape, const Model& model, const Batch& batch, ForwardTrace* trace = nullptr);

/// Pooler (affine + tanh on the first position) and classifier.
Tensor classify(Tape& tape, const Model& model, const Tensor& first_position);

ForwardResult forward(Tape& tape, const Model& model, const Batch& batch, bool trace = false);

}  // namespace hadapt
