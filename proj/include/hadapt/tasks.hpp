#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "hadapt/model.hpp"

namespace hadapt {

// Toy vocabulary: four structural symbols, then POS, NEG and NEUTRAL classes.
namespace vocab {
inline constexpr int kPad = 0;
inline constexpr int kCls = 1;
inline constexpr int kSep = 2;
inline constexpr int kMask = 3;
inline constexpr int kPosBegin = 4, kPosEnd = 14;
inline constexpr int kNegBegin = 14, kNegEnd = 24;
inline constexpr int kNeutralBegin = 24, kNeutralEnd = 64;
inline constexpr int kContentBegin = 4;
inline constexpr std::size_t kSize = 64;

inline bool is_pos(int t) { return t >= kPosBegin && t < kPosEnd; }
inline bool is_neg(int t) { return t >= kNegBegin && t < kNegEnd; }
inline bool is_content(int t) { return t >= kContentBegin && t < static_cast<int>(kSize); }
}  // namespace vocab

enum class TaskKind { single_sentence, sentence_pair, regression };
enum class Metric { accuracy, mcc, pearson };

std::string_view to_string(TaskKind k);
std::string_view to_string(Metric m);
Metric parse_metric(std::string_view s);

struct TaskSpec {
  std::string name;  // POLARITY, PARAPHRASE, ENTAIL or OVERLAP
  TaskKind kind = TaskKind::single_sentence;
  Metric metric = Metric::accuracy;
  std::uint64_t seed = 0;
  std::size_t train_size = 2048;
  std::size_t dev_size = 256;

  bool is_regression() const { return kind == TaskKind::regression; }
  std::size_t num_labels() const { return is_regression() ? 1 : 2; }

  /// Built-in spec for one of the four task names; throws ConfigError otherwise.
  static TaskSpec builtin(std::string_view name, std::uint64_t seed = 0, std::size_t train_size = 2048,
                          std::size_t dev_size = 256);
};

inline const std::vector<std::string>& builtin_task_names() {
  static const std::vector<std::string> names{"POLARITY", "PARAPHRASE", "ENTAIL", "OVERLAP"};
  return names;
}

struct Example {
  std::vector<int> tokens;
  std::vector<int> segments;
  double label = 0.0;
  std::vector<int> mlm_targets;  // pretraining only: original token at masked positions, -1 elsewhere
};

struct Dataset {
  std::vector<Example> examples;
  std::size_t vocab_size = vocab::kSize;

  std::size_t size() const { return examples.size(); }
};

struct TaskData {
  TaskSpec spec;
  Dataset train;
  Dataset dev;
};

/// Deterministic in spec (including its seed). Classification tasks are
/// exactly balanced; dev examples never share a canonical hash with train.
TaskData gen_task(const TaskSpec& spec);

/// Recomputes the label of a task example from its tokens.
double oracle_label(std::string_view task, const Example& ex);

/// Masked-token corpus from a seeded grammar of single sentences and derived
/// sentence pairs; about 15% of content positions carry a target.
Dataset gen_pretrain_corpus(std::uint64_t seed, std::size_t size, std::size_t max_seq_len = 32);

std::uint64_t example_hash(const Example& ex);

/// Pads the selected examples to the longest one; mask marks real tokens.
Batch make_batch(const Dataset& data, std::span<const std::size_t> indices);
Batch make_batch(const Dataset& data);

/// One JSON object per line: {"tokens":[...],"segments":[...],"label":x}.
std::string to_jsonl(const Dataset& data);
void write_jsonl(const Dataset& data, const std::filesystem::path& path);

}  // namespace hadapt
