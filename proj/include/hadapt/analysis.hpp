#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "hadapt/model.hpp"
#include "hadapt/tasks.hpp"
#include "hadapt/trainer.hpp"

namespace hadapt {

/// Soft check: logged with its outcome, never fails a run.
struct Finding {
  std::string name;
  bool passed = false;
  std::string detail;
};

struct BoxStats {
  double min = 0, q1 = 0, median = 0, q3 = 0, max = 0, mean = 0;

  /// Quartiles by linear interpolation between order statistics.
  static BoxStats of(std::vector<double> samples);
};

/// Row means over the hidden axis of a (seq x H) block: a'_j = (1/H) sum_i a_ij.
template <typename Derived>
Eigen::Matrix<typename Derived::Scalar, Eigen::Dynamic, 1> token_averages(const Eigen::MatrixBase<Derived>& a) {
  return a.rowwise().mean();
}

/// a' = (1/L) sum_j a'_j over the rows of `a`.
template <typename Derived>
typename Derived::Scalar characteristic_value(const Eigen::MatrixBase<Derived>& a) {
  return token_averages(a).mean();
}

/// Cosine similarity; empty when either vector is zero.
std::optional<double> cosine(std::span<const double> a, std::span<const double> b);

/// First `n` dev examples (all when n exceeds the split), the fixed evaluation batch.
Dataset eval_slice(const Dataset& data, std::size_t n = 256);

// ---- norms ----

struct NormLayer {
  std::vector<double> before;  // per-example spectral norms
  std::vector<double> after;
  std::vector<double> delta;
  BoxStats before_stats, after_stats, delta_stats;
};

struct NormStudyResult {
  std::size_t examples = 0;
  std::vector<NormLayer> layers;
  std::vector<Finding> findings;
};

/// Called on every unpadded (len x H) attention-output block of the "after"
/// model before its norm is taken. Test seam.
using RowMajorMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using BlockHook = std::function<void(std::size_t layer, Eigen::Ref<RowMajorMatrix> block)>;

NormStudyResult norm_study(const Model& before, const Model& after, const Dataset& eval, const BlockHook& hook = {});

// ---- characteristic values ----

struct LayerValues {
  std::vector<double> token_avg;  // per position, averaged over the examples that reach it
  double value = 0.0;             // mean over examples of a'
};

struct CharacteristicValues {
  std::vector<LayerValues> layers;
};

/// Averages of the adapter outputs (attention outputs without an adapter),
/// padding excluded.
CharacteristicValues characteristic_values(const Model& model, const Dataset& eval);

// ---- gradients ----

struct GradientRow {
  std::string name;
  std::size_t count = 0;
  double magnitude = 0.0;  // L2 norm of the gradient, averaged over the epoch's steps
  double unit = 0.0;       // magnitude / count
};

struct GradientEpoch {
  std::size_t epoch = 0;
  std::vector<GradientRow> rows;          // parameter order
  std::vector<std::string> top_magnitude; // descending, five names
  std::vector<std::string> top_unit;
};

struct GradientStudy {
  GradientEpoch first, last;
  std::vector<Finding> findings;
};

/// Full fine-tuning with gradient capture. Throws ConfigError for fewer than two epochs.
GradientStudy gradient_study(const Model& backbone, const TaskData& task, const TrainConfig& cfg, std::uint64_t seed);

/// Aggregates one epoch of per-step gradient norms into ranked rows.
GradientEpoch summarize_gradients(std::size_t epoch, const std::vector<std::string>& names,
                                  const std::vector<std::size_t>& counts, const std::vector<double>& norm_sums,
                                  std::size_t steps, std::size_t top_k = 5);

// ---- fitting functions ----

struct FittingVariant {
  std::string name;  // "full", "k=1", "k=2", "k=3"
  std::size_t adapter_params = 0;
  double metric = 0.0;
  CharacteristicValues values;
  std::vector<double> gap;  // per layer |a'(variant) - a'(full)|
  double mean_gap = 0.0;
};

struct FittingStudy {
  std::vector<FittingVariant> variants;
  std::vector<Finding> findings;
};

FittingStudy fitting_study(const Model& backbone, const Model& stage1, const TaskData& task, const TrainConfig& cfg,
                           std::uint64_t seed, std::vector<int> orders = {1, 2, 3});

// ---- adapter patterns ----

using SimilarityMatrix = std::vector<std::vector<std::optional<double>>>;

struct PatternLayer {
  std::vector<BoxStats> weight_stats;  // per task
  std::vector<BoxStats> bias_stats;
  SimilarityMatrix weight_sim, bias_sim;
};

struct PatternStudy {
  std::vector<std::string> tasks;
  std::vector<PatternLayer> layers;
  SimilarityMatrix weight_mean, bias_mean;  // averaged over layers with a defined entry
  std::vector<Finding> findings;
};

PatternStudy pattern_study(const std::vector<std::string>& tasks, const std::vector<const Model*>& models);

// ---- ablations ----

struct AblationRow {
  std::string label;  // "k=2" or a module code
  std::size_t k = 0;
  double metric = 0.0;
  std::size_t trainable = 0;
  double fraction = 0.0;
};

struct AblationTable {
  std::string task;
  std::vector<AblationRow> rows;
  std::vector<Finding> findings;
};

AblationTable layer_ablation(const Model& backbone, const Model& stage1, const TaskData& task, const TrainConfig& cfg,
                             std::uint64_t seed, const std::vector<std::size_t>& ks);

std::vector<ModuleSet> default_module_sets();

AblationTable module_ablation(const Model& backbone, const Model& stage1, const TaskData& task, const TrainConfig& cfg,
                              std::uint64_t seed, const std::vector<ModuleSet>& sets = default_module_sets());

/// Runs fn(i) for i in [0, n) on up to `threads` workers; results must be
/// written by index. HADAPT_THREADS sets the default cap.
void parallel_cells(std::size_t n, const std::function<void(std::size_t)>& fn, std::size_t threads = 0);
std::size_t default_threads();

// ---- serialization ----

nlohmann::json to_json(const BoxStats& s);
nlohmann::json to_json(const NormStudyResult& r);
nlohmann::json to_json(const CharacteristicValues& v);
nlohmann::json to_json(const GradientStudy& g);
nlohmann::json to_json(const FittingStudy& f);
nlohmann::json to_json(const PatternStudy& p);
nlohmann::json to_json(const AblationTable& t);
nlohmann::json to_json(const std::vector<Finding>& findings);

std::string to_csv(const NormStudyResult& r);
std::string to_csv(const GradientStudy& g);
std::string to_csv(const FittingStudy& f);
std::string to_csv(const PatternStudy& p);
std::string to_csv(const AblationTable& t);

/// Shortest round-trip text for a double, as used in every CSV.
std::string format_double(double v);

}  // namespace hadapt
