#include "hadapt/analysis.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <numeric>
#include <sstream>
#include <thread>

#include "hadapt/error.hpp"
#include "hadapt/metrics.hpp"
#include "hadapt/ops.hpp"
#include "hadapt/spectral.hpp"

namespace hadapt {

using nlohmann::json;

namespace {

constexpr std::size_t kTraceChunk = 64;

// Visits the unpadded (len x H) block of every example in every layer.
template <typename Fn>
void for_each_block(const Model& model, const Dataset& eval, Fn&& fn) {
  std::vector<std::size_t> all(eval.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  const std::size_t h = model.config.hidden;
  for (std::size_t start = 0; start < eval.size(); start += kTraceChunk) {
    const std::size_t end = std::min(eval.size(), start + kTraceChunk);
    const Batch batch = make_batch(eval, std::span<const std::size_t>(all.data() + start, end - start));
    Tape tape = Tape::inference();
    const ForwardResult res = forward(tape, model, batch, true);
    for (std::size_t l = 0; l < res.trace->adapted.size(); ++l) {
      const Tensor& a = res.trace->adapted[l];
      for (std::size_t r = 0; r < batch.batch; ++r) {
        const Eigen::Map<const RowMajorMatrix> block(a.values().data() + r * batch.seq * h,
                                               static_cast<Eigen::Index>(batch.length(r)), static_cast<Eigen::Index>(h));
        fn(l, start + r, block);
      }
    }
  }
}

void require_same_shape(const ModelConfig& a, const ModelConfig& b, const char* what) {
  if (a.hidden != b.hidden || a.layers != b.layers || a.heads != b.heads || a.vocab_size != b.vocab_size) {
    throw ConfigError(std::string(what) + ": config mismatch between models");
  }
}

double quantile(const std::vector<double>& sorted, double q) {
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const std::size_t lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return sorted[lo] + (sorted[hi] - sorted[lo]) * frac;
}

json optional_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

json matrix_json(const SimilarityMatrix& m) {
  json out = json::array();
  for (const auto& row : m) {
    json r = json::array();
    for (const auto& v : row) r.push_back(optional_json(v));
    out.push_back(r);
  }
  return out;
}

std::vector<double> adapter_vector(const Model& m, std::size_t layer, const char* which) {
  const std::string name = "layer." + std::to_string(layer) + ".adapter." + which;
  if (!m.params.contains(name)) throw ConfigError("pattern_study: model has no tensor " + name);
  const auto v = m.params.tensor(name).values();
  return {v.begin(), v.end()};
}

SimilarityMatrix similarity(const std::vector<std::vector<double>>& vs) {
  const std::size_t n = vs.size();
  SimilarityMatrix m(n, std::vector<std::optional<double>>(n));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i; j < n; ++j) {
      m[i][j] = cosine(vs[i], vs[j]);
      m[j][i] = m[i][j];
    }
  }
  return m;
}

void accumulate(SimilarityMatrix& sum, std::vector<std::vector<std::size_t>>& count, const SimilarityMatrix& m) {
  for (std::size_t i = 0; i < m.size(); ++i) {
    for (std::size_t j = 0; j < m.size(); ++j) {
      if (!m[i][j]) continue;
      sum[i][j] = sum[i][j].value_or(0.0) + *m[i][j];
      ++count[i][j];
    }
  }
}

std::string box_header(const std::string& prefix) {
  std::string out;
  for (const char* f : {"min", "q1", "median", "q3", "max", "mean"}) out += "," + prefix + "_" + f;
  return out;
}

std::string box_row(const BoxStats& s) {
  std::string out;
  for (double v : {s.min, s.q1, s.median, s.q3, s.max, s.mean}) out += "," + format_double(v);
  return out;
}

}  // namespace

BoxStats BoxStats::of(std::vector<double> samples) {
  if (samples.empty()) return {};
  std::sort(samples.begin(), samples.end());
  BoxStats s;
  s.min = samples.front();
  s.max = samples.back();
  s.q1 = quantile(samples, 0.25);
  s.median = quantile(samples, 0.5);
  s.q3 = quantile(samples, 0.75);
  double total = 0.0;
  for (double v : samples) total += v;
  s.mean = total / static_cast<double>(samples.size());
  return s;
}

std::optional<double> cosine(std::span<const double> a, std::span<const double> b) {
  require_same_length(a.size(), b.size(), "cosine");
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  if (aa == 0 || bb == 0) return std::nullopt;
  return std::clamp(ab / (std::sqrt(aa) * std::sqrt(bb)), -1.0, 1.0);
}

Dataset eval_slice(const Dataset& data, std::size_t n) {
  Dataset out;
  out.vocab_size = data.vocab_size;
  const std::size_t take = std::min(n, data.size());
  out.examples.assign(data.examples.begin(), data.examples.begin() + static_cast<std::ptrdiff_t>(take));
  return out;
}

// Adapter outputs can have nearly tied top singular values; same tolerance, more room.
constexpr PowerIteration kStudyIteration{.tol = 1e-9, .max_iter = 200000};

NormStudyResult norm_study(const Model& before, const Model& after, const Dataset& eval, const BlockHook& hook) {
  require_same_shape(before.config, after.config, "norm_study");
  if (eval.size() == 0) throw ConfigError("norm_study: empty evaluation batch");
  NormStudyResult result;
  result.examples = eval.size();
  result.layers.resize(before.config.layers);
  for (auto& layer : result.layers) {
    layer.before.resize(eval.size());
    layer.after.resize(eval.size());
  }
  // Blocks are copied into owned matrices so both sides take the same product kernels.
  for_each_block(before, eval, [&](std::size_t l, std::size_t ex, const auto& block) {
    const RowMajorMatrix copy = block;
    result.layers[l].before[ex] = spectral_norm(copy, kStudyIteration);
  });
  for_each_block(after, eval, [&](std::size_t l, std::size_t ex, const auto& block) {
    RowMajorMatrix copy = block;
    if (hook) hook(l, copy);
    result.layers[l].after[ex] = spectral_norm(copy, kStudyIteration);
  });
  for (std::size_t l = 0; l < result.layers.size(); ++l) {
    NormLayer& layer = result.layers[l];
    layer.delta.resize(eval.size());
    for (std::size_t i = 0; i < eval.size(); ++i) {
      if (layer.before[i] == 0.0) throw NumericError("norm_study: zero attention output in layer " + std::to_string(l));
      layer.delta[i] = (layer.after[i] - layer.before[i]) / layer.before[i];
    }
    layer.before_stats = BoxStats::of(layer.before);
    layer.after_stats = BoxStats::of(layer.after);
    layer.delta_stats = BoxStats::of(layer.delta);
    result.findings.push_back(Finding{"norm_increase_layer_" + std::to_string(l), layer.delta_stats.mean > 0.0,
                                      "mean delta " + format_double(layer.delta_stats.mean)});
  }
  return result;
}

CharacteristicValues characteristic_values(const Model& model, const Dataset& eval) {
  if (eval.size() == 0) throw ConfigError("characteristic_values: empty evaluation batch");
  const std::size_t layers = model.config.layers;
  std::vector<std::vector<double>> pos_sum(layers), pos_count(layers);
  std::vector<double> value_sum(layers, 0.0);
  for_each_block(model, eval, [&](std::size_t l, std::size_t, const auto& block) {
    const Eigen::VectorXd avg = token_averages(block);
    auto& sums = pos_sum[l];
    auto& counts = pos_count[l];
    if (sums.size() < static_cast<std::size_t>(avg.size())) {
      sums.resize(static_cast<std::size_t>(avg.size()), 0.0);
      counts.resize(static_cast<std::size_t>(avg.size()), 0.0);
    }
    for (Eigen::Index j = 0; j < avg.size(); ++j) {
      sums[static_cast<std::size_t>(j)] += avg[j];
      counts[static_cast<std::size_t>(j)] += 1.0;
    }
    value_sum[l] += avg.mean();
  });
  CharacteristicValues out;
  out.layers.resize(layers);
  for (std::size_t l = 0; l < layers; ++l) {
    out.layers[l].token_avg.resize(pos_sum[l].size());
    for (std::size_t j = 0; j < pos_sum[l].size(); ++j) out.layers[l].token_avg[j] = pos_sum[l][j] / pos_count[l][j];
    out.layers[l].value = value_sum[l] / static_cast<double>(eval.size());
  }
  return out;
}

GradientEpoch summarize_gradients(std::size_t epoch, const std::vector<std::string>& names,
                                  const std::vector<std::size_t>& counts, const std::vector<double>& norm_sums,
                                  std::size_t steps, std::size_t top_k) {
  if (steps == 0) throw ConfigError("gradient_study: epoch without steps");
  GradientEpoch out;
  out.epoch = epoch;
  for (std::size_t i = 0; i < names.size(); ++i) {
    GradientRow row{names[i], counts[i], norm_sums[i] / static_cast<double>(steps), 0.0};
    row.unit = row.magnitude / static_cast<double>(row.count);
    out.rows.push_back(row);
  }
  const auto top = [&](double GradientRow::*field) {
    std::vector<std::size_t> idx(out.rows.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::stable_sort(idx.begin(), idx.end(),
                     [&](std::size_t a, std::size_t b) { return out.rows[a].*field > out.rows[b].*field; });
    std::vector<std::string> names_out;
    for (std::size_t i = 0; i < std::min(top_k, idx.size()); ++i) names_out.push_back(out.rows[idx[i]].name);
    return names_out;
  };
  out.top_magnitude = top(&GradientRow::magnitude);
  out.top_unit = top(&GradientRow::unit);
  return out;
}

GradientStudy gradient_study(const Model& backbone, const TaskData& task, const TrainConfig& cfg, std::uint64_t seed) {
  if (cfg.epochs < 2) throw ConfigError("gradient_study: needs at least 2 epochs");
  Model model = backbone.clone();
  reset_head(model, task.spec.num_labels(), task.spec.is_regression(), seed);
  apply_regime(model, TuningRegime::full());

  std::vector<std::string> names;
  std::vector<std::size_t> counts;
  for (const auto& p : model.params.entries()) {
    names.push_back(p.info.name);
    counts.push_back(p.info.size());
  }
  const std::size_t last = cfg.epochs - 1;
  std::vector<double> first_sums(names.size(), 0.0), last_sums(names.size(), 0.0);
  std::size_t first_steps = 0, last_steps = 0;

  TrainHooks hooks;
  hooks.after_backward = [&](std::size_t epoch, std::size_t, const Model& m) {
    if (epoch != 0 && epoch != last) return;
    auto& sums = epoch == 0 ? first_sums : last_sums;
    (epoch == 0 ? first_steps : last_steps) += 1;
    const auto& entries = m.params.entries();
    for (std::size_t i = 0; i < entries.size(); ++i) {
      const auto g = entries[i].value.grad();
      double sq = 0.0;
      for (double x : g) sq += x * x;
      sums[i] += std::sqrt(sq);
    }
  };
  train(model, task, cfg.full_lr, cfg, seed, hooks);

  GradientStudy out;
  out.first = summarize_gradients(0, names, counts, first_sums, first_steps);
  out.last = summarize_gradients(last, names, counts, last_sums, last_steps);
  const auto& top = out.first.top_unit;
  const bool hit = std::any_of(top.begin(), top.end(), [](const std::string& n) { return n.starts_with("classifier."); });
  out.findings.push_back(Finding{"classifier_in_first_epoch_unit_top5", hit, "task " + task.spec.name});
  return out;
}

FittingStudy fitting_study(const Model& backbone, const Model& stage1, const TaskData& task, const TrainConfig& cfg,
                           std::uint64_t seed, std::vector<int> orders) {
  require_same_shape(backbone.config, stage1.config, "fitting_study");
  const Dataset eval = eval_slice(task.dev);
  std::vector<FittingVariant> variants(orders.size() + 1);
  std::vector<Model> models(orders.size() + 1);

  parallel_cells(variants.size(), [&](std::size_t i) {
    TuneResult run;
    if (i == 0) {
      run = tune(backbone, TuningRegime::full(), task, cfg, seed);
      variants[i].name = "full";
    } else {
      Model start = backbone.clone();
      inject_adapters(start, orders[i - 1]);
      run = tune(start, TuningRegime::hadamard(), task, cfg, seed, &stage1);
      variants[i].name = "k=" + std::to_string(orders[i - 1]);
      for (const auto& [tag, n] : run.report.accounting.trainable_by_tag) {
        if (is_adapter_tag(tag)) variants[i].adapter_params += n;
      }
    }
    variants[i].metric = run.report.final_metrics.value;
    variants[i].values = characteristic_values(run.model, eval);
  });

  const auto& ref = variants[0].values.layers;
  for (auto& v : variants) {
    v.gap.resize(ref.size());
    double total = 0.0;
    for (std::size_t l = 0; l < ref.size(); ++l) {
      v.gap[l] = std::abs(v.values.layers[l].value - ref[l].value);
      total += v.gap[l];
    }
    v.mean_gap = ref.empty() ? 0.0 : total / static_cast<double>(ref.size());
  }

  FittingStudy out;
  out.variants = std::move(variants);
  const auto find = [&](const std::string& name) -> const FittingVariant* {
    for (const auto& v : out.variants)
      if (v.name == name) return &v;
    return nullptr;
  };
  if (const auto *k1 = find("k=1"), *k3 = find("k=3"); k1 && k3) {
    out.findings.push_back(Finding{"cubic_gap_not_above_linear", k3->mean_gap <= k1->mean_gap,
                                   "mean gap k=1 " + format_double(k1->mean_gap) + ", k=3 " + format_double(k3->mean_gap)});
  }
  return out;
}

PatternStudy pattern_study(const std::vector<std::string>& tasks, const std::vector<const Model*>& models) {
  if (models.size() < 2) throw UsageError("patterns needs >= 2 runs");
  if (tasks.size() != models.size()) throw UsageError("pattern_study: one task name per model");
  for (std::size_t i = 0; i < models.size(); ++i) {
    require_same_shape(models[0]->config, models[i]->config, "pattern_study");
    if (!has_adapters(*models[i])) throw ConfigError("pattern_study: run for " + tasks[i] + " has no adapters");
  }
  const std::size_t n = models.size(), layers = models[0]->config.layers;
  PatternStudy out;
  out.tasks = tasks;
  SimilarityMatrix wsum(n, std::vector<std::optional<double>>(n)), bsum = wsum;
  std::vector<std::vector<std::size_t>> wcount(n, std::vector<std::size_t>(n, 0)), bcount = wcount;
  for (std::size_t l = 0; l < layers; ++l) {
    PatternLayer layer;
    std::vector<std::vector<double>> ws, bs;
    for (const Model* m : models) {
      ws.push_back(adapter_vector(*m, l, "weight"));
      bs.push_back(adapter_vector(*m, l, "bias"));
      layer.weight_stats.push_back(BoxStats::of(ws.back()));
      layer.bias_stats.push_back(BoxStats::of(bs.back()));
    }
    layer.weight_sim = similarity(ws);
    layer.bias_sim = similarity(bs);
    accumulate(wsum, wcount, layer.weight_sim);
    accumulate(bsum, bcount, layer.bias_sim);
    out.layers.push_back(std::move(layer));
  }
  const auto mean_of = [&](const SimilarityMatrix& sum, const std::vector<std::vector<std::size_t>>& count) {
    SimilarityMatrix m = sum;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        if (count[i][j]) m[i][j] = *sum[i][j] / static_cast<double>(count[i][j]);
    return m;
  };
  out.weight_mean = mean_of(wsum, wcount);
  out.bias_mean = mean_of(bsum, bcount);

  double lowest = 1.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j)
      if (out.weight_mean[i][j]) lowest = std::min(lowest, *out.weight_mean[i][j]);
  out.findings.push_back(Finding{"weight_similarity_near_one", lowest >= 0.95,
                                 "lowest mean pairwise weight cosine " + format_double(lowest)});
  return out;
}

AblationTable layer_ablation(const Model& backbone, const Model& stage1, const TaskData& task, const TrainConfig& cfg,
                             std::uint64_t seed, const std::vector<std::size_t>& ks) {
  const std::size_t L = backbone.config.layers;
  if (ks.empty()) throw UsageError("layer_ablation: no layer counts given");
  for (std::size_t i = 0; i < ks.size(); ++i) {
    if (ks[i] < 1 || ks[i] > L) throw UsageError("layer_ablation: k=" + std::to_string(ks[i]) + " outside [1, " + std::to_string(L) + "]");
    if (i && ks[i] <= ks[i - 1]) throw UsageError("layer_ablation: layer counts must be strictly ascending");
  }
  AblationTable out;
  out.task = task.spec.name;
  out.rows.resize(ks.size());
  parallel_cells(ks.size(), [&](std::size_t i) {
    const TuneResult run = tune(backbone, TuningRegime::hadamard(ks[i]), task, cfg, seed, &stage1);
    out.rows[i] = AblationRow{"k=" + std::to_string(ks[i]), ks[i], run.report.final_metrics.value,
                              run.report.accounting.trainable, run.report.accounting.trainable_fraction()};
  });
  const AblationRow* full = nullptr;
  const AblationRow* half = nullptr;
  for (const auto& r : out.rows) {
    if (r.k == L) full = &r;
    if (2 * r.k == L) half = &r;
  }
  if (full && half) {
    const double scale = task.spec.is_regression() ? 1.0 : 100.0;
    const double gap = (full->metric - half->metric) * scale;
    out.findings.push_back(Finding{"half_layers_within_3_points", gap <= 3.0 * (task.spec.is_regression() ? 0.01 : 1.0),
                                   "k=L minus k=L/2: " + format_double(gap)});
  }
  return out;
}

std::vector<ModuleSet> default_module_sets() {
  std::vector<ModuleSet> out;
  for (const char* code : {"W", "B", "N", "A", "W+N", "B+N", "W+B", "W+B+N", "W+B+N+A"}) out.push_back(ModuleSet::parse(code));
  return out;
}

AblationTable module_ablation(const Model& backbone, const Model& stage1, const TaskData& task, const TrainConfig& cfg,
                              std::uint64_t seed, const std::vector<ModuleSet>& sets) {
  for (const auto& s : sets)
    if (s.empty()) throw UsageError("module_ablation: empty module set");
  AblationTable out;
  out.task = task.spec.name;
  out.rows.resize(sets.size());
  parallel_cells(sets.size(), [&](std::size_t i) {
    const TuneResult run = tune(backbone, TuningRegime::custom(sets[i]), task, cfg, seed, &stage1);
    out.rows[i] = AblationRow{sets[i].code(), backbone.config.layers, run.report.final_metrics.value,
                              run.report.accounting.trainable, run.report.accounting.trainable_fraction()};
  });
  const AblationRow* w = nullptr;
  const AblationRow* b = nullptr;
  for (const auto& r : out.rows) {
    if (r.label == "W") w = &r;
    if (r.label == "B") b = &r;
  }
  if (w && b) {
    out.findings.push_back(Finding{"bias_not_below_weight", b->metric >= w->metric,
                                   "task " + task.spec.name + ": B " + format_double(b->metric) + ", W " +
                                       format_double(w->metric)});
  }
  return out;
}

std::size_t default_threads() {
  if (const char* env = std::getenv("HADAPT_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && *end == '\0' && v >= 1) return static_cast<std::size_t>(v);
    throw ConfigError("HADAPT_THREADS must be a positive integer, got '" + std::string(env) + "'");
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

void parallel_cells(std::size_t n, const std::function<void(std::size_t)>& fn, std::size_t threads) {
  if (threads == 0) threads = default_threads();
  threads = std::min(threads, n);
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < threads; ++t) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!error) error = std::current_exception();
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  if (error) std::rethrow_exception(error);
}

// ---- serialization ----

std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

json to_json(const BoxStats& s) {
  return json{{"min", s.min}, {"q1", s.q1}, {"median", s.median}, {"q3", s.q3}, {"max", s.max}, {"mean", s.mean}};
}

json to_json(const std::vector<Finding>& findings) {
  json out = json::array();
  for (const auto& f : findings) out.push_back(json{{"name", f.name}, {"passed", f.passed}, {"detail", f.detail}});
  return out;
}

json to_json(const NormStudyResult& r) {
  json layers = json::array();
  for (std::size_t l = 0; l < r.layers.size(); ++l) {
    const auto& x = r.layers[l];
    layers.push_back(json{{"layer", l},
                          {"before", to_json(x.before_stats)},
                          {"after", to_json(x.after_stats)},
                          {"delta", to_json(x.delta_stats)},
                          {"samples", {{"before", x.before}, {"after", x.after}, {"delta", x.delta}}}});
  }
  return json{{"study", "norms"},
              {"method", "spectral norm of each example's unpadded (len x H) attention-output matrix; "
                         "delta = (after - before) / before per example, aggregated per layer"},
              {"examples", r.examples},
              {"layers", layers},
              {"reported_findings", to_json(r.findings)}};
}

json to_json(const CharacteristicValues& v) {
  json layers = json::array();
  for (std::size_t l = 0; l < v.layers.size(); ++l) {
    layers.push_back(json{{"layer", l}, {"value", v.layers[l].value}, {"token_avg", v.layers[l].token_avg}});
  }
  return layers;
}

json to_json(const GradientStudy& g) {
  const auto epoch_json = [](const GradientEpoch& e) {
    json rows = json::array();
    for (const auto& r : e.rows) {
      rows.push_back(json{{"name", r.name}, {"count", r.count}, {"magnitude", r.magnitude}, {"unit", r.unit}});
    }
    return json{{"epoch", e.epoch}, {"tensors", rows}, {"top_magnitude", e.top_magnitude}, {"top_unit", e.top_unit}};
  };
  return json{{"study", "gradients"},
              {"method", "per-tensor L2 gradient norm averaged over the epoch's optimizer steps; unit = magnitude / count"},
              {"first", epoch_json(g.first)},
              {"last", epoch_json(g.last)},
              {"reported_findings", to_json(g.findings)}};
}

json to_json(const FittingStudy& f) {
  json variants = json::array();
  for (const auto& v : f.variants) {
    variants.push_back(json{{"name", v.name},
                            {"adapter_params", v.adapter_params},
                            {"metric", v.metric},
                            {"layers", to_json(v.values)},
                            {"gap", v.gap},
                            {"mean_gap", v.mean_gap}});
  }
  return json{{"study", "fitting"}, {"variants", variants}, {"reported_findings", to_json(f.findings)}};
}

json to_json(const PatternStudy& p) {
  json layers = json::array();
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    const auto& x = p.layers[l];
    json ws = json::array(), bs = json::array();
    for (std::size_t t = 0; t < p.tasks.size(); ++t) {
      ws.push_back(to_json(x.weight_stats[t]));
      bs.push_back(to_json(x.bias_stats[t]));
    }
    layers.push_back(json{{"layer", l},
                          {"weight_stats", ws},
                          {"bias_stats", bs},
                          {"weight_similarity", matrix_json(x.weight_sim)},
                          {"bias_similarity", matrix_json(x.bias_sim)}});
  }
  return json{{"study", "patterns"},
              {"tasks", p.tasks},
              {"layers", layers},
              {"weight_similarity_mean", matrix_json(p.weight_mean)},
              {"bias_similarity_mean", matrix_json(p.bias_mean)},
              {"reported_findings", to_json(p.findings)}};
}

json to_json(const AblationTable& t) {
  json rows = json::array();
  for (const auto& r : t.rows) {
    rows.push_back(json{{"label", r.label},
                        {"k", r.k},
                        {"metric", r.metric},
                        {"trainable", r.trainable},
                        {"fraction", r.fraction}});
  }
  return json{{"task", t.task}, {"rows", rows}, {"reported_findings", to_json(t.findings)}};
}

std::string to_csv(const NormStudyResult& r) {
  std::ostringstream out;
  out << "layer" << box_header("before") << box_header("after") << box_header("delta") << '\n';
  for (std::size_t l = 0; l < r.layers.size(); ++l) {
    const auto& x = r.layers[l];
    out << l << box_row(x.before_stats) << box_row(x.after_stats) << box_row(x.delta_stats) << '\n';
  }
  return out.str();
}

std::string to_csv(const GradientStudy& g) {
  std::ostringstream out;
  out << "epoch,name,count,magnitude,unit\n";
  for (const auto* e : {&g.first, &g.last}) {
    for (const auto& r : e->rows) {
      out << e->epoch << ',' << r.name << ',' << r.count << ',' << format_double(r.magnitude) << ','
          << format_double(r.unit) << '\n';
    }
  }
  return out.str();
}

std::string to_csv(const FittingStudy& f) {
  std::ostringstream out;
  out << "variant,layer,value,gap\n";
  for (const auto& v : f.variants) {
    for (std::size_t l = 0; l < v.values.layers.size(); ++l) {
      out << v.name << ',' << l << ',' << format_double(v.values.layers[l].value) << ',' << format_double(v.gap[l])
          << '\n';
    }
  }
  return out.str();
}

std::string to_csv(const PatternStudy& p) {
  std::ostringstream out;
  out << "layer,vector,task_a,task_b,cosine\n";
  const auto emit = [&](const std::string& layer, const char* which, const SimilarityMatrix& m) {
    for (std::size_t i = 0; i < m.size(); ++i) {
      for (std::size_t j = i + 1; j < m.size(); ++j) {
        out << layer << ',' << which << ',' << p.tasks[i] << ',' << p.tasks[j] << ','
            << (m[i][j] ? format_double(*m[i][j]) : "") << '\n';
      }
    }
  };
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    emit(std::to_string(l), "weight", p.layers[l].weight_sim);
    emit(std::to_string(l), "bias", p.layers[l].bias_sim);
  }
  emit("mean", "weight", p.weight_mean);
  emit("mean", "bias", p.bias_mean);
  return out.str();
}

std::string to_csv(const AblationTable& t) {
  std::ostringstream out;
  out << "task,label,k,metric,trainable,fraction\n";
  for (const auto& r : t.rows) {
    out << t.task << ',' << r.label << ',' << r.k << ',' << format_double(r.metric) << ',' << r.trainable << ','
        << format_double(r.fraction) << '\n';
  }
  return out.str();
}

}  // namespace hadapt
