// Acceptance run: one PASS/FAIL line per criterion, then a JSON summary in
// the work directory. Exit status is the number of failed criteria.

#include <CLI11.hpp>
#include <Eigen/SVD>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <json.hpp>
#include <map>
#include <sstream>

#include "cli.hpp"
#include "hadapt/analysis.hpp"
#include "hadapt/checkpoint.hpp"
#include "hadapt/config.hpp"
#include "hadapt/metrics.hpp"
#include "hadapt/spectral.hpp"
#include "support.hpp"

#ifndef HADAPT_DESK_CONFIG
#define HADAPT_DESK_CONFIG "configs/desk.json"
#endif

using namespace hadapt;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Stopwatch {
  std::chrono::steady_clock::time_point wall = std::chrono::steady_clock::now();
  std::clock_t cpu = std::clock();

  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - wall).count();
  }
  double cpu_seconds() const { return static_cast<double>(std::clock() - cpu) / CLOCKS_PER_SEC; }
};

struct Outcome {
  int id;
  std::string name;
  bool pass;
  std::string detail;
  double seconds;
};

std::vector<Outcome> outcomes;
std::string transcript;

void emit(int id, const std::string& name, bool pass, const std::string& detail, double seconds) {
  char line[64];
  std::snprintf(line, sizeof line, "%s %d %s", pass ? "PASS" : "FAIL", id, name.c_str());
  char tail[32];
  std::snprintf(tail, sizeof tail, " [%.1f s]\n", seconds);
  const std::string text = std::string(line) + ": " + detail + tail;
  std::fputs(text.c_str(), stdout);
  std::fflush(stdout);
  transcript += text;
  outcomes.push_back({id, name, pass, detail, seconds});
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

int cli_call(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  if (code != 0) std::fprintf(stderr, "hadapt %s failed: %s", args[0].c_str(), err.str().c_str());
  return code;
}

bool same_params(const ParameterStore& a, const ParameterStore& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const auto& x = a.entries()[i].value;
    const auto& y = b.entries()[i].value;
    if (a.entries()[i].info.name != b.entries()[i].info.name || x.size() != y.size()) return false;
    if (std::memcmp(x.values().data(), y.values().data(), x.size() * 8) != 0) return false;
  }
  return true;
}

// Accuracy in points, correlations as they are.
double points(const TaskSpec& spec, double v) { return spec.is_regression() ? v : 100.0 * v; }

// ---- 1 ----
void identity_at_init(const Model& backbone) {
  const Stopwatch sw;
  Model adapted = backbone.clone();
  inject_adapters(adapted);
  Rng rng(2024);
  double worst = 0.0;
  for (int i = 0; i < 100; ++i) {
    const Batch batch = hadapt::testing::random_batch(rng, 8, 2 + rng.below(31), backbone.config.vocab_size);
    Tape t1 = Tape::inference(), t2 = Tape::inference();
    const Tensor a = forward(t1, backbone, batch).logits;
    const Tensor b = forward(t2, adapted, batch).logits;
    for (std::size_t k = 0; k < a.size(); ++k) worst = std::max(worst, std::abs(a[k] - b[k]));
  }
  const double s = sw.seconds();
  emit(1, "identity-at-init", worst <= 1e-12 && s < 10.0,
       "max |logit change| " + fmt("%.3g", worst) + " over 100 batches (limit 1e-12, < 10 s)", s);
}

// ---- 2 ----
void gradient_correctness() {
  const Stopwatch sw;
  ModelConfig cfg = hadapt::testing::tiny_config();
  Model model = build_model(cfg, 77);
  inject_adapters(model);
  apply_regime(model, TuningRegime::hadamard());
  Rng rng(78);
  hadapt::testing::perturb(model, rng);
  const Batch batch = hadapt::testing::random_batch(rng, 4, 10);
  const std::vector<int> labels{0, 1, 1, 0};
  std::vector<Tensor> leaves;
  for (const auto& p : model.params.entries())
    if (p.info.trainable) leaves.push_back(p.value);
  const auto check = hadapt::testing::grad_check(
      [&](Tape& t) { return cross_entropy(t, forward(t, model, batch).logits, labels); }, leaves, 1e-5);
  const double s = sw.seconds();
  emit(2, "gradient-correctness", check.max_rel < 1e-4 && s < 60.0,
       std::to_string(check.checked) + " hadamard-regime entries, max rel error " + fmt("%.3g", check.max_rel) +
           ", max abs error " + fmt("%.3g", check.max_abs) + " (limit 1e-4, < 60 s)",
       s);
}

// ---- 3 ----
void parameter_accounting() {
  const Stopwatch sw;
  const ModelConfig base = ModelConfig::bert_base(), large = ModelConfig::bert_large();
  const auto b = count_parameters(apply_regime(parameter_layout(base, 1), base, TuningRegime::hadamard()));
  const auto b1 = count_parameters(apply_regime(parameter_layout(base, 1), base, TuningRegime::hadamard(1)));
  const auto l = count_parameters(apply_regime(parameter_layout(large, 1), large, TuningRegime::hadamard()));
  const double frac = 100.0 * b.trainable_fraction();
  const bool ok = b.trainable == 36864 && b1.trainable == 3072 && b1.trainable >= 3000 && b1.trainable <= 4000 &&
                  l.trainable == 98304 && l.trainable >= 30000 && l.trainable <= 100000 && frac >= 0.030 &&
                  frac <= 0.040;
  const double s = sw.seconds();
  emit(3, "parameter-accounting", ok && s < 1.0,
       "base " + std::to_string(b.trainable) + " of " + std::to_string(b.total) + " (" + fmt("%.4f%%", frac) +
           "), per layer " + std::to_string(b1.trainable) + ", large " + std::to_string(l.trainable),
       s);
}

// ---- 4 ----
struct SuiteRuns {
  std::map<std::string, Model> stage1;    // seed 1 only
  std::map<std::string, Model> hadamard;  // seed 1 only
  std::map<std::string, double> hadamard_metric;
};

SuiteRuns regime_ordering(const Model& backbone, const RunConfig& cfg) {
  const Stopwatch sw;
  SuiteRuns keep;
  const std::vector<std::uint64_t> seeds{1, 2, 3};
  std::size_t margin_ok = 0, close = 0;
  std::string detail;
  for (const auto& name : builtin_task_names()) {
    const TaskData task =
        gen_task(TaskSpec::builtin(name, cfg.tasks.data_seed, cfg.tasks.train_size, cfg.tasks.dev_size));
    double cls = 0, had = 0, full = 0;
    for (std::uint64_t seed : seeds) {
      const Model s1 = train_stage1_classifier(backbone, task, cfg.train, seed);
      cls += evaluate(s1, task.spec, task.dev).value;
      TuneResult h = tune(backbone, TuningRegime::hadamard(), task, cfg.train, seed, &s1);
      had += h.report.final_metrics.value;
      full += tune(backbone, TuningRegime::full(), task, cfg.train, seed).report.final_metrics.value;
      if (seed == 1) {
        keep.stage1.emplace(name, s1);
        keep.hadamard_metric[name] = h.report.final_metrics.value;
        keep.hadamard.emplace(name, std::move(h.model));
      }
    }
    const double n = static_cast<double>(seeds.size());
    cls = points(task.spec, cls / n);
    had = points(task.spec, had / n);
    full = points(task.spec, full / n);
    const double unit = task.spec.is_regression() ? 0.01 : 1.0;
    margin_ok += had - cls >= 2.0 * unit;
    close += full - had <= 5.0 * unit;
    detail += name + " " + fmt("%.3f", cls) + "/" + fmt("%.3f", had) + "/" + fmt("%.3f", full) + "; ";
    std::printf("  %-10s classifier %.3f  hadamard %.3f  full %.3f\n", name.c_str(), cls, had, full);
    std::fflush(stdout);
  }
  const double s = sw.seconds();
  emit(4, "regime-ordering", margin_ok == 4 && close >= 3 && sw.cpu_seconds() < 900.0,
       detail + "classifier+margin on " + std::to_string(margin_ok) + "/4, hadamard within 5 of full on " +
           std::to_string(close) + "/4, cpu " + fmt("%.0f s", sw.cpu_seconds()),
       s);
  return keep;
}

// ---- 5 ----
void freeze_soundness(const fs::path& work, const fs::path& backbone_dir) {
  const Stopwatch sw;
  const fs::path cls = work / "freeze_classifier", had = work / "freeze_hadamard", start = work / "freeze_start";
  bool ok = cli_call({"tune", "--from", backbone_dir.string(), "--task", "POLARITY", "--regime", "classifier",
                      "--seed", "1", "--out", cls.string()}) == 0;
  ok = ok && cli_call({"tune", "--from", backbone_dir.string(), "--task", "POLARITY", "--regime", "hadamard",
                       "--stage1-from", cls.string(), "--seed", "1", "--out", had.string()}) == 0;
  std::set<std::string> changed;
  if (ok) {
    // The stage-2 starting point: backbone, stage-1 head, identity adapters.
    Model m = load_checkpoint(backbone_dir / "checkpoint");
    reset_head(m, 2, false, 0);
    load_checkpoint_subset(m, cls / "checkpoint", {ModuleTag::POOLER, ModuleTag::CLASSIFIER});
    inject_adapters(m);
    save_checkpoint(m, start);

    const json ma = json::parse(slurp(start / "manifest.json"));
    const json mb = json::parse(slurp(had / "checkpoint" / "manifest.json"));
    const std::string a = slurp(start / "tensors.bin"), b = slurp(had / "checkpoint" / "tensors.bin");
    ok = a.size() == b.size() && ma.at("tensors").size() == mb.at("tensors").size();
    for (std::size_t i = 0; ok && i < ma.at("tensors").size(); ++i) {
      const json& ta = ma["tensors"][i];
      const json& tb = mb["tensors"][i];
      ok = ta.at("name") == tb.at("name") && ta.at("byte_offset") == tb.at("byte_offset");
      const std::size_t off = ta.at("byte_offset"), len = ta.at("byte_len");
      if (std::memcmp(a.data() + off, b.data() + off, len) != 0) changed.insert(ta.at("module_tag"));
    }
  }
  const std::set<std::string> allowed{"ADAPTER_W", "ADAPTER_B", "FFN_NORM"};
  std::string tags;
  for (const auto& t : changed) tags += (tags.empty() ? "" : ",") + t;
  emit(5, "freeze-soundness", ok && changed == allowed, "tags with changed bytes: {" + tags + "}", sw.seconds());
}

// ---- 6 ----
void oracles(const Model& model, const Dataset& eval) {
  const Stopwatch sw;
  Rng rng(606);
  double spec = 0, mcc_err = 0, pear = 0, charv = 0;
  for (int i = 0; i < 50; ++i) {
    Eigen::MatrixXd m(8, 8);
    for (Eigen::Index r = 0; r < 8; ++r)
      for (Eigen::Index c = 0; c < 8; ++c) m(r, c) = rng.normal();
    const double svd = Eigen::JacobiSVD<Eigen::MatrixXd>(m).singularValues()(0);
    spec = std::max(spec, std::abs(spectral_norm(m, {.tol = 1e-12, .max_iter = 100000}) - svd));
  }
  for (int i = 0; i < 100; ++i) {
    const std::size_t n = 2 + rng.below(200);
    std::vector<int> p(n), y(n);
    std::vector<double> x(n), z(n);
    long double tp = 0, tn = 0, fp = 0, fn = 0;
    for (std::size_t k = 0; k < n; ++k) {
      p[k] = rng.bernoulli(0.5);
      y[k] = rng.bernoulli(0.5);
      tp += p[k] && y[k];
      tn += !p[k] && !y[k];
      fp += p[k] && !y[k];
      fn += !p[k] && y[k];
      x[k] = rng.normal();
      z[k] = x[k] * 0.5 + rng.normal();
    }
    const long double d = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn);
    const double ref = d == 0 ? 0.0 : static_cast<double>((tp * tn - fp * fn) / std::sqrt(d));
    mcc_err = std::max(mcc_err, std::abs(mcc(p, y) - ref));
    long double mx = 0, mz = 0;
    for (std::size_t k = 0; k < n; ++k) {
      mx += x[k];
      mz += z[k];
    }
    mx /= n;
    mz /= n;
    long double sxz = 0, sxx = 0, szz = 0;
    for (std::size_t k = 0; k < n; ++k) {
      sxz += (x[k] - mx) * (z[k] - mz);
      sxx += (x[k] - mx) * (x[k] - mx);
      szz += (z[k] - mz) * (z[k] - mz);
    }
    pear = std::max(pear, std::abs(pearson<double>(x, z) - static_cast<double>(sxz / std::sqrt(sxx * szz))));
  }
  // Characteristic values of the real adapter outputs against a per-example loop.
  const CharacteristicValues cv = characteristic_values(model, eval);
  const std::size_t h = model.config.hidden;
  std::vector<double> totals(model.config.layers, 0.0);
  for (const auto& ex : eval.examples) {
    Dataset one;
    one.examples.push_back(ex);
    Tape tape = Tape::inference();
    const ForwardResult r = forward(tape, model, make_batch(one), true);
    for (std::size_t l = 0; l < totals.size(); ++l) {
      const Tensor& a = r.trace->adapted[l];
      double sum_rows = 0;
      for (std::size_t j = 0; j < ex.tokens.size(); ++j) {
        double row = 0;
        for (std::size_t i = 0; i < h; ++i) row += a[j * h + i];
        sum_rows += row / static_cast<double>(h);
      }
      totals[l] += sum_rows / static_cast<double>(ex.tokens.size());
    }
  }
  for (std::size_t l = 0; l < totals.size(); ++l)
    charv = std::max(charv, std::abs(cv.layers[l].value - totals[l] / static_cast<double>(eval.size())));
  emit(6, "oracles", spec < 1e-8 && mcc_err < 1e-12 && pear < 1e-12 && charv < 1e-12,
       "spectral " + fmt("%.3g", spec) + ", mcc " + fmt("%.3g", mcc_err) + ", pearson " + fmt("%.3g", pear) +
           ", characteristic " + fmt("%.3g", charv),
       sw.seconds());
}

// ---- 7 ----
void layer_ablation_check(const Model& backbone, const RunConfig& cfg, const SuiteRuns& runs) {
  const Stopwatch sw;
  const std::size_t L = backbone.config.layers;
  bool identical = true, linear = true;
  std::size_t close = 0;
  std::string detail;
  const auto layout = parameter_layout(backbone.config, 1);
  for (std::size_t k = 1; k <= L; ++k)
    linear &= count_parameters(apply_regime(layout, backbone.config, TuningRegime::hadamard(k))).trainable ==
              k * 4 * backbone.config.hidden;
  for (const char* name : {"POLARITY", "PARAPHRASE", "ENTAIL"}) {
    const TaskData task =
        gen_task(TaskSpec::builtin(name, cfg.tasks.data_seed, cfg.tasks.train_size, cfg.tasks.dev_size));
    const Model& s1 = runs.stage1.at(name);
    const TuneResult top_all = tune(backbone, TuningRegime::hadamard(L), task, cfg.train, 1, &s1);
    identical &= same_params(top_all.model.params, runs.hadamard.at(name).params) &&
                 top_all.report.final_metrics.value == runs.hadamard_metric.at(name);
    const TuneResult half = tune(backbone, TuningRegime::hadamard(L / 2), task, cfg.train, 1, &s1);
    const double gap = 100.0 * (top_all.report.final_metrics.value - half.report.final_metrics.value);
    close += gap <= 3.0;
    detail += std::string(name) + " k=L-k=L/2 " + fmt("%.2f", gap) + "; ";
  }
  emit(7, "layer-ablation", identical && linear && close >= 2,
       detail + "bit-identical k=L " + (identical ? "yes" : "no") + ", linear counts " + (linear ? "yes" : "no") +
           ", within 3 points on " + std::to_string(close) + "/3",
       sw.seconds());
}

// ---- 8 ----
void determinism(const fs::path& work, const fs::path& backbone_dir, const fs::path& config) {
  const Stopwatch sw;
  bool ok = true;
  for (const char* run : {"rerun_a", "rerun_b"}) {
    ok &= cli_call({"tune", "--from", backbone_dir.string(), "--task", "ENTAIL", "--seed", "5", "--out",
                    (work / run).string()}) == 0;
    ok &= cli_call({"analyze", "norms", "--before", backbone_dir.string(), "--after", (work / run).string(), "--task",
                    "ENTAIL", "--out", (work / run / "norms").string()}) == 0;
  }
  ok &= cli_call({"pretrain", "--config", config.string(), "--out", (work / "pretrain_rerun").string()}) == 0;
  std::vector<std::string> differing;
  for (const char* f : {"report.json", "metrics.csv", "config.json", "checkpoint/manifest.json",
                        "checkpoint/tensors.bin", "norms/norms.json", "norms/norms.csv"}) {
    if (slurp(work / "rerun_a" / f) != slurp(work / "rerun_b" / f)) differing.push_back(f);
  }
  for (const char* f : {"checkpoint/tensors.bin", "checkpoint/manifest.json", "loss_curve.json"}) {
    if (slurp(backbone_dir / f) != slurp(work / "pretrain_rerun" / f)) differing.push_back(std::string("pretrain/") + f);
  }
  std::string list;
  for (const auto& d : differing) list += " " + d;
  emit(8, "determinism", ok && differing.empty(),
       differing.empty() ? "tune, analyze and pretrain reruns byte-identical" : "differs:" + list, sw.seconds());
}

// ---- 9 ----
void findings(const Model& backbone, const RunConfig& cfg, const SuiteRuns& runs, const fs::path& work) {
  const Stopwatch sw;
  const TaskData task =
      gen_task(TaskSpec::builtin("POLARITY", cfg.tasks.data_seed, cfg.tasks.train_size, cfg.tasks.dev_size));
  const Model& s1 = runs.stage1.at("POLARITY");
  std::vector<Finding> all;

  const NormStudyResult norms = norm_study(backbone, runs.hadamard.at("POLARITY"), eval_slice(task.dev));
  const AblationTable modules =
      module_ablation(backbone, s1, task, cfg.train, 1, {ModuleSet::parse("W"), ModuleSet::parse("B")});
  const FittingStudy fitting = fitting_study(backbone, s1, task, cfg.train, 1, {1, 3});
  std::vector<std::string> names;
  std::vector<const Model*> models;
  for (const auto& [name, model] : runs.hadamard) {
    names.push_back(name);
    models.push_back(&model);
  }
  const PatternStudy patterns = pattern_study(names, models);

  json out = json::object();
  out["norms"] = to_json(norms);
  out["modules"] = to_json(modules);
  out["fitting"] = to_json(fitting);
  out["patterns"] = to_json(patterns);
  write_json(out, work / "findings.json");

  for (const auto* group : {&norms.findings, &modules.findings, &fitting.findings, &patterns.findings})
    all.insert(all.end(), group->begin(), group->end());
  for (const auto& f : all)
    std::printf("  finding %s: %s (%s)\n", f.name.c_str(), f.passed ? "observed" : "not observed", f.detail.c_str());
  const bool emitted = norms.findings.size() == backbone.config.layers && modules.findings.size() == 1 &&
                       fitting.findings.size() == 1 && patterns.findings.size() == 1;
  emit(9, "reported-findings", emitted,
       std::to_string(all.size()) + " findings logged to " + (work / "findings.json").string(), sw.seconds());
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria"};
  std::string work_dir = "acceptance_work", config_path = HADAPT_DESK_CONFIG;
  app.add_option("--work", work_dir, "Scratch directory");
  app.add_option("--config", config_path, "Run config for the desk model");
  CLI11_PARSE(app, argc, argv);

  const Stopwatch total;
  const fs::path work(work_dir);
  fs::remove_all(work);
  fs::create_directories(work);
  const RunConfig cfg = load_run_config(config_path);
  const fs::path backbone_dir = work / "backbone";

  identity_at_init(build_model(cfg.model, cfg.seed));
  gradient_correctness();
  parameter_accounting();

  const Stopwatch pre;
  if (cli_call({"pretrain", "--config", config_path, "--out", backbone_dir.string()}) != 0) return 1;
  const Model backbone = load_checkpoint(backbone_dir / "checkpoint");
  std::printf("  pretrained backbone in %.1f s\n", pre.seconds());

  const SuiteRuns runs = regime_ordering(backbone, cfg);
  freeze_soundness(work, backbone_dir);
  oracles(runs.hadamard.at("POLARITY"),
          eval_slice(gen_task(TaskSpec::builtin("POLARITY", cfg.tasks.data_seed, cfg.tasks.train_size,
                                                cfg.tasks.dev_size))
                         .dev,
                     64));
  layer_ablation_check(backbone, cfg, runs);
  determinism(work, backbone_dir, config_path);
  findings(backbone, cfg, runs, work);

  int failed = 0;
  json summary = json::array();
  for (const auto& o : outcomes) {
    failed += !o.pass;
    summary.push_back(json{{"criterion", o.id}, {"name", o.name}, {"pass", o.pass}, {"detail", o.detail}});
  }
  write_json(summary, work / "acceptance.json");
  std::ofstream(work / "acceptance.txt") << transcript;
  std::printf("%d of %zu criteria passed in %.1f s\n", static_cast<int>(outcomes.size()) - failed, outcomes.size(),
              total.seconds());
  return failed;
}
