#include "cli.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>

#include "hadapt/analysis.hpp"
#include "hadapt/checkpoint.hpp"
#include "hadapt/error.hpp"
#include "hadapt/tasks.hpp"

namespace hadapt::cli {
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + " is not valid JSON: " + e.what());
  }
}

void write_text(const std::string& text, const fs::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ConfigError("cannot write " + path.string());
  out << text;
}

void make_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw ConfigError("cannot create output directory " + dir.string());
}

fs::path checkpoint_dir(const fs::path& ref) {
  if (fs::exists(ref / "checkpoint" / "manifest.json")) return ref / "checkpoint";
  if (fs::exists(ref / "manifest.json")) return ref;
  throw ConfigError("no checkpoint found at " + ref.string());
}

Model load_model(const fs::path& ref) { return load_checkpoint(checkpoint_dir(ref)); }

// Run config stored next to a checkpoint, with the per-command block removed.
std::optional<RunConfig> stored_config(const fs::path& ref) {
  if (!fs::exists(ref / "config.json")) return std::nullopt;
  json j = read_json(ref / "config.json");
  j.erase("run");
  return run_config_from_json(j);
}

json stored_run_block(const fs::path& ref) {
  if (!fs::exists(ref / "config.json")) throw ConfigError("run directory " + ref.string() + " has no config.json");
  const json j = read_json(ref / "config.json");
  if (!j.contains("run")) throw ConfigError(ref.string() + "/config.json has no run block");
  return j.at("run");
}

RunConfig resolve_config(const std::string& config_path, const fs::path& backbone, const Model& model) {
  RunConfig cfg;
  if (!config_path.empty()) {
    cfg = load_run_config(config_path);
  } else if (auto stored = stored_config(backbone)) {
    cfg = *stored;
  }
  cfg.model = model.config;
  return cfg;
}

TaskData make_task(const std::string& name, const RunConfig& cfg) {
  return gen_task(TaskSpec::builtin(name, cfg.tasks.data_seed, cfg.tasks.train_size, cfg.tasks.dev_size));
}

json with_run(const RunConfig& cfg, json run) {
  json j = to_json(cfg);
  j["run"] = std::move(run);
  return j;
}

json accounting_json(const ParameterAccounting& a) {
  json by_tag = json::object(), trainable_by_tag = json::object();
  for (const auto& [tag, n] : a.by_tag) by_tag[std::string(to_string(tag))] = n;
  for (const auto& [tag, n] : a.trainable_by_tag) trainable_by_tag[std::string(to_string(tag))] = n;
  return json{{"total", a.total},
              {"trainable", a.trainable},
              {"trainable_fraction", a.trainable_fraction()},
              {"by_tag", by_tag},
              {"trainable_by_tag", trainable_by_tag}};
}

void write_study(const json& j, const std::string& csv, const fs::path& out, const std::string& kind) {
  make_dir(out);
  write_json(j, out / (kind + ".json"));
  write_text(csv, out / (kind + ".csv"));
}

void print_findings(const std::vector<Finding>& findings, std::ostream& out) {
  for (const auto& f : findings) {
    out << "finding " << f.name << ": " << (f.passed ? "observed" : "not observed") << " (" << f.detail << ")\n";
  }
}

std::vector<std::size_t> parse_ks(const std::string& s) {
  std::vector<std::size_t> ks;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      const long v = std::stol(item, &used);
      if (used != item.size() || v < 1) throw std::invalid_argument(item);
      ks.push_back(static_cast<std::size_t>(v));
    } catch (const std::exception&) {
      throw UsageError("--ks: '" + item + "' is not a positive integer");
    }
  }
  return ks;
}

TuningRegime build_regime(const std::string& regime, const std::string& modules, int layers, bool bottom) {
  TuningRegime r;
  r.kind = parse_regime_kind(regime);
  if (!modules.empty()) {
    if (r.kind != RegimeKind::custom) throw UsageError("--modules conflicts with --regime " + regime + " (use --regime custom)");
    r.modules = ModuleSet::parse(modules);
  } else if (r.kind == RegimeKind::custom) {
    throw UsageError("--regime custom needs --modules");
  }
  if (layers > 0) {
    if (r.kind == RegimeKind::full || r.kind == RegimeKind::classifier_only) {
      throw UsageError("--layers does not apply to --regime " + regime);
    }
    r.unfrozen_layers = static_cast<std::size_t>(layers);
  }
  if (bottom && !r.unfrozen_layers) throw UsageError("--bottom needs --layers");
  r.bottom_layers = bottom;
  return r;
}

// ---- commands ----

struct PretrainArgs {
  std::string config, out;
  std::optional<std::uint64_t> seed;
};

void cmd_pretrain(const PretrainArgs& a, std::ostream& out) {
  const auto t0 = Clock::now();
  RunConfig cfg = a.config.empty() ? RunConfig{} : load_run_config(a.config);
  if (a.seed) cfg.seed = *a.seed;
  const fs::path dir(a.out);
  make_dir(dir);
  write_json(with_run(cfg, json{{"command", "pretrain"}}), dir / "config.json");
  const PretrainResult res = pretrain(cfg.model, cfg.pretrain, cfg.seed);
  save_checkpoint(res.model, dir / "checkpoint");
  write_json(json{{"loss_curve", res.loss_curve},
                  {"initial", res.loss_curve.front()},
                  {"final", res.loss_curve.back()},
                  {"parameter_accounting", accounting_json(count_parameters(res.model.params))}},
             dir / "loss_curve.json");
  write_json(json{{"wall_time_s", seconds_since(t0)}}, dir / "timing.json");
  out << "pretrain: masked-token loss " << format_double(res.loss_curve.front()) << " -> "
      << format_double(res.loss_curve.back()) << ", checkpoint " << (dir / "checkpoint").string() << '\n';
}

struct TuneArgs {
  std::string from, task, regime = "hadamard", modules, out, config, stage1_from;
  int layers = 0;
  bool bottom = false, joint = false;
  std::optional<std::uint64_t> seed;
};

void cmd_tune(const TuneArgs& a, std::ostream& out) {
  const auto t0 = Clock::now();
  const TuningRegime regime = build_regime(a.regime, a.modules, a.layers, a.bottom);
  const Model backbone = load_model(a.from);
  RunConfig cfg = resolve_config(a.config, a.from, backbone);
  if (a.seed) cfg.seed = *a.seed;
  if (a.joint) cfg.train.joint = true;
  const TaskData task = make_task(a.task, cfg);

  std::optional<Model> stage1;
  if (!a.stage1_from.empty()) stage1 = load_model(a.stage1_from);
  const fs::path dir(a.out);
  make_dir(dir);
  json run{{"command", "tune"},
           {"task", task.spec.name},
           {"regime", regime.name()},
           {"seed", cfg.seed},
           {"from", a.from},
           {"stage1_from", a.stage1_from}};
  write_json(with_run(cfg, run), dir / "config.json");

  TuneResult res = tune(backbone, regime, task, cfg.train, cfg.seed, stage1 ? &*stage1 : nullptr);
  save_checkpoint(res.model, dir / "checkpoint");
  write_run_files(res.report, seconds_since(t0), dir);
  out << task.spec.name << ' ' << regime.name() << ": " << to_string(res.report.final_metrics.metric) << ' '
      << format_double(res.report.final_metrics.value) << ", trainable " << res.report.accounting.trainable << " ("
      << format_fraction(res.report.accounting.trainable_fraction()) << ")\n";
}

struct AnalyzeArgs {
  std::string kind, from, before, after, task, out, config, stage1_from, ks, sets;
  std::vector<std::string> runs;
  std::optional<std::uint64_t> seed;
};

RunConfig analysis_config(const AnalyzeArgs& a, const fs::path& ref, const Model& model) {
  RunConfig cfg = resolve_config(a.config, ref, model);
  if (a.seed) cfg.seed = *a.seed;
  return cfg;
}

void require(const std::string& value, const char* flag, const std::string& kind) {
  if (value.empty()) throw UsageError("analyze " + kind + " needs " + flag);
}

void cmd_analyze(const AnalyzeArgs& a, std::ostream& out) {
  const fs::path dir(a.out);
  if (a.kind == "patterns") {
    if (a.runs.size() < 2) throw UsageError("patterns needs >= 2 runs");
    std::vector<Model> models;
    std::vector<std::string> tasks;
    for (const auto& r : a.runs) {
      models.push_back(load_model(r));
      tasks.push_back(stored_run_block(r).value("task", fs::path(r).filename().string()));
    }
    std::vector<const Model*> ptrs;
    for (const auto& m : models) ptrs.push_back(&m);
    const PatternStudy p = pattern_study(tasks, ptrs);
    write_study(to_json(p), to_csv(p), dir, "patterns");
    print_findings(p.findings, out);
    return;
  }
  if (a.kind == "norms") {
    require(a.before, "--before", a.kind);
    require(a.after, "--after", a.kind);
    require(a.task, "--task", a.kind);
    const Model before = load_model(a.before), after = load_model(a.after);
    const RunConfig cfg = analysis_config(a, a.after, after);
    const NormStudyResult r = norm_study(before, after, eval_slice(make_task(a.task, cfg).dev));
    write_study(to_json(r), to_csv(r), dir, "norms");
    print_findings(r.findings, out);
    return;
  }
  require(a.from, "--from", a.kind);
  require(a.task, "--task", a.kind);
  const Model backbone = load_model(a.from);
  const RunConfig cfg = analysis_config(a, a.from, backbone);
  const TaskData task = make_task(a.task, cfg);
  if (a.kind == "gradients") {
    const GradientStudy g = gradient_study(backbone, task, cfg.train, cfg.seed);
    write_study(to_json(g), to_csv(g), dir, "gradients");
    print_findings(g.findings, out);
    return;
  }
  const Model stage1 = a.stage1_from.empty() ? train_stage1_classifier(backbone, task, cfg.train, cfg.seed)
                                             : load_model(a.stage1_from);
  if (a.kind == "fitting") {
    const FittingStudy f = fitting_study(backbone, stage1, task, cfg.train, cfg.seed);
    write_study(to_json(f), to_csv(f), dir, "fitting");
    print_findings(f.findings, out);
  } else if (a.kind == "layers") {
    std::vector<std::size_t> ks;
    if (a.ks.empty()) {
      for (std::size_t k = 1; k <= backbone.config.layers; ++k) ks.push_back(k);
    } else {
      ks = parse_ks(a.ks);
    }
    const AblationTable t = layer_ablation(backbone, stage1, task, cfg.train, cfg.seed, ks);
    write_study(to_json(t), to_csv(t), dir, "layers");
    print_findings(t.findings, out);
  } else if (a.kind == "modules") {
    std::vector<ModuleSet> sets;
    if (a.sets.empty()) {
      sets = default_module_sets();
    } else {
      std::stringstream ss(a.sets);
      std::string item;
      while (std::getline(ss, item, ';')) sets.push_back(ModuleSet::parse(item));
    }
    const AblationTable t = module_ablation(backbone, stage1, task, cfg.train, cfg.seed, sets);
    write_study(to_json(t), to_csv(t), dir, "modules");
    print_findings(t.findings, out);
  } else {
    throw UsageError("unknown analysis '" + a.kind + "'");
  }
}

struct ReportArgs {
  std::vector<std::string> runs;
  std::string csv;
};

void cmd_report(const ReportArgs& a, std::ostream& out) {
  struct Row {
    std::string task, regime, metric;
    double value = 0.0, wall = 0.0;
    std::size_t trainable = 0, runs = 0;
    double fraction = 0.0;
  };
  std::vector<Row> rows;
  for (const auto& r : a.runs) {
    const fs::path dir(r);
    if (!fs::exists(dir / "report.json")) throw ConfigError("incomplete run directory " + dir.string() + ": missing report.json");
    const json rep = read_json(dir / "report.json");
    double wall = 0.0;
    if (fs::exists(dir / "timing.json")) wall = read_json(dir / "timing.json").value("wall_time_s", 0.0);
    try {
      const std::string task = rep.at("task"), regime = rep.at("regime");
      auto it = std::find_if(rows.begin(), rows.end(), [&](const Row& x) { return x.task == task && x.regime == regime; });
      if (it == rows.end()) {
        rows.push_back(Row{task, regime, rep.at("final_metrics").at("metric"), 0.0, 0.0,
                           rep.at("parameter_accounting").at("trainable"), 0,
                           rep.at("parameter_accounting").at("trainable_fraction")});
        it = rows.end() - 1;
      }
      it->value += rep.at("final_metrics").at("value").get<double>();
      it->wall += wall;
      ++it->runs;
    } catch (const json::exception& e) {
      throw ConfigError("malformed report.json in " + dir.string() + ": " + e.what());
    }
  }
  std::ostringstream csv;
  csv << "task,regime,metric,value,trainable,fraction,wall_time_s,runs\n";
  out << std::left << std::setw(12) << "task" << std::setw(22) << "regime" << std::setw(10) << "metric" << std::setw(10)
      << "value" << std::setw(12) << "trainable" << std::setw(10) << "fraction" << std::setw(10) << "wall_s" << "runs\n";
  for (auto& row : rows) {
    row.value /= static_cast<double>(row.runs);
    row.wall /= static_cast<double>(row.runs);
    char value[32], wall[32];
    std::snprintf(value, sizeof value, "%.4f", row.value);
    std::snprintf(wall, sizeof wall, "%.1f", row.wall);
    out << std::setw(12) << row.task << std::setw(22) << row.regime << std::setw(10) << row.metric << std::setw(10)
        << value << std::setw(12) << row.trainable << std::setw(10) << format_fraction(row.fraction) << std::setw(10)
        << wall << row.runs << '\n';
    csv << row.task << ',' << row.regime << ',' << row.metric << ',' << format_double(row.value) << ',' << row.trainable
        << ',' << format_fraction(row.fraction) << ',' << format_double(row.wall) << ',' << row.runs << '\n';
  }
  if (!a.csv.empty()) write_text(csv.str(), a.csv);
}

struct GenDataArgs {
  std::string task, split = "train", out, config;
  std::size_t size = 1024;
  std::optional<std::uint64_t> seed;
};

void cmd_gen_data(const GenDataArgs& a, std::ostream& out) {
  RunConfig cfg = a.config.empty() ? RunConfig{} : load_run_config(a.config);
  if (a.seed) cfg.tasks.data_seed = *a.seed;
  Dataset data;
  if (a.task == "PRETRAIN") {
    data = gen_pretrain_corpus(a.seed.value_or(cfg.seed), a.size, cfg.model.max_seq_len);
  } else {
    const TaskData t = make_task(a.task, cfg);
    if (a.split != "train" && a.split != "dev") throw UsageError("--split must be train or dev");
    data = a.split == "train" ? t.train : t.dev;
  }
  write_jsonl(data, a.out);
  out << "wrote " << data.size() << " examples to " << a.out << '\n';
}

struct AccountingArgs {
  std::string shape = "base", regime = "hadamard", modules;
  int layers = 0;
};

void cmd_accounting(const AccountingArgs& a, std::ostream& out) {
  ModelConfig cfg;
  if (a.shape == "base") cfg = ModelConfig::bert_base();
  else if (a.shape == "large") cfg = ModelConfig::bert_large();
  else if (a.shape == "desk") cfg = ModelConfig::desk();
  else throw UsageError("--shape must be desk, base or large");
  const TuningRegime regime = build_regime(a.regime, a.modules, a.layers, false);
  const bool adapters = regime.kind != RegimeKind::full && regime.kind != RegimeKind::classifier_only;
  const ParameterAccounting acc = count_parameters(apply_regime(parameter_layout(cfg, adapters ? 1 : 0), cfg, regime));
  out << "shape " << a.shape << ", regime " << regime.name() << '\n'
      << "total " << acc.total << "\ntrainable " << acc.trainable << "\nfraction "
      << format_fraction(acc.trainable_fraction()) << '\n';
  for (const auto& [tag, n] : acc.trainable_by_tag) out << "  " << to_string(tag) << ' ' << n << '\n';
}

}  // namespace

json report_json(const RunReport& r) {
  json epochs = json::array();
  for (const auto& e : r.per_epoch) epochs.push_back(json{{"loss", e.loss}, {"metric", e.metric}});
  return json{{"task", r.task},
              {"regime", r.regime},
              {"seeds", {{"seed", r.seed}, {"data_seed", r.data_seed}}},
              {"per_epoch", epochs},
              {"final_metrics",
               {{"metric", std::string(to_string(r.final_metrics.metric))},
                {"value", r.final_metrics.value},
                {"loss", r.final_metrics.loss}}},
              {"parameter_accounting", accounting_json(r.accounting)},
              {"trainable_tags", r.trainable_tags}};
}

void write_run_files(const RunReport& report, double wall_time_s, const fs::path& dir) {
  make_dir(dir);
  write_json(report_json(report), dir / "report.json");
  std::ostringstream csv;
  csv << "epoch,loss,metric\n";
  for (std::size_t i = 0; i < report.per_epoch.size(); ++i) {
    csv << i + 1 << ',' << format_double(report.per_epoch[i].loss) << ',' << format_double(report.per_epoch[i].metric)
        << '\n';
  }
  write_text(csv.str(), dir / "metrics.csv");
  write_json(json{{"wall_time_s", wall_time_s}}, dir / "timing.json");
}

std::string format_fraction(double fraction) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3f%%", fraction * 100.0);
  return buf;
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Hadamard adapter laboratory"};
  app.require_subcommand(1);

  PretrainArgs pa;
  std::uint64_t seed_value = 0;
  auto* pretrain_cmd = app.add_subcommand("pretrain", "Masked-token pretraining of a backbone");
  pretrain_cmd->add_option("--config", pa.config, "Run config JSON");
  pretrain_cmd->add_option("--out", pa.out, "Output run directory")->required();
  auto* pretrain_seed = pretrain_cmd->add_option("--seed", seed_value, "Seed override");

  TuneArgs ta;
  auto* tune_cmd = app.add_subcommand("tune", "Tune a backbone on one task under a regime");
  tune_cmd->add_option("--from", ta.from, "Backbone run or checkpoint directory")->required();
  tune_cmd->add_option("--task", ta.task, "POLARITY, PARAPHRASE, ENTAIL or OVERLAP")->required();
  tune_cmd->add_option("--regime", ta.regime, "full, classifier, hadamard, bias or custom");
  tune_cmd->add_option("--modules", ta.modules, "Module codes for custom, e.g. B,N");
  tune_cmd->add_option("--layers", ta.layers, "Unfreeze only the top k layers");
  tune_cmd->add_flag("--bottom", ta.bottom, "Unfreeze the bottom k layers instead");
  tune_cmd->add_option("--stage1-from", ta.stage1_from, "Classifier run whose head is reused");
  tune_cmd->add_flag("--joint", ta.joint, "Train the head together with the regime");
  tune_cmd->add_option("--config", ta.config, "Run config JSON (defaults to the backbone's)");
  tune_cmd->add_option("--out", ta.out, "Output run directory")->required();
  auto* tune_seed = tune_cmd->add_option("--seed", seed_value, "Seed override");

  AnalyzeArgs aa;
  auto* analyze_cmd = app.add_subcommand("analyze", "Run one analysis study");
  analyze_cmd->add_option("kind", aa.kind, "norms, fitting, gradients, patterns, layers or modules")->required();
  analyze_cmd->add_option("--from", aa.from, "Backbone run or checkpoint directory");
  analyze_cmd->add_option("--before", aa.before, "Model before tuning (norms)");
  analyze_cmd->add_option("--after", aa.after, "Model after tuning (norms)");
  analyze_cmd->add_option("--runs", aa.runs, "Adapter runs (patterns)");
  analyze_cmd->add_option("--task", aa.task, "Task name");
  analyze_cmd->add_option("--stage1-from", aa.stage1_from, "Classifier run whose head is reused");
  analyze_cmd->add_option("--ks", aa.ks, "Layer counts, e.g. 1,2,3,4 (layers)");
  analyze_cmd->add_option("--sets", aa.sets, "Module sets separated by ';' (modules)");
  analyze_cmd->add_option("--config", aa.config, "Run config JSON");
  analyze_cmd->add_option("--out", aa.out, "Output directory")->required();
  auto* analyze_seed = analyze_cmd->add_option("--seed", seed_value, "Seed override");

  ReportArgs ra;
  auto* report_cmd = app.add_subcommand("report", "Consolidated table over run directories");
  report_cmd->add_option("runs", ra.runs, "Run directories")->required();
  report_cmd->add_option("--csv", ra.csv, "Also write the table as CSV");

  GenDataArgs ga;
  auto* gen_cmd = app.add_subcommand("gen-data", "Export a synthetic dataset as JSONL");
  gen_cmd->add_option("--task", ga.task, "Task name or PRETRAIN")->required();
  gen_cmd->add_option("--split", ga.split, "train or dev");
  gen_cmd->add_option("--size", ga.size, "Corpus size (PRETRAIN)");
  gen_cmd->add_option("--config", ga.config, "Run config JSON");
  gen_cmd->add_option("--out", ga.out, "Output JSONL path")->required();
  auto* gen_seed = gen_cmd->add_option("--seed", seed_value, "Seed override");

  AccountingArgs ca;
  auto* acc_cmd = app.add_subcommand("accounting", "Parameter accounting for a shape and regime");
  acc_cmd->add_option("--shape", ca.shape, "desk, base or large");
  acc_cmd->add_option("--regime", ca.regime, "Regime name");
  acc_cmd->add_option("--modules", ca.modules, "Module codes for custom");
  acc_cmd->add_option("--layers", ca.layers, "Unfreeze only the top k layers");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "usage error: " << e.what() << '\n';
    for (auto* sub : app.get_subcommands()) err << sub->help();
    return kUsage;
  }

  const auto seed_of = [&](CLI::Option* opt) -> std::optional<std::uint64_t> {
    return opt->count() ? std::optional<std::uint64_t>(seed_value) : std::nullopt;
  };
  try {
    if (pretrain_cmd->parsed()) {
      pa.seed = seed_of(pretrain_seed);
      cmd_pretrain(pa, out);
    } else if (tune_cmd->parsed()) {
      ta.seed = seed_of(tune_seed);
      cmd_tune(ta, out);
    } else if (analyze_cmd->parsed()) {
      aa.seed = seed_of(analyze_seed);
      cmd_analyze(aa, out);
    } else if (report_cmd->parsed()) {
      cmd_report(ra, out);
    } else if (gen_cmd->parsed()) {
      ga.seed = seed_of(gen_seed);
      cmd_gen_data(ga, out);
    } else if (acc_cmd->parsed()) {
      cmd_accounting(ca, out);
    }
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << '\n';
    return kUsage;
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << '\n';
    return kData;
  } catch (const NumericError& e) {
    err << "numeric failure: " << e.what() << '\n';
    return kNumeric;
  } catch (const ShapeError& e) {
    err << "error: " << e.what() << '\n';
    return kData;
  } catch (const fs::filesystem_error& e) {
    err << "error: " << e.what() << '\n';
    return kData;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kFailure;
  }
  return kOk;
}

}  // namespace hadapt::cli
