#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "cli.hpp"

using namespace hadapt;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Result {
  int code;
  std::string out, err;
};

Result call(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

// A whole pretrain/tune pipeline on a very small model, built once.
struct Workspace {
  fs::path root = fs::temp_directory_path() / "hadapt_test_cli";
  fs::path config = root / "tiny.json";
  fs::path backbone = root / "backbone";

  Workspace() {
    fs::remove_all(root);
    fs::create_directories(root);
    std::ofstream(config) << json{
        {"format_version", 1},
        {"seed", 3},
        {"model",
         {{"vocab_size", 64}, {"hidden", 8}, {"layers", 2}, {"heads", 2}, {"ff_dim", 16}, {"max_seq_len", 32}}},
        {"pretrain", {{"corpus_size", 64}, {"epochs", 1}, {"eval_size", 16}}},
        {"train", {{"epochs", 2}, {"stage2_lr", 0.01}, {"full_lr", 0.001}}},
        {"tasks", {{"train_size", 32}, {"dev_size", 16}}}}
                                 .dump(2);
    const Result r = call({"pretrain", "--config", config.string(), "--out", backbone.string()});
    REQUIRE_MESSAGE(r.code == 0, r.err);
  }
};

Workspace& workspace() {
  static Workspace w;
  return w;
}

}  // namespace

TEST_CASE("pretrain writes a loadable run directory") {
  const auto& w = workspace();
  CHECK(fs::exists(w.backbone / "checkpoint" / "manifest.json"));
  CHECK(fs::exists(w.backbone / "timing.json"));
  const json curve = json::parse(slurp(w.backbone / "loss_curve.json"));
  CHECK(curve.at("loss_curve").size() == 2);
  CHECK(json::parse(slurp(w.backbone / "config.json")).at("run").at("command") == "pretrain");
}

TEST_CASE("tune records the trainable tags of each regime") {
  const auto& w = workspace();
  const fs::path had = w.root / "had";
  Result r = call({"tune", "--from", w.backbone.string(), "--task", "POLARITY", "--out", had.string()});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  const json rep = json::parse(slurp(had / "report.json"));
  CHECK(rep.at("trainable_tags") == json{"FFN_NORM", "ADAPTER_W", "ADAPTER_B"});
  CHECK(rep.at("regime") == "hadamard");
  CHECK_FALSE(rep.contains("wall_time_s"));
  CHECK(fs::exists(had / "metrics.csv"));

  const fs::path cls = w.root / "cls";
  r = call({"tune", "--from", w.backbone.string(), "--task", "POLARITY", "--regime", "classifier", "--out",
            cls.string()});
  REQUIRE(r.code == 0);
  CHECK(json::parse(slurp(cls / "report.json")).at("trainable_tags") == json{"POOLER", "CLASSIFIER"});

  const fs::path custom = w.root / "custom";
  r = call({"tune", "--from", w.backbone.string(), "--task", "POLARITY", "--regime", "custom", "--modules", "B,N",
            "--layers", "2", "--stage1-from", cls.string(), "--out", custom.string()});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  CHECK(json::parse(slurp(custom / "report.json")).at("parameter_accounting").at("trainable") == 2 * 3 * 8);
}

TEST_CASE("reruns are byte-identical") {
  const auto& w = workspace();
  for (const char* name : {"rerun_a", "rerun_b"}) {
    const Result r = call({"tune", "--from", w.backbone.string(), "--task", "ENTAIL", "--seed", "4", "--out",
                           (w.root / name).string()});
    REQUIRE(r.code == 0);
  }
  for (const char* f : {"report.json", "metrics.csv", "config.json", "checkpoint/tensors.bin", "checkpoint/manifest.json"}) {
    CHECK_MESSAGE(slurp(w.root / "rerun_a" / f) == slurp(w.root / "rerun_b" / f), f);
  }
}

TEST_CASE("report aggregates runs and rejects incomplete directories") {
  const auto& w = workspace();
  const std::vector<std::string> regimes{"classifier", "hadamard", "full"};
  std::vector<std::string> args{"report"};
  for (const auto& reg : regimes) {
    const fs::path dir = w.root / ("rep_" + reg);
    REQUIRE(call({"tune", "--from", w.backbone.string(), "--task", "OVERLAP", "--regime", reg, "--out", dir.string()})
                .code == 0);
    args.push_back(dir.string());
  }
  args.push_back("--csv");
  args.push_back((w.root / "table.csv").string());
  const Result r = call(args);
  REQUIRE_MESSAGE(r.code == 0, r.err);
  std::istringstream csv(slurp(w.root / "table.csv"));
  std::string line;
  std::size_t lines = 0;
  while (std::getline(csv, line)) ++lines;
  CHECK(lines == 1 + 3);

  fs::create_directories(w.root / "empty_run");
  const Result bad = call({"report", (w.root / "empty_run").string()});
  CHECK(bad.code != 0);
  CHECK(bad.err.find("empty_run") != std::string::npos);
}

TEST_CASE("accounting prints the base-shape fraction") {
  const Result r = call({"accounting", "--shape", "base"});
  REQUIRE(r.code == 0);
  CHECK(r.out.find("trainable 36864") != std::string::npos);
  CHECK(r.out.find("0.034%") != std::string::npos);
  CHECK(cli::format_fraction(36864.0 / 109502210.0) == "0.034%");
}

TEST_CASE("exit codes") {
  const auto& w = workspace();
  CHECK(call({}).code == cli::kUsage);
  CHECK(call({"tune", "--task", "POLARITY"}).code == cli::kUsage);
  CHECK(call({"bogus"}).code == cli::kUsage);
  CHECK(call({"tune", "--from", w.backbone.string(), "--task", "POLARITY", "--modules", "B", "--out",
              (w.root / "x").string()})
            .code == cli::kUsage);

  const Result patterns = call({"analyze", "patterns", "--runs", (w.root / "had").string(), "--out",
                                (w.root / "pat").string()});
  CHECK(patterns.code == cli::kUsage);
  CHECK(patterns.err.find("needs >= 2 runs") != std::string::npos);

  const Result missing = call({"tune", "--from", (w.root / "nowhere").string(), "--task", "POLARITY", "--out",
                               (w.root / "y").string()});
  CHECK(missing.code == cli::kData);

  const Result task = call({"tune", "--from", w.backbone.string(), "--task", "SST", "--out", (w.root / "z").string()});
  CHECK(task.code == cli::kData);

  std::ofstream(w.root / "broken.json") << R"({"format_version":1,"model":{"hidden":8}})";
  const Result cfg = call({"pretrain", "--config", (w.root / "broken.json").string(), "--out",
                           (w.root / "b").string()});
  CHECK(cfg.code == cli::kData);
  CHECK(cfg.err.find("model.vocab_size") != std::string::npos);
}

TEST_CASE("gen-data exports jsonl") {
  const auto& w = workspace();
  const fs::path out = w.root / "dev.jsonl";
  const Result r = call({"gen-data", "--task", "PARAPHRASE", "--split", "dev", "--config", w.config.string(), "--out",
                         out.string()});
  REQUIRE(r.code == 0);
  std::istringstream in(slurp(out));
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    CHECK(json::parse(line).contains("tokens"));
    ++n;
  }
  CHECK(n == 16);
}

TEST_CASE("analyses write json and csv") {
  const auto& w = workspace();
  const fs::path a = w.root / "pat_a", b = w.root / "pat_b";
  REQUIRE(call({"tune", "--from", w.backbone.string(), "--task", "POLARITY", "--out", a.string()}).code == 0);
  REQUIRE(call({"tune", "--from", w.backbone.string(), "--task", "ENTAIL", "--out", b.string()}).code == 0);
  Result r = call({"analyze", "patterns", "--runs", a.string(), b.string(), "--out", (w.root / "pat").string()});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  CHECK(fs::exists(w.root / "pat" / "patterns.json"));
  CHECK(fs::exists(w.root / "pat" / "patterns.csv"));
  CHECK(r.out.find("finding weight_similarity_near_one") != std::string::npos);

  r = call({"analyze", "norms", "--before", w.backbone.string(), "--after", a.string(), "--task", "POLARITY", "--out",
            (w.root / "norms").string()});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  const json norms = json::parse(slurp(w.root / "norms" / "norms.json"));
  CHECK(norms.contains("reported_findings"));

  r = call({"analyze", "layers", "--from", w.backbone.string(), "--task", "POLARITY", "--ks", "1,2", "--out",
            (w.root / "layers").string()});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  CHECK(call({"analyze", "layers", "--from", w.backbone.string(), "--task", "POLARITY", "--ks", "2,1", "--out",
              (w.root / "layers2").string()})
            .code != 0);
  CHECK(call({"analyze", "nothing", "--out", (w.root / "n").string()}).code == cli::kUsage);
}
