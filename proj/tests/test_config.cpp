#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "hadapt/config.hpp"
#include "hadapt/error.hpp"

using namespace hadapt;
using nlohmann::json;

namespace {

json minimal() {
  return json{{"format_version", 1},
              {"model",
               {{"vocab_size", 64}, {"hidden", 16}, {"layers", 2}, {"heads", 2}, {"ff_dim", 32}, {"max_seq_len", 32}}}};
}

std::string error_of(const json& j) {
  try {
    (void)run_config_from_json(j);
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST_CASE("defaults fill everything but the model shape") {
  const RunConfig cfg = run_config_from_json(minimal());
  CHECK(cfg.model.hidden == 16);
  CHECK(cfg.model.num_labels == 2);
  CHECK(cfg.train == TrainConfig{});
  CHECK(cfg.pretrain == PretrainConfig{});
  CHECK(cfg.tasks == TaskSizes{});
  CHECK(cfg.seed == 7);
}

TEST_CASE("round trip through json") {
  RunConfig cfg = run_config_from_json(minimal());
  cfg.seed = 99;
  cfg.train.stage2_lr = 0.25;
  cfg.train.joint = true;
  cfg.pretrain.epochs = 3;
  cfg.tasks.data_seed = 5;
  cfg.model.adapter_placement = AdapterPlacement::post_projection;
  CHECK(run_config_from_json(to_json(cfg)) == cfg);

  const auto path = std::filesystem::temp_directory_path() / "hadapt_test_config.json";
  write_json(to_json(cfg), path);
  CHECK(load_run_config(path) == cfg);
}

TEST_CASE("errors name the offending field") {
  json j = minimal();
  j["model"].erase("vocab_size");
  CHECK(error_of(j) == "config: missing required field 'model.vocab_size'");

  j = minimal();
  j["train"] = {{"epochz", 3}};
  CHECK(error_of(j) == "config: unknown field 'train.epochz'");

  j = minimal();
  j["train"] = {{"epochs", "ten"}};
  CHECK(error_of(j).find("train.epochs") != std::string::npos);

  j = minimal();
  j["format_version"] = 2;
  CHECK(error_of(j).find("format_version") != std::string::npos);

  j = minimal();
  j.erase("model");
  CHECK(error_of(j).find("model") != std::string::npos);

  j = minimal();
  j["model"]["heads"] = 3;
  CHECK_THROWS_AS(run_config_from_json(j), ConfigError);

  j = minimal();
  j["model"]["adapter_placement"] = "sideways";
  CHECK_THROWS_AS(run_config_from_json(j), ConfigError);
}

TEST_CASE("unreadable files") {
  const auto path = std::filesystem::temp_directory_path() / "hadapt_test_bad_config.json";
  std::ofstream(path) << "{";
  CHECK_THROWS_AS(load_run_config(path), ConfigError);
  CHECK_THROWS_AS(load_run_config("/nonexistent/config.json"), ConfigError);
}
