#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include <json.hpp>

#include "hadapt/model.hpp"
#include "hadapt/pretrain.hpp"
#include "hadapt/trainer.hpp"

namespace hadapt {

inline constexpr int kConfigFormatVersion = 1;

/// Dataset sizes and generator seed shared by every task of a run.
struct TaskSizes {
  std::size_t train_size = 2048;
  std::size_t dev_size = 256;
  std::uint64_t data_seed = 0;

  bool operator==(const TaskSizes&) const = default;
};

/// Everything a command needs to reproduce a run.
struct RunConfig {
  std::uint64_t seed = 7;
  ModelConfig model;
  PretrainConfig pretrain;
  TrainConfig train;
  TaskSizes tasks;

  bool operator==(const RunConfig&) const = default;
};

nlohmann::json to_json(const ModelConfig& cfg);
nlohmann::json to_json(const PretrainConfig& cfg);
nlohmann::json to_json(const TrainConfig& cfg);
nlohmann::json to_json(const TaskSizes& cfg);
nlohmann::json to_json(const RunConfig& cfg);

// Strict parsers: unknown keys, missing required fields and wrong types throw
// ConfigError naming the offending field path.
ModelConfig model_config_from_json(const nlohmann::json& j, const std::string& path = "model");
PretrainConfig pretrain_config_from_json(const nlohmann::json& j, const std::string& path = "pretrain");
TrainConfig train_config_from_json(const nlohmann::json& j, const std::string& path = "train");
TaskSizes task_sizes_from_json(const nlohmann::json& j, const std::string& path = "tasks");
RunConfig run_config_from_json(const nlohmann::json& j);

RunConfig load_run_config(const std::filesystem::path& path);
void write_json(const nlohmann::json& j, const std::filesystem::path& path);

}  // namespace hadapt
