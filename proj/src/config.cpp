#include "hadapt/config.hpp"

#include <fstream>
#include <set>

#include "hadapt/error.hpp"

namespace hadapt {

using nlohmann::json;

namespace {

// Reads fields out of one JSON object and rejects whatever is left over.
class Fields {
 public:
  Fields(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError("config: '" + path_ + "' must be an object");
  }

  template <class T>
  void required(const char* key, T& out) {
    if (!j_.contains(key)) throw ConfigError("config: missing required field '" + field(key) + "'");
    read(key, out);
  }

  template <class T>
  void optional(const char* key, T& out) {
    if (j_.contains(key)) read(key, out);
  }

  const json* child(const char* key) {
    seen_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }

  std::string field(const char* key) const { return path_.empty() ? key : path_ + "." + key; }

  void finish() const {
    for (const auto& [k, v] : j_.items()) {
      if (!seen_.contains(k)) throw ConfigError("config: unknown field '" + (path_.empty() ? k : path_ + "." + k) + "'");
    }
  }

 private:
  template <class T>
  void read(const char* key, T& out) {
    seen_.insert(key);
    const json& v = j_.at(key);
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw ConfigError("config: '" + field(key) + "' must be a boolean");
      out = v.get<bool>();
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer() || (v.is_number_integer() && !v.is_number_unsigned() && v.get<long long>() < 0)) {
        throw ConfigError("config: '" + field(key) + "' must be a non-negative integer");
      }
      out = v.get<T>();
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) throw ConfigError("config: '" + field(key) + "' must be a number");
      out = v.get<T>();
    } else {
      if (!v.is_string()) throw ConfigError("config: '" + field(key) + "' must be a string");
      out = v.get<std::string>();
    }
  }

  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

}  // namespace

json to_json(const ModelConfig& cfg) {
  return json{{"vocab_size", cfg.vocab_size},
              {"hidden", cfg.hidden},
              {"layers", cfg.layers},
              {"heads", cfg.heads},
              {"ff_dim", cfg.ff_dim},
              {"max_seq_len", cfg.max_seq_len},
              {"type_vocab", cfg.type_vocab},
              {"num_labels", cfg.num_labels},
              {"is_regression", cfg.is_regression},
              {"adapter_placement", std::string(to_string(cfg.adapter_placement))},
              {"layer_norm_eps", cfg.layer_norm_eps}};
}

json to_json(const PretrainConfig& cfg) {
  return json{{"corpus_size", cfg.corpus_size}, {"epochs", cfg.epochs},
              {"batch_size", cfg.batch_size},   {"lr", cfg.lr},
              {"weight_decay", cfg.weight_decay}, {"eval_size", cfg.eval_size}};
}

json to_json(const TrainConfig& cfg) {
  return json{{"stage1_lr", cfg.stage1_lr},
              {"stage2_lr", cfg.stage2_lr},
              {"full_lr", cfg.full_lr},
              {"epochs", cfg.epochs},
              {"batch_size", cfg.batch_size},
              {"weight_decay", cfg.weight_decay},
              {"beta1", cfg.beta1},
              {"beta2", cfg.beta2},
              {"eps", cfg.eps},
              {"decay_vectors", cfg.decay_vectors},
              {"joint", cfg.joint},
              {"prune_frozen_gradients", cfg.prune_frozen_gradients}};
}

json to_json(const TaskSizes& cfg) {
  return json{{"train_size", cfg.train_size}, {"dev_size", cfg.dev_size}, {"data_seed", cfg.data_seed}};
}

json to_json(const RunConfig& cfg) {
  return json{{"format_version", kConfigFormatVersion},
              {"seed", cfg.seed},
              {"model", to_json(cfg.model)},
              {"pretrain", to_json(cfg.pretrain)},
              {"train", to_json(cfg.train)},
              {"tasks", to_json(cfg.tasks)}};
}

ModelConfig model_config_from_json(const json& j, const std::string& path) {
  Fields f(j, path);
  ModelConfig cfg;
  f.required("vocab_size", cfg.vocab_size);
  f.required("hidden", cfg.hidden);
  f.required("layers", cfg.layers);
  f.required("heads", cfg.heads);
  f.required("ff_dim", cfg.ff_dim);
  f.required("max_seq_len", cfg.max_seq_len);
  f.optional("type_vocab", cfg.type_vocab);
  f.optional("num_labels", cfg.num_labels);
  f.optional("is_regression", cfg.is_regression);
  std::string placement(to_string(cfg.adapter_placement));
  f.optional("adapter_placement", placement);
  try {
    cfg.adapter_placement = parse_adapter_placement(placement);
  } catch (const Error& e) {
    throw ConfigError("config: '" + f.field("adapter_placement") + "': " + e.what());
  }
  f.optional("layer_norm_eps", cfg.layer_norm_eps);
  f.finish();
  try {
    cfg.validate();
  } catch (const Error& e) {
    throw ConfigError("config: '" + path + "': " + e.what());
  }
  return cfg;
}

PretrainConfig pretrain_config_from_json(const json& j, const std::string& path) {
  Fields f(j, path);
  PretrainConfig cfg;
  f.optional("corpus_size", cfg.corpus_size);
  f.optional("epochs", cfg.epochs);
  f.optional("batch_size", cfg.batch_size);
  f.optional("lr", cfg.lr);
  f.optional("weight_decay", cfg.weight_decay);
  f.optional("eval_size", cfg.eval_size);
  f.finish();
  if (cfg.batch_size == 0) throw ConfigError("config: '" + f.field("batch_size") + "' must be >= 1");
  return cfg;
}

TrainConfig train_config_from_json(const json& j, const std::string& path) {
  Fields f(j, path);
  TrainConfig cfg;
  f.optional("stage1_lr", cfg.stage1_lr);
  f.optional("stage2_lr", cfg.stage2_lr);
  f.optional("full_lr", cfg.full_lr);
  f.optional("epochs", cfg.epochs);
  f.optional("batch_size", cfg.batch_size);
  f.optional("weight_decay", cfg.weight_decay);
  f.optional("beta1", cfg.beta1);
  f.optional("beta2", cfg.beta2);
  f.optional("eps", cfg.eps);
  f.optional("decay_vectors", cfg.decay_vectors);
  f.optional("joint", cfg.joint);
  f.optional("prune_frozen_gradients", cfg.prune_frozen_gradients);
  f.finish();
  if (cfg.batch_size == 0) throw ConfigError("config: '" + f.field("batch_size") + "' must be >= 1");
  return cfg;
}

TaskSizes task_sizes_from_json(const json& j, const std::string& path) {
  Fields f(j, path);
  TaskSizes cfg;
  f.optional("train_size", cfg.train_size);
  f.optional("dev_size", cfg.dev_size);
  f.optional("data_seed", cfg.data_seed);
  f.finish();
  return cfg;
}

RunConfig run_config_from_json(const json& j) {
  Fields f(j, "");
  int version = 0;
  f.required("format_version", version);
  if (version != kConfigFormatVersion) {
    throw ConfigError("config: unsupported format_version " + std::to_string(version) + " (expected " +
                      std::to_string(kConfigFormatVersion) + ")");
  }
  RunConfig cfg;
  f.optional("seed", cfg.seed);
  const json* model = f.child("model");
  if (!model) throw ConfigError("config: missing required field 'model'");
  cfg.model = model_config_from_json(*model, "model");
  if (const json* p = f.child("pretrain")) cfg.pretrain = pretrain_config_from_json(*p, "pretrain");
  if (const json* t = f.child("train")) cfg.train = train_config_from_json(*t, "train");
  if (const json* t = f.child("tasks")) cfg.tasks = task_sizes_from_json(*t, "tasks");
  f.finish();
  return cfg;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("config: " + path.string() + " is not valid JSON: " + e.what());
  }
  return run_config_from_json(j);
}

void write_json(const json& j, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ConfigError("cannot write " + path.string());
  out << j.dump(2) << '\n';
  if (!out) throw ConfigError("cannot write " + path.string());
}

}  // namespace hadapt
