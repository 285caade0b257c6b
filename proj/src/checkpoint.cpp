#include "hadapt/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <json.hpp>

#include "hadapt/config.hpp"
#include "hadapt/error.hpp"

namespace hadapt {
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kMagic = "hadapt-checkpoint";

void write_le(std::ostream& os, double v) {
  auto bits = std::bit_cast<std::uint64_t>(v);
  if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap64(bits);
  char buf[8];
  std::memcpy(buf, &bits, 8);
  os.write(buf, 8);
}

double read_le(const char* p) {
  std::uint64_t bits;
  std::memcpy(&bits, p, 8);
  if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap64(bits);
  return std::bit_cast<double>(bits);
}

struct Record {
  ParameterInfo info;
  std::size_t offset;
  std::size_t length;
};

struct Loaded {
  ModelConfig config;
  std::vector<Record> records;
  std::string bytes;
};

Loaded read_checkpoint(const fs::path& dir) {
  std::ifstream mf(dir / "manifest.json");
  if (!mf) throw FormatError("checkpoint: cannot open " + (dir / "manifest.json").string());
  json manifest;
  try {
    manifest = json::parse(mf);
  } catch (const json::exception& e) {
    throw FormatError("checkpoint: malformed manifest: " + std::string(e.what()));
  }
  if (!manifest.is_object() || manifest.value("magic", "") != kMagic) {
    throw FormatError("checkpoint: bad magic in " + (dir / "manifest.json").string() + ", not a format_version " +
                      std::to_string(kCheckpointFormatVersion) + " checkpoint");
  }
  const int version = manifest.value("format_version", -1);
  if (version != kCheckpointFormatVersion) {
    throw FormatError("checkpoint: unsupported format_version " + std::to_string(version) + " (expected " +
                      std::to_string(kCheckpointFormatVersion) + ")");
  }

  Loaded out;
  try {
    out.config = model_config_from_json(manifest.at("config"));
    for (const auto& t : manifest.at("tensors")) {
      Record r;
      r.info.name = t.at("name").get<std::string>();
      r.info.shape = t.at("shape").get<Shape>();
      r.info.tag = parse_module_tag(t.at("module_tag").get<std::string>());
      r.info.trainable = t.at("trainable").get<bool>();
      if (t.at("dtype").get<std::string>() != "f64") throw FormatError("checkpoint: unsupported dtype for " + r.info.name);
      r.offset = t.at("byte_offset").get<std::size_t>();
      r.length = t.at("byte_len").get<std::size_t>();
      if (r.length != numel(r.info.shape) * 8) {
        throw FormatError("checkpoint: byte_len of '" + r.info.name + "' does not match shape " + to_string(r.info.shape));
      }
      if (r.info.name.rfind("layer.", 0) == 0) r.info.layer = std::stoi(r.info.name.substr(6));
      out.records.push_back(std::move(r));
    }
  } catch (const json::exception& e) {
    throw FormatError("checkpoint: manifest field error: " + std::string(e.what()));
  }

  std::ifstream bf(dir / "tensors.bin", std::ios::binary);
  if (!bf) throw FormatError("checkpoint: cannot open " + (dir / "tensors.bin").string());
  out.bytes.assign(std::istreambuf_iterator<char>(bf), std::istreambuf_iterator<char>());
  std::size_t expected = 0;
  for (const auto& r : out.records) {
    if (r.offset != expected) throw FormatError("checkpoint: tensor '" + r.info.name + "' has non-contiguous byte_offset");
    expected += r.length;
  }
  if (out.bytes.size() != expected) {
    throw FormatError("checkpoint: tensors.bin holds " + std::to_string(out.bytes.size()) + " bytes, manifest needs " +
                      std::to_string(expected) + " (truncated or padded file)");
  }
  return out;
}

Tensor decode(const Loaded& ck, const Record& r) {
  std::vector<double> values(numel(r.info.shape));
  for (std::size_t i = 0; i < values.size(); ++i) values[i] = read_le(ck.bytes.data() + r.offset + i * 8);
  return Tensor(r.info.shape, std::move(values));
}

}  // namespace

void save_checkpoint(const Model& model, const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw ConfigError("checkpoint: cannot create " + dir.string() + ": " + ec.message());

  json tensors = json::array();
  std::ofstream bf(dir / "tensors.bin", std::ios::binary | std::ios::trunc);
  if (!bf) throw ConfigError("checkpoint: cannot write " + (dir / "tensors.bin").string());
  std::size_t offset = 0;
  for (const auto& p : model.params.entries()) {
    for (double v : p.value.values()) write_le(bf, v);
    const std::size_t len = p.value.size() * 8;
    tensors.push_back(json{{"name", p.info.name},
                           {"shape", p.info.shape},
                           {"dtype", "f64"},
                           {"byte_offset", offset},
                           {"byte_len", len},
                           {"trainable", p.info.trainable},
                           {"module_tag", std::string(to_string(p.info.tag))}});
    offset += len;
  }
  bf.close();
  if (!bf) throw ConfigError("checkpoint: write failed for " + (dir / "tensors.bin").string());

  json manifest{{"magic", kMagic},
                {"format_version", kCheckpointFormatVersion},
                {"config", to_json(model.config)},
                {"tensors", std::move(tensors)}};
  std::ofstream mf(dir / "manifest.json", std::ios::trunc);
  if (!mf) throw ConfigError("checkpoint: cannot write " + (dir / "manifest.json").string());
  mf << manifest.dump(2) << '\n';
}

Model load_checkpoint(const fs::path& dir) {
  const Loaded ck = read_checkpoint(dir);
  Model model{ck.config, {}};
  for (const auto& r : ck.records) model.params.add(r.info, decode(ck, r));
  return model;
}

void load_checkpoint_subset(Model& model, const fs::path& dir, const std::set<ModuleTag>& tags) {
  const Loaded ck = read_checkpoint(dir);
  if (ck.config.hidden != model.config.hidden || ck.config.layers != model.config.layers) {
    throw ConfigError("checkpoint: " + dir.string() + " was saved for a different encoder shape");
  }
  for (const auto& r : ck.records) {
    if (!tags.contains(r.info.tag)) continue;
    if (!model.params.contains(r.info.name)) {
      throw ConfigError("checkpoint: model has no tensor '" + r.info.name + "'");
    }
    Parameter& p = model.params.at(r.info.name);
    if (p.value.shape() != r.info.shape) {
      throw ShapeError("checkpoint: shape of '" + r.info.name + "' is " + to_string(r.info.shape) + ", model has " +
                       to_string(p.value.shape()));
    }
    const Tensor t = decode(ck, r);
    std::copy(t.values().begin(), t.values().end(), p.value.mutable_values().begin());
  }
  if (tags.contains(ModuleTag::CLASSIFIER)) {
    model.config.num_labels = ck.config.num_labels;
    model.config.is_regression = ck.config.is_regression;
  }
}

}  // namespace hadapt
