#pragma once

#include <filesystem>
#include <set>

#include "hadapt/model.hpp"

namespace hadapt {

inline constexpr int kCheckpointFormatVersion = 1;

// A checkpoint is a directory holding manifest.json and tensors.bin. The
// manifest echoes the model config and lists every tensor in store order
// with {name, shape, dtype, byte_offset, byte_len, trainable, module_tag};
// tensors.bin is the concatenation of their values as little-endian f64.

void save_checkpoint(const Model& model, const std::filesystem::path& dir);
Model load_checkpoint(const std::filesystem::path& dir);

/// Overwrites only the tensors of `model` whose tag is in `tags` with the
/// checkpoint's values. Names and shapes must match; nothing else changes.
void load_checkpoint_subset(Model& model, const std::filesystem::path& dir, const std::set<ModuleTag>& tags);

}  // namespace hadapt
