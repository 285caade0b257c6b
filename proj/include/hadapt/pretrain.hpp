#pragma once

#include <cstdint>
#include <vector>

#include "hadapt/model.hpp"

namespace hadapt {

struct PretrainConfig {
  std::size_t corpus_size = 32768;
  std::size_t epochs = 4;
  std::size_t batch_size = 32;
  double lr = 2e-3;
  double weight_decay = 0.01;
  std::size_t eval_size = 256;  // fixed slice scored for the loss curve

  bool operator==(const PretrainConfig&) const = default;
};

struct PretrainResult {
  Model model;
  std::vector<double> loss_curve;  // masked-token loss before training, then after each epoch
};

/// Masked-token pretraining of a fresh encoder. The output layer is tied to
/// the word embeddings; its bias is discarded afterwards.
PretrainResult pretrain(const ModelConfig& cfg, const PretrainConfig& pcfg, std::uint64_t seed);

}  // namespace hadapt
