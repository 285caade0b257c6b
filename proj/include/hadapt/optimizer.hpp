#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "hadapt/model.hpp"

namespace hadapt {

struct AdamWConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
  // Biases, norm parameters and adapter vectors (every 1-d tensor) are exempt
  // from weight decay unless this is set.
  bool decay_vectors = false;
};

/// AdamW with decoupled weight decay. Moment buffers exist only for tensors
/// that were trainable when step() saw them; frozen tensors are never read
/// or written.
class AdamW {
 public:
  explicit AdamW(AdamWConfig config) : config_(config) {}

  void step(ParameterStore& store);

  std::size_t steps() const { return step_; }
  const AdamWConfig& config() const { return config_; }
  bool has_state(const std::string& name) const { return moments_.contains(name); }

 private:
  struct Moments {
    std::vector<double> first;
    std::vector<double> second;
  };

  AdamWConfig config_;
  std::unordered_map<std::string, Moments> moments_;
  std::size_t step_ = 0;
};

bool decays(const ParameterInfo& info, const AdamWConfig& config);

}  // namespace hadapt
