#include "hadapt/optimizer.hpp"

#include <cmath>

#include "hadapt/error.hpp"

namespace hadapt {

bool decays(const ParameterInfo& info, const AdamWConfig& config) {
  return config.weight_decay != 0.0 && (config.decay_vectors || info.shape.size() >= 2);
}

void AdamW::step(ParameterStore& store) {
  for (const auto& p : store.entries()) {
    if (p.info.trainable && !p.value.has_grad()) {
      throw UsageError("adamw: trainable tensor '" + p.info.name + "' has no gradient");
    }
  }
  ++step_;
  const double t = static_cast<double>(step_);
  const double correction1 = 1.0 - std::pow(config_.beta1, t);
  const double correction2 = 1.0 - std::pow(config_.beta2, t);
  const double lr = config_.lr;

  for (auto& p : store.entries()) {
    if (!p.info.trainable) continue;
    auto values = p.value.mutable_values();
    const auto grad = p.value.grad();
    auto& m = moments_[p.info.name];
    if (m.first.size() != values.size()) {
      m.first.assign(values.size(), 0.0);
      m.second.assign(values.size(), 0.0);
    }
    const double decay = decays(p.info, config_) ? lr * config_.weight_decay : 0.0;
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double g = grad[i];
      m.first[i] = config_.beta1 * m.first[i] + (1.0 - config_.beta1) * g;
      m.second[i] = config_.beta2 * m.second[i] + (1.0 - config_.beta2) * g * g;
      const double m_hat = m.first[i] / correction1;
      const double v_hat = m.second[i] / correction2;
      if (lr == 0.0) continue;  // keeps -0.0 bit patterns intact
      values[i] -= decay * values[i];
      values[i] -= lr * m_hat / (std::sqrt(v_hat) + config_.eps);
    }
  }
}

}  // namespace hadapt
