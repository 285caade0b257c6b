#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "hadapt/model.hpp"
#include "hadapt/ops.hpp"
#include "hadapt/rng.hpp"
#include "hadapt/tasks.hpp"

namespace hadapt::testing {

struct GradCheck {
  double max_rel = 0.0;
  double max_abs = 0.0;
  std::size_t checked = 0;
};

// Central differences against the tape. Relative error per element is
// |analytic - numeric| / max(|analytic|, |numeric|, floor).
inline GradCheck grad_check(const std::function<Tensor(Tape&)>& loss_fn, std::vector<Tensor> leaves, double h = 1e-5,
                            double floor = 1e-6) {
  for (auto& t : leaves) t.clear_grad();
  {
    Tape tape;
    tape.backward(loss_fn(tape));
  }
  GradCheck out;
  for (auto& t : leaves) {
    const std::vector<double> analytic(t.grad().begin(), t.grad().end());
    auto v = t.mutable_values();
    for (std::size_t i = 0; i < v.size(); ++i) {
      const double orig = v[i];
      v[i] = orig + h;
      Tape tp = Tape::inference();
      const double fp = loss_fn(tp).item();
      v[i] = orig - h;
      Tape tm = Tape::inference();
      const double fm = loss_fn(tm).item();
      v[i] = orig;
      const double numeric = (fp - fm) / (2 * h);
      const double abs_err = std::abs(analytic[i] - numeric);
      out.max_abs = std::max(out.max_abs, abs_err);
      out.max_rel = std::max(out.max_rel, abs_err / std::max({std::abs(analytic[i]), std::abs(numeric), floor}));
      ++out.checked;
    }
  }
  return out;
}

inline Tensor random_tensor(Rng& rng, Shape shape, double scale = 1.0) {
  Tensor t(std::move(shape));
  for (double& v : t.mutable_values()) v = rng.normal() * scale;
  return t;
}

inline Tensor leaf(Rng& rng, Shape shape, double scale = 1.0) {
  Tensor t = random_tensor(rng, std::move(shape), scale);
  t.set_requires_grad(true);
  return t;
}

inline ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.vocab_size = 64;
  cfg.hidden = 8;
  cfg.layers = 2;
  cfg.heads = 2;
  cfg.ff_dim = 16;
  cfg.max_seq_len = 32;
  return cfg;
}

// Random token batch with ragged lengths; row 0 is full length.
inline Batch random_batch(Rng& rng, std::size_t batch, std::size_t seq, std::size_t vocab = 64) {
  Batch b;
  b.batch = batch;
  b.seq = seq;
  b.tokens.assign(batch * seq, vocab::kPad);
  b.segments.assign(batch * seq, 0);
  b.mask.assign(batch * seq, 0);
  for (std::size_t r = 0; r < batch; ++r) {
    const std::size_t len = r == 0 ? seq : 2 + rng.below(seq - 1);
    for (std::size_t s = 0; s < len; ++s) {
      b.tokens[r * seq + s] = s == 0 ? vocab::kCls : static_cast<int>(4 + rng.below(vocab - 4));
      b.segments[r * seq + s] = s > len / 2 ? 1 : 0;
      b.mask[r * seq + s] = 1;
    }
  }
  return b;
}

// Moves adapter vectors and norms away from their initial values.
inline void perturb(Model& model, Rng& rng, double scale = 0.3) {
  for (auto& p : model.params.entries()) {
    if (is_adapter_tag(p.info.tag) || p.info.tag == ModuleTag::FFN_NORM) {
      for (double& v : p.value.mutable_values()) v += rng.normal() * scale;
    }
  }
}

}  // namespace hadapt::testing
