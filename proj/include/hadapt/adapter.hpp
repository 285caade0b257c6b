#pragma once

#include <cstddef>
#include <vector>

#include "hadapt/tensor.hpp"

namespace hadapt {

/// Element-wise affine map on attention outputs: A'[..., j] = W[j] * A[..., j] + b[j].
/// One adapter per layer; all sequence positions share it.
struct HadamardAdapter {
  Tensor weight;
  Tensor bias;

  std::size_t hidden() const { return weight.size(); }
};

/// Element-wise polynomial sum_m c_m * A^m of order 1..3. coeffs[0] plays the
/// role of the bias and coeffs[1] of the weight, so order 1 is a HadamardAdapter.
struct PolyAdapter {
  std::vector<Tensor> coeffs;

  int order() const { return static_cast<int>(coeffs.size()) - 1; }
  std::size_t hidden() const { return coeffs.empty() ? 0 : coeffs.front().size(); }
  std::size_t parameter_count() const { return coeffs.size() * hidden(); }
};

Tensor apply(Tape& tape, const HadamardAdapter& adapter, const Tensor& attention);
Tensor poly_apply(Tape& tape, const PolyAdapter& adapter, const Tensor& attention);

/// W = 1, b = 0.
HadamardAdapter identity_init(std::size_t hidden);
/// c_1 = 1, all other coefficients 0. Throws for order outside {1, 2, 3}.
PolyAdapter identity_init(std::size_t hidden, int order);

PolyAdapter as_poly(const HadamardAdapter& adapter);

}  // namespace hadapt
