#pragma once

#include <span>
#include <vector>

#include "hadapt/tensor.hpp"

// Differentiable kernels. Every function takes the tape it records onto as
// its first argument; an inference tape (Tape::inference()) computes values
// only. Shapes follow the leading-dims convention: "(..., K)" means any
// number of leading extents that are flattened into rows.
namespace hadapt {

/// (..., K) x (K, M) -> (..., M); with transpose_b, b is (M, K).
Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b, bool transpose_b = false);

/// x W + bias with x (..., K), W (K, M), bias (M).
Tensor linear(Tape& tape, const Tensor& x, const Tensor& weight, const Tensor& bias);

/// (G, N, K) x (G, K, M) -> (G, N, M); with transpose_b, b is (G, M, K).
Tensor batched_matmul(Tape& tape, const Tensor& a, const Tensor& b, bool transpose_b = false);

Tensor add(Tape& tape, const Tensor& a, const Tensor& b);
Tensor mul(Tape& tape, const Tensor& a, const Tensor& b);
Tensor scale(Tape& tape, const Tensor& x, double factor);

/// x * w + b with w, b of length last_extent(x), broadcast over leading dims.
Tensor scale_shift_lastdim(Tape& tape, const Tensor& x, const Tensor& w, const Tensor& b);

/// sum_m coeffs[m] * x^m elementwise, each coefficient a vector over the last dim.
Tensor poly_lastdim(Tape& tape, const Tensor& x, std::span<const Tensor> coeffs);

Tensor softmax_lastdim(Tape& tape, const Tensor& x);

/// (x - mean) / sqrt(var + eps) * gamma + beta per last-dim slice, population variance.
Tensor layer_norm(Tape& tape, const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps);

/// tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
Tensor gelu(Tape& tape, const Tensor& x);
Tensor tanh(Tape& tape, const Tensor& x);

/// Rows of `table` (V, H) gathered by `ids`; result shape is out_prefix + (H).
Tensor embedding(Tape& tape, const Tensor& table, std::span<const int> ids, const Shape& out_prefix);

/// (B, S, H) -> (B * heads, S, H / heads).
Tensor split_heads(Tape& tape, const Tensor& x, std::size_t heads);
/// (B * heads, S, d) -> (B, S, heads * d).
Tensor merge_heads(Tape& tape, const Tensor& x, std::size_t heads);

/// Adds -10000 to attention scores (B * heads, S, S) at key positions where
/// mask (B, S) is zero.
Tensor add_key_mask(Tape& tape, const Tensor& scores, std::span<const int> mask, std::size_t heads);

/// (B, S, H) -> (B, H) at sequence position `pos`.
Tensor select_position(Tape& tape, const Tensor& x, std::size_t pos);

Tensor reshape(Tape& tape, const Tensor& x, Shape shape);
Tensor sum(Tape& tape, const Tensor& x);
Tensor mean(Tape& tape, const Tensor& x);

/// Mean softmax cross-entropy of logits (N, C); rows with label < 0 are ignored.
Tensor cross_entropy(Tape& tape, const Tensor& logits, std::span<const int> labels);

/// Mean squared error between predictions (N) or (N, 1) and targets.
Tensor mse(Tape& tape, const Tensor& predictions, std::span<const double> targets);

}  // namespace hadapt
