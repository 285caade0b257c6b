#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <string>

#include "hadapt/error.hpp"
#include "hadapt/tensor.hpp"

namespace hadapt {

struct PowerIteration {
  double tol = 1e-9;
  int max_iter = 1000;
};

/// Largest singular value of `m` by power iteration on m^T m.
///
/// The start vector is all-ones, normalized. Iteration stops once the
/// eigen-residual ||m^T m v - lambda v|| is at most tol * lambda, which bounds
/// the relative error in sigma by tol / 2. The test is scale-free, so scaling
/// m by a power of two scales the result exactly. Throws ConvergenceError
/// carrying the last two sigma iterates when max_iter is exhausted.
template <typename Derived>
typename Derived::Scalar spectral_norm(const Eigen::MatrixBase<Derived>& m, PowerIteration opts = {}) {
  using Scalar = typename Derived::Scalar;
  using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
  if (!(opts.tol > 0)) throw UsageError("spectral_norm: tol must be positive");
  if (m.size() == 0) return Scalar(0);

  Vec v = Vec::Ones(m.cols()).normalized();
  Scalar previous = 0;
  Scalar sigma = 0;
  for (int it = 0; it < opts.max_iter; ++it) {
    const Vec w = m.transpose() * (m * v);
    const Scalar lambda = v.dot(w);
    sigma = std::sqrt(std::max(lambda, Scalar(0)));
    const Scalar wn = w.norm();
    if (wn == Scalar(0)) return Scalar(0);  // v in the null space
    const Scalar residual = (w - lambda * v).norm();
    if (lambda > Scalar(0) && residual <= Scalar(opts.tol) * lambda) return sigma;
    v = w / wn;
    previous = sigma;
  }
  throw ConvergenceError("spectral_norm: no convergence after " + std::to_string(opts.max_iter) + " iterations",
                         static_cast<double>(previous), static_cast<double>(sigma));
}

/// Tensor overload; `m` must be 2-d.
double spectral_norm(const Tensor& m, PowerIteration opts = {});

}  // namespace hadapt
