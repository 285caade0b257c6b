#include "hadapt/spectral.hpp"

namespace hadapt {

double spectral_norm(const Tensor& m, PowerIteration opts) {
  if (m.rank() != 2) throw ShapeError("spectral_norm: expects a 2-d tensor, got " + to_string(m.shape()));
  using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  Eigen::Map<const RowMat> view(m.values().data(), static_cast<Eigen::Index>(m.extent(0)),
                                static_cast<Eigen::Index>(m.extent(1)));
  return spectral_norm(view, opts);
}

}  // namespace hadapt
