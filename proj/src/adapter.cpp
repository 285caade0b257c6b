#include "hadapt/adapter.hpp"

#include <string>

#include "hadapt/error.hpp"
#include "hadapt/ops.hpp"

namespace hadapt {
namespace {

void check_hidden(const Tensor& attention, std::size_t hidden, const char* op) {
  if (attention.rank() == 0 || attention.last_extent() != hidden) {
    throw ShapeError(std::string(op) + ": attention output " + to_string(attention.shape()) +
                     " does not end in hidden size " + std::to_string(hidden));
  }
}

void check_order(int order) {
  if (order < 1 || order > 3) throw UsageError("adapter order must be 1, 2 or 3, got " + std::to_string(order));
}

}  // namespace

Tensor apply(Tape& tape, const HadamardAdapter& adapter, const Tensor& attention) {
  check_hidden(attention, adapter.hidden(), "adapter");
  return scale_shift_lastdim(tape, attention, adapter.weight, adapter.bias);
}

Tensor poly_apply(Tape& tape, const PolyAdapter& adapter, const Tensor& attention) {
  check_order(adapter.order());
  check_hidden(attention, adapter.hidden(), "poly adapter");
  if (adapter.order() == 1) return scale_shift_lastdim(tape, attention, adapter.coeffs[1], adapter.coeffs[0]);
  return poly_lastdim(tape, attention, adapter.coeffs);
}

HadamardAdapter identity_init(std::size_t hidden) {
  if (hidden == 0) throw UsageError("adapter hidden size must be at least 1");
  return HadamardAdapter{Tensor(Shape{hidden}, 1.0), Tensor(Shape{hidden}, 0.0)};
}

PolyAdapter identity_init(std::size_t hidden, int order) {
  check_order(order);
  if (hidden == 0) throw UsageError("adapter hidden size must be at least 1");
  PolyAdapter p;
  for (int m = 0; m <= order; ++m) p.coeffs.emplace_back(Shape{hidden}, m == 1 ? 1.0 : 0.0);
  return p;
}

PolyAdapter as_poly(const HadamardAdapter& adapter) { return PolyAdapter{{adapter.bias, adapter.weight}}; }

}  // namespace hadapt
