#include "hadapt/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#ifdef __GLIBC__
#include <malloc.h>
#endif

#include "hadapt/error.hpp"

namespace hadapt {

namespace {
// Activation buffers are allocated and freed every step; keep them on the
// heap instead of round-tripping through mmap.
[[maybe_unused]] const bool kHeapTuned = [] {
#ifdef __GLIBC__
  mallopt(M_MMAP_THRESHOLD, 256 << 20);
  mallopt(M_TRIM_THRESHOLD, 512 << 20);
#endif
  return true;
}();
}  // namespace

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t e : shape) n *= e;
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ')';
  return os.str();
}

Tensor::Tensor(Shape shape, double fill) : impl_(std::make_shared<detail::TensorImpl>()) {
  impl_->values.assign(numel(shape), fill);
  impl_->shape = std::move(shape);
}

Tensor::Tensor(Shape shape, std::vector<double> values) : impl_(std::make_shared<detail::TensorImpl>()) {
  if (numel(shape) != values.size()) {
    throw ShapeError("tensor of shape " + to_string(shape) + " cannot hold " + std::to_string(values.size()) +
                     " values");
  }
  impl_->shape = std::move(shape);
  impl_->values.assign(values.begin(), values.end());
}

double Tensor::item() const {
  if (size() != 1) throw ShapeError("item() on tensor of shape " + to_string(shape()));
  return impl_->values[0];
}

std::span<double> Tensor::mutable_grad() const {
  if (impl_->grad.empty()) impl_->grad.assign(impl_->values.size(), 0.0);
  return impl_->grad;
}

void Tensor::zero_grad() {
  std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
}

Tensor Tensor::clone() const {
  Tensor t;
  t.impl_ = std::make_shared<detail::TensorImpl>();
  t.impl_->shape = impl_->shape;
  t.impl_->values = impl_->values;
  t.set_requires_grad(impl_->requires_grad);
  return t;
}

bool all_finite(std::span<const double> values) {
  return std::all_of(values.begin(), values.end(), [](double v) { return std::isfinite(v); });
}

void Tape::record(const char* op, std::vector<Tensor> inputs, Tensor output, std::function<void()> backward) {
  output.set_requires_grad(true);
  entries_.push_back(Entry{op, std::move(inputs), std::move(output), std::move(backward)});
}

void Tape::reset() {
  entries_.clear();
  released_ = false;
}

void Tape::release() {
  entries_.clear();
  released_ = true;
}

void Tape::backward(Tensor loss) {
  if (released_) throw UsageError("backward() on a released tape; call reset() first");
  if (!loss.defined() || loss.size() != 1) {
    throw ShapeError("backward() needs a scalar loss, got shape " + (loss.defined() ? to_string(loss.shape()) : "()"));
  }
  for (auto& e : entries_) e.output.clear_grad();
  loss.mutable_grad()[0] += 1.0;
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
    if (!it->output.has_grad()) continue;  // not reachable from loss
    it->backward();
  }
}

void Tape::verify(const Tensor& t, const char* op) const {
  if (options_.check_finite && !all_finite(t.values())) {
    throw NumericError(std::string("non-finite value produced by '") + op + "'");
  }
}

}  // namespace hadapt
