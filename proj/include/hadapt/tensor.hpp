#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <new>
#include <span>
#include <string>
#include <vector>

namespace hadapt {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

namespace detail {
/// Cache-line aligned storage, so vectorized kernels see the same alignment
/// (and round the same way) on every run.
template <class T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};

  AlignedAllocator() = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) { ::operator delete(p, kAlign); }
  bool operator==(const AlignedAllocator&) const = default;
};

using Buffer = std::vector<double, AlignedAllocator<double>>;

struct TensorImpl {
  Shape shape;
  Buffer values;
  Buffer grad;  // empty until something accumulates into it
  bool requires_grad = false;
  const char* producer = "leaf";
};
}  // namespace detail

/// Dense row-major f64 tensor with an optional gradient slot.
///
/// Tensor is a shared handle: copies alias the same storage. Use clone() for
/// an independent copy. Values are treated as immutable once a kernel has
/// produced them; parameters (leaves) are the exception and are updated in
/// place by the optimizer and by checkpoint loading.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> values);

  static Tensor scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }
  static Tensor vector(std::vector<double> v) {
    const std::size_t n = v.size();
    return Tensor(Shape{n}, std::move(v));
  }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t extent(std::size_t axis) const { return impl_->shape.at(axis); }
  std::size_t last_extent() const { return impl_->shape.empty() ? 1 : impl_->shape.back(); }
  std::size_t size() const { return impl_->values.size(); }

  std::span<const double> values() const { return impl_->values; }
  std::span<double> mutable_values() { return impl_->values; }
  double operator[](std::size_t i) const { return impl_->values[i]; }
  double item() const;

  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<const double> grad() const { return impl_->grad; }
  std::span<double> mutable_grad() const;  // allocates a zero buffer on first use; the handle shares storage
  void zero_grad();
  void clear_grad() { impl_->grad.clear(); }

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool on) { impl_->requires_grad = on; }

  const char* producer() const { return impl_->producer; }
  void set_producer(const char* op) { impl_->producer = op; }

  /// Deep copy of shape and values; no gradient, same requires_grad flag.
  Tensor clone() const;

  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

 private:
  std::shared_ptr<detail::TensorImpl> impl_;
};

bool all_finite(std::span<const double> values);

/// Ordered record of differentiable operations.
///
/// Kernels append one entry per op whose inputs require gradients. backward()
/// walks the entries in exact reverse order. Leaf gradients accumulate across
/// calls; gradients of tape-produced tensors are reset at the start of every
/// call so a second backward() on the same tape adds the same amount again.
class Tape {
 public:
  struct Options {
    bool recording = true;
#ifdef NDEBUG
    bool check_finite = false;
#else
    bool check_finite = true;
#endif
  };

  Tape() = default;
  explicit Tape(Options options) : options_(options) {}

  /// A tape that records nothing; kernels only compute values.
  static Tape inference() { return Tape(Options{.recording = false, .check_finite = Options{}.check_finite}); }

  bool recording() const { return options_.recording && !released_; }
  bool check_finite() const { return options_.check_finite; }
  void set_check_finite(bool on) { options_.check_finite = on; }

  std::size_t size() const { return entries_.size(); }

  /// Appends an op. `backward` reads the output gradient and accumulates into
  /// the inputs that require gradients.
  void record(const char* op, std::vector<Tensor> inputs, Tensor output, std::function<void()> backward);

  /// Drops all entries. The tape can be reused for a new graph afterwards.
  void reset();

  /// Frees the recorded graph. Any later backward() on this tape is an error
  /// until reset().
  void release();

  void backward(Tensor loss);

  /// Throws NumericError naming `op` if the check is enabled and values are not finite.
  void verify(const Tensor& t, const char* op) const;

 private:
  struct Entry {
    const char* op;
    std::vector<Tensor> inputs;
    Tensor output;
    std::function<void()> backward;
  };

  Options options_{};
  std::vector<Entry> entries_;
  bool released_ = false;
};

/// Fills gradient slots of every tensor reachable from the scalar `loss`.
inline void backward(Tape& tape, const Tensor& loss) { tape.backward(loss); }

}  // namespace hadapt
