#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace asr::nd {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// 64-byte-aligned allocation for all tensor payloads. Fixed alignment keeps
/// SIMD kernel peeling identical across runs, so repeated in-process training
/// stays bit-reproducible regardless of heap history.
template <typename T, std::size_t Alignment = 64>
struct AlignedAllocator {
  using value_type = T;
  AlignedAllocator() = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U, Alignment>&) {}
  template <class U>
  struct rebind {
    using other = AlignedAllocator<U, Alignment>;
  };
  T* allocate(std::size_t n) {
    return static_cast<T*>(
        ::operator new(n * sizeof(T), std::align_val_t(Alignment)));
  }
  void deallocate(T* p, std::size_t) noexcept {
    ::operator delete(p, std::align_val_t(Alignment));
  }
  /// Default-insertion leaves elements uninitialized: op outputs are fully
  /// overwritten, and zero-filling multi-GB activation batches first is pure
  /// waste. Explicit fills (assign with a value) behave as usual.
  template <class U>
  void construct(U*) noexcept {}
  template <class U, class... Args>
  void construct(U* p, Args&&... args) {
    ::new (static_cast<void*>(p)) U(std::forward<Args>(args)...);
  }
  bool operator==(const AlignedAllocator&) const { return true; }
  bool operator!=(const AlignedAllocator&) const { return false; }
};

using AlignedVector = std::vector<double, AlignedAllocator<double>>;

/// Dense row-major float64 tensor. Copies alias the same storage; gradient
/// buffers are allocated lazily on first accumulation so inference paths and
/// large activation tapes never pay for them up front.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, bool requires_grad = false);
  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false);

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double value);
  static Tensor scalar(double value);
  /// Unspecified contents; for op outputs that overwrite every element.
  static Tensor uninitialized(Shape shape);

  bool defined() const { return static_cast<bool>(st_); }
  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const;
  std::size_t dim(std::size_t i) const { return shape_.at(i); }

  double* data();
  const double* data() const;
  std::span<double> values();
  std::span<const double> values() const;

  bool requires_grad() const;
  /// Marks this tensor (and every alias of its storage) as gradient-bearing.
  Tensor& set_requires_grad(bool on = true);

  /// Gradient buffer, allocated (zero-filled) on first access.
  /// Only valid on tensors with requires_grad().
  double* grad();
  std::span<double> grad_values();
  /// Null if no gradient has been accumulated yet.
  const double* grad_if() const;
  bool has_grad() const;
  void zero_grad();
  void accumulate_grad(std::span<const double> contribution);

  /// Scalar read; requires size() == 1.
  double item() const;

  double& at(std::size_t i);
  double& at(std::size_t i, std::size_t j);
  double& at(std::size_t i, std::size_t j, std::size_t k);
  double& at(std::size_t i, std::size_t j, std::size_t k, std::size_t l);
  double at(std::size_t i) const;
  double at(std::size_t i, std::size_t j) const;
  double at(std::size_t i, std::size_t j, std::size_t k) const;
  double at(std::size_t i, std::size_t j, std::size_t k, std::size_t l) const;

  /// Same storage under a new shape (sizes must match). Gradients alias too,
  /// so no graph bookkeeping is needed for reshapes.
  Tensor reshaped(Shape new_shape) const;

  /// Deep copy of the values (fresh storage, no grad).
  Tensor clone() const;

  /// True if both handles share storage.
  bool same_storage(const Tensor& other) const { return st_ == other.st_; }

 private:
  struct Storage {
    AlignedVector data;
    AlignedVector grad;  // empty until first accumulation
    bool requires_grad = false;
  };
  Shape shape_;
  std::shared_ptr<Storage> st_;
};

/// Throws NumericError if any element is NaN/Inf. Active by default; can be
/// disabled globally for throughput experiments.
void set_finite_checks(bool enabled);
bool finite_checks_enabled();
void ensure_finite(const Tensor& t, std::string_view op);

/// Reverse-mode tape. Ops append their backward step during the forward pass;
/// backward() replays them once in reverse and releases each step (and the
/// activations it captured) as soon as it has run. Single-owner: a Graph must
/// not be shared across concurrent executions.
class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  void record(std::string op, std::function<void()> backward_step);

  /// Seeds d(loss)/d(loss) = 1 and runs every recorded step in reverse
  /// execution order. Running a consumed graph throws.
  void backward(Tensor& loss);

  std::size_t num_ops() const { return ops_.size(); }
  bool consumed() const { return consumed_; }

 private:
  struct Entry {
    std::string op;
    std::function<void()> step;
  };
  std::vector<Entry> ops_;
  bool consumed_ = false;
};

}  // namespace asr::nd
