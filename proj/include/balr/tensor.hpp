#pragma once

// Dense row-major tensor of doubles with tape-based reverse-mode gradients.
//
// A Tensor is a cheap handle; copies share storage. Op outputs record a
// GradFn that references the producing op's inputs but never its own output,
// so an intermediate's storage is released as soon as no handle and no saved
// backward closure refers to it.

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "balr/instrument.hpp"

namespace balr {

using Shape = std::vector<std::int64_t>;
using Buffer = std::vector<double, instrument::TrackingAllocator<double>>;

std::int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

struct GradFn;

struct TensorImpl {
  Shape shape;
  std::shared_ptr<Buffer> data;
  bool requires_grad = false;  // leaf flag
  std::shared_ptr<GradFn> grad_fn;
  std::shared_ptr<Buffer> grad;
};

/// Input slot of a GradFn: either another op or a leaf that accumulates.
struct Edge {
  std::shared_ptr<GradFn> fn;
  std::shared_ptr<TensorImpl> leaf;
};

/// Receives the output gradient by value (ops may reuse it in place) and
/// returns one buffer per input; entries whose `needs` flag is false may be
/// left empty.
using BackwardFn = std::function<std::vector<Buffer>(Buffer grad_out, const std::vector<bool>& needs)>;

struct GradFn {
  std::string name;
  std::vector<Edge> inputs;
  std::vector<bool> needs;
  BackwardFn backward;
};

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(const Shape& shape);
  static Tensor ones(const Shape& shape);
  static Tensor full(const Shape& shape, double value);
  static Tensor scalar(double value);
  /// Throws NumericError on non-finite input and DimensionError on a size mismatch.
  static Tensor from_vector(const Shape& shape, std::span<const double> values);
  static Tensor from_buffer(const Shape& shape, Buffer values);

  bool defined() const noexcept { return impl_ != nullptr; }
  const Shape& shape() const;
  std::int64_t rank() const { return static_cast<std::int64_t>(shape().size()); }
  /// Extent of `axis`; negative axes count from the back.
  std::int64_t size(std::int64_t axis) const;
  std::int64_t numel() const;

  std::span<const double> data() const;
  /// Writable view; only leaves may be mutated (optimizer steps, tests).
  std::span<double> mutable_data();
  double item() const;
  double at(std::initializer_list<std::int64_t> index) const;

  bool requires_grad() const;
  bool is_leaf() const;
  Tensor& set_requires_grad(bool flag);

  bool has_grad() const;
  std::span<const double> grad_data() const;
  Tensor grad() const;
  void zero_grad();

  /// Reverse sweep from a single-element tensor. The graph is consumed.
  void backward() const;

  /// Same storage, no history.
  Tensor detach() const;
  /// Fresh storage, no history, requires_grad=false.
  Tensor clone() const;

  const std::shared_ptr<TensorImpl>& impl() const { return impl_; }
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

 private:
  std::shared_ptr<TensorImpl> impl_;
};

/// Disables graph recording on this thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled() noexcept;

namespace autograd {

/// Wraps an op result. Validates finiteness, then records `backward` when
/// recording is enabled and any input requires a gradient.
Tensor make_output(Shape shape, Buffer data, const std::vector<Tensor>& inputs, BackwardFn backward,
                   const char* name);

/// Same as make_output but shares an existing buffer (views such as reshape).
Tensor make_view(Shape shape, std::shared_ptr<Buffer> data, const Tensor& input, BackwardFn backward,
                 const char* name);

/// Throws NumericError naming `op` if any value is NaN or infinite.
void check_finite(std::span<const double> values, const char* op);

}  // namespace autograd
}  // namespace balr
