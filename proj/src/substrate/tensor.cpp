#include "balr/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include "balr/errors.hpp"

namespace balr {
namespace {

thread_local bool t_grad_enabled = true;

std::shared_ptr<TensorImpl> new_impl(Shape shape, std::shared_ptr<Buffer> data) {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  return impl;
}

void accumulate(Buffer& into, Buffer&& from) {
  if (into.empty()) {
    into = std::move(from);
    return;
  }
  for (std::size_t i = 0; i < into.size(); ++i) into[i] += from[i];
}

}  // namespace

std::int64_t shape_numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

Tensor Tensor::zeros(const Shape& shape) { return full(shape, 0.0); }

Tensor Tensor::ones(const Shape& shape) { return full(shape, 1.0); }

Tensor Tensor::full(const Shape& shape, double value) {
  for (std::size_t i = 0; i < shape.size(); ++i)
    if (shape[i] <= 0) throw DimensionError("extent must be positive in " + shape_str(shape), static_cast<int>(i));
  if (!std::isfinite(value)) throw NumericError("Tensor::full: non-finite fill value");
  return Tensor(new_impl(shape, std::make_shared<Buffer>(shape_numel(shape), value)));
}

Tensor Tensor::scalar(double value) { return full({}, value); }

Tensor Tensor::from_vector(const Shape& shape, std::span<const double> values) {
  return from_buffer(shape, Buffer(values.begin(), values.end()));
}

Tensor Tensor::from_buffer(const Shape& shape, Buffer values) {
  for (std::size_t i = 0; i < shape.size(); ++i)
    if (shape[i] <= 0) throw DimensionError("extent must be positive in " + shape_str(shape), static_cast<int>(i));
  if (static_cast<std::int64_t>(values.size()) != shape_numel(shape))
    throw DimensionError("data length " + std::to_string(values.size()) + " does not match shape " + shape_str(shape),
                         -1);
  autograd::check_finite(values, "Tensor::from_buffer");
  return Tensor(new_impl(shape, std::make_shared<Buffer>(std::move(values))));
}

const Shape& Tensor::shape() const { return impl_->shape; }

std::int64_t Tensor::size(std::int64_t axis) const {
  const auto r = rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) throw DimensionError("axis out of range for shape " + shape_str(shape()), static_cast<int>(axis));
  return impl_->shape[static_cast<std::size_t>(axis)];
}

std::int64_t Tensor::numel() const { return static_cast<std::int64_t>(impl_->data->size()); }

std::span<const double> Tensor::data() const { return {impl_->data->data(), impl_->data->size()}; }

std::span<double> Tensor::mutable_data() {
  if (impl_->grad_fn) throw Error("mutable_data: tensor is not a leaf");
  return {impl_->data->data(), impl_->data->size()};
}

double Tensor::item() const {
  if (numel() != 1) throw DimensionError("item() requires a single element, shape " + shape_str(shape()), -1);
  return (*impl_->data)[0];
}

double Tensor::at(std::initializer_list<std::int64_t> index) const {
  if (static_cast<std::int64_t>(index.size()) != rank())
    throw DimensionError("index rank does not match shape " + shape_str(shape()), -1);
  std::int64_t flat = 0;
  std::size_t axis = 0;
  for (auto i : index) {
    if (i < 0 || i >= impl_->shape[axis]) throw DimensionError("index out of range", static_cast<int>(axis));
    flat = flat * impl_->shape[axis] + i;
    ++axis;
  }
  return (*impl_->data)[static_cast<std::size_t>(flat)];
}

bool Tensor::requires_grad() const { return impl_->requires_grad || impl_->grad_fn != nullptr; }

bool Tensor::is_leaf() const { return impl_->grad_fn == nullptr; }

Tensor& Tensor::set_requires_grad(bool flag) {
  if (impl_->grad_fn) throw Error("set_requires_grad: tensor is not a leaf");
  impl_->requires_grad = flag;
  return *this;
}

bool Tensor::has_grad() const { return impl_->grad != nullptr; }

std::span<const double> Tensor::grad_data() const {
  if (!impl_->grad) return {};
  return {impl_->grad->data(), impl_->grad->size()};
}

Tensor Tensor::grad() const {
  if (!impl_->grad) return {};
  return Tensor(new_impl(impl_->shape, std::make_shared<Buffer>(*impl_->grad)));
}

void Tensor::zero_grad() { impl_->grad.reset(); }

Tensor Tensor::detach() const { return Tensor(new_impl(impl_->shape, impl_->data)); }

Tensor Tensor::clone() const { return Tensor(new_impl(impl_->shape, std::make_shared<Buffer>(*impl_->data))); }

void Tensor::backward() const {
  if (numel() != 1) throw DimensionError("backward() needs a single-element tensor, got " + shape_str(shape()), -1);
  if (!requires_grad()) throw Error("backward(): tensor does not require grad");

  if (!impl_->grad_fn) {
    if (!impl_->grad) impl_->grad = std::make_shared<Buffer>(1, 0.0);
    (*impl_->grad)[0] += 1.0;
    return;
  }

  // Post-order DFS; reversed it is a valid processing order.
  std::vector<std::shared_ptr<GradFn>> order;
  std::unordered_set<GradFn*> seen;
  std::vector<std::pair<std::shared_ptr<GradFn>, std::size_t>> stack;
  stack.emplace_back(impl_->grad_fn, 0);
  seen.insert(impl_->grad_fn.get());
  while (!stack.empty()) {
    auto& [fn, next] = stack.back();
    if (next < fn->inputs.size()) {
      const auto& child = fn->inputs[next++].fn;
      if (child && seen.insert(child.get()).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(fn);
      stack.pop_back();
    }
  }

  std::unordered_map<GradFn*, Buffer> pending;
  pending[impl_->grad_fn.get()] = Buffer(1, 1.0);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    GradFn* fn = it->get();
    auto found = pending.find(fn);
    if (found == pending.end()) continue;
    Buffer g = std::move(found->second);
    pending.erase(found);
    if (!fn->backward) throw Error("backward(): graph already consumed at " + fn->name);
    auto input_grads = fn->backward(std::move(g), fn->needs);
    fn->backward = nullptr;
    for (std::size_t i = 0; i < fn->inputs.size(); ++i) {
      if (!fn->needs[i]) continue;
      auto& edge = fn->inputs[i];
      auto& gi = input_grads.at(i);
      if (edge.fn) {
        accumulate(pending[edge.fn.get()], std::move(gi));
      } else if (edge.leaf) {
        if (!edge.leaf->grad) edge.leaf->grad = std::make_shared<Buffer>();
        accumulate(*edge.leaf->grad, std::move(gi));
      }
    }
  }
}

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }

NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

bool grad_enabled() noexcept { return t_grad_enabled; }

namespace autograd {

void check_finite(std::span<const double> values, const char* op) {
  for (double v : values)
    if (!std::isfinite(v)) throw NumericError(std::string(op) + ": non-finite value produced");
}

namespace {

std::shared_ptr<GradFn> record(const std::vector<Tensor>& inputs, BackwardFn backward, const char* name) {
  if (!t_grad_enabled) return nullptr;
  bool any = false;
  for (const auto& t : inputs) any = any || (t.defined() && t.requires_grad());
  if (!any) return nullptr;
  auto fn = std::make_shared<GradFn>();
  fn->name = name;
  fn->inputs.resize(inputs.size());
  fn->needs.resize(inputs.size(), false);
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    if (!inputs[i].defined()) continue;
    const auto& impl = inputs[i].impl();
    if (impl->grad_fn) {
      fn->inputs[i].fn = impl->grad_fn;
      fn->needs[i] = true;
    } else if (impl->requires_grad) {
      fn->inputs[i].leaf = impl;
      fn->needs[i] = true;
    }
  }
  fn->backward = std::move(backward);
  return fn;
}

}  // namespace

Tensor make_output(Shape shape, Buffer data, const std::vector<Tensor>& inputs, BackwardFn backward,
                   const char* name) {
  check_finite(data, name);
  auto impl = new_impl(std::move(shape), std::make_shared<Buffer>(std::move(data)));
  impl->grad_fn = record(inputs, std::move(backward), name);
  return Tensor(std::move(impl));
}

Tensor make_view(Shape shape, std::shared_ptr<Buffer> data, const Tensor& input, BackwardFn backward,
                 const char* name) {
  auto impl = new_impl(std::move(shape), std::move(data));
  impl->grad_fn = record({input}, std::move(backward), name);
  return Tensor(std::move(impl));
}

}  // namespace autograd
}  // namespace balr
