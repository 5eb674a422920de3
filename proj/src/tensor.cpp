#include "mla/tensor.hpp"

#include <algorithm>
#include <sstream>
#include <unordered_set>

#include "mla/errors.hpp"

namespace mla {

namespace {
thread_local bool t_grad_enabled = true;
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

double* detail::TensorImpl::grad_buffer() {
  if (grad.empty()) grad.assign(data.size(), 0.0);
  return grad.data();
}

static std::shared_ptr<detail::TensorImpl> new_impl(Shape shape, std::vector<double> values,
                                                    bool requires_grad) {
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (shape[i] == 0) throw DimensionError("zero extent on axis " + std::to_string(i));
  }
  if (shape_numel(shape) != values.size()) {
    throw DimensionError("shape " + shape_str(shape) + " does not match " +
                         std::to_string(values.size()) + " values");
  }
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(values);
  impl->requires_grad = requires_grad;
  return impl;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const auto n = shape_numel(shape);
  return Tensor(new_impl(std::move(shape), std::vector<double>(n, value), requires_grad));
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  return Tensor(new_impl(std::move(shape), std::move(values), requires_grad));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return Tensor(new_impl({}, {value}, requires_grad));
}

const Shape& Tensor::shape() const { return impl_->shape; }
std::size_t Tensor::numel() const { return impl_->data.size(); }

std::size_t Tensor::dim(int axis) const {
  const int r = static_cast<int>(rank());
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) throw DimensionError("axis " + std::to_string(axis) + " out of range");
  return impl_->shape[static_cast<std::size_t>(a)];
}

std::span<const double> Tensor::data() const { return impl_->data; }
std::span<double> Tensor::mutable_data() { return impl_->data; }

double Tensor::item() const {
  if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
  return impl_->data[0];
}

double Tensor::at(std::initializer_list<std::size_t> index) const {
  if (index.size() != rank()) throw DimensionError("index rank mismatch");
  std::size_t off = 0;
  std::size_t axis = 0;
  for (auto i : index) {
    if (i >= impl_->shape[axis]) throw DimensionError("index out of range on axis " + std::to_string(axis));
    off = off * impl_->shape[axis] + i;
    ++axis;
  }
  return impl_->data[off];
}

bool Tensor::requires_grad() const { return impl_->requires_grad; }
void Tensor::set_requires_grad(bool flag) { impl_->requires_grad = flag; }
bool Tensor::has_grad() const { return !impl_->grad.empty(); }

std::vector<double> Tensor::grad() const {
  if (impl_->grad.empty()) return std::vector<double>(numel(), 0.0);
  return impl_->grad;
}

std::span<double> Tensor::mutable_grad() {
  impl_->grad_buffer();
  return impl_->grad;
}

void Tensor::zero_grad() { impl_->grad.clear(); }

Tensor Tensor::detach() const { return Tensor(new_impl(shape(), impl_->data, false)); }

Tensor Tensor::clone() const {
  auto impl = new_impl(shape(), impl_->data, impl_->requires_grad);
  return Tensor(impl);
}

void Tensor::backward() const {
  if (numel() != 1) throw ContractError("backward() requires a scalar loss, got " + shape_str(shape()));
  // Iterative post-order DFS for a topological order of the tape.
  std::vector<detail::TensorImpl*> order;
  std::unordered_set<detail::TensorImpl*> visited;
  std::vector<std::pair<detail::TensorImpl*, std::size_t>> stack;
  stack.emplace_back(impl_.get(), 0);
  visited.insert(impl_.get());
  while (!stack.empty()) {
    auto& [t, next] = stack.back();
    if (t->node && next < t->node->inputs.size()) {
      auto* child = t->node->inputs[next++].get();
      if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(t);
      stack.pop_back();
    }
  }
  // Intermediate grads are recomputed per sweep; leaves accumulate.
  for (auto* t : order) {
    if (t->node) t->grad.assign(t->data.size(), 0.0);
  }
  impl_->grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    auto* t = *it;
    if (t->node && t->node->backward) t->node->backward(*t);
  }
}

bool grad_enabled() { return t_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

Tensor make_result(Shape shape, std::vector<double> data, std::vector<Tensor> inputs,
                   std::function<void(detail::TensorImpl& out)> backward) {
  auto impl = new_impl(std::move(shape), std::move(data), false);
  if (!t_grad_enabled) return Tensor(impl);
  bool any = false;
  for (const auto& in : inputs) any = any || (in.defined() && in.requires_grad());
  if (!any) return Tensor(impl);
  impl->requires_grad = true;
  auto node = std::make_shared<detail::Node>();
  for (auto& in : inputs) {
    if (in.defined()) node->inputs.push_back(in.impl());
  }
  node->backward = std::move(backward);
  impl->node = std::move(node);
  return Tensor(impl);
}

void ParameterList::add(std::string name, Tensor tensor) {
  if (find(name) != nullptr) throw ContractError("duplicate parameter name: " + name);
  items_.push_back({std::move(name), std::move(tensor)});
}

void ParameterList::append(const ParameterList& other) {
  for (const auto& p : other.items_) add(p.name, p.tensor);
}

const Parameter* ParameterList::find(const std::string& name) const {
  auto it = std::find_if(items_.begin(), items_.end(), [&](const Parameter& p) { return p.name == name; });
  return it == items_.end() ? nullptr : &*it;
}

void ParameterList::zero_grad() const {
  for (const auto& p : items_) {
    auto t = p.tensor;
    t.zero_grad();
  }
}

std::size_t ParameterList::total_numel() const {
  std::size_t n = 0;
  for (const auto& p : items_) n += p.tensor.numel();
  return n;
}

}  // namespace mla
