#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace mla {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class Tensor;

namespace detail {

struct TensorImpl;

// One recorded operation on the tape. `backward` reads the output's grad and
// accumulates into the grads of `inputs`.
struct Node {
  std::vector<std::shared_ptr<TensorImpl>> inputs;
  std::function<void(TensorImpl& out)> backward;
};

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::shared_ptr<Node> node;

  double* grad_buffer();  // allocates zeros on first use
};

}  // namespace detail

// Dense row-major float64 array that optionally participates in the
// reverse-mode tape. Copies share storage; use clone() for a deep copy.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t numel() const;
  // Negative axes count from the back.
  std::size_t dim(int axis) const;

  std::span<const double> data() const;
  std::span<double> mutable_data();
  double item() const;
  double at(std::initializer_list<std::size_t> index) const;

  bool requires_grad() const;
  void set_requires_grad(bool flag);
  bool has_grad() const;
  // Gradient values; zeros if nothing has accumulated yet.
  std::vector<double> grad() const;
  std::span<double> mutable_grad();
  void zero_grad();

  // Same values, no tape history, no gradient tracking.
  Tensor detach() const;
  Tensor clone() const;

  // Reverse sweep from this scalar. Parameter grads accumulate across calls.
  void backward() const;

  // Internal: used by ops to build the tape.
  const std::shared_ptr<detail::TensorImpl>& impl() const { return impl_; }
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}

 private:
  std::shared_ptr<detail::TensorImpl> impl_;
};

// True while no NoGradGuard is active on this thread.
bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// Creates the output tensor of an op and, when any input requires grad and
// grad mode is on, records `backward` on the tape.
Tensor make_result(Shape shape, std::vector<double> data, std::vector<Tensor> inputs,
                   std::function<void(detail::TensorImpl& out)> backward);

struct Parameter {
  std::string name;
  Tensor tensor;
};

// Ordered collection of named tensors; names are unique.
class ParameterList {
 public:
  void add(std::string name, Tensor tensor);
  void append(const ParameterList& other);
  const std::vector<Parameter>& items() const { return items_; }
  std::size_t size() const { return items_.size(); }
  const Parameter* find(const std::string& name) const;
  void zero_grad() const;
  std::size_t total_numel() const;

  auto begin() const { return items_.begin(); }
  auto end() const { return items_.end(); }

 private:
  std::vector<Parameter> items_;
};

}  // namespace mla
