#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <string>
#include <vector>

#include "tapf/errors.hpp"

namespace tapf {

template <class T>
class Tape;

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
  std::string out = "(";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + ")";
}

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

template <class T>
struct TensorImpl {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // allocated iff requires_grad
  bool requires_grad = false;
  Tape<T>* tape = nullptr;
};

// Value-semantic handle onto a shared node. Copies alias the same storage.
template <class T>
class Tensor {
 public:
  Tensor() = default;

  static Tensor constant(Shape shape, std::vector<T> data) {
    check_size("constant", shape, data.size());
    auto impl = std::make_shared<TensorImpl<T>>();
    impl->shape = std::move(shape);
    impl->data = std::move(data);
    return Tensor(std::move(impl));
  }

  static Tensor zeros(Shape shape) {
    std::size_t n = shape_numel(shape);
    return constant(std::move(shape), std::vector<T>(n, T(0)));
  }

  static Tensor scalar(T v) { return constant({1}, {v}); }

  // Gradient-carrying leaf registered against a tape.
  static Tensor param(Tape<T>& tape, Shape shape, std::vector<T> data) {
    check_size("param", shape, data.size());
    auto impl = std::make_shared<TensorImpl<T>>();
    impl->shape = std::move(shape);
    impl->data = std::move(data);
    impl->requires_grad = true;
    impl->grad.assign(impl->data.size(), T(0));
    impl->tape = &tape;
    return Tensor(std::move(impl));
  }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t numel() const { return impl_->data.size(); }
  std::size_t dim(std::size_t i) const { return impl_->shape[i]; }
  bool requires_grad() const { return impl_->requires_grad; }
  Tape<T>* tape() const { return impl_ ? impl_->tape : nullptr; }

  std::vector<T>& data() { return impl_->data; }
  const std::vector<T>& data() const { return impl_->data; }
  std::vector<T>& grad() {
    if (!impl_->requires_grad)
      throw ContractError("grad requested on a tensor without requires_grad");
    return impl_->grad;
  }
  const std::vector<T>& grad() const {
    return const_cast<Tensor*>(this)->grad();
  }

  T& at(std::size_t i) { return impl_->data[i]; }
  T at(std::size_t i) const { return impl_->data[i]; }
  T& at(std::size_t i, std::size_t j) {
    return impl_->data[i * impl_->shape[1] + j];
  }
  T at(std::size_t i, std::size_t j) const {
    return impl_->data[i * impl_->shape[1] + j];
  }

  T item() const {
    if (numel() != 1)
      throw ContractError("item() on tensor of shape " + shape_str(shape()));
    return impl_->data[0];
  }

  void zero_grad() {
    if (impl_->requires_grad) impl_->grad.assign(impl_->data.size(), T(0));
  }

  // Value copy detached from any tape.
  Tensor detach() const { return constant(impl_->shape, impl_->data); }

  std::shared_ptr<TensorImpl<T>> impl() const { return impl_; }

 private:
  explicit Tensor(std::shared_ptr<TensorImpl<T>> impl) : impl_(std::move(impl)) {}

  static void check_size(const char* who, const Shape& s, std::size_t n) {
    if (shape_numel(s) != n)
      throw ShapeError(std::string(who) + ": shape " + shape_str(s) +
                       " does not match data length " + std::to_string(n));
  }

  template <class U>
  friend Tensor<U> make_op_result(Shape, std::vector<U>, bool, Tape<U>*);

  std::shared_ptr<TensorImpl<T>> impl_;
};

template <class T>
Tensor<T> make_op_result(Shape shape, std::vector<T> data, bool requires_grad,
                         Tape<T>* tape) {
  auto impl = std::make_shared<TensorImpl<T>>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  impl->requires_grad = requires_grad;
  if (requires_grad) {
    impl->grad.assign(impl->data.size(), T(0));
    impl->tape = tape;
  }
  return Tensor<T>(std::move(impl));
}

// Flat record of executed operations. Execution order is the topological
// order; backward replays the records in exact reverse execution order.
template <class T>
class Tape {
 public:
  void record(std::function<void()> backward_fn) {
    records_.push_back(std::move(backward_fn));
    backward_done_ = false;
  }

  std::size_t node_count() const { return records_.size(); }

  void backward(const Tensor<T>& loss) {
    if (loss.numel() != 1)
      throw ContractError("backward: loss must be scalar, got shape " +
                          shape_str(loss.shape()));
    if (!loss.requires_grad())
      throw ContractError("backward: loss does not require grad");
    loss.impl()->grad[0] = T(1);
    replay();
  }

  // Seeds a non-scalar output with an explicit upstream gradient.
  void backward_with(const Tensor<T>& out, const std::vector<T>& upstream) {
    if (upstream.size() != out.numel())
      throw ShapeError("backward_with: upstream length " +
                       std::to_string(upstream.size()) + " vs output " +
                       shape_str(out.shape()));
    if (!out.requires_grad())
      throw ContractError("backward_with: output does not require grad");
    out.impl()->grad = upstream;
    replay();
  }

  bool backward_done() const { return backward_done_; }

  // Drops every recorded node and the intermediates they keep alive.
  void clear() {
    records_.clear();
    records_.shrink_to_fit();
    backward_done_ = false;
  }

 private:
  void replay() {
    for (auto it = records_.rbegin(); it != records_.rend(); ++it) (*it)();
    backward_done_ = true;
  }

  std::vector<std::function<void()>> records_;
  bool backward_done_ = false;
};

// While active, round_ste and the quantizers forward their input unchanged
// so finite differences see the same smooth surrogate the backward pass
// differentiates. grad_check enables this for both of its passes.
inline bool& ste_surrogate_flag() {
  thread_local bool active = false;
  return active;
}

struct SteSurrogateGuard {
  SteSurrogateGuard() { ste_surrogate_flag() = true; }
  ~SteSurrogateGuard() { ste_surrogate_flag() = false; }
};

}  // namespace tapf
