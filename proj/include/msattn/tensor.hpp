#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

namespace msattn {

using Shape = std::vector<std::size_t>;
using Rng = std::mt19937_64;

/// Raised when tensor extents do not line up for an operation.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised for out-of-range hyper-parameters (dropout p >= 1, zero pool size, ...).
class InvalidParameter : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when optimisation produces a non-finite value.
class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(const std::string& what, std::string parameter)
      : std::runtime_error(what), parameter_(std::move(parameter)) {}
  const std::string& parameter() const { return parameter_; }

 private:
  std::string parameter_;
};

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

// Allocator whose value-less construct() leaves scalars uninitialised, so
// op outputs that are fully overwritten skip a zero-fill pass.
template <typename T>
struct DefaultInitAllocator : std::allocator<T> {
  template <typename U>
  struct rebind {
    using other = DefaultInitAllocator<U>;
  };
  DefaultInitAllocator() = default;
  template <typename U>
  DefaultInitAllocator(const DefaultInitAllocator<U>&) noexcept {}
  template <typename U>
  void construct(U* p) noexcept(std::is_nothrow_default_constructible_v<U>) {
    ::new (static_cast<void*>(p)) U;
  }
  template <typename U, typename... Args>
  void construct(U* p, Args&&... args) {
    ::new (static_cast<void*>(p)) U(std::forward<Args>(args)...);
  }
};

}  // namespace detail

template <typename T>
using Buffer = std::vector<T, detail::DefaultInitAllocator<T>>;

namespace detail {

template <typename T>
struct Node {
  Shape shape;
  Buffer<T> data;
  Buffer<T> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this->grad and accumulates into parents' grads.
  std::function<void(Node&)> backward;

  Buffer<T>& ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), T(0));
    return grad;
  }
};

bool grad_enabled();

}  // namespace detail

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Dense row-major tensor that doubles as a node of a reverse-mode graph.
///
/// Copies share storage (handle semantics, like a framework tensor). Use
/// clone() for a deep copy and detach() to cut the graph.
template <typename T>
class BasicTensor {
 public:
  using value_type = T;
  using NodeT = detail::Node<T>;

  BasicTensor() = default;
  explicit BasicTensor(Shape shape, T fill = T(0), bool requires_grad = false);
  BasicTensor(Shape shape, std::vector<T> values, bool requires_grad = false);

  static BasicTensor scalar(T value, bool requires_grad = false) {
    return BasicTensor(Shape{1}, std::vector<T>{value}, requires_grad);
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const { return node_->data.size(); }

  std::span<T> data() { return node_->data; }
  std::span<const T> data() const { return node_->data; }
  T* raw() { return node_->data.data(); }
  const T* raw() const { return node_->data.data(); }

  bool has_grad() const { return !node_->grad.empty(); }
  /// Gradient buffer; allocated (zero) on first access.
  std::span<T> grad() { return node_->ensure_grad(); }
  std::span<const T> grad() const { return node_->ensure_grad(); }
  void zero_grad() { node_->grad.clear(); }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool flag) { node_->requires_grad = flag; }

  T item() const;
  T& at(std::initializer_list<std::size_t> index);
  T at(std::initializer_list<std::size_t> index) const;

  /// Back-propagates from this tensor. Non-scalar roots are seeded with ones.
  void backward();

  BasicTensor detach() const;
  BasicTensor clone() const;

  // Op implementations reach into the node directly.
  NodeT& node() const { return *node_; }
  const std::shared_ptr<NodeT>& node_ptr() const { return node_; }

  /// Creates the result node of an op. Parents are kept only if some parent
  /// requires grad and recording is enabled.
  static BasicTensor make_result(Shape shape, Buffer<T> values,
                                 std::vector<BasicTensor> parents,
                                 std::function<void(NodeT&)> backward);

 private:
  explicit BasicTensor(std::shared_ptr<NodeT> node) : node_(std::move(node)) {}
  std::shared_ptr<NodeT> node_;
};

using Tensor = BasicTensor<float>;
using Tensor64 = BasicTensor<double>;

template <typename T>
struct BasicNamedTensor {
  std::string name;
  BasicTensor<T> tensor;
};
using NamedTensor = BasicNamedTensor<float>;

extern template class BasicTensor<float>;
extern template class BasicTensor<double>;

}  // namespace msattn
