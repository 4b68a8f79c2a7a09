#include "msattn/tensor.hpp"

#include <algorithm>
#include <sstream>
#include <unordered_set>

namespace msattn {

namespace {
thread_local bool g_grad_enabled = true;
}

bool detail::grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
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

template <typename T>
BasicTensor<T>::BasicTensor(Shape shape, T fill, bool requires_grad)
    : node_(std::make_shared<NodeT>()) {
  node_->data.assign(shape_numel(shape), fill);
  node_->shape = std::move(shape);
  node_->requires_grad = requires_grad;
}

template <typename T>
BasicTensor<T>::BasicTensor(Shape shape, std::vector<T> values, bool requires_grad)
    : node_(std::make_shared<NodeT>()) {
  if (shape_numel(shape) != values.size()) {
    throw DimensionError("tensor: shape " + shape_str(shape) + " does not match " +
                         std::to_string(values.size()) + " values");
  }
  node_->shape = std::move(shape);
  node_->data.assign(values.begin(), values.end());
  node_->requires_grad = requires_grad;
}

template <typename T>
std::size_t BasicTensor<T>::dim(std::size_t axis) const {
  if (axis >= rank()) {
    throw DimensionError("tensor: axis " + std::to_string(axis) + " out of range for " +
                         shape_str(shape()));
  }
  return node_->shape[axis];
}

template <typename T>
T BasicTensor<T>::item() const {
  if (numel() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape()));
  return node_->data[0];
}

namespace {
std::size_t flat_index(const Shape& shape, std::initializer_list<std::size_t> index) {
  if (index.size() != shape.size()) throw DimensionError("at(): rank mismatch");
  std::size_t flat = 0;
  std::size_t axis = 0;
  for (auto i : index) {
    if (i >= shape[axis]) throw DimensionError("at(): index out of range on axis " + std::to_string(axis));
    flat = flat * shape[axis] + i;
    ++axis;
  }
  return flat;
}
}  // namespace

template <typename T>
T& BasicTensor<T>::at(std::initializer_list<std::size_t> index) {
  return node_->data[flat_index(node_->shape, index)];
}

template <typename T>
T BasicTensor<T>::at(std::initializer_list<std::size_t> index) const {
  return node_->data[flat_index(node_->shape, index)];
}

template <typename T>
BasicTensor<T> BasicTensor<T>::detach() const {
  auto n = std::make_shared<NodeT>();
  n->shape = node_->shape;
  n->data = node_->data;
  return BasicTensor(std::move(n));
}

template <typename T>
BasicTensor<T> BasicTensor<T>::clone() const {
  auto n = std::make_shared<NodeT>();
  n->shape = node_->shape;
  n->data = node_->data;
  n->requires_grad = node_->requires_grad;
  return BasicTensor(std::move(n));
}

template <typename T>
BasicTensor<T> BasicTensor<T>::make_result(Shape shape, Buffer<T> values,
                                           std::vector<BasicTensor> parents,
                                           std::function<void(NodeT&)> backward) {
  auto n = std::make_shared<NodeT>();
  n->shape = std::move(shape);
  n->data = std::move(values);
  bool needs = false;
  if (detail::grad_enabled()) {
    for (const auto& p : parents) needs = needs || p.requires_grad();
  }
  if (needs) {
    n->requires_grad = true;
    n->parents.reserve(parents.size());
    for (auto& p : parents) n->parents.push_back(p.node_);
    n->backward = std::move(backward);
  }
  return BasicTensor(std::move(n));
}

template <typename T>
void BasicTensor<T>::backward() {
  if (!node_->requires_grad) return;

  // Iterative post-order DFS gives a topological order (parents first).
  std::vector<NodeT*> order;
  std::unordered_set<NodeT*> visited;
  std::vector<std::pair<NodeT*, std::size_t>> stack;
  stack.emplace_back(node_.get(), 0);
  visited.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      NodeT* p = n->parents[next++].get();
      if (p->requires_grad && visited.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  auto& seed = node_->ensure_grad();
  std::fill(seed.begin(), seed.end(), T(1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    NodeT* n = *it;
    if (!n->backward) {
      n->ensure_grad();  // leaves always end up with a buffer
      continue;
    }
    for (auto& p : n->parents) {
      if (p->requires_grad) p->ensure_grad();
    }
    n->ensure_grad();
    n->backward(*n);
    if (n != node_.get()) {
      n->grad.clear();
      n->grad.shrink_to_fit();
    }
  }
}

template class BasicTensor<float>;
template class BasicTensor<double>;

}  // namespace msattn
