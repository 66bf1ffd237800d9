#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

namespace ar {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) os << ",";
    os << s[i];
  }
  os << "]";
  return os.str();
}

// Thread-local gradient mode. Ops skip graph construction when disabled,
// which keeps generation memory-flat.
inline bool& grad_mode_ref() {
  thread_local bool enabled = true;
  return enabled;
}
inline bool grad_enabled() { return grad_mode_ref(); }

struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(grad_mode_ref()) { grad_mode_ref() = false; }
  ~NoGradGuard() { grad_mode_ref() = prev; }
};

inline int64_t next_node_id() {
  thread_local int64_t counter = 0;
  return ++counter;
}

template <typename T>
struct TensorNode {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // allocated lazily, zero-initialized, strictly accumulated
  bool requires_grad = false;
  int64_t id = 0;
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void(TensorNode&)> backward_fn;

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), T(0));
  }
};

// Dense row-major tensor participating in a reverse-mode differentiation
// graph. Copy is shallow (shared node), matching the usual autograd idiom.
template <typename T>
class Tensor {
 public:
  using Scalar = T;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorNode<T>> n) : node_(std::move(n)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return filled(std::move(shape), T(0), requires_grad);
  }

  static Tensor filled(Shape shape, T v, bool requires_grad = false) {
    auto n = std::make_shared<TensorNode<T>>();
    int64_t count = shape_numel(shape);
    if (count < 0) throw std::invalid_argument("tensor: negative extent in shape " + shape_str(shape));
    n->shape = std::move(shape);
    n->value.assign(static_cast<size_t>(count), v);
    n->requires_grad = requires_grad;
    n->id = next_node_id();
    return Tensor(std::move(n));
  }

  static Tensor from(Shape shape, std::vector<T> data, bool requires_grad = false) {
    if (shape_numel(shape) != static_cast<int64_t>(data.size())) {
      throw std::invalid_argument("tensor: shape " + shape_str(shape) + " does not match " +
                                  std::to_string(data.size()) + " values");
    }
    auto n = std::make_shared<TensorNode<T>>();
    n->shape = std::move(shape);
    n->value = std::move(data);
    n->requires_grad = requires_grad;
    n->id = next_node_id();
    return Tensor(std::move(n));
  }

  static Tensor scalar(T v) { return from({1}, {v}); }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int64_t ndim() const { return static_cast<int64_t>(node_->shape.size()); }
  int64_t dim(int64_t i) const { return node_->shape[static_cast<size_t>(i)]; }
  int64_t numel() const { return static_cast<int64_t>(node_->value.size()); }
  int64_t id() const { return node_->id; }

  std::vector<T>& values() { return node_->value; }
  const std::vector<T>& values() const { return node_->value; }

  T item() const {
    if (numel() != 1) throw std::invalid_argument("item: tensor is not scalar, shape " + shape_str(shape()));
    return node_->value[0];
  }

  bool requires_grad() const { return node_->requires_grad; }

  std::vector<T>& grad() {
    if (!node_->requires_grad) throw std::logic_error("grad: tensor does not require gradients");
    node_->ensure_grad();
    return node_->grad;
  }
  const std::vector<T>& grad() const {
    return const_cast<Tensor*>(this)->grad();
  }

  void zero_grad() {
    if (node_->requires_grad) node_->grad.assign(node_->value.size(), T(0));
  }

  std::shared_ptr<TensorNode<T>> node() const { return node_; }

  // Reverse-mode pass from a scalar loss. Nodes run in decreasing creation
  // order, which is a topological order of the recorded graph, so gradient
  // accumulation is deterministic.
  void backward() {
    if (!defined()) throw std::logic_error("backward: undefined tensor");
    if (numel() != 1) {
      throw std::invalid_argument("backward: loss must be scalar, got shape " + shape_str(shape()));
    }
    std::vector<TensorNode<T>*> order;
    std::unordered_set<TensorNode<T>*> seen;
    std::vector<TensorNode<T>*> stack{node_.get()};
    seen.insert(node_.get());
    while (!stack.empty()) {
      TensorNode<T>* n = stack.back();
      stack.pop_back();
      order.push_back(n);
      for (auto& p : n->parents) {
        if (seen.insert(p.get()).second) stack.push_back(p.get());
      }
    }
    std::sort(order.begin(), order.end(),
              [](const TensorNode<T>* a, const TensorNode<T>* b) { return a->id > b->id; });
    node_->ensure_grad();
    node_->grad[0] += T(1);
    for (TensorNode<T>* n : order) {
      if (n->backward_fn) n->backward_fn(*n);
    }
  }

 private:
  std::shared_ptr<TensorNode<T>> node_;
};

// Records an op result. The graph edge and the backward rule are attached
// only when gradients are enabled and some input requires them.
template <typename T>
Tensor<T> make_op(Shape shape, std::vector<T> value, const std::vector<Tensor<T>>& parents,
                  std::function<void(TensorNode<T>&)> backward_fn) {
  auto n = std::make_shared<TensorNode<T>>();
  if (shape_numel(shape) != static_cast<int64_t>(value.size())) {
    throw std::logic_error("make_op: shape/value mismatch for shape " + shape_str(shape));
  }
  n->shape = std::move(shape);
  n->value = std::move(value);
  n->id = next_node_id();
  bool rg = false;
  if (grad_enabled()) {
    for (const auto& p : parents) rg = rg || p.requires_grad();
  }
  if (rg) {
    n->requires_grad = true;
    n->parents.reserve(parents.size());
    for (const auto& p : parents) n->parents.push_back(p.node());
    n->backward_fn = std::move(backward_fn);
  }
  return Tensor<T>(std::move(n));
}

}  // namespace ar
