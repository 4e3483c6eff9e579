#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace zslab {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline Index numel_of(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

namespace detail {

inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode_flag(); }

/// Disables graph construction on the current thread while alive.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
  ~NoGradGuard() { detail::grad_mode_flag() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

template <typename Scalar>
using Array = Eigen::Array<Scalar, Eigen::Dynamic, 1>;

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
struct Node {
  Shape shape;
  Array<Scalar> value;
  Array<Scalar> grad;  // empty until a gradient arrives
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  // Reads self.grad and accumulates into self.parents[i]->grad.
  std::function<void(Node&)> backward_fn;

  bool is_leaf() const { return !backward_fn; }

  void accumulate(const Eigen::Ref<const Array<Scalar>>& g) {
    if (!requires_grad) return;
    if (grad.size() == 0) grad = Array<Scalar>::Zero(value.size());
    grad += g;
  }
};

/// Dense row-major n-dimensional array with reverse-mode gradient tracking.
///
/// A Tensor is a shared handle: copies alias the same node. Values are never
/// mutated after construction except through mutable_value(), which is reserved
/// for parameter initialization, optimizer updates and normalization buffers.
template <typename Scalar>
class Tensor {
 public:
  using scalar_type = Scalar;
  using NodeType = Node<Scalar>;

  Tensor() = default;

  Tensor(Shape shape, Array<Scalar> value, bool requires_grad = false)
      : node_(std::make_shared<NodeType>()) {
    if (numel_of(shape) != value.size())
      throw ShapeError("tensor value size " + std::to_string(value.size()) +
                       " does not match shape " + zslab::to_string(shape));
    node_->shape = std::move(shape);
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const Index n = numel_of(shape);
    return Tensor(std::move(shape), Array<Scalar>::Zero(n), requires_grad);
  }

  static Tensor constant(Shape shape, Scalar v, bool requires_grad = false) {
    const Index n = numel_of(shape);
    return Tensor(std::move(shape), Array<Scalar>::Constant(n, v), requires_grad);
  }

  static Tensor scalar(Scalar v, bool requires_grad = false) {
    Array<Scalar> a(1);
    a[0] = v;
    return Tensor(Shape{}, std::move(a), requires_grad);
  }

  static Tensor from(Shape shape, std::initializer_list<Scalar> values, bool requires_grad = false) {
    Array<Scalar> a(static_cast<Index>(values.size()));
    Index i = 0;
    for (Scalar v : values) a[i++] = v;
    return Tensor(std::move(shape), std::move(a), requires_grad);
  }

  /// Builds a tracked op result. Parents and the backward closure are kept only
  /// when grad mode is on and at least one parent needs a gradient.
  static Tensor make_result(Shape shape, Array<Scalar> value,
                            std::vector<std::shared_ptr<NodeType>> parents,
                            std::function<void(NodeType&)> backward_fn) {
    Tensor out(std::move(shape), std::move(value));
    bool track = false;
    if (grad_enabled())
      for (const auto& p : parents) track = track || p->requires_grad;
    if (track) {
      out.node_->requires_grad = true;
      out.node_->parents = std::move(parents);
      out.node_->backward_fn = std::move(backward_fn);
    }
    return out;
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  Index dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t ndim() const { return node_->shape.size(); }
  Index numel() const { return node_->value.size(); }

  const Array<Scalar>& value() const { return node_->value; }
  Array<Scalar>& mutable_value() { return node_->value; }
  Scalar item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + zslab::to_string(shape()));
    return node_->value[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  bool has_grad() const { return node_->grad.size() != 0; }

  /// Gradient buffer; zeros if backward never reached this tensor.
  Array<Scalar> grad() const {
    return has_grad() ? node_->grad : Array<Scalar>::Zero(numel());
  }
  void zero_grad() {
    if (has_grad()) node_->grad.setZero();
  }

  /// Fresh leaf holding a copy of the value.
  Tensor detach() const { return Tensor(shape(), value()); }

  /// Row-major 2-D view of the data, rows = product of leading dims.
  Eigen::Map<const RowMatrix<Scalar>> matrix() const {
    const Index cols = ndim() == 0 ? 1 : shape().back();
    return {node_->value.data(), cols == 0 ? 0 : numel() / cols, cols};
  }

  const std::shared_ptr<NodeType>& node() const { return node_; }

  void backward() const;

 private:
  std::shared_ptr<NodeType> node_;
};

template <typename Scalar>
void Tensor<Scalar>::backward() const {
  if (numel() != 1)
    throw ShapeError("backward() requires a scalar loss, got shape " + zslab::to_string(shape()));
  if (!requires_grad()) return;

  // Iterative post-order DFS gives a topological order (parents before children).
  std::vector<NodeType*> order;
  std::unordered_set<NodeType*> seen;
  std::vector<std::pair<NodeType*, std::size_t>> stack{{node_.get(), 0}};
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      NodeType* p = n->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  for (NodeType* n : order)
    if (!n->is_leaf()) n->grad = Array<Scalar>::Zero(n->value.size());
  node_->accumulate(Array<Scalar>::Ones(1));
  for (auto it = order.rbegin(); it != order.rend(); ++it)
    if (!(*it)->is_leaf()) (*it)->backward_fn(**it);
}

/// Name-addressed tensor list; names follow "module.sub.weight".
template <typename Scalar>
using NamedTensors = std::vector<std::pair<std::string, Tensor<Scalar>>>;

}  // namespace zslab
