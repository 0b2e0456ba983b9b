#pragma once

#include <Eigen/Dense>

#include <functional>
#include <memory>
#include <stdexcept>
#include <unordered_set>
#include <vector>

namespace geoflow::ad {

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

/// Spatial layout of a tensor's columns: column b*H*W + y*W + x holds the
/// channel vector of pixel (x, y) of batch element b. Rows are channels.
struct Shape {
  int batch = 1;
  int height = 1;
  int width = 1;

  Eigen::Index plane() const { return static_cast<Eigen::Index>(height) * width; }
  Eigen::Index cols() const { return plane() * batch; }
  bool operator==(const Shape&) const = default;
};

template <typename Scalar>
struct Node {
  Matrix<Scalar> value;
  Matrix<Scalar> grad;  // empty until something flows into it
  Shape shape;
  bool requires_grad = false;
  bool is_leaf = true;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  template <typename Derived>
  void accumulate(const Eigen::MatrixBase<Derived>& g) {
    if (grad.size() == 0) {
      grad = g;
    } else {
      grad += g;
    }
  }
  /// Zero-initialized gradient buffer for scattered accumulation.
  Matrix<Scalar>& grad_buffer() {
    if (grad.size() == 0) grad = Matrix<Scalar>::Zero(value.rows(), value.cols());
    return grad;
  }
};

namespace detail {
inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode(); }

/// Disables graph recording on this thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Handle to a node of the computation graph. Copies share the node.
template <typename Scalar>
class Tensor {
 public:
  using NodeType = Node<Scalar>;
  using MatrixType = Matrix<Scalar>;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<NodeType> node) : node_(std::move(node)) {}

  static Tensor constant(MatrixType value, Shape shape) {
    check_shape(value, shape);
    auto node = std::make_shared<NodeType>();
    node->value = std::move(value);
    node->shape = shape;
    return Tensor(std::move(node));
  }
  static Tensor constant(MatrixType value) {
    const Shape shape{1, 1, static_cast<int>(value.cols())};
    return constant(std::move(value), shape);
  }
  static Tensor parameter(MatrixType value) {
    Tensor t = constant(std::move(value));
    t.node_->requires_grad = true;
    return t;
  }
  static Tensor parameter(MatrixType value, Shape shape) {
    Tensor t = constant(std::move(value), shape);
    t.node_->requires_grad = true;
    return t;
  }

  explicit operator bool() const { return static_cast<bool>(node_); }
  const MatrixType& value() const { return node_->value; }
  MatrixType& mutable_value() { return node_->value; }
  const MatrixType& grad() const { return node_->grad; }
  bool has_grad() const { return node_->grad.size() != 0; }
  const Shape& shape() const { return node_->shape; }
  Eigen::Index rows() const { return node_->value.rows(); }
  Eigen::Index cols() const { return node_->value.cols(); }
  bool requires_grad() const { return node_->requires_grad; }
  void zero_grad() { node_->grad.resize(0, 0); }
  Scalar item() const {
    if (node_->value.size() != 1) throw std::logic_error("item() on a non-scalar tensor");
    return node_->value(0, 0);
  }
  NodeType* node() const { return node_.get(); }
  const std::shared_ptr<NodeType>& shared() const { return node_; }

  /// Same value, cut from the graph.
  Tensor detach() const { return constant(node_->value, node_->shape); }

  static void check_shape(const MatrixType& value, const Shape& shape) {
    if (value.cols() != shape.cols()) throw std::invalid_argument("tensor: value columns do not match shape");
  }

 private:
  std::shared_ptr<NodeType> node_;
};

/// Creates an op result, wiring the backward closure only when recording is
/// enabled and some input needs a gradient.
template <typename Scalar>
Tensor<Scalar> make_result(Matrix<Scalar> value, Shape shape, std::initializer_list<Tensor<Scalar>> inputs,
                           std::function<void(Node<Scalar>&)> backward_fn) {
  Tensor<Scalar>::check_shape(value, shape);
  auto node = std::make_shared<Node<Scalar>>();
  node->value = std::move(value);
  node->shape = shape;
  node->is_leaf = false;
  if (grad_enabled()) {
    bool needs = false;
    for (const auto& t : inputs) needs = needs || t.requires_grad();
    if (needs) {
      node->requires_grad = true;
      for (const auto& t : inputs) node->parents.push_back(t.shared());
      node->backward_fn = std::move(backward_fn);
    }
  }
  return Tensor<Scalar>(std::move(node));
}

template <typename Scalar>
Tensor<Scalar> make_result(Matrix<Scalar> value, Shape shape, const std::vector<Tensor<Scalar>>& inputs,
                           std::function<void(Node<Scalar>&)> backward_fn) {
  Tensor<Scalar>::check_shape(value, shape);
  auto node = std::make_shared<Node<Scalar>>();
  node->value = std::move(value);
  node->shape = shape;
  node->is_leaf = false;
  if (grad_enabled()) {
    bool needs = false;
    for (const auto& t : inputs) needs = needs || t.requires_grad();
    if (needs) {
      node->requires_grad = true;
      for (const auto& t : inputs) node->parents.push_back(t.shared());
      node->backward_fn = std::move(backward_fn);
    }
  }
  return Tensor<Scalar>(std::move(node));
}

/// Reverse sweep from `root` seeded with `seed` (ones for a scalar root).
/// Interior nodes release their closures and gradients afterwards so the
/// graph memory is returned; leaf gradients accumulate across calls.
template <typename Scalar>
void backward(const Tensor<Scalar>& root, const Matrix<Scalar>& seed) {
  if (!root.requires_grad()) return;
  std::vector<std::shared_ptr<Node<Scalar>>> order;
  std::unordered_set<Node<Scalar>*> seen;
  std::vector<std::pair<std::shared_ptr<Node<Scalar>>, std::size_t>> stack{{root.shared(), 0}};
  seen.insert(root.node());
  while (!stack.empty()) {
    auto& top = stack.back();
    if (top.second < top.first->parents.size()) {
      auto parent = top.first->parents[top.second++];
      if (parent->requires_grad && seen.insert(parent.get()).second) stack.push_back({std::move(parent), 0});
    } else {
      order.push_back(std::move(top.first));
      stack.pop_back();
    }
  }
  root.node()->accumulate(seed);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<Scalar>* node = it->get();
    if (node->backward_fn && node->grad.size() != 0) node->backward_fn(*node);
    if (!node->is_leaf) {
      node->backward_fn = nullptr;
      node->parents.clear();
      node->grad.resize(0, 0);
    }
  }
}

template <typename Scalar>
void backward(const Tensor<Scalar>& root) {
  if (root.value().size() != 1) throw std::logic_error("backward() without seed needs a scalar root");
  backward(root, Matrix<Scalar>(Matrix<Scalar>::Ones(1, 1)));
}

}  // namespace geoflow::ad
