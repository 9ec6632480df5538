#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace capsdefl {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

enum class OpKind {
  Leaf,
  Conv2d,
  Deconv2d,
  AvgPool2d,
  Dense,
  LeakyRelu,
  Sigmoid,
  SoftmaxCrossEntropy,
  L2Distance,
  RowL2Distance,
  SquaredError,
  MarginLoss,
  TargetMargin,
  Sum,
  WeightedSum,
  Add,
  Sub,
  Mul,
  Scale,
  Reshape,
  RepeatRows,
  CapsPredict,
  CapsCombine,
  CapsAgreement,
  SoftmaxLastDim,
  Squash,
  CapsLengths,
  MaskCapsules,
};

const char* op_name(OpKind kind);

// One vertex of the dynamic tape. Every op output owns its node; inputs are
// retained only when at least one of them participates in differentiation.
template <typename T>
struct Node {
  OpKind op = OpKind::Leaf;
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  // Zero-initialized on first use.
  T* grad_buffer() {
    if (grad.size() != data.size()) grad.assign(data.size(), T(0));
    return grad.data();
  }
};

// Shared handle to a node. Copies alias the same storage, like framework tensors.
template <typename T>
class BasicTensor {
 public:
  using NodePtr = std::shared_ptr<Node<T>>;

  BasicTensor() = default;
  explicit BasicTensor(NodePtr node) : node_(std::move(node)) {}

  static BasicTensor zeros(Shape shape, bool requires_grad = false);
  static BasicTensor full(Shape shape, T value, bool requires_grad = false);
  static BasicTensor from(Shape shape, std::vector<T> data, bool requires_grad = false);
  static BasicTensor scalar(T value, bool requires_grad = false);

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->data.size(); }
  OpKind op() const { return node_->op; }

  std::span<const T> data() const { return node_->data; }
  std::span<T> mutable_data() { return node_->data; }
  std::span<const T> grad() const { return node_->grad; }
  bool has_grad() const { return node_->grad.size() == node_->data.size() && !node_->data.empty(); }
  T item() const;

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool value) { node_->requires_grad = value; }
  void zero_grad() { node_->grad.clear(); }

  // Fresh leaf with a copy of the data and no history.
  BasicTensor detach(bool requires_grad = false) const;

  template <typename U>
  BasicTensor<U> cast(bool requires_grad = false) const {
    std::vector<U> out(node_->data.begin(), node_->data.end());
    return BasicTensor<U>::from(node_->shape, std::move(out), requires_grad);
  }

  const NodePtr& node() const { return node_; }

 private:
  NodePtr node_;
};

using Tensor = BasicTensor<float>;
using Tensor64 = BasicTensor<double>;

// Builds an op output. When no input requires a gradient the result is a
// plain constant and the backward closure is dropped.
template <typename T>
BasicTensor<T> make_op(OpKind kind, Shape shape, std::vector<T> data,
                       std::vector<BasicTensor<T>> inputs,
                       std::function<void(Node<T>&)> backward);

}  // namespace capsdefl
