#include "capsdefl/tensor.hpp"

#include <sstream>

#include "capsdefl/error.hpp"

namespace capsdefl {

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

const char* op_name(OpKind kind) {
  switch (kind) {
    case OpKind::Leaf: return "leaf";
    case OpKind::Conv2d: return "conv2d";
    case OpKind::Deconv2d: return "deconv2d";
    case OpKind::AvgPool2d: return "avg_pool2d";
    case OpKind::Dense: return "dense";
    case OpKind::LeakyRelu: return "leaky_relu";
    case OpKind::Sigmoid: return "sigmoid";
    case OpKind::SoftmaxCrossEntropy: return "softmax_cross_entropy";
    case OpKind::L2Distance: return "l2_distance";
    case OpKind::RowL2Distance: return "row_l2_distance";
    case OpKind::SquaredError: return "squared_error";
    case OpKind::MarginLoss: return "margin_loss";
    case OpKind::TargetMargin: return "target_margin";
    case OpKind::Sum: return "sum";
    case OpKind::WeightedSum: return "weighted_sum";
    case OpKind::Add: return "add";
    case OpKind::Sub: return "sub";
    case OpKind::Mul: return "mul";
    case OpKind::Scale: return "scale";
    case OpKind::Reshape: return "reshape";
    case OpKind::RepeatRows: return "repeat_rows";
    case OpKind::CapsPredict: return "caps_predict";
    case OpKind::CapsCombine: return "caps_combine";
    case OpKind::CapsAgreement: return "caps_agreement";
    case OpKind::SoftmaxLastDim: return "softmax_lastdim";
    case OpKind::Squash: return "squash";
    case OpKind::CapsLengths: return "caps_lengths";
    case OpKind::MaskCapsules: return "mask_capsules";
  }
  return "unknown";
}

template <typename T>
BasicTensor<T> BasicTensor<T>::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), T(0), requires_grad);
}

template <typename T>
BasicTensor<T> BasicTensor<T>::full(Shape shape, T value, bool requires_grad) {
  auto node = std::make_shared<Node<T>>();
  node->data.assign(capsdefl::numel(shape), value);
  node->shape = std::move(shape);
  node->requires_grad = requires_grad;
  return BasicTensor(std::move(node));
}

template <typename T>
BasicTensor<T> BasicTensor<T>::from(Shape shape, std::vector<T> data, bool requires_grad) {
  if (capsdefl::numel(shape) != data.size()) {
    throw ConfigError("tensor: shape " + shape_str(shape) + " does not match " +
                      std::to_string(data.size()) + " values");
  }
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->requires_grad = requires_grad;
  return BasicTensor(std::move(node));
}

template <typename T>
BasicTensor<T> BasicTensor<T>::scalar(T value, bool requires_grad) {
  return from(Shape{1}, std::vector<T>{value}, requires_grad);
}

template <typename T>
T BasicTensor<T>::item() const {
  if (numel() != 1) throw UsageError("item(): tensor " + shape_str(shape()) + " is not a scalar");
  return node_->data[0];
}

template <typename T>
BasicTensor<T> BasicTensor<T>::detach(bool requires_grad) const {
  return from(node_->shape, node_->data, requires_grad);
}

template <typename T>
BasicTensor<T> make_op(OpKind kind, Shape shape, std::vector<T> data,
                       std::vector<BasicTensor<T>> inputs,
                       std::function<void(Node<T>&)> backward) {
  auto node = std::make_shared<Node<T>>();
  node->op = kind;
  node->shape = std::move(shape);
  node->data = std::move(data);
  bool any = false;
  for (const auto& in : inputs) any = any || (in.defined() && in.requires_grad());
  if (any) {
    node->requires_grad = true;
    node->inputs.reserve(inputs.size());
    for (const auto& in : inputs) node->inputs.push_back(in.node());
    node->backward = std::move(backward);
  }
  return BasicTensor<T>(std::move(node));
}

template class BasicTensor<float>;
template class BasicTensor<double>;
template BasicTensor<float> make_op(OpKind, Shape, std::vector<float>, std::vector<BasicTensor<float>>,
                                    std::function<void(Node<float>&)>);
template BasicTensor<double> make_op(OpKind, Shape, std::vector<double>,
                                     std::vector<BasicTensor<double>>,
                                     std::function<void(Node<double>&)>);

}  // namespace capsdefl
