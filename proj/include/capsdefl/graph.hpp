#pragma once

#include <vector>

#include "capsdefl/tensor.hpp"

namespace capsdefl {

// Topologically ordered view of every differentiable node reachable from a
// scalar loss. Inputs precede the nodes that consume them.
template <typename T>
class Graph {
 public:
  using NodePtr = std::shared_ptr<Node<T>>;

  static Graph build(const BasicTensor<T>& loss);

  const std::vector<NodePtr>& nodes() const { return order_; }
  std::size_t index_of(const Node<T>* node) const;
  // Indices (into nodes()) of the differentiable inputs of node i.
  std::vector<std::size_t> input_ids(std::size_t i) const;

  // Seeds d(loss)/d(loss) = 1 and runs every backward closure once, in
  // reverse order. Gradients accumulate into leaves; interior gradients are
  // released afterwards.
  void backward();

 private:
  std::vector<NodePtr> order_;
};

template <typename T>
void backward(const BasicTensor<T>& loss) {
  Graph<T>::build(loss).backward();
}

}  // namespace capsdefl
