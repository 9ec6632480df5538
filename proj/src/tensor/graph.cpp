#include "capsdefl/graph.hpp"

#include <unordered_map>
#include <unordered_set>

#include "capsdefl/error.hpp"

namespace capsdefl {

template <typename T>
Graph<T> Graph<T>::build(const BasicTensor<T>& loss) {
  if (!loss.defined()) throw UsageError("backward: undefined loss");
  if (loss.numel() != 1) {
    throw UsageError("backward: loss must be scalar, got " + shape_str(loss.shape()));
  }
  Graph g;
  if (!loss.requires_grad()) return g;

  // Iterative post-order DFS; recursion depth would otherwise track graph depth.
  std::unordered_set<const Node<T>*> visited;
  std::vector<std::pair<NodePtr, std::size_t>> stack;
  stack.emplace_back(loss.node(), 0);
  visited.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      const NodePtr child = node->inputs[next++];
      if (child && child->requires_grad && visited.insert(child.get()).second) {
        stack.emplace_back(child, 0);
      }
      continue;
    }
    g.order_.push_back(node);
    stack.pop_back();
  }
  return g;
}

template <typename T>
std::size_t Graph<T>::index_of(const Node<T>* node) const {
  for (std::size_t i = 0; i < order_.size(); ++i)
    if (order_[i].get() == node) return i;
  throw UsageError("graph: node not part of this graph");
}

template <typename T>
std::vector<std::size_t> Graph<T>::input_ids(std::size_t i) const {
  std::vector<std::size_t> ids;
  for (const auto& in : order_.at(i)->inputs)
    if (in && in->requires_grad) ids.push_back(index_of(in.get()));
  return ids;
}

template <typename T>
void Graph<T>::backward() {
  if (order_.empty()) return;
  auto& root = *order_.back();
  root.grad_buffer()[0] += T(1);
  for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
    Node<T>& node = **it;
    if (node.op == OpKind::Leaf || !node.backward) continue;
    if (node.grad.size() != node.data.size()) continue;  // no gradient reached this node
    node.backward(node);
    std::vector<T>().swap(node.grad);
  }
}

template class Graph<float>;
template class Graph<double>;

}  // namespace capsdefl
