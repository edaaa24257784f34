#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <initializer_list>
#include <unordered_map>
#include <vector>

#include "dslstm/tensor.hpp"

namespace dslstm::ad {

template <typename T>
class Graph;

/// Handle to a node on a graph's tape.
template <typename T>
struct Var {
  Graph<T>* graph = nullptr;
  std::size_t id = 0;

  const Tensor<T>& value() const { return graph->value(id); }
  const Shape& shape() const { return graph->value(id).shape(); }
  std::size_t dim(std::size_t i) const { return shape().at(i); }
};

/// Reverse-mode tape. Nodes are appended in creation order, which is a
/// topological order, so backward is a single reverse sweep.
///
/// One graph serves one forward/backward pass and is confined to one thread.
template <typename T>
class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, std::size_t)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  /// Leaf that never receives a gradient.
  Var<T> constant(Tensor<T> value) { return push(std::move(value), false, nullptr, true); }

  /// Leaf whose gradient stays readable through grad() after backward.
  Var<T> input(Tensor<T> value) { return push(std::move(value), true, nullptr, true); }

  /// Leaf bound to a parameter; backward accumulates into `p.grad`.
  /// Binding the same parameter twice returns the same node.
  Var<T> param(Parameter<T>& p) {
    if (auto it = params_.find(&p); it != params_.end()) return Var<T>{this, it->second};
    Parameter<T>* ptr = &p;
    auto v = push(p.value, true,
                  [ptr](Graph& g, std::size_t self) {
                    const auto& gr = g.nodes_[self].grad;
                    if (ptr->grad.shape() != ptr->value.shape()) ptr->grad = Tensor<T>(ptr->value.shape());
                    T* dst = ptr->grad.data();
                    const T* src = gr.data();
                    for (std::size_t i = 0; i < gr.size(); ++i) dst[i] += src[i];
                  },
                  true);
    params_.emplace(&p, v.id);
    return v;
  }

  /// Appends an op result. `fn` is dropped when no parent requires a gradient.
  Var<T> record(Tensor<T> value, std::initializer_list<Var<T>> parents, BackwardFn fn) {
    bool rg = false;
    for (const auto& p : parents) rg = rg || nodes_[p.id].requires_grad;
    return push(std::move(value), rg, rg ? std::move(fn) : nullptr, false);
  }

  Var<T> record(Tensor<T> value, const std::vector<Var<T>>& parents, BackwardFn fn) {
    bool rg = false;
    for (const auto& p : parents) rg = rg || nodes_[p.id].requires_grad;
    return push(std::move(value), rg, rg ? std::move(fn) : nullptr, false);
  }

  const Tensor<T>& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

  /// Gradient of an `input` leaf after backward.
  const Tensor<T>& grad(Var<T> v) const {
    const auto& n = nodes_.at(v.id);
    if (!n.leaf) throw ValidationError("gradients of intermediate nodes are released after backward");
    if (n.grad.empty()) throw ValidationError("node has no gradient (not reached from the loss)");
    return n.grad;
  }

  /// Incoming gradient of the node being processed.
  const Tensor<T>& grad_of(std::size_t id) const { return nodes_[id].grad; }

  /// Gradient accumulator of a parent, zero-initialised on first use.
  Tensor<T>& grad_buffer(std::size_t id) {
    auto& n = nodes_[id];
    if (n.grad.empty()) n.grad = Tensor<T>(n.value.shape());
    return n.grad;
  }

  std::size_t size() const noexcept { return nodes_.size(); }

  void backward(Var<T> loss) {
    if (backward_done_) throw ValidationError("backward already ran on this graph; build a new graph");
    if (loss.graph != this) throw ValidationError("loss belongs to a different graph");
    auto& root = nodes_.at(loss.id);
    if (root.value.size() != 1) {
      throw ShapeError("backward needs a scalar loss, got shape " + shape_str(root.value.shape()));
    }
    backward_done_ = true;
    if (!root.requires_grad) return;
    root.grad = Tensor<T>(root.value.shape(), T{1});
    for (std::size_t id = loss.id + 1; id-- > 0;) {
      auto& n = nodes_[id];
      if (!n.requires_grad || n.grad.empty() || !n.backward) continue;
      n.backward(*this, id);
      if (!n.leaf) n.grad = Tensor<T>();
    }
  }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
    bool leaf = false;
    BackwardFn backward;
  };

  Var<T> push(Tensor<T> value, bool rg, BackwardFn fn, bool leaf) {
    nodes_.push_back(Node{std::move(value), Tensor<T>(), rg, leaf, std::move(fn)});
    return Var<T>{this, nodes_.size() - 1};
  }

  std::deque<Node> nodes_;
  std::unordered_map<const Parameter<T>*, std::size_t> params_;
  bool backward_done_ = false;
};

}  // namespace dslstm::ad
