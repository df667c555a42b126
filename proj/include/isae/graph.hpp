#pragma once

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "isae/tensor.hpp"

namespace isae {

// A named learnable array with a persistent gradient buffer. Parameters live
// outside the graph; each training step leafs them into a fresh graph and
// backward() accumulates into `grad` until the optimizer clears it.
template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;

  Parameter() = default;
  Parameter(std::string n, Tensor<T> v)
      : name(std::move(n)), value(std::move(v)), grad(Tensor<T>::zeros(value.shape)) {}

  void zero_grad() {
    for (auto& x : grad.data) x = T(0);
  }
};

// Define-by-run tape. Ops append nodes in execution order and compute their
// value immediately; backward() walks the tape in exact reverse order.
template <typename T>
class Graph {
 public:
  using BackFn = std::function<void(Graph<T>&, int)>;  // (graph, node id)

  int constant(Tensor<T> v) { return push(std::move(v), {}, nullptr, nullptr, false); }

  int leaf(Parameter<T>& p) { return push(p.value, {}, nullptr, &p, true); }

  int record(Tensor<T> value, std::vector<int> inputs, BackFn back) {
    bool needs = false;
    for (int id : inputs) needs = needs || nodes_[static_cast<std::size_t>(id)].needs_grad;
    return push(std::move(value), std::move(inputs), std::move(back), nullptr, needs);
  }

  // Forward value unchanged, no gradient flows upstream of the mark.
  int stop_gradient(int x) { return push(val(x), {x}, nullptr, nullptr, false); }

  const Tensor<T>& val(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }

  bool wants_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].needs_grad; }

  // Gradient buffer, zero-allocated on first touch.
  Tensor<T>& grad_buf(int id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.has_grad) {
      n.grad = Tensor<T>::zeros(n.value.shape);
      n.has_grad = true;
    }
    return n.grad;
  }

  bool has_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].has_grad; }

  // Gradient of `loss` w.r.t. node `id` after backward(); zeros if untouched.
  Tensor<T> grad(int id) const {
    const Node& n = nodes_[static_cast<std::size_t>(id)];
    return n.has_grad ? n.grad : Tensor<T>::zeros(n.value.shape);
  }

  std::size_t node_count() const { return nodes_.size(); }

  // Reverse-mode sweep from a scalar loss. Repeated calls accumulate into
  // parameter gradients; node-local buffers are reset per call.
  void backward(int loss_id) {
    if (nodes_.empty()) throw ShapeError("backward: empty graph");
    Node& loss = nodes_[static_cast<std::size_t>(loss_id)];
    if (loss.value.size() != 1)
      throw ShapeError("backward: loss must be scalar, got shape " + shape_str(loss.value.shape));
    for (auto& n : nodes_) n.has_grad = false;
    grad_buf(loss_id).data[0] = T(1);
    for (int id = loss_id; id >= 0; --id) {
      Node& n = nodes_[static_cast<std::size_t>(id)];
      if (!n.needs_grad || !n.has_grad) continue;
      if (n.back) n.back(*this, id);
    }
    for (auto& n : nodes_) {
      if (n.param && n.has_grad) {
        auto& g = n.param->grad.data;
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad.data[i];
      }
    }
  }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    std::vector<int> inputs;
    BackFn back;
    Parameter<T>* param = nullptr;
    bool needs_grad = false;
    bool has_grad = false;
  };

  int push(Tensor<T> value, std::vector<int> inputs, BackFn back, Parameter<T>* param,
           bool needs) {
    Node n;
    n.value = std::move(value);
    n.inputs = std::move(inputs);
    n.back = std::move(back);
    n.param = param;
    n.needs_grad = needs;
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
  }

  std::vector<Node> nodes_;
};

}  // namespace isae
