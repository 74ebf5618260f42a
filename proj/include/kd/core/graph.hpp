#pragma once

#include <functional>
#include <memory>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "kd/core/error.hpp"
#include "kd/core/tensor.hpp"

namespace kd {

// Define-by-run reverse-mode differentiation. Every op produces a Node that
// owns its output value and, while gradients are enabled, the closure that
// pushes its output gradient into its parents. Parameters are persistent leaf
// nodes whose gradients accumulate across backward calls until zeroed.

template <typename S>
struct Node;

template <typename S>
using Var = std::shared_ptr<Node<S>>;

template <typename S>
struct Node {
  Tensor<S> value;
  Tensor<S> grad;  // lazily allocated to value's shape
  bool requires_grad = false;
  bool trainable = false;  // set on parameters only
  std::string name;        // set on parameters only
  std::vector<Var<S>> parents;
  std::function<void(Node<S>&)> backfn;

  void ensure_grad() {
    if (grad.empty() && value.numel() > 0) grad = Tensor<S>(value.shape);
  }
  void zero_grad() {
    if (!grad.empty()) grad.fill(S(0));
  }
};

inline thread_local int g_no_grad_depth = 0;

inline bool grad_enabled() { return g_no_grad_depth == 0; }

// RAII scope that disables graph recording; forwards run value-only.
struct NoGradGuard {
  NoGradGuard() { ++g_no_grad_depth; }
  ~NoGradGuard() { --g_no_grad_depth; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

template <typename S>
Var<S> make_var(Tensor<S> value) {
  auto n = std::make_shared<Node<S>>();
  n->value = std::move(value);
  return n;
}

template <typename S>
Var<S> make_param(std::string name, Tensor<S> value, bool trainable = true) {
  auto n = std::make_shared<Node<S>>();
  n->value = std::move(value);
  n->requires_grad = true;
  n->trainable = trainable;
  n->name = std::move(name);
  n->ensure_grad();
  return n;
}

// New leaf sharing nothing with the source graph; gradients never flow back.
template <typename S>
Var<S> detach(const Var<S>& v) {
  return make_var(Tensor<S>(v->value));
}

// Builds an op node. When recording is off or no parent carries gradient the
// result degenerates to a leaf, which also releases the upstream graph.
template <typename S, typename F>
Var<S> op_node(Tensor<S> value, std::vector<Var<S>> parents, F&& back) {
  auto n = std::make_shared<Node<S>>();
  n->value = std::move(value);
  if (grad_enabled()) {
    bool need = false;
    for (const auto& p : parents) need = need || p->requires_grad;
    if (need) {
      n->requires_grad = true;
      n->parents = std::move(parents);
      n->backfn = std::forward<F>(back);
    }
  }
  return n;
}

template <typename S>
void accumulate_grad(Node<S>& dst, const Tensor<S>& g) {
  dst.ensure_grad();
  S* d = dst.grad.ptr();
  const S* s = g.ptr();
  const int64_t n = g.numel();
  for (int64_t i = 0; i < n; ++i) d[i] += s[i];
}

template <typename S>
S scalar_value(const Var<S>& v) {
  if (v->value.numel() != 1) throw ShapeError("scalar_value: variable is not a scalar");
  return v->value.data[0];
}

// Reverse-mode sweep from a scalar loss. Gradients land in every reachable
// node that requires them; parameter gradients accumulate.
template <typename S>
void backward(const Var<S>& loss) {
  if (!loss) throw StateError("backward: null variable");
  if (loss->value.numel() != 1)
    throw ShapeError("backward: loss must be a scalar, got shape " + loss->value.shape.str());
  if (!loss->backfn && !loss->trainable)
    throw StateError("backward: no recorded forward computation reaches this value");
  if (!std::isfinite(static_cast<double>(loss->value.data[0])))
    throw NumericError("backward: loss is not finite");

  // Post-order DFS over parent edges; reversing it yields an order where each
  // node is processed before anything it depends on.
  std::vector<Node<S>*> order;
  std::unordered_set<const Node<S>*> seen;
  struct Frame {
    Node<S>* n;
    size_t next;
  };
  std::vector<Frame> stack;
  stack.push_back({loss.get(), 0});
  seen.insert(loss.get());
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next < f.n->parents.size()) {
      Node<S>* p = f.n->parents[f.next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.push_back({p, 0});
    } else {
      order.push_back(f.n);
      stack.pop_back();
    }
  }

  loss->ensure_grad();
  loss->grad.data[0] += S(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<S>* n = *it;
    if (n->backfn && !n->grad.empty()) n->backfn(*n);
  }
}

}  // namespace kd
