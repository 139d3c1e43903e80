#include "dmvton/autograd.hpp"

#include <unordered_set>

#include "dmvton/errors.hpp"

namespace dmvton::ag {

namespace {
thread_local bool t_grad_enabled = true;
}  // namespace

Tensor& Node::grad_buffer() {
  if (!grad.defined()) grad = Tensor(value.shape(), 0.0);
  return grad;
}

Var::Var(Tensor value, bool requires_grad) : node_(std::make_shared<Node>()) {
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
}

Tensor Var::grad() const {
  if (node_->grad.defined()) return node_->grad;
  return Tensor(node_->value.shape(), 0.0);
}

void Var::zero_grad() { node_->grad = Tensor(); }

bool grad_enabled() { return t_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = prev_; }

Var make_result(Tensor value, const std::vector<Var>& inputs, std::function<void(Node&)> backward) {
  Var out;
  out.node_ = std::make_shared<Node>();
  out.node_->value = std::move(value);
  if (!t_grad_enabled || out.node_->value.is_meta()) return out;
  bool any = false;
  for (const Var& v : inputs) any = any || v.requires_grad();
  if (!any) return out;
  out.node_->requires_grad = true;
  out.node_->parents.reserve(inputs.size());
  for (const Var& v : inputs) out.node_->parents.push_back(v.node_ptr());
  out.node_->backward = std::move(backward);
  return out;
}

void backward(const Var& root) {
  if (!root.defined() || root.value().numel() != 1)
    fail(Errc::kShape, "backward() needs a scalar root");
  if (!root.requires_grad()) return;

  // Iterative post-order DFS -> reverse topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, size_t>> stack;
  stack.emplace_back(root.node(), 0);
  seen.insert(root.node());
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->parents.size()) {
      Node* p = node->parents[idx++].get();
      if (p && p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root.node()->grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward && n->grad.defined()) n->backward(*n);
  }
  // Intermediate gradients are not needed once propagated.
  for (Node* n : order)
    if (n->backward) n->grad = Tensor();
}

}  // namespace dmvton::ag
