#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "dmvton/tensor.hpp"

// Minimal tape-free reverse-mode differentiation. Every op result owns
// shared pointers to its inputs; backward() walks the resulting DAG.
namespace dmvton::ag {

struct Node {
  Tensor value;
  Tensor grad;  // undefined until something flows into it
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this->grad and accumulates into parents that require grad.
  std::function<void(Node&)> backward;

  Tensor& grad_buffer();
};

class Var {
 public:
  Var() = default;
  explicit Var(Tensor value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Tensor& value() const { return node_->value; }
  Tensor& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  bool is_meta() const { return node_->value.is_meta(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }

  // Gradient accumulated by the last backward(); zeros if nothing flowed.
  Tensor grad() const;
  void zero_grad();

  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& node_ptr() const { return node_; }

 private:
  friend Var make_result(Tensor, const std::vector<Var>&, std::function<void(Node&)>);
  std::shared_ptr<Node> node_;
};

bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

// Wraps an op output. The backward closure is kept only when grad mode is on
// and at least one input requires grad.
Var make_result(Tensor value, const std::vector<Var>& inputs, std::function<void(Node&)> backward);

// Seeds d(root)/d(root) = 1 and propagates. root must hold one element.
void backward(const Var& root);

}  // namespace dmvton::ag
